"""Convolutional VAE built on :mod:`deblurvae.tensor`.

Encoder: ``N`` blocks of (conv k3 s2 p1, optional batch norm, leaky ReLU),
then a hidden linear layer and two linear heads for ``mu`` and ``logvar``.
Decoder: two linear layers, ``N`` blocks of (transposed conv k4 s2 p1,
optional batch norm, leaky ReLU), a final conv k3 s1 p1 and ``tanh``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import (
    BatchNormState,
    Tensor,
    batchnorm2d,
    conv2d,
    conv_transpose2d,
    no_grad,
    exp,
    leaky_relu,
    linear,
    reshape,
    tanh,
)

__all__ = ["VaeConfig", "LatentSample", "VAE"]

SLOPE = 0.2


@dataclass(frozen=True)
class VaeConfig:
    image_size: int = 32
    in_channels: int = 1
    channels: tuple = (32, 64, 128)
    latent_dim: int = 16
    hidden: int = 256
    batchnorm: bool = True

    def __post_init__(self):
        n = self.image_size
        if n & (n - 1) or n < 2 ** len(self.channels):
            raise ValueError(
                f"image size {n} must be a power of two divisible by 2^{len(self.channels)}")


@dataclass
class LatentSample:
    mu: Tensor
    logvar: Tensor
    eps: np.ndarray
    z: Tensor


def _uniform(rng, fan_in, shape):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, shape)


class VAE:
    """Encoder/decoder parameter bundle with batch-norm state."""

    def __init__(self, config: VaeConfig = VaeConfig(), rng: np.random.Generator | None = None):
        rng = np.random.default_rng(0) if rng is None else rng
        self.config = config
        c = config
        p: dict = {}
        self.bn: dict = {}
        prev = c.in_channels
        for i, ch in enumerate(c.channels):
            p[f"enc{i}.w"] = _uniform(rng, prev * 9, (ch, prev, 3, 3))
            p[f"enc{i}.b"] = np.zeros(ch)
            self._add_bn(p, f"enc{i}", ch)
            prev = ch
        self.bottom = c.image_size // 2 ** len(c.channels)
        flat = prev * self.bottom ** 2
        p["enc.fc.w"] = _uniform(rng, flat, (flat, c.hidden))
        p["enc.fc.b"] = np.zeros(c.hidden)
        p["enc.mu.w"] = _uniform(rng, c.hidden, (c.hidden, c.latent_dim))
        p["enc.mu.b"] = np.zeros(c.latent_dim)
        p["enc.logvar.w"] = np.zeros((c.hidden, c.latent_dim))
        p["enc.logvar.b"] = np.zeros(c.latent_dim)

        p["dec.fc1.w"] = _uniform(rng, c.latent_dim, (c.latent_dim, c.hidden))
        p["dec.fc1.b"] = np.zeros(c.hidden)
        p["dec.fc2.w"] = _uniform(rng, c.hidden, (c.hidden, flat))
        p["dec.fc2.b"] = np.zeros(flat)
        outs = list(c.channels[::-1][1:]) + [c.channels[0]]
        for i, ch in enumerate(outs):
            p[f"dec{i}.w"] = _uniform(rng, prev * 16, (prev, ch, 4, 4))
            p[f"dec{i}.b"] = np.zeros(ch)
            self._add_bn(p, f"dec{i}", ch)
            prev = ch
        p["out.w"] = _uniform(rng, prev * 9, (c.in_channels, prev, 3, 3))
        p["out.b"] = np.zeros(c.in_channels)
        self.params = {k: Tensor(v, requires_grad=True, name=k) for k, v in p.items()}

    def _add_bn(self, p: dict, prefix: str, ch: int) -> None:
        if self.config.batchnorm:
            p[f"{prefix}.gamma"] = np.ones(ch)
            p[f"{prefix}.beta"] = np.zeros(ch)
            self.bn[prefix] = BatchNormState.create(ch)

    def parameters(self) -> list:
        return list(self.params.values())

    def encoder_parameters(self) -> list:
        return [t for k, t in self.params.items() if k.startswith("enc")]

    def decoder_parameters(self) -> list:
        return [t for k, t in self.params.items() if not k.startswith("enc")]

    def _norm_act(self, h: Tensor, prefix: str, training: bool) -> Tensor:
        if self.config.batchnorm:
            p = self.params
            h = batchnorm2d(h, p[f"{prefix}.gamma"], p[f"{prefix}.beta"], self.bn[prefix], training)
        return leaky_relu(h, SLOPE)

    def encode(self, x, rng: np.random.Generator | None = None, training: bool = True,
               eps: np.ndarray | None = None) -> LatentSample:
        """Posterior parameters and a reparameterized sample.

        ``eps`` is drawn from ``rng`` unless given; with neither, ``eps = 0``
        and ``z = mu``.
        """
        p = self.params
        h = x if isinstance(x, Tensor) else Tensor(x)
        if h.ndim != 4 or h.shape[1:] != (self.config.in_channels, self.config.image_size,
                                          self.config.image_size):
            raise ValueError(f"input shape {h.shape} does not match model config")
        for i in range(len(self.config.channels)):
            h = conv2d(h, p[f"enc{i}.w"], p[f"enc{i}.b"], stride=2, pad=1)
            h = self._norm_act(h, f"enc{i}", training)
        h = reshape(h, (h.shape[0], -1))
        h = leaky_relu(linear(h, p["enc.fc.w"], p["enc.fc.b"]), SLOPE)
        mu = linear(h, p["enc.mu.w"], p["enc.mu.b"])
        logvar = linear(h, p["enc.logvar.w"], p["enc.logvar.b"])
        if not (np.all(np.isfinite(mu.data)) and np.all(np.isfinite(logvar.data))):
            raise FloatingPointError("encoder produced non-finite activations")
        if eps is None:
            eps = (rng.standard_normal(mu.shape) if rng is not None else np.zeros(mu.shape))
        z = mu + exp(logvar * 0.5) * Tensor(eps)
        return LatentSample(mu, logvar, eps, z)

    def decode(self, z, training: bool = True) -> Tensor:
        p = self.params
        c = self.config
        z = z if isinstance(z, Tensor) else Tensor(z)
        if z.ndim != 2 or z.shape[1] != c.latent_dim:
            raise ValueError(f"expected z of shape [B, {c.latent_dim}], got {z.shape}")
        h = leaky_relu(linear(z, p["dec.fc1.w"], p["dec.fc1.b"]), SLOPE)
        h = leaky_relu(linear(h, p["dec.fc2.w"], p["dec.fc2.b"]), SLOPE)
        h = reshape(h, (z.shape[0], c.channels[-1], self.bottom, self.bottom))
        for i in range(len(c.channels)):
            h = conv_transpose2d(h, p[f"dec{i}.w"], p[f"dec{i}.b"], stride=2, pad=1)
            h = self._norm_act(h, f"dec{i}", training)
        out = tanh(conv2d(h, p["out.w"], p["out.b"], stride=1, pad=1))
        if not np.all(np.isfinite(out.data)):
            raise FloatingPointError("decoder produced non-finite activations")
        return out

    def generate(self, n: int, seed: int) -> np.ndarray:
        """Decode ``n`` prior samples drawn with ``seed`` (eval-mode norms)."""
        c = self.config
        if n == 0:
            return np.zeros((0, c.in_channels, c.image_size, c.image_size))
        z = np.random.default_rng(seed).standard_normal((n, c.latent_dim))
        with no_grad():
            return self.decode(Tensor(z), training=False).data

    def state_arrays(self) -> dict:
        """Parameters plus batch-norm running statistics, for checkpointing."""
        out = {k: t.data for k, t in self.params.items()}
        for name, st in self.bn.items():
            out[f"{name}.running_mean"] = st.running_mean
            out[f"{name}.running_var"] = st.running_var
        return out

    def load_state_arrays(self, arrays: dict) -> None:
        expected = self.state_arrays()
        for k, v in expected.items():
            if k not in arrays:
                raise KeyError(f"checkpoint is missing {k}")
            if arrays[k].shape != v.shape:
                raise ValueError(f"checkpoint entry {k} has shape {arrays[k].shape}, model needs {v.shape}")
        for k, t in self.params.items():
            t.data = np.array(arrays[k], dtype=np.float64)
        for name, st in self.bn.items():
            st.running_mean = np.array(arrays[f"{name}.running_mean"], dtype=np.float64)
            st.running_var = np.array(arrays[f"{name}.running_var"], dtype=np.float64)
