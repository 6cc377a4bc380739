"""Per-sample blur kernel estimation.

Two routes to the kernel ``k`` that best explains a reconstruction as a
blurred input, ``x_hat ~ x * k`` (circular convolution, centered kernel):

* :func:`fit_kernel_least_squares` solves the normal equations directly;
* :class:`KernelGenerator` is a small network mapping a latent code to a
  kernel, trained with :func:`kernel_fit_loss`.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import fft as _fft
from .tensor import Tensor, leaky_relu, linear, record, reshape, softmax

__all__ = [
    "BlurKernel",
    "KernelGenerator",
    "fit_kernel_least_squares",
    "generate_kernel",
    "kernel_fit_loss",
    "kernel_second_moment",
    "gaussian_kernel",
    "delta_kernel",
    "circular_conv_tensor",
]

NORMALIZATIONS = ("softmax", "raw")


@dataclass(frozen=True)
class BlurKernel:
    weights: np.ndarray
    normalization: str = "softmax"

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if w.ndim != 2 or w.shape[0] != w.shape[1] or w.shape[0] % 2 == 0:
            raise ValueError(f"kernel must be square with odd size, got {w.shape}")
        if self.normalization not in NORMALIZATIONS:
            raise ValueError(f"unknown normalization {self.normalization!r}")
        if self.normalization == "softmax" and (w.min() < 0 or abs(w.sum() - 1.0) > 1e-12):
            raise ValueError("softmax-mode kernel must be nonnegative with unit sum")
        object.__setattr__(self, "weights", w)

    @property
    def size(self) -> int:
        return self.weights.shape[0]

    @property
    def center(self) -> int:
        return self.size // 2


def delta_kernel(size: int = 1) -> BlurKernel:
    w = np.zeros((size, size))
    w[size // 2, size // 2] = 1.0
    return BlurKernel(w)


def gaussian_kernel(size: int, sigma: float) -> BlurKernel:
    """Unit-sum isotropic Gaussian sampled on a size x size grid."""
    ax = np.arange(size) - size // 2
    g = np.exp(-(ax[:, None] ** 2 + ax[None, :] ** 2) / (2.0 * sigma * sigma))
    return BlurKernel(g / g.sum())


def _shift_design(x: np.ndarray, size: int) -> np.ndarray:
    """Columns are the image circularly shifted by every kernel offset."""
    c = size // 2
    cols = [np.roll(x, (i - c, j - c), axis=(0, 1)).ravel()
            for i in range(size) for j in range(size)]
    return np.stack(cols, axis=1)


def fit_kernel_least_squares(x, x_hat, size: int, ridge: float = 1e-6) -> BlurKernel:
    """Least-squares kernel minimizing ``||x * k - x_hat||^2`` on a size x size support.

    Solves ``(A^T A + ridge I) k = A^T x_hat`` where column ``(i, j)`` of
    ``A`` is ``x`` shifted by the kernel offset. The result is returned in
    ``raw`` normalization (no sign or sum constraint).
    """
    x = np.asarray(x, dtype=np.float64)
    x_hat = np.asarray(x_hat, dtype=np.float64)
    if x.shape != x_hat.shape or x.ndim != 2:
        raise ValueError(f"expected two equal 2D images, got {x.shape} and {x_hat.shape}")
    if size % 2 == 0 or size * size > x.size:
        raise ValueError(f"kernel size {size} must be odd with size^2 <= {x.size}")
    if ridge < 0:
        raise ValueError("ridge must be non-negative")
    A = _shift_design(x, size)
    normal = A.T @ A + ridge * np.eye(size * size)
    rhs = A.T @ x_hat.ravel()
    if ridge == 0 and np.linalg.cond(normal) > 1e12:
        raise np.linalg.LinAlgError(
            "normal matrix is singular; the image does not identify the kernel, use ridge > 0")
    k = np.linalg.solve(normal, rhs)
    return BlurKernel(k.reshape(size, size), normalization="raw")


class KernelGenerator:
    """Two linear layers mapping a latent code to a size x size kernel.

    A leaky ReLU sits between the layers. The output layer starts at zero,
    so in softmax mode the initial kernel is uniform.
    """

    def __init__(self, latent_dim: int, size: int = 11, hidden: int = 1000,
                 normalization: str = "softmax", rng: np.random.Generator | None = None):
        if size % 2 == 0:
            raise ValueError("kernel size must be odd")
        if normalization not in NORMALIZATIONS:
            raise ValueError(f"unknown normalization {normalization!r}")
        rng = np.random.default_rng(0) if rng is None else rng
        self.latent_dim = latent_dim
        self.size = size
        self.hidden = hidden
        self.normalization = normalization
        bound = 1.0 / np.sqrt(latent_dim)
        self.params = {
            "g.fc1.w": Tensor(rng.uniform(-bound, bound, (latent_dim, hidden)), requires_grad=True),
            "g.fc1.b": Tensor(np.zeros(hidden), requires_grad=True),
            "g.fc2.w": Tensor(np.zeros((hidden, size * size)), requires_grad=True),
            "g.fc2.b": Tensor(np.zeros(size * size), requires_grad=True),
        }
        if normalization == "raw":
            b = np.zeros(size * size)
            b[(size * size) // 2] = 1.0
            self.params["g.fc2.b"].data[:] = b

    def parameters(self) -> list:
        return list(self.params.values())

    def __call__(self, z) -> Tensor:
        z = z if isinstance(z, Tensor) else Tensor(z)
        if z.ndim != 2 or z.shape[1] != self.latent_dim:
            raise ValueError(f"expected z of shape [B, {self.latent_dim}], got {z.shape}")
        p = self.params
        h = leaky_relu(linear(z, p["g.fc1.w"], p["g.fc1.b"]), 0.01)
        logits = linear(h, p["g.fc2.w"], p["g.fc2.b"])
        if self.normalization == "softmax":
            logits = softmax(logits, axis=1)
        return reshape(logits, (z.shape[0], self.size, self.size))


def generate_kernel(g: KernelGenerator, z) -> Tensor:
    """Per-sample kernels [B, size, size] for latent codes ``z``."""
    return g(z)


def circular_conv_tensor(x, k: Tensor) -> Tensor:
    """Differentiable circular convolution of images [B, C, H, W] with kernels [B, s, s].

    Each sample's kernel is shared across its channels. Gradients flow to
    both ``x`` (if it is a tensor) and ``k``.
    """
    xt = x if isinstance(x, Tensor) else Tensor(x)
    xd = xt.data
    if xd.ndim != 4 or k.ndim != 3 or xd.shape[0] != k.shape[0]:
        raise ValueError(f"expected x [B,C,H,W] and k [B,s,s], got {xd.shape} and {k.shape}")
    H, W = xd.shape[-2:]
    s = k.shape[-1]
    X = _fft.fft2(xd)
    L = _fft.fft2(_fft.pad_and_center_kernel(k.data, H, W))[:, None]
    out = _fft.ifft2(X * L, strict=False)

    def bw(g):
        G = _fft.fft2(g)
        gx = _fft.ifft2(np.conj(L) * G, strict=False)
        gpad = _fft.ifft2(np.conj(X) * G, strict=False).sum(axis=1)
        return gx, _fft.unpad_kernel(gpad, s, s)

    return record("circ_conv", (xt, k), out, bw)


def kernel_fit_loss(x, x_hat, k: Tensor) -> Tensor:
    """Batch mean of ``||x * k - x_hat||^2 / (H W)``; ``x`` and ``x_hat`` are constants."""
    xd = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    xh = x_hat.data if isinstance(x_hat, Tensor) else np.asarray(x_hat, dtype=np.float64)
    if xd.ndim == 3:
        xd, xh = xd[:, None], xh[:, None]
    B, _, H, W = xd.shape
    r = circular_conv_tensor(xd, k) - Tensor(xh)
    return (r * r).sum() * (1.0 / (B * H * W))


def kernel_second_moment(k) -> float | np.ndarray:
    """Mass-weighted squared radius about the kernel center.

    Accepts a :class:`BlurKernel` in softmax mode or an array [..., s, s]
    of simplex-valued kernels (returns one value per kernel).
    """
    if isinstance(k, BlurKernel):
        if k.normalization != "softmax":
            raise ValueError("second moment is only defined for simplex (softmax) kernels")
        w = k.weights
    else:
        w = np.asarray(k.data if isinstance(k, Tensor) else k, dtype=np.float64)
    s = w.shape[-1]
    c = s // 2
    ax = np.arange(s) - c
    r2 = ax[:, None] ** 2 + ax[None, :] ** 2
    out = np.sum(w * r2, axis=(-2, -1))
    return float(out) if np.ndim(out) == 0 else out
