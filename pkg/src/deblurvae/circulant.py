"""Block-circulant-with-circulant-blocks (BCCB) operators.

A 2D circular convolution with kernel ``k`` on an H x W image is the
linear map ``vec(k * x) = K vec(x)`` with ``K`` BCCB, diagonalized by the
2D DFT. Its eigenvalues are ``fft2`` of the zero-padded, centered kernel,
which makes ``log|det(K + eps I)|`` a sum over frequencies.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import fft as _fft
from .tensor import Tensor, record

__all__ = [
    "EPS_SMALL",
    "EPS_LARGE",
    "BccbOperator",
    "log_abs_det",
    "materialize_dense",
    "apply",
    "log_abs_det_tensor",
    "resolve_epsilon",
]

EPS_SMALL = 1e-3
EPS_LARGE = 0.5

_DENSE_CAP = 4096


def _is_pow2(n: int) -> bool:
    return n > 0 and n & (n - 1) == 0


def _embed(k: np.ndarray, H: int, W: int) -> np.ndarray:
    """Centered embedding; kernels larger than the grid fold onto it additively."""
    kh, kw = k.shape[-2:]
    if kh <= H and kw <= W:
        return _fft.pad_and_center_kernel(k, H, W)
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError(f"kernel dims must be odd, got {kh}x{kw}")
    rows = (np.arange(kh) - kh // 2) % H
    cols = (np.arange(kw) - kw // 2) % W
    out = np.zeros(k.shape[:-2] + (H, W))
    np.add.at(out, (..., rows[:, None], cols[None, :]), k)
    return out


def _spectrum(x, H: int, W: int, inverse: bool = False) -> np.ndarray:
    """2D DFT over the last two axes.

    Uses the radix-2 transform when both sizes allow it and falls back to
    dense Fourier matrices otherwise (small oracle sizes such as 6 x 6).
    """
    if _is_pow2(H) and _is_pow2(W):
        if inverse:
            return _fft.ifft2(x, strict=False)
        return _fft.fft2(x)
    sign = 1.0 if inverse else -1.0
    fh = np.exp(sign * 2j * np.pi * np.outer(np.arange(H), np.arange(H)) / H)
    fw = np.exp(sign * 2j * np.pi * np.outer(np.arange(W), np.arange(W)) / W)
    out = fh @ np.asarray(x, dtype=np.complex128) @ fw
    if inverse:
        return (out / (H * W)).real
    return out


def resolve_epsilon(value) -> float:
    """Map the presets ``"small"`` / ``"large"`` or a number to a float."""
    if isinstance(value, str):
        presets = {"small": EPS_SMALL, "large": EPS_LARGE}
        if value in presets:
            return presets[value]
        value = float(value)
    value = float(value)
    if value < 0:
        raise ValueError(f"epsilon must be non-negative, got {value}")
    return value


@dataclass(frozen=True)
class BccbOperator:
    """Circular convolution with ``kernel`` plus ``epsilon`` times identity."""

    kernel: np.ndarray
    image_dims: tuple
    epsilon: float = 0.0
    eigenvalues: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        k = np.asarray(getattr(self.kernel, "weights", self.kernel), dtype=np.float64)
        if k.ndim != 2:
            raise ValueError(f"kernel must be 2D, got shape {k.shape}")
        if self.epsilon < 0:
            raise ValueError("epsilon must be non-negative")
        H, W = self.image_dims
        object.__setattr__(self, "kernel", k)
        object.__setattr__(self, "image_dims", (int(H), int(W)))
        object.__setattr__(self, "eigenvalues", _spectrum(_embed(k, H, W), H, W))


def log_abs_det(op: BccbOperator) -> float:
    """``log|det(K + eps I)|`` as the sum of ``log|lambda + eps|`` over frequencies."""
    shifted = np.abs(op.eigenvalues + op.epsilon)
    bad = np.argwhere(shifted <= 1e-300)
    if bad.size:
        u, v = bad[0]
        raise np.linalg.LinAlgError(
            f"operator is singular: eigenvalue at frequency ({u}, {v}) is zero")
    return float(np.sum(np.log(shifted)))


def materialize_dense(op: BccbOperator) -> np.ndarray:
    """Dense (HW x HW) matrix acting on row-major ``vec(x)``. Small sizes only."""
    H, W = op.image_dims
    n = H * W
    if n > _DENSE_CAP:
        raise ValueError(f"dense materialization capped at {_DENSE_CAP} pixels, got {n}")
    kpad = _embed(op.kernel, H, W)
    p = np.arange(n)
    pr, pc = np.divmod(p, W)
    dr = (pr[:, None] - pr[None, :]) % H
    dc = (pc[:, None] - pc[None, :]) % W
    return kpad[dr, dc] + op.epsilon * np.eye(n)


def apply(op: BccbOperator, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-2:] != op.image_dims:
        raise ValueError(f"image dims {x.shape[-2:]} do not match operator {op.image_dims}")
    H, W = op.image_dims
    return _spectrum((op.eigenvalues + op.epsilon) * _spectrum(x, H, W), H, W, inverse=True)


def log_abs_det_tensor(kernels: Tensor, H: int, W: int, epsilon: float) -> Tensor:
    """Differentiable per-sample ``log|det(K + eps I)|`` for a kernel stack [B, s, s].

    With ``mu = lambda + eps`` the derivative with respect to the padded
    kernel is ``Re(fft2(1 / mu))``, gathered back onto the kernel support.
    """
    k = kernels.data
    kh, kw = k.shape[-2:]
    mu = _spectrum(_embed(k, H, W), H, W) + epsilon
    mag = np.abs(mu)
    if np.any(mag <= 1e-300):
        raise np.linalg.LinAlgError("operator is singular at some frequency")
    value = np.log(mag).sum(axis=(-2, -1))

    def bw(g):
        dpad = _spectrum(1.0 / mu, H, W).real
        rows = (np.arange(kh) - kh // 2) % H
        cols = (np.arange(kw) - kw // 2) % W
        dk = dpad[..., rows[:, None], cols[None, :]]
        return (dk * np.reshape(g, g.shape + (1, 1)),)

    return record("bccb_logdet", (kernels,), value, bw)
