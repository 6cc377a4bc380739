"""Wiener-weighted Gaussian reconstruction likelihood and ELBO assembly.

The reconstruction error ``e = x - x_hat`` is weighted in the frequency
domain by the Wiener gain ``conj(L) / (|L|^2 + C)`` of a blur kernel, where
``L = fft2(pad(k))``. The weighted loss carries the ``1 / (H W)`` Parseval
factor, so an all-ones weight gives back the plain summed squared error.

Reductions: sum over pixels (or frequencies) and channels, mean over batch.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import fft as _fft
from .circulant import BccbOperator, log_abs_det
from .tensor import Tensor, absolute, exp as t_exp, power, record, tensor_mean, tensor_sum

__all__ = [
    "WienerWeight",
    "ElboBreakdown",
    "build_weight",
    "identity_weight",
    "weighted_recon_loss",
    "gaussian_log_likelihood",
    "kl_standard_normal",
    "baseline_loss",
    "assemble_elbo",
    "LOSS_KINDS",
]

LOSS_KINDS = ("proposed", "L2", "L1", "CE")


@dataclass(frozen=True)
class WienerWeight:
    """Frequency-domain weight grid ([H, W] or one grid per sample [B, H, W])."""

    grid: np.ndarray
    C: float
    source_kernel: np.ndarray | None = None

    @property
    def power(self) -> np.ndarray:
        return np.abs(self.grid) ** 2


def build_weight(k, C: float, H: int, W: int) -> WienerWeight:
    """Wiener gain ``conj(L) / (|L|^2 + C)`` for a kernel or kernel stack."""
    if C <= 0:
        raise ValueError(f"Wiener constant C must be positive, got {C}")
    kw = np.asarray(getattr(k, "weights", k), dtype=np.float64)
    lam = _fft.fft2(_fft.pad_and_center_kernel(kw, H, W))
    grid = np.conj(lam) / (np.abs(lam) ** 2 + C)
    return WienerWeight(grid=grid, C=float(C), source_kernel=kw)


def identity_weight(H: int, W: int) -> WienerWeight:
    """All-ones weight; the weighted loss then equals the summed squared error."""
    return WienerWeight(grid=np.ones((H, W), dtype=np.complex128), C=0.0)


def _data(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def _as4d(a: np.ndarray) -> np.ndarray:
    if a.ndim == 2:
        return a[None, None]
    if a.ndim == 3:
        return a[:, None]
    return a


def weighted_recon_loss(x, x_hat, w: WienerWeight) -> Tensor:
    """Batch mean of ``(1 / (H W)) sum |w (F(x) - F(x_hat))|^2`` over frequencies and channels.

    Accepts [H, W], [B, H, W] or [B, C, H, W] inputs. A per-sample weight
    grid [B, H, W] is shared across channels.
    """
    xd, xh = _data(x), _data(x_hat)
    if xd.shape != xh.shape:
        raise ValueError(f"weighted_recon_loss: shape mismatch {xd.shape} vs {xh.shape}")
    e = _as4d(xd - xh)
    B, _, H, W = e.shape
    grid = w.grid
    if grid.shape[-2:] != (H, W):
        raise ValueError(f"weight grid {grid.shape} does not match images {e.shape}")
    if grid.ndim == 3:
        if grid.shape[0] != B:
            raise ValueError(f"weight batch {grid.shape[0]} does not match image batch {B}")
        grid = grid[:, None]
    spec = _fft.fft2(e)
    value = np.sum(np.abs(grid * spec) ** 2) / (H * W) / B
    pw = np.abs(grid) ** 2
    shape = xd.shape

    def bw(g):
        ge = 2.0 * _fft.ifft2(pw * spec, strict=False) * (float(g) / B)
        ge = ge.reshape(shape)
        return ge, -ge

    inputs = [t if isinstance(t, Tensor) else Tensor(t) for t in (x, x_hat)]
    return record("weighted_recon", inputs, np.asarray(value), bw)


def gaussian_log_likelihood(x, x_hat, w: WienerWeight,
                            op: BccbOperator | Sequence[BccbOperator]) -> Tensor:
    """Negative Gaussian log-likelihood with covariance ``Sigma_k = K(eps) K(eps)^T``.

    Returns ``(D/2) log(2 pi) + (1/2) log|Sigma_k| + (1/2) * quadratic``
    averaged over the batch, where the quadratic form is
    :func:`weighted_recon_loss` and ``log|Sigma_k| = 2 log|K(eps)|`` per
    channel. ``op`` is either shared or one operator per sample.
    """
    xd = _as4d(_data(x))
    B, Cch, H, W = xd.shape
    D = Cch * H * W
    if isinstance(op, BccbOperator):
        logdet = log_abs_det(op)
    else:
        if len(op) != B:
            raise ValueError(f"expected {B} operators, got {len(op)}")
        logdet = float(np.mean([log_abs_det(o) for o in op]))
    const = 0.5 * D * np.log(2 * np.pi) + Cch * logdet
    return 0.5 * weighted_recon_loss(x, x_hat, w) + const


def kl_standard_normal(mu, logvar) -> Tensor:
    """Closed-form KL(N(mu, exp(logvar)) || N(0, I)) summed over latents, batch mean."""
    mu = mu if isinstance(mu, Tensor) else Tensor(mu)
    logvar = logvar if isinstance(logvar, Tensor) else Tensor(logvar)
    if mu.ndim == 1:
        mu, logvar = mu.reshape(1, -1), logvar.reshape(1, -1)
    per = power(mu, 2) + t_exp(logvar) - logvar - 1.0
    return tensor_mean(tensor_sum(per, axis=1)) * 0.5


def _bce(t: np.ndarray, p: Tensor) -> Tensor:
    pc = np.clip(p.data, 1e-12, 1 - 1e-12)
    B = t.shape[0] if t.ndim > 2 else 1
    value = -np.sum(t * np.log(pc) + (1 - t) * np.log1p(-pc)) / B

    def bw(g):
        return (float(g) * (pc - t) / (pc * (1 - pc)) / B,)

    return record("bce", (p,), np.asarray(value), bw)


def baseline_loss(kind: str, x, x_hat) -> Tensor:
    """Pixel-space reconstruction losses: summed over pixels, mean over batch.

    ``L2`` squared error, ``L1`` absolute error, ``CE`` Bernoulli
    cross-entropy. ``CE`` expects both arguments already in [0, 1].
    """
    x_hat = x_hat if isinstance(x_hat, Tensor) else Tensor(x_hat)
    xd = _data(x)
    if xd.shape != x_hat.shape:
        raise ValueError(f"baseline_loss: shape mismatch {xd.shape} vs {x_hat.shape}")
    B = xd.shape[0] if xd.ndim > 2 else 1
    if kind == "CE":
        if xd.min() < 0 or xd.max() > 1 or x_hat.data.min() < 0 or x_hat.data.max() > 1:
            raise ValueError("CE loss needs targets and outputs in [0, 1]")
        return _bce(xd, x_hat)
    diff = x_hat - (x if isinstance(x, Tensor) else Tensor(xd))
    if kind == "L2":
        return tensor_sum(diff * diff) * (1.0 / B)
    if kind == "L1":
        return tensor_sum(absolute(diff)) * (1.0 / B)
    raise ValueError(f"unknown baseline loss {kind!r}; expected L2, L1 or CE")


@dataclass(frozen=True)
class ElboBreakdown:
    recon_term: float
    logdet_term: float
    kl_term: float
    beta: float
    total: float


def assemble_elbo(recon, logdet, kl, beta: float):
    """Total loss ``recon + logdet + beta * kl`` plus its float breakdown.

    Works on floats or tensors; returns ``(total, breakdown)``.
    """
    total = recon + logdet + kl * beta
    f = lambda v: v.item() if isinstance(v, Tensor) else float(v)
    return total, ElboBreakdown(f(recon), f(logdet), f(kl), float(beta), f(total))
