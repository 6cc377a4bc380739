"""Radix-2 2D discrete Fourier transform for images and kernels.

Conventions: forward transform unnormalized,
``X[u, v] = sum_{m, n} x[m, n] exp(-2 pi i (u m / H + v n / W))``;
inverse carries the ``1 / (H W)`` factor. Frequency-domain grids are plain
complex128 numpy arrays. All transforms act on the last two axes, so a
stack of images [..., H, W] is transformed in one call.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np

__all__ = [
    "fft2",
    "ifft2",
    "fft_axis",
    "naive_dft2",
    "pad_and_center_kernel",
    "unpad_kernel",
    "kernel_embedding_index",
    "is_hermitian",
    "parseval_gap",
    "circular_convolve",
]


def _is_pow2(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


@lru_cache(maxsize=None)
def _bit_reversal(n: int) -> np.ndarray:
    bits = n.bit_length() - 1
    idx = np.arange(n)
    rev = np.zeros(n, dtype=np.intp)
    for b in range(bits):
        rev |= ((idx >> b) & 1) << (bits - 1 - b)
    return rev


@lru_cache(maxsize=None)
def _twiddles(m: int) -> np.ndarray:
    return np.exp(-2j * np.pi * np.arange(m // 2) / m)


def fft_axis(x: np.ndarray, axis: int = -1) -> np.ndarray:
    """Iterative decimation-in-time radix-2 FFT along one axis."""
    x = np.asarray(x)
    n = x.shape[axis]
    if not _is_pow2(n):
        raise ValueError(f"FFT length {n} along axis {axis} is not a power of two")
    a = np.moveaxis(x, axis, -1).astype(np.complex128)[..., _bit_reversal(n)]
    lead = a.shape[:-1]
    m = 2
    while m <= n:
        blocks = a.reshape(lead + (n // m, m))
        even = blocks[..., : m // 2]
        odd = blocks[..., m // 2:] * _twiddles(m)
        a = np.concatenate([even + odd, even - odd], axis=-1).reshape(lead + (n,))
        m *= 2
    return np.moveaxis(a, -1, axis)


def _check_dims(x: np.ndarray) -> None:
    if x.ndim < 2:
        raise ValueError(f"expected at least 2 dims, got shape {x.shape}")
    H, W = x.shape[-2:]
    if not _is_pow2(H):
        raise ValueError(f"height {H} is not a power of two")
    if not _is_pow2(W):
        raise ValueError(f"width {W} is not a power of two")


def fft2(x) -> np.ndarray:
    """Unnormalized forward 2D DFT over the last two axes."""
    x = np.asarray(x)
    _check_dims(x)
    return fft_axis(fft_axis(x, -1), -2)


def is_hermitian(X: np.ndarray, tol: float = 1e-9) -> bool:
    """True if ``X[u, v] == conj(X[-u, -v])`` up to ``tol`` relative to max |X|."""
    flipped = np.roll(np.flip(X, axis=(-2, -1)), shift=(1, 1), axis=(-2, -1))
    scale = max(1.0, float(np.abs(X).max(initial=0.0)))
    return bool(np.abs(X - np.conj(flipped)).max(initial=0.0) <= tol * scale)


def ifft2(X, real: bool = True, strict: bool = True) -> np.ndarray:
    """Inverse 2D DFT with ``1 / (H W)`` normalization.

    With ``real=True`` the result is projected onto the reals. In strict
    mode the input must be Hermitian-symmetric and the discarded imaginary
    residue must stay below 1e-9; otherwise a ``ValueError`` is raised.
    """
    X = np.asarray(X, dtype=np.complex128)
    _check_dims(X)
    if real and strict and not is_hermitian(X):
        raise ValueError("ifft2: spectrum is not Hermitian-symmetric")
    H, W = X.shape[-2:]
    out = np.conj(fft2(np.conj(X))) / (H * W)
    if not real:
        return out
    if strict:
        scale = max(1.0, float(np.abs(out.real).max(initial=0.0)))
        if np.abs(out.imag).max(initial=0.0) > 1e-9 * scale:
            raise ValueError("ifft2: imaginary residue exceeds 1e-9")
    return out.real.copy()


def naive_dft2(x) -> np.ndarray:
    """Direct O(N^4) double-sum DFT. Reference only."""
    x = np.asarray(x, dtype=np.complex128)
    H, W = x.shape
    out = np.zeros((H, W), dtype=np.complex128)
    m = np.arange(H)[:, None]
    n = np.arange(W)[None, :]
    for u in range(H):
        for v in range(W):
            out[u, v] = np.sum(x * np.exp(-2j * np.pi * (u * m / H + v * n / W)))
    return out


@lru_cache(maxsize=None)
def kernel_embedding_index(size_h: int, size_w: int, H: int, W: int) -> tuple:
    """Flat destination indices that place a centered kernel at (0, 0) with wrap."""
    if size_h > H or size_w > W:
        raise ValueError(f"kernel {size_h}x{size_w} larger than image {H}x{W}")
    ch, cw = size_h // 2, size_w // 2
    rows = (np.arange(size_h) - ch) % H
    cols = (np.arange(size_w) - cw) % W
    return tuple((rows[:, None] * W + cols[None, :]).ravel().tolist())


def pad_and_center_kernel(k, H: int, W: int) -> np.ndarray:
    """Embed an odd-sized kernel (or a stack of them) into an H x W grid.

    The kernel center lands on index (0, 0) and the rest wraps around, so
    ``fft2`` of the result gives the eigenvalues of circular convolution
    with ``k``.
    """
    k = np.asarray(getattr(k, "weights", k), dtype=np.float64)
    kh, kw = k.shape[-2:]
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError(f"kernel dims must be odd, got {kh}x{kw}")
    idx = np.asarray(kernel_embedding_index(kh, kw, H, W))
    lead = k.shape[:-2]
    out = np.zeros(lead + (H * W,))
    out[..., idx] = k.reshape(lead + (kh * kw,))
    return out.reshape(lead + (H, W))


def unpad_kernel(kpad: np.ndarray, kh: int, kw: int) -> np.ndarray:
    """Inverse of :func:`pad_and_center_kernel` (gathers the support back)."""
    H, W = kpad.shape[-2:]
    idx = np.asarray(kernel_embedding_index(kh, kw, H, W))
    lead = kpad.shape[:-2]
    return kpad.reshape(lead + (H * W,))[..., idx].reshape(lead + (kh, kw))


def circular_convolve(x, k) -> np.ndarray:
    """Circular convolution of image(s) ``x`` with centered kernel(s) ``k`` via FFT."""
    x = np.asarray(x, dtype=np.float64)
    H, W = x.shape[-2:]
    lam = fft2(pad_and_center_kernel(k, H, W))
    return ifft2(fft2(x) * lam, strict=False)


def parseval_gap(x) -> float:
    """Relative gap between the spatial and the normalized spectral energy."""
    x = np.asarray(x, dtype=np.float64)
    energy = float(np.sum(x * x))
    if energy == 0.0:
        return 0.0
    H, W = x.shape[-2:]
    spec = float(np.sum(np.abs(fft2(x)) ** 2)) / (H * W)
    return abs(energy - spec) / energy
