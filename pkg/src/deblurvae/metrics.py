"""Reconstruction and blur metrics: PSNR, SSIM and spectral statistics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import fft as _fft

__all__ = [
    "psnr",
    "ssim",
    "SpectrumProfile",
    "radial_power_spectrum",
    "radial_index",
    "mean_log_spectrum",
    "spectrum_gap",
    "to_unit_range",
]

SSIM_WINDOW = 8
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def to_unit_range(x) -> np.ndarray:
    """Affine map from [-1, 1] to [0, 1]."""
    return (np.asarray(x, dtype=np.float64) + 1.0) / 2.0


def psnr(x, x_hat, max_val: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; ``inf`` when the images are identical."""
    x = np.asarray(x, dtype=np.float64)
    x_hat = np.asarray(x_hat, dtype=np.float64)
    if x.shape != x_hat.shape:
        raise ValueError(f"psnr: shape mismatch {x.shape} vs {x_hat.shape}")
    if max_val <= 0:
        raise ValueError("max_val must be positive")
    mse = float(np.mean((x - x_hat) ** 2))
    if mse == 0.0:
        return float("inf")
    return 10.0 * np.log10(max_val ** 2 / mse)


def ssim(x, x_hat, window: int = SSIM_WINDOW, data_range: float = 1.0) -> float:
    """Mean SSIM over all ``window`` x ``window`` positions (uniform window, stride 1).

    Local statistics use population (1/N) moments. Inputs are 2D images in
    [0, 1] (or stacks [..., H, W], in which case the mean over all windows
    of all images is returned).
    """
    x = np.asarray(x, dtype=np.float64)
    x_hat = np.asarray(x_hat, dtype=np.float64)
    if x.shape != x_hat.shape:
        raise ValueError(f"ssim: shape mismatch {x.shape} vs {x_hat.shape}")
    if x.shape[-1] < window or x.shape[-2] < window:
        raise ValueError(f"image {x.shape[-2:]} smaller than the {window}x{window} window")
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    wx = sliding_window_view(x, (window, window), axis=(-2, -1))
    wy = sliding_window_view(x_hat, (window, window), axis=(-2, -1))
    mx = wx.mean(axis=(-2, -1))
    my = wy.mean(axis=(-2, -1))
    vx = (wx * wx).mean(axis=(-2, -1)) - mx * mx
    vy = (wy * wy).mean(axis=(-2, -1)) - my * my
    cxy = (wx * wy).mean(axis=(-2, -1)) - mx * my
    s = ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
    return float(s.mean())


@dataclass
class SpectrumProfile:
    radius: np.ndarray
    power: np.ndarray
    counts: np.ndarray
    alpha: float
    fit_range: tuple


def radial_index(H: int, W: int) -> np.ndarray:
    """Integer radius of each DFT bin measured from the (centered) DC term."""
    u = np.fft.fftfreq(H) * H
    v = np.fft.fftfreq(W) * W
    return np.floor(np.sqrt(u[:, None] ** 2 + v[None, :] ** 2)).astype(int)


def radial_power_spectrum(x, fit_range: tuple | None = None) -> SpectrumProfile:
    """Radially binned |F(x)|^2 and the fitted power-law exponent.

    A stack [..., H, W] is averaged over images. Bins are integer radii;
    the DC bin (radius 0) holds only the DC term. ``alpha`` comes from a
    least-squares line through ``log(power)`` vs ``log(mean radius)`` over
    radii ``[2, H // 4]`` by default, so ``power ~ 1 / w**alpha``.
    """
    x = np.asarray(x, dtype=np.float64)
    H, W = x.shape[-2:]
    pw = np.abs(_fft.fft2(x)) ** 2
    if pw.ndim > 2:
        pw = pw.reshape(-1, H, W).mean(axis=0)
    u = np.fft.fftfreq(H) * H
    v = np.fft.fftfreq(W) * W
    rad = np.sqrt(u[:, None] ** 2 + v[None, :] ** 2)
    idx = np.floor(rad).astype(int)
    n_bins = idx.max() + 1
    counts = np.bincount(idx.ravel(), minlength=n_bins)
    power = np.bincount(idx.ravel(), weights=pw.ravel(), minlength=n_bins) / np.maximum(counts, 1)
    mean_r = np.bincount(idx.ravel(), weights=rad.ravel(), minlength=n_bins) / np.maximum(counts, 1)
    lo, hi = fit_range if fit_range is not None else (2, H // 4)
    sel = np.arange(n_bins)
    sel = (sel >= lo) & (sel <= hi) & (power > 0)
    alpha = float("nan")
    if sel.sum() >= 2:
        slope, _ = np.polyfit(np.log(mean_r[sel]), np.log(power[sel]), 1)
        alpha = -float(slope)
    return SpectrumProfile(mean_r, power, counts, alpha, (lo, hi))


def mean_log_spectrum(images) -> np.ndarray:
    """Mean of ``log(1 + |F(x)|)`` over an image stack [N, (C,) H, W]."""
    images = np.asarray(images, dtype=np.float64)
    if images.shape[0] == 0:
        raise ValueError("image set is empty")
    H, W = images.shape[-2:]
    return np.log1p(np.abs(_fft.fft2(images))).reshape(-1, H, W).mean(axis=0)


def spectrum_gap(set_a, set_ref, min_radius: float | None = None) -> float:
    """Mean absolute difference of mean log-spectra, optionally above a radius."""
    a = np.asarray(set_a, dtype=np.float64)
    r = np.asarray(set_ref, dtype=np.float64)
    if a.shape[0] == 0 or r.shape[0] == 0:
        raise ValueError("spectrum_gap needs two non-empty image sets")
    if a.shape[1:] != r.shape[1:]:
        raise ValueError(f"image dims differ: {a.shape[1:]} vs {r.shape[1:]}")
    diff = np.abs(mean_log_spectrum(a) - mean_log_spectrum(r))
    if min_radius is not None:
        H, W = diff.shape
        mask = radial_index(H, W) > min_radius
        return float(diff[mask].mean())
    return float(diff.mean())
