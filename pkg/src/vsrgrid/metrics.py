"""PSNR and single-scale SSIM over frame batches.

Both metrics run per frame and average over frames; RGB channels are
averaged by default with an optional Rec.601 luma-only mode. SSIM uses the
standard 11x11 Gaussian window (sigma 1.5) with valid-region convolution,
so no padding policy leaks into the score.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import correlate1d

from .tensor import ShapeError

PSNR_CAP_DB = 99.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5

_LUMA = np.array([0.299, 0.587, 0.114])


@dataclass(frozen=True)
class MetricReport:
    psnr_db: float
    ssim: float
    frame_count: int


def _as_frames(x: np.ndarray) -> np.ndarray:
    """Accept (C,H,W), (F,C,H,W) or (T,N,C,H,W); return (F,C,H,W)."""
    if x.ndim == 3:
        return x[None]
    if x.ndim == 4:
        return x
    if x.ndim == 5:
        return x.reshape(-1, *x.shape[2:])
    raise ShapeError(f"expected 3-5 dims of frames, got shape {x.shape}")


def _to_luma(frames: np.ndarray) -> np.ndarray:
    if frames.shape[1] != 3:
        raise ShapeError(f"luma conversion needs 3 channels, got {frames.shape[1]}")
    return np.tensordot(frames, _LUMA, axes=([1], [0]))[:, None]


def psnr(a: np.ndarray, b: np.ndarray, max_val: float = 1.0,
         luma: bool = False) -> float:
    """Mean over frames of 10*log10(max_val^2 / frame MSE); zero-MSE frames
    count as the 99 dB cap."""
    if a.shape != b.shape:
        raise ShapeError(f"psnr shape mismatch: {a.shape} vs {b.shape}")
    if max_val <= 0:
        raise ShapeError(f"max_val must be > 0, got {max_val}")
    fa, fb = _as_frames(a), _as_frames(b)
    if luma:
        fa, fb = _to_luma(fa), _to_luma(fb)
    diff = fa.astype(np.float64) - fb.astype(np.float64)
    mse = (diff * diff).mean(axis=(1, 2, 3))
    vals = np.where(mse > 0,
                    10.0 * np.log10(max_val * max_val / np.where(mse > 0, mse, 1.0)),
                    PSNR_CAP_DB)
    return float(np.minimum(vals, PSNR_CAP_DB).mean())


def _gaussian_1d(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    ax = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(ax * ax) / (2.0 * sigma * sigma))
    return g / g.sum()


def _gaussian_kernel(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    g = _gaussian_1d(size, sigma)
    return np.outer(g, g)


def _window_mean(x: np.ndarray) -> np.ndarray:
    """Valid-region Gaussian-weighted local mean of (F,C,H,W) per channel.

    The window is separable, so two 1-d passes; boundary values are then
    cut away, leaving exactly the valid-convolution region."""
    g = _gaussian_1d()
    half = SSIM_WINDOW // 2
    sm = correlate1d(x, g, axis=2, mode="constant")
    sm = correlate1d(sm, g, axis=3, mode="constant")
    return sm[:, :, half:-half, half:-half]


def ssim(a: np.ndarray, b: np.ndarray, luma: bool = False) -> float:
    """Single-scale SSIM, dynamic range 1.0, C1=(0.01)^2, C2=(0.03)^2,
    computed per channel over the valid region and averaged."""
    if a.shape != b.shape:
        raise ShapeError(f"ssim shape mismatch: {a.shape} vs {b.shape}")
    fa, fb = _as_frames(a), _as_frames(b)
    if luma:
        fa, fb = _to_luma(fa), _to_luma(fb)
    if fa.shape[2] < SSIM_WINDOW or fa.shape[3] < SSIM_WINDOW:
        raise ShapeError(
            f"frames {fa.shape[2]}x{fa.shape[3]} smaller than the "
            f"{SSIM_WINDOW}x{SSIM_WINDOW} window")
    fa = fa.astype(np.float64)
    fb = fb.astype(np.float64)
    c1 = (0.01 * 1.0) ** 2
    c2 = (0.03 * 1.0) ** 2
    mu_a = _window_mean(fa)
    mu_b = _window_mean(fb)
    var_a = _window_mean(fa * fa) - mu_a * mu_a
    var_b = _window_mean(fb * fb) - mu_b * mu_b
    cov = _window_mean(fa * fb) - mu_a * mu_b
    score = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)
             / ((mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)))
    return float(score.mean())


def evaluate(a: np.ndarray, b: np.ndarray, max_val: float = 1.0,
             luma: bool = False) -> MetricReport:
    frames = _as_frames(a).shape[0]
    return MetricReport(psnr_db=psnr(a, b, max_val, luma),
                        ssim=ssim(a, b, luma), frame_count=frames)
