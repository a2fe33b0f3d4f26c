"""Full-reference image quality: PSNR and SSIM on images in [0, 1]."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import correlate1d

from .tensor import ShapeError

__all__ = ["MetricReport", "psnr", "ssim", "gaussian_window", "PSNR_CAP", "evaluate"]

PSNR_CAP = 100.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
K1, K2 = 0.01, 0.03


@dataclass(frozen=True)
class MetricReport:
    psnr: float
    ssim: float

    def line(self) -> str:
        return f"psnr={self.psnr:.4f} ssim={self.ssim:.6f}"


def _pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"cannot compare images of shapes {a.shape} and {b.shape}")
    return a, b


def psnr(a, b) -> float:
    """``10 log10(1 / MSE)`` for unit peak, capped at 100 dB."""
    a, b = _pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse < 1e-10:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    """Normalized 1-D Gaussian taps; the 2-D window is their outer product."""
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2
    g = np.exp(-(x ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, taps: np.ndarray) -> np.ndarray:
    # separable correlation, keeping only windows that lie fully inside the image
    half = len(taps) // 2
    out = correlate1d(img, taps, axis=0, mode="constant")
    out = correlate1d(out, taps, axis=1, mode="constant")
    return out[half:img.shape[0] - half, half:img.shape[1] - half]


def _ssim_plane(x: np.ndarray, y: np.ndarray, taps: np.ndarray) -> float:
    c1, c2 = K1 ** 2, K2 ** 2
    mx, my = _filter_valid(x, taps), _filter_valid(y, taps)
    sxx = _filter_valid(x * x, taps) - mx * mx
    syy = _filter_valid(y * y, taps) - my * my
    sxy = _filter_valid(x * y, taps) - mx * my
    num = (2 * mx * my + c1) * (2 * sxy + c2)
    den = (mx * mx + my * my + c1) * (sxx + syy + c2)
    return float(np.mean(num / den))


def ssim(a, b) -> float:
    """Mean local SSIM (11x11 Gaussian window, sigma 1.5), averaged over channels.

    Accepts ``(C, W, H)`` or a single ``(W, H)`` plane.
    """
    a, b = _pair(a, b)
    if a.ndim == 2:
        a, b = a[None], b[None]
    if a.ndim != 3:
        raise ShapeError(f"ssim expects (C, W, H) or (W, H) images, got shape {a.shape}")
    if min(a.shape[1:]) < SSIM_WINDOW:
        raise ValueError(f"ssim needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {a.shape[1]}x{a.shape[2]}")
    taps = gaussian_window()
    return float(np.mean([_ssim_plane(a[c], b[c], taps) for c in range(a.shape[0])]))


def evaluate(reference, test) -> MetricReport:
    return MetricReport(psnr(reference, test), ssim(reference, test))
