"""Image-quality metrics.

Both metrics take the data range from the reference image:
``peak = max(ref) - min(ref)``.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.ndimage import correlate1d

SSIM_WIN = 11
SSIM_SIGMA = 1.5
K1, K2 = 0.01, 0.03


def _pair(x, ref):
    x = np.asarray(x, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if x.shape != ref.shape and x.size == ref.size and 1 in (x.ndim, ref.ndim):
        x = x.reshape(ref.shape)
    if x.shape != ref.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {ref.shape}")
    return x, ref


def data_range(ref) -> float:
    ref = np.asarray(ref, dtype=np.float64)
    return float(ref.max() - ref.min())


def psnr(x, ref) -> float:
    """Peak signal-to-noise ratio in dB; ``inf`` when ``x == ref``."""
    x, ref = _pair(x, ref)
    peak = data_range(ref)
    if peak == 0:
        raise ValueError("psnr: reference image is constant")
    mse = np.mean((x - ref) ** 2)
    if mse == 0:
        return math.inf
    return float(10 * np.log10(peak**2 / mse))


def _gauss_window():
    r = SSIM_WIN // 2
    t = np.arange(-r, r + 1)
    w = np.exp(-(t**2) / (2 * SSIM_SIGMA**2))
    return w / w.sum()


def _filt(img, w):
    out = correlate1d(img, w, axis=0, mode="reflect")
    return correlate1d(out, w, axis=1, mode="reflect")


def _prepare(x, ref):
    x, ref = _pair(x, ref)
    if x.ndim == 1:
        side = math.isqrt(x.size)
        if side * side != x.size:
            raise ValueError("ssim: flat input is not a square image")
        x, ref = x.reshape(side, side), ref.reshape(side, side)
    if x.ndim != 2 or min(x.shape) < SSIM_WIN:
        raise ValueError(f"ssim: images must be 2D and at least {SSIM_WIN}x{SSIM_WIN}")
    return x, ref


def ssim_terms(x, ref, peak: float | None = None):
    """Luminance and contrast-structure maps on the valid window positions.

    Only the second factor is invariant to adding a constant to both images.
    """
    x, ref = _prepare(x, ref)
    L = data_range(ref) if peak is None else float(peak)
    if L == 0:
        raise ValueError("ssim: reference image is constant")
    w = _gauss_window()
    mx, my = _filt(x, w), _filt(ref, w)
    vx = _filt(x * x, w) - mx * mx
    vy = _filt(ref * ref, w) - my * my
    cxy = _filt(x * ref, w) - mx * my
    C1, C2 = (K1 * L) ** 2, (K2 * L) ** 2
    lum = (2 * mx * my + C1) / (mx * mx + my * my + C1)
    cs = (2 * cxy + C2) / (vx + vy + C2)
    r = SSIM_WIN // 2
    return lum[r:-r, r:-r], cs[r:-r, r:-r]


def ssim(x, ref, peak: float | None = None) -> float:
    """Mean structural similarity over fully-contained 11x11 Gaussian windows."""
    lum, cs = ssim_terms(x, ref, peak)
    return float(np.mean(lum * cs))
