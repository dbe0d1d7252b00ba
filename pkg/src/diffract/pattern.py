"""Pattern normalization and reference image-quality metrics.

A pattern is a plain 2-D float ``numpy`` array. Metrics assume a data
range of 1.0, so callers bring both images into [0, 1] first.
"""

from dataclasses import dataclass

import numpy as np
from scipy import signal

from .errors import InvalidInputError

#: Returned by :func:`psnr` for (numerically) identical images.
PSNR_INF = float("inf")

SSIM_WIN = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def as_pattern(p, name="pattern"):
    a = np.asarray(p, dtype=np.float64)
    if a.ndim != 2:
        raise InvalidInputError(f"{name} must be 2-D, got shape {a.shape}")
    if a.size < 2:
        raise InvalidInputError(f"{name} needs at least 2 pixels")
    if not np.all(np.isfinite(a)):
        raise InvalidInputError(f"{name} contains non-finite pixels")
    return a


def _same_shape(a, b):
    if a.shape != b.shape:
        raise InvalidInputError(f"shape mismatch: {a.shape} vs {b.shape}")


def zscore_normalize(p):
    """Shift to zero mean and scale to unit standard deviation.

    Near-constant input (std < 1e-8) maps to all zeros instead of NaN.
    """
    a = as_pattern(p)
    mu = a.mean()
    sd = a.std()
    if sd < 1e-8:
        return np.zeros_like(a)
    return (a - mu) / sd


def minmax01_normalize(p):
    """Affinely rescale to [0, 1]; constant input maps to 0.5."""
    a = as_pattern(p)
    lo, hi = a.min(), a.max()
    if hi - lo <= 0:
        return np.full_like(a, 0.5)
    return (a - lo) / (hi - lo)


def psnr(a, b):
    """Peak signal-to-noise ratio in dB for data range 1.0.

    Returns :data:`PSNR_INF` when the mean squared error is below 1e-12.
    """
    a = as_pattern(a, "a")
    b = as_pattern(b, "b")
    _same_shape(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse < 1e-12:
        return PSNR_INF
    return float(10.0 * np.log10(1.0 / mse))


def gaussian_window(size=SSIM_WIN, sigma=SSIM_SIGMA):
    r = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(r**2) / (2 * sigma**2))
    g /= g.sum()
    return np.outer(g, g)


def ssim_map(a, b):
    """Local SSIM values over every fully-contained 11x11 window."""
    a = as_pattern(a, "a")
    b = as_pattern(b, "b")
    _same_shape(a, b)
    if min(a.shape) < SSIM_WIN:
        raise InvalidInputError(
            f"SSIM needs images of at least {SSIM_WIN}x{SSIM_WIN}, got {a.shape}"
        )
    w = gaussian_window()

    def filt(z):
        return signal.correlate2d(z, w, mode="valid")

    c1 = SSIM_K1**2
    c2 = SSIM_K2**2
    mu_a = filt(a)
    mu_b = filt(b)
    var_a = filt(a * a) - mu_a**2
    var_b = filt(b * b) - mu_b**2
    cov = filt(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return num / den


def ssim(a, b):
    """Mean structural similarity, Gaussian window 11x11 / sigma 1.5."""
    return float(np.mean(ssim_map(a, b)))


def metric_report(restored, reference):
    """PSNR and SSIM of ``restored`` against ``reference`` after clipping to [0, 1]."""
    r = np.clip(as_pattern(restored), 0.0, 1.0)
    g = np.clip(as_pattern(reference), 0.0, 1.0)
    return MetricReport(psnr=psnr(r, g), ssim=ssim(r, g))


@dataclass(frozen=True)
class MetricReport:
    psnr: float
    ssim: float
