"""SSIM, PSNR and Dice on whole volumes (or slices)."""
from __future__ import annotations

import numpy as np
from scipy.ndimage import gaussian_filter

from .imaging import CLIP_MAX

SSIM_SIGMA = 1.5
SSIM_TRUNCATE = 3.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def _array(x) -> np.ndarray:
    return np.asarray(getattr(x, "voxels", getattr(x, "pixels", x)), dtype=np.float64)


def _pair(a, b):
    a, b = _array(a), _array(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def ssim_map(a, b, data_range: float | None = None, sigma: float = SSIM_SIGMA) -> np.ndarray:
    """Local SSIM with a Gaussian window (reflect padding, population statistics)."""
    a, b = _pair(a, b)
    if data_range is None:
        data_range = max(float(a.max()), float(b.max()))
    if data_range <= 0:
        data_range = 1.0
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2

    def blur(x):
        return gaussian_filter(x, sigma, mode="reflect", truncate=SSIM_TRUNCATE)

    mu_a, mu_b = blur(a), blur(b)
    var_a = blur(a * a) - mu_a ** 2
    var_b = blur(b * b) - mu_b ** 2
    cov = blur(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return num / den


def ssim(a, b, data_range: float | None = None) -> float:
    """Mean local SSIM over the full volume.

    Window: Gaussian, sigma 1.5; k1 = 0.01, k2 = 0.03; the dynamic range
    defaults to the larger of the two maxima.
    """
    return float(ssim_map(a, b, data_range).mean())


def psnr(a, b, peak: float = CLIP_MAX) -> float:
    """10 log10(peak^2 / MSE) in dB; ``inf`` for identical inputs."""
    if not peak > 0:
        raise ValueError("peak must be positive")
    a, b = _pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return float("inf")
    return 10.0 * np.log10(peak ** 2 / mse)


def dice(m1, m2) -> float:
    """2|m1 & m2| / (|m1| + |m2|); 1.0 when both masks are empty."""
    m1, m2 = np.asarray(m1), np.asarray(m2)
    if m1.shape != m2.shape:
        raise ValueError(f"shape mismatch: {m1.shape} vs {m2.shape}")
    for m in (m1, m2):
        if m.dtype != bool and not np.isin(m, (0, 1)).all():
            raise ValueError("dice expects binary masks")
    m1, m2 = m1.astype(bool), m2.astype(bool)
    total = int(m1.sum()) + int(m2.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((m1 & m2).sum()) / total
