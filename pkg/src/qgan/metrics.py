"""PSNR and SSIM for color images stored as (3, H, W) arrays."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

PSNR_CAP = 100.0
SSIM_WIN = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def _as_planes(a):
    a = np.asarray(a, dtype=np.float64)
    return a[None] if a.ndim == 2 else a


def _check_pair(a, b):
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")


def psnr(a, b, max_val=255.0, region=None) -> float:
    """10 log10(max^2 / MSE) with the MSE pooled over channels; inf for identical images."""
    a = _as_planes(a)
    b = _as_planes(b)
    _check_pair(a, b)
    d = (a - b) ** 2
    if region is not None:
        sel = np.asarray(region, dtype=bool)
        d = d[:, sel]
    mse = float(np.mean(d))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(max_val * max_val / mse)


def gaussian_window(size=SSIM_WIN, sigma=SSIM_SIGMA):
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return g / g.sum()


def _filter(x, g):
    r = (g.size - 1) // 2
    y = ndimage.correlate1d(x, g, axis=0, mode="reflect")
    y = ndimage.correlate1d(y, g, axis=1, mode="reflect")
    return y[r:-r or None, r:-r or None]


def ssim_map(a, b, data_range=255.0):
    """Local SSIM of 2-d arrays over the fully-covered (valid) window positions."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _check_pair(a, b)
    if min(a.shape) < SSIM_WIN:
        raise ValueError(f"SSIM needs images of at least {SSIM_WIN}x{SSIM_WIN}, got {a.shape}")
    g = gaussian_window()
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    mu_a, mu_b = _filter(a, g), _filter(b, g)
    saa = _filter(a * a, g) - mu_a * mu_a
    sbb = _filter(b * b, g) - mu_b * mu_b
    sab = _filter(a * b, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * sab + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (saa + sbb + c2)
    return num / den


def ssim(a, b, data_range=255.0, region=None) -> float:
    """Mean local SSIM (Gaussian window 11, sigma 1.5), averaged over channels.

    ``region`` restricts the mean to window centers inside a boolean (H, W) mask.
    """
    a = _as_planes(a)
    b = _as_planes(b)
    _check_pair(a, b)
    r = (SSIM_WIN - 1) // 2
    vals = []
    for c in range(a.shape[0]):
        m = ssim_map(a[c], b[c], data_range)
        if region is not None:
            sel = np.asarray(region, dtype=bool)[r:-r, r:-r]
            m = m[sel] if sel.any() else m
        vals.append(float(np.mean(m)))
    return float(np.mean(vals))


@dataclass(frozen=True)
class MetricReport:
    psnr: float
    ssim: float

    @property
    def psnr_capped(self) -> float:
        return min(self.psnr, PSNR_CAP)


def report(img, truth, region=None) -> MetricReport:
    """Metrics on the 8-bit lattice the images are saved to."""
    from .dataio import to_uint8

    a = to_uint8(img).transpose(2, 0, 1).astype(np.float64)
    b = to_uint8(truth).transpose(2, 0, 1).astype(np.float64)
    return MetricReport(psnr(a, b, 255.0, region), ssim(a, b, 255.0, region))
