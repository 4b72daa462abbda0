"""PSNR and SSIM on float images in [0, 1]."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import correlate1d

PSNR_CAP = 99.0


def psnr(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    mse = np.mean((a - b) ** 2)
    if mse == 0:
        return PSNR_CAP
    return float(min(10.0 * np.log10(1.0 / mse), PSNR_CAP))


def _gaussian_window(size=11, sigma=1.5):
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x**2) / (2 * sigma**2))
    return g / g.sum()


def _filter_valid(img, win):
    out = correlate1d(img, win, axis=0, mode="constant")
    out = correlate1d(out, win, axis=1, mode="constant")
    r = len(win) // 2
    return out[r : img.shape[0] - r, r : img.shape[1] - r]


def ssim(a, b, win_size=11, sigma=1.5, k1=0.01, k2=0.03) -> float:
    """Gaussian-window SSIM on the channel-mean gray image, averaged over valid windows."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if a.ndim == 3:
        a = a.mean(axis=-1)
        b = b.mean(axis=-1)
    c1, c2 = k1**2, k2**2
    if min(a.shape) < win_size:
        # too small for one window: global statistics
        mu_a, mu_b = a.mean(), b.mean()
        va, vb = a.var(), b.var()
        cov = np.mean((a - mu_a) * (b - mu_b))
        return float(((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a**2 + mu_b**2 + c1) * (va + vb + c2)))
    win = _gaussian_window(win_size, sigma)
    mu_a = _filter_valid(a, win)
    mu_b = _filter_valid(b, win)
    va = _filter_valid(a * a, win) - mu_a**2
    vb = _filter_valid(b * b, win) - mu_b**2
    cov = _filter_valid(a * b, win) - mu_a * mu_b
    smap = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a**2 + mu_b**2 + c1) * (va + vb + c2))
    return float(smap.mean())


@dataclass
class MetricReport:
    per_image: dict = field(default_factory=dict)  # image id -> {"psnr", "ssim", ...}

    def add(self, image_id, pred, target, **extra) -> None:
        self.per_image[int(image_id)] = {"psnr": psnr(pred, target), "ssim": ssim(pred, target), **extra}

    @property
    def mean_psnr(self) -> float:
        return float(np.mean([v["psnr"] for v in self.per_image.values()])) if self.per_image else float("nan")

    @property
    def mean_ssim(self) -> float:
        return float(np.mean([v["ssim"] for v in self.per_image.values()])) if self.per_image else float("nan")

    def to_dict(self) -> dict:
        return {
            "count": len(self.per_image),
            "mean_psnr": self.mean_psnr,
            "mean_ssim": self.mean_ssim,
            "per_image": {str(k): v for k, v in sorted(self.per_image.items())},
        }
