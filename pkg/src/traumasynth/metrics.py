"""Image-quality and overlap metrics with the reporting conventions.

PSNR caps at 100 dB for identical inputs. SSIM uses an 11-tap Gaussian
window (sigma 1.5, K1 0.01, K2 0.03) averaged over positions where the
window fits entirely. The quality report scales l1/l2 by 1e2/1e3 on the
[0,1] intensity range; both-empty regions score Dice 1.0 by convention.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import DataError
from .phantom import LabelMap

PSNR_CAP_DB = 100.0


@dataclass
class QualityReport:
    psnr_db: float
    ssim_pct: float
    l1_err: float   # mean |a-b| in units of 1e-2
    l2_err: float   # mean (a-b)^2 in units of 1e-3

    def validate(self) -> "QualityReport":
        if self.psnr_db < 0:
            raise DataError("psnr must be >= 0")
        if not -100.0 <= self.ssim_pct <= 100.0:
            raise DataError("ssim percentage outside [-100, 100]")
        return self


def _check_shapes(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise DataError(f"shape mismatch: {a.shape} vs {b.shape}")


def psnr(a: np.ndarray, b: np.ndarray, data_range: float = 1.0) -> float:
    """10*log10(range^2 / MSE), capped for identical images."""
    _check_shapes(a, b)
    mse = float(np.mean((a.astype(np.float64) - b.astype(np.float64)) ** 2))
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(10.0 * np.log10(data_range ** 2 / mse), PSNR_CAP_DB)


def _gaussian_kernel(window: int, sigma: float) -> np.ndarray:
    half = (window - 1) / 2
    x = np.arange(window) - half
    g = np.exp(-(x ** 2) / (2 * sigma ** 2))
    k = np.outer(g, g)
    return k / k.sum()


def ssim(a: np.ndarray, b: np.ndarray, window: int = 11, sigma: float = 1.5,
         k1: float = 0.01, k2: float = 0.03, data_range: float = 1.0) -> float:
    """Mean local SSIM over the positions where the window fully fits."""
    _check_shapes(a, b)
    if a.ndim != 2:
        raise DataError("ssim expects 2D images")
    if window > min(a.shape):
        raise DataError(f"window {window} larger than image {a.shape}")
    a = a.astype(np.float64)
    b = b.astype(np.float64)
    kern = _gaussian_kernel(window, sigma)

    def filt(x):
        full = ndimage.correlate(x, kern, mode="constant")
        half = window // 2
        return full[half:x.shape[0] - half, half:x.shape[1] - half]

    mu_a, mu_b = filt(a), filt(b)
    var_a = filt(a * a) - mu_a ** 2
    var_b = filt(b * b) - mu_b ** 2
    cov = filt(a * b) - mu_a * mu_b
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def l1_err(a: np.ndarray, b: np.ndarray) -> float:
    """Mean absolute difference (unscaled)."""
    _check_shapes(a, b)
    return float(np.mean(np.abs(a.astype(np.float64) - b.astype(np.float64))))


def l2_err(a: np.ndarray, b: np.ndarray) -> float:
    """Mean squared difference (unscaled)."""
    _check_shapes(a, b)
    return float(np.mean((a.astype(np.float64) - b.astype(np.float64)) ** 2))


def dice_score_per_region(pred: LabelMap, gt: LabelMap,
                          regions: list[int] | None = None) -> dict[int, float]:
    """Hard Dice 2|P∩G| / (|P|+|G|) per region; both-empty scores 1.0."""
    if pred.classes != gt.classes:
        raise DataError(f"class alphabets differ: {pred.classes} vs {gt.classes}")
    _check_shapes(pred.data, gt.data)
    if regions is None:
        regions = list(range(1, gt.classes))
    out = {}
    for r in regions:
        p = pred.data == r
        g = gt.data == r
        denom = int(p.sum()) + int(g.sum())
        out[r] = 1.0 if denom == 0 else 2.0 * int((p & g).sum()) / denom
    return out


def evaluate_quality(a: np.ndarray, b: np.ndarray, mask: np.ndarray | None = None,
                     window: int = 11) -> QualityReport:
    """Whole-image quality report; optionally restricted to the mask's
    bounding box (grown to fit the SSIM window). SSIM of 3D inputs is the
    mean over axial slices.
    """
    _check_shapes(a, b)
    if mask is not None:
        if not mask.any():
            raise DataError("empty mask for in-mask quality evaluation")
        box = []
        for axis, w in enumerate(np.where(mask)):
            lo, hi = int(w.min()), int(w.max()) + 1
            grow = max(window - (hi - lo), 0)
            lo = max(lo - grow // 2, 0)
            hi = min(max(hi + (grow + 1) // 2, lo + window), mask.shape[axis])
            box.append(slice(lo, hi))
        a, b = a[tuple(box)], b[tuple(box)]
    if a.ndim == 2:
        s = ssim(a, b, window=window)
    elif a.ndim == 3:
        s = float(np.mean([ssim(a[:, :, k], b[:, :, k], window=window)
                           for k in range(a.shape[2])]))
    else:
        raise DataError(f"expected 2D or 3D input, got shape {a.shape}")
    return QualityReport(
        psnr_db=psnr(a, b),
        ssim_pct=100.0 * s,
        l1_err=l1_err(a, b) * 1e2,
        l2_err=l2_err(a, b) * 1e3,
    )
