"""Baseline augmentations for the segmentation benchmark.

Spatial transforms apply the same affine + grid distortion to image
(linear) and label (nearest); intensity transforms touch the image only.
MixUp mixes images and one-hot labels with one Beta-drawn coefficient;
CutMix pastes a random box from one pair into the other for both image
and label.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import DataError


@dataclass
class SpatialParams:
    rotate_deg: float = 0.0     # in-plane, about the array center
    scale: float = 1.0
    shift: tuple = (0.0, 0.0)   # first two axes, voxels
    distort_sd: float = 0.0     # smooth grid distortion amplitude, voxels

    @classmethod
    def sample(cls, rng: np.random.Generator) -> "SpatialParams":
        return cls(
            rotate_deg=float(rng.uniform(-10.0, 10.0)),
            scale=float(rng.uniform(0.9, 1.1)),
            shift=tuple(rng.uniform(-3.0, 3.0, size=2)),
            distort_sd=float(rng.uniform(0.0, 1.5)),
        )

    def is_identity(self) -> bool:
        return (self.rotate_deg == 0.0 and self.scale == 1.0
                and tuple(self.shift) == (0.0, 0.0) and self.distort_sd == 0.0)


def _warp_coords(shape, params: SpatialParams, rng: np.random.Generator) -> np.ndarray:
    grid = np.stack(np.meshgrid(*[np.arange(s, dtype=np.float64) for s in shape], indexing="ij"))
    center = (np.array(shape, dtype=np.float64) - 1) / 2
    rel = grid - center.reshape((-1,) + (1,) * len(shape))
    theta = np.deg2rad(params.rotate_deg)
    c, s = np.cos(theta), np.sin(theta)
    out = rel.copy()
    # backward map: rotate by -theta, divide by scale
    out[0] = (c * rel[0] + s * rel[1]) / params.scale
    out[1] = (-s * rel[0] + c * rel[1]) / params.scale
    if len(shape) == 3:
        out[2] = rel[2] / params.scale
    coords = out + center.reshape((-1,) + (1,) * len(shape))
    coords[0] -= params.shift[0]
    coords[1] -= params.shift[1]
    if params.distort_sd > 0:
        for ax in range(len(shape)):
            noise = rng.standard_normal(shape)
            coords[ax] += ndimage.gaussian_filter(noise, sigma=min(shape) / 8) * params.distort_sd * 4
    return coords


def spatial_augment(image: np.ndarray, label: np.ndarray, seed: int,
                    params: SpatialParams | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Random affine plus grid distortion, identical for image and label."""
    if image.shape != label.shape:
        raise DataError(f"image/label shapes disagree: {image.shape} vs {label.shape}")
    rng = np.random.default_rng(seed)
    params = params if params is not None else SpatialParams.sample(rng)
    if params.is_identity():
        return image.copy(), label.copy()
    coords = _warp_coords(image.shape, params, rng)
    img_out = ndimage.map_coordinates(image.astype(np.float64), coords, order=1, mode="nearest")
    lab_out = ndimage.map_coordinates(label, coords, order=0, mode="nearest")
    return img_out.astype(image.dtype), lab_out.astype(label.dtype)


def intensity_augment(image: np.ndarray, seed: int,
                      brightness: float | None = None,
                      contrast: float | None = None) -> np.ndarray:
    """Random brightness shift and contrast scaling, clipped to [0, 1]."""
    rng = np.random.default_rng(seed)
    if brightness is None:
        brightness = float(rng.uniform(-0.1, 0.1))
    if contrast is None:
        contrast = float(rng.uniform(0.9, 1.1))
    out = (image.astype(np.float64) - 0.5) * contrast + 0.5 + brightness
    return np.clip(out, 0.0, 1.0).astype(image.dtype)


def mixup(pair_a: tuple[np.ndarray, np.ndarray], pair_b: tuple[np.ndarray, np.ndarray],
          alpha: float, seed: int,
          lam: float | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Convex combination of images and one-hot labels with lambda ~ Beta(alpha, alpha)."""
    img_a, lab_a = pair_a
    img_b, lab_b = pair_b
    if img_a.shape != img_b.shape or lab_a.shape != lab_b.shape:
        raise DataError("mixup pairs must share shapes")
    if lam is None:
        lam = float(np.random.default_rng(seed).beta(alpha, alpha))
    image = lam * img_a.astype(np.float64) + (1 - lam) * img_b.astype(np.float64)
    label = lam * lab_a.astype(np.float64) + (1 - lam) * lab_b.astype(np.float64)
    return image.astype(img_a.dtype), label.astype(np.float32)


def cutmix_box(shape, seed: int, lam: float | None = None) -> tuple[slice, ...]:
    """Random box whose volume fraction is 1 - lambda, lambda ~ U(0, 1)."""
    rng = np.random.default_rng(seed)
    if lam is None:
        lam = float(rng.uniform(0.0, 1.0))
    frac = (1.0 - lam) ** (1.0 / len(shape))
    box = []
    for s in shape:
        ext = int(round(s * frac))
        if ext <= 0:
            box.append(slice(0, 0))
            continue
        center = int(rng.integers(s))
        lo = np.clip(center - ext // 2, 0, s - 1)
        hi = min(lo + ext, s)
        box.append(slice(int(lo), int(hi)))
    return tuple(box)


def cutmix(pair_a: tuple[np.ndarray, np.ndarray], pair_b: tuple[np.ndarray, np.ndarray],
           seed: int, box: tuple[slice, ...] | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Paste a random box of pair_b into pair_a, image and label together."""
    img_a, lab_a = pair_a
    img_b, lab_b = pair_b
    if img_a.shape != img_b.shape or lab_a.shape != lab_b.shape:
        raise DataError("cutmix pairs must share shapes")
    if box is None:
        box = cutmix_box(img_a.shape, seed)
    image = img_a.copy()
    label = lab_a.copy()
    image[box] = img_b[box]
    label[box] = lab_b[box]
    return image, label
