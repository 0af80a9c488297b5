"""Between stored volumes and network inputs: masking, sketches, 2.5D stacks.

Slice stacks follow the 2.5D convention: each axial slice that touches
the lesion mask becomes a 3-channel image of its neighborhood (neighbors
clamped at the volume boundary), and reassembly takes the middle channel
back, except at the first/last slice where the corresponding channel is
used. Sketches are gradient-magnitude edges with double-threshold
hysteresis, restricted to the lesion mask.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import DataError
from .phantom import LesionMask, Volume

AXIAL = 2  # slice axis


@dataclass
class SliceStack:
    """3-channel axial neighborhood around one slice, values in [0, 1]."""

    data: np.ndarray
    source_index: int

    def validate(self) -> "SliceStack":
        if self.data.ndim != 3 or self.data.shape[0] != 3:
            raise DataError(f"stack must be (3, H, W), got {self.data.shape}")
        if self.data.min() < 0 or self.data.max() > 1:
            raise DataError("stack values outside [0, 1]")
        return self


@dataclass
class Sketch:
    """Binary in-mask edge map aligned with a slice."""

    data: np.ndarray

    def validate(self) -> "Sketch":
        if not np.all(np.isin(np.unique(self.data), (0, 1))):
            raise DataError("sketch values must be in {0, 1}")
        return self


@dataclass
class StackItem:
    stack: SliceStack
    mask: np.ndarray      # (H, W) uint8
    sketch: Sketch


def hadamard_mask(image: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Elementwise image * (1 - mask): zero where the mask is set."""
    if image.shape != mask.shape:
        raise DataError(f"shape mismatch: {image.shape} vs {mask.shape}")
    return image * (1 - mask.astype(image.dtype))


def histogram_equalize(volume: Volume) -> Volume:
    """Remap intensities through the empirical CDF; rank order preserved."""
    flat = volume.data.ravel()
    uniq, inv, counts = np.unique(flat, return_inverse=True, return_counts=True)
    cdf = np.cumsum(counts) / flat.size
    out = cdf[inv].reshape(volume.data.shape).astype(np.float32)
    return Volume(data=out, spacing=volume.spacing)


def _gradient_magnitude(slice2d: np.ndarray) -> np.ndarray:
    gx = ndimage.sobel(slice2d.astype(np.float64), axis=0, mode="nearest")
    gy = ndimage.sobel(slice2d.astype(np.float64), axis=1, mode="nearest")
    return np.sqrt(gx ** 2 + gy ** 2)


def _hysteresis(gmag: np.ndarray, high: float, low: float) -> np.ndarray:
    """Keep weak edges only when 8-connected to a strong edge."""
    if high <= 0:  # flat image: no edges at all
        return np.zeros_like(gmag, dtype=np.uint8)
    strong = gmag >= high
    weak = gmag >= low
    if not strong.any():
        return np.zeros_like(gmag, dtype=np.uint8)
    lab, _ = ndimage.label(weak, structure=np.ones((3, 3), dtype=int))
    keep = np.unique(lab[strong])
    return np.isin(lab, keep[keep > 0]).astype(np.uint8)


def sketch_thresholds(volume_data: np.ndarray) -> tuple[float, float]:
    """Volume-wide hysteresis thresholds: high = 90th percentile, low = 0.4 high."""
    mags = [_gradient_magnitude(volume_data[:, :, k]) for k in range(volume_data.shape[AXIAL])]
    high = float(np.percentile(np.stack(mags), 90))
    return high, 0.4 * high


def extract_sketch(stack: SliceStack, mask: np.ndarray,
                   thresholds: tuple[float, float] | None = None) -> Sketch:
    """Edge map of the stack's center slice, restricted to the mask."""
    center = stack.data[1]
    if center.shape != mask.shape:
        raise DataError(f"stack/mask shape mismatch: {center.shape} vs {mask.shape}")
    gmag = _gradient_magnitude(center)
    if thresholds is None:
        high = float(np.percentile(gmag, 90))
        low = 0.4 * high
    else:
        high, low = thresholds
    edges = _hysteresis(gmag, high, low)
    return Sketch(data=(edges * (mask > 0)).astype(np.uint8)).validate()


def sketch_volume(volume: Volume, mask: LesionMask | None = None) -> np.ndarray:
    """Per-slice edge volume with volume-wide thresholds; in-mask when given."""
    data = volume.data
    high, low = sketch_thresholds(data)
    out = np.zeros(data.shape, dtype=np.uint8)
    for k in range(data.shape[AXIAL]):
        out[:, :, k] = _hysteresis(_gradient_magnitude(data[:, :, k]), high, low)
    if mask is not None:
        out &= (mask.data > 0).astype(np.uint8)
    return out


class CenterResize:
    """Center crop/pad of 2D slices to a fixed target, with exact inverse."""

    def __init__(self, target_hw: tuple[int, int]):
        self.target_hw = tuple(target_hw)

    def _offsets(self, size: int, target: int) -> tuple[int, int]:
        # (source offset, destination offset) for the copied span
        if size >= target:
            return (size - target) // 2, 0
        return 0, (target - size) // 2

    def forward(self, sl: np.ndarray) -> np.ndarray:
        th, tw = self.target_hw
        h, w = sl.shape
        oh, dh = self._offsets(h, th)
        ow, dw = self._offsets(w, tw)
        ch, cw = min(h, th), min(w, tw)
        out = np.zeros((th, tw), dtype=sl.dtype)
        out[dh:dh + ch, dw:dw + cw] = sl[oh:oh + ch, ow:ow + cw]
        return out

    def inverse(self, out: np.ndarray, original: np.ndarray) -> np.ndarray:
        """Paste the resized content back; uncovered borders keep `original`."""
        h, w = original.shape
        th, tw = self.target_hw
        oh, dh = self._offsets(h, th)
        ow, dw = self._offsets(w, tw)
        ch, cw = min(h, th), min(w, tw)
        res = original.copy()
        res[oh:oh + ch, ow:ow + cw] = out[dh:dh + ch, dw:dw + cw]
        return res


def make_slice_stacks(volume: Volume, mask: LesionMask,
                      resize: CenterResize | None = None,
                      sketch3d: np.ndarray | None = None) -> list[StackItem]:
    """One 3-channel stack per axial slice intersecting the mask.

    The sketch defaults to the volume's own in-mask edges; synthesis
    passes the bank-sampled sketch instead.
    """
    if volume.shape != mask.shape:
        raise DataError("volume/mask shapes disagree")
    data, mdata = volume.data, mask.data
    nz = data.shape[AXIAL]
    if sketch3d is None:
        sketch3d = sketch_volume(volume, mask)
    elif sketch3d.shape != volume.shape:
        raise DataError("provided sketch volume shape disagrees")
    items: list[StackItem] = []
    for k in range(nz):
        msl = mdata[:, :, k]
        if not msl.any():
            continue
        idx = [max(k - 1, 0), k, min(k + 1, nz - 1)]
        stack = np.stack([data[:, :, j] for j in idx]).astype(np.float32)
        sk = sketch3d[:, :, k]
        if resize is not None:
            stack = np.stack([resize.forward(c) for c in stack])
            msl = resize.forward(msl)
            sk = resize.forward(sk)
        items.append(StackItem(stack=SliceStack(data=stack, source_index=k).validate(),
                               mask=msl.astype(np.uint8),
                               sketch=Sketch(data=sk.astype(np.uint8)).validate()))
    return items


def reassemble_volume(outputs: dict[int, np.ndarray], volume: Volume, mask: LesionMask,
                      resize: CenterResize | None = None) -> Volume:
    """Replace mask-intersecting slices with per-stack outputs.

    `outputs` maps center slice index to either the (3, H, W) stack output
    or a single (H, W) slice. For stack outputs the middle channel is
    taken, except at the first/last volume slice where the corresponding
    edge channel is used.
    """
    data, mdata = volume.data, mask.data
    nz = data.shape[AXIAL]
    out = data.copy()
    for k in range(nz):
        if not mdata[:, :, k].any():
            continue
        if k not in outputs:
            raise DataError(f"missing stack output for mask slice {k}")
        val = outputs[k]
        if val.ndim == 3:
            chan = 0 if k == 0 else (2 if k == nz - 1 else 1)
            sl = val[chan]
        else:
            sl = val
        if resize is not None:
            sl = resize.inverse(sl, data[:, :, k])
        out[:, :, k] = sl.astype(out.dtype)
    return Volume(data=out, spacing=volume.spacing)
