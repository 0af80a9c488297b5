"""Procedural brain-like phantoms: labeled volumes plus simulated lesions.

Each phantom is a skull shell around smoothly deformed tissue with a
central ventricle cavity and a configurable number of ellipsoidal
regions, every structure derived deterministically from one seed.
Lesions are single connected blobs whose interior texture and local
deformation stand in for traumatic appearance.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .config import LesionParams, PhantomConfig
from .errors import ConfigurationError, DataError


@dataclass
class Volume:
    """Dense 3D intensity image with values in [0, 1]."""

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def validate(self) -> "Volume":
        if self.data.ndim != 3:
            raise DataError(f"volume must be 3D, got shape {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise DataError("volume contains non-finite values")
        if self.data.min() < 0 or self.data.max() > 1:
            raise DataError("volume intensities outside [0, 1]")
        return self

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape


@dataclass
class LabelMap:
    """Per-voxel region assignment over `classes` classes (0 = background)."""

    data: np.ndarray
    classes: int

    def validate(self) -> "LabelMap":
        if self.data.ndim != 3:
            raise DataError(f"label map must be 3D, got shape {self.data.shape}")
        if not np.issubdtype(self.data.dtype, np.integer):
            raise DataError("label map must be integer typed")
        if self.data.min() < 0 or self.data.max() >= self.classes:
            raise DataError(f"label values outside [0, {self.classes - 1}]")
        return self

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    def onehot(self) -> np.ndarray:
        """One-hot view, channels first, float32; channels sum to 1 everywhere."""
        eye = np.eye(self.classes, dtype=np.float32)
        return np.moveaxis(eye[self.data], -1, 0)


@dataclass
class LesionMask:
    """Binary trauma mask."""

    data: np.ndarray

    def validate(self) -> "LesionMask":
        vals = np.unique(self.data)
        if not np.all(np.isin(vals, (0, 1))):
            raise DataError("mask values must be in {0, 1}")
        return self

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    def volume_fraction(self) -> float:
        return float(self.data.sum()) / self.data.size


def _smooth_noise(rng: np.random.Generator, shape, sigma: float) -> np.ndarray:
    """Gaussian-filtered unit-variance noise field."""
    raw = rng.standard_normal(shape)
    sm = ndimage.gaussian_filter(raw, sigma=sigma)
    sd = sm.std()
    return sm / sd if sd > 0 else sm


def _coord_grid(shape) -> np.ndarray:
    """Voxel-index coordinates, shape (3, X, Y, Z)."""
    return np.stack(np.meshgrid(*[np.arange(s, dtype=np.float64) for s in shape], indexing="ij"))


def _ellipsoid_dist(coords: np.ndarray, center: np.ndarray, radii: np.ndarray) -> np.ndarray:
    """Normalized distance: <=1 inside the ellipsoid."""
    d = (coords - center.reshape(3, 1, 1, 1)) / radii.reshape(3, 1, 1, 1)
    return np.sqrt((d ** 2).sum(axis=0))


def generate_phantom(config: PhantomConfig) -> tuple[Volume, LabelMap]:
    """Generate a (Volume, LabelMap) pair, deterministic in config.seed."""
    config.validate()
    rng = np.random.default_rng(config.seed)
    shape = tuple(config.volume_shape)
    extent = np.array(shape, dtype=np.float64)
    center = (extent - 1) / 2
    coords = _coord_grid(shape)

    # per-subject smooth anatomy deformation: evaluate shapes at x + u(x)
    warp_sd = 0.03 * extent.min()
    disp = np.stack([_smooth_noise(rng, shape, sigma=extent.min() / 8) * warp_sd for _ in range(3)])
    wcoords = coords + disp

    brain_radii = extent * (0.40 + rng.uniform(-0.02, 0.02, size=3))
    skull_radii = brain_radii * 1.10
    brain_d = _ellipsoid_dist(wcoords, center, brain_radii)
    skull_d = _ellipsoid_dist(wcoords, center, skull_radii)
    brain = brain_d <= 1.0
    skull = (skull_d <= 1.0) & ~brain

    vent_radii = extent * 0.08 * config.ventricle_scale * (1 + rng.uniform(-0.1, 0.1, size=3))
    vent_center = center + rng.uniform(-0.02, 0.02, size=3) * extent
    ventricle = (_ellipsoid_dist(wcoords, vent_center, vent_radii) <= 1.0) & brain

    # region blobs on a ring between ventricle and skull
    n_regions = config.num_regions
    labels = np.zeros(shape, dtype=np.uint8)
    best = np.full(shape, np.inf)
    ring_r = 0.55 * brain_radii
    angles = np.linspace(0, 2 * np.pi, n_regions, endpoint=False) + rng.uniform(-0.2, 0.2, n_regions)
    for r in range(n_regions):
        phi = angles[r]
        zoff = rng.uniform(-0.25, 0.25) * brain_radii[2]
        c = center + np.array([np.cos(phi) * ring_r[0], np.sin(phi) * ring_r[1], zoff])
        radii = extent * (0.11 + rng.uniform(-0.015, 0.025, size=3))
        d = _ellipsoid_dist(wcoords, c, radii)
        inside = (d <= 1.0) & brain & ~ventricle
        take = inside & (d < best)
        labels[take] = r + 1
        best = np.where(take, d, best)

    # intensity model: dark background, bright skull, mid tissue, dark ventricle,
    # per-region offsets so regions are learnable from intensity
    intensity = np.full(shape, 0.07)
    intensity[brain] = 0.45
    intensity[skull] = 0.85
    intensity[ventricle] = 0.12
    for r in range(1, n_regions + 1):
        sign = 1.0 if r % 2 else -1.0
        intensity[labels == r] = 0.45 + sign * (0.10 + 0.02 * r)

    texture = _smooth_noise(rng, shape, sigma=extent.min() / 12) * 0.04
    noise = rng.standard_normal(shape) * config.intensity_noise_sd
    data = np.clip(intensity + texture * brain + noise, 0.0, 1.0).astype(np.float32)

    vol = Volume(data=data).validate()
    lab = LabelMap(data=labels, classes=n_regions + 1).validate()

    min_count = 0.001 * labels.size
    counts = np.bincount(labels.ravel(), minlength=n_regions + 1)
    if np.any(counts < min_count):
        raise DataError(f"degenerate phantom: class counts {counts.tolist()} below 0.1% floor")
    return vol, lab


def generate_lesion_mask(shape: tuple[int, int, int], params: LesionParams, seed: int) -> LesionMask:
    """Single 6-connected lesion blob with volume fraction inside params' band."""
    params.validate(shape)
    rng = np.random.default_rng(seed)
    extent = np.array(shape, dtype=np.float64)
    coords = _coord_grid(shape)

    center = extent * rng.uniform(0.32, 0.68, size=3)
    aspect = rng.uniform(0.6, 1.4, size=3)
    radii = extent.min() * 0.1 * aspect
    rough = _smooth_noise(rng, shape, sigma=extent.min() / 10) * params.boundary_roughness
    dist = _ellipsoid_dist(coords, center, radii) - rough

    total = dist.size
    flat = np.sort(dist.ravel())
    seed_idx = np.unravel_index(int(np.argmin(dist)), shape)
    struct = ndimage.generate_binary_structure(3, 1)  # 6-connectivity

    def comp_frac(k: int) -> float:
        mask = dist <= flat[k - 1]
        lab, _ = ndimage.label(mask, structure=struct)
        return float((lab == lab[seed_idx]).sum()) / total

    lo = max(int(params.min_frac * total), 1)
    hi = min(int(np.ceil(params.max_frac * total)) + 1, total)
    band = params.max_frac - params.min_frac
    target = rng.uniform(params.min_frac + 0.1 * band, params.max_frac - 0.1 * band)
    k_lo, k_hi = lo, hi
    k = min(max(int(target * total), k_lo), k_hi)
    for _ in range(40):
        f = comp_frac(k)
        if params.min_frac <= f <= params.max_frac:
            break
        if f < params.min_frac:
            k_lo = k + 1
        else:
            k_hi = k - 1
        if k_lo > k_hi:
            raise DataError("could not fit lesion fraction band; widen [min_frac, max_frac]")
        k = (k_lo + k_hi) // 2
    else:
        raise DataError("lesion fraction search did not converge")

    mask = dist <= flat[k - 1]
    lab, _ = ndimage.label(mask, structure=struct)
    out = (lab == lab[seed_idx]).astype(np.uint8)
    return LesionMask(data=out).validate()


def apply_lesion(volume: Volume, label: LabelMap, mask: LesionMask, seed: int,
                 params: LesionParams | None = None) -> tuple[Volume, LabelMap]:
    """Stamp lesion texture and local deformation into the masked area.

    Voxels outside the mask are returned untouched (exact equality).
    """
    if volume.shape != label.shape or volume.shape != mask.shape:
        raise DataError("volume/label/mask shapes disagree")
    if mask.data.sum() == 0:
        raise DataError("empty lesion mask")
    params = params or LesionParams()
    rng = np.random.default_rng(seed)
    shape = volume.shape
    m = mask.data.astype(bool)

    # local tissue deformation, displacements fade in from the mask boundary
    sigma = min(shape) / 10
    disp = np.stack([_smooth_noise(rng, shape, sigma) * params.deform_sd for _ in range(3)])
    fade = ndimage.gaussian_filter(m.astype(np.float64), sigma=2.0)
    coords = _coord_grid(shape) + disp * fade
    warped = ndimage.map_coordinates(volume.data.astype(np.float64), coords, order=1, mode="nearest")
    warped_lab = ndimage.map_coordinates(label.data, coords, order=0, mode="nearest")

    mult = 1.0 + 0.3 * _smooth_noise(rng, shape, sigma=min(shape) / 16)
    sign = 1.0 if rng.random() < 0.5 else -1.0
    base_mean = volume.data[m].mean()
    offset = sign * (params.min_contrast + 0.07)
    for _ in range(8):
        textured = np.clip(warped * mult + offset, 0.0, 1.0)
        if abs(textured[m].mean() - base_mean) >= params.min_contrast:
            break
        offset += sign * 0.05

    out_data = volume.data.copy()
    out_data[m] = textured[m].astype(np.float32)
    out_label = label.data.copy()
    out_label[m] = warped_lab[m]

    return (Volume(data=out_data, spacing=volume.spacing).validate(),
            LabelMap(data=out_label, classes=label.classes).validate())


@dataclass
class PhantomCase:
    """One subject: clean pair plus optional lesioned pair and mask."""

    subject_id: str
    volume: Volume
    label: LabelMap
    mask: LesionMask | None = None
    lesioned_volume: Volume | None = None
    lesioned_label: LabelMap | None = None
    meta: dict = field(default_factory=dict)


def generate_case(subject_id: str, config: PhantomConfig, lesion: LesionParams | None = None,
                  with_lesion: bool = True) -> PhantomCase:
    """Full subject generation: phantom plus one lesioned variant."""
    vol, lab = generate_phantom(config)
    case = PhantomCase(subject_id=subject_id, volume=vol, label=lab,
                       meta={"seed": config.seed, "num_regions": config.num_regions})
    if with_lesion:
        lesion = lesion or LesionParams()
        mask = generate_lesion_mask(vol.shape, lesion, seed=config.seed + 10_000)
        lvol, llab = apply_lesion(vol, lab, mask, seed=config.seed + 20_000, params=lesion)
        case.mask = mask
        case.lesioned_volume = lvol
        case.lesioned_label = llab
    return case
