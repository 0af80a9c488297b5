"""Configuration dataclasses and the desk/fidelity profiles.

Defaults mirror the published training recipe (Adam betas 0.5/0.999,
generator lr 5e-4, discriminator lr 2e-4, cosine annealing, loss weights
1.0/1.0/1.0/0.05/3.0 for stage 1 and 1.0/1.0/1.0/3.0 for stage 2).
The desk profile shrinks resolutions and widths so the whole pipeline
runs on a CPU in minutes.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

from .errors import ConfigurationError


@dataclass
class PhantomConfig:
    volume_shape: tuple[int, int, int] = (64, 64, 64)
    num_regions: int = 5
    intensity_noise_sd: float = 0.02
    ventricle_scale: float = 1.0
    seed: int = 0

    def validate(self) -> "PhantomConfig":
        if len(self.volume_shape) != 3 or any(s < 32 for s in self.volume_shape):
            raise ConfigurationError(f"volume_shape must be 3 dims each >= 32, got {self.volume_shape}")
        if not 2 <= self.num_regions <= 17:
            raise ConfigurationError(f"num_regions must be in [2, 17], got {self.num_regions}")
        if not 0.5 <= self.ventricle_scale <= 2.0:
            raise ConfigurationError(f"ventricle_scale must be in [0.5, 2.0], got {self.ventricle_scale}")
        if self.intensity_noise_sd < 0:
            raise ConfigurationError("intensity_noise_sd must be >= 0")
        return self


@dataclass
class LesionParams:
    min_frac: float = 0.005
    max_frac: float = 0.03
    boundary_roughness: float = 0.25
    min_contrast: float = 0.08
    deform_sd: float = 1.5

    def validate(self, shape: tuple[int, ...] | None = None) -> "LesionParams":
        if not 0 < self.min_frac < self.max_frac < 1:
            raise ConfigurationError(
                f"need 0 < min_frac < max_frac < 1, got [{self.min_frac}, {self.max_frac}]"
            )
        if shape is not None:
            total = 1
            for s in shape:
                total *= s
            if (self.max_frac - self.min_frac) * total < 1.0:
                raise ConfigurationError("fraction band narrower than one voxel at this shape")
        return self


@dataclass
class LossWeights:
    """Linear-combination coefficients of the two training objectives."""

    # stage 1 (image inpainting)
    g1: float = 1.0
    d1: float = 1.0
    rec: float = 1.0
    prec: float = 0.05
    fm1: float = 3.0
    # stage 2 (label reconstruction)
    g2: float = 1.0
    d2: float = 1.0
    dice: float = 1.0
    fm2: float = 3.0

    def validate(self) -> "LossWeights":
        for f in dataclasses.fields(self):
            if getattr(self, f.name) < 0:
                raise ConfigurationError(f"loss weight {f.name} must be >= 0")
        return self


@dataclass
class AblationFlags:
    no_c2f: bool = False      # drop the coarse branch / its addition
    no_sketch: bool = False   # zero the sketch channel
    no_pbl: bool = False      # perceptual + feature-matching weights -> 0
    no_iid: bool = False      # freeze stage-1 discriminators, adversarial weight -> 0


@dataclass
class G1Config:
    base_width: int = 16
    down_steps: int = 2
    dilation_rates: tuple[int, ...] = (2, 4, 8, 16)
    in_channels: int = 5      # 3-slice stack + mask + sketch
    out_channels: int = 3
    use_coarse: bool = True

    def validate(self) -> "G1Config":
        if self.down_steps < 1:
            raise ConfigurationError("down_steps must be >= 1")
        if not self.dilation_rates or list(self.dilation_rates) != sorted(set(self.dilation_rates)):
            raise ConfigurationError("dilation_rates must be nonempty and increasing")
        return self


@dataclass
class G2Config:
    base_width: int = 16
    depth: int = 3
    num_classes: int = 6
    image_channels: int = 3

    @property
    def in_channels(self) -> int:
        return self.num_classes + self.image_channels

    def validate(self) -> "G2Config":
        if self.depth < 2:
            raise ConfigurationError("depth must be >= 2")
        return self


@dataclass
class DiscriminatorConfig:
    in_channels: int = 5
    base_width: int = 16
    num_scales: int = 3
    num_layers: int = 4
    spectral_norm: bool = True


@dataclass
class TrainConfig:
    lr_g: float = 5e-4
    lr_d: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    batch_size: int = 8
    steps: int = 300
    seed: int = 0
    num_threads: int = 0      # 0 = leave torch default
    weights: LossWeights = field(default_factory=LossWeights)
    ablation: AblationFlags = field(default_factory=AblationFlags)

    def validate(self) -> "TrainConfig":
        if self.lr_g <= 0 or self.lr_d <= 0:
            raise ConfigurationError("learning rates must be > 0")
        if self.batch_size < 1 or self.steps < 0:
            raise ConfigurationError("batch_size must be >= 1 and steps >= 0")
        self.weights.validate()
        return self


@dataclass
class RegistrationConfig:
    levels: int = 2
    iters: tuple[int, ...] = (120, 60)
    lr: float = 0.4           # max voxel motion per accepted step
    lambda_bend: float = 0.1
    precond_sigma: float = 3.0
    patience: int = 25        # objective-increasing steps before giving up

    def validate(self) -> "RegistrationConfig":
        if self.levels < 1 or len(self.iters) != self.levels:
            raise ConfigurationError("iters must list one entry per level")
        return self


@dataclass
class ScreenThresholds:
    min_inmask_std: float = 0.01
    min_class_retention: float = 0.5
    min_region_size: int = 4          # components below this count as fragments
    max_fragment_frac: float = 0.10   # tolerated share of in-mask voxels in fragments


SEG_REGIMES = ("baseline", "spatial", "intensity", "composed", "mixup", "cutmix", "tbigan")


@dataclass
class SegConfig:
    dims: str = "2d"                  # "2d" or "3d"
    regime: str = "baseline"
    optimizer: str = "novograd"       # "novograd" or "adam"
    lr0: float = 1e-3
    epochs: int = 2
    batch_size: int = 8
    patch_size: tuple[int, int, int] = (32, 32, 32)
    base_width: int = 8
    depth: int = 3
    num_classes: int = 6
    folds: int = 5
    fold: int = 0
    seed: int = 0
    mixup_alpha: float = 0.2
    slice_range: tuple[int, int] | None = None   # restrict 2D training to a slab

    def validate(self) -> "SegConfig":
        if self.dims not in ("2d", "3d"):
            raise ConfigurationError(f"dims must be 2d or 3d, got {self.dims}")
        if self.regime not in SEG_REGIMES:
            raise ConfigurationError(f"regime must be one of {SEG_REGIMES}, got {self.regime}")
        if self.optimizer not in ("novograd", "adam"):
            raise ConfigurationError(f"optimizer must be novograd or adam, got {self.optimizer}")
        if not 0 <= self.fold < self.folds:
            raise ConfigurationError("fold index out of range")
        return self


@dataclass
class Profile:
    """Resolution/width bundle selecting desk-scale or fidelity runs."""

    name: str
    volume_shape: tuple[int, int, int]
    num_regions: int
    slice_hw: tuple[int, int] | None   # None = keep native slice size
    g1_width: int
    g2_width: int
    d_width: int
    batch_size: int

    @property
    def num_classes(self) -> int:
        return self.num_regions + 1


DESK = Profile(
    name="desk",
    volume_shape=(64, 64, 64),
    num_regions=5,
    slice_hw=None,
    g1_width=16,
    g2_width=16,
    d_width=16,
    batch_size=8,
)

FIDELITY = Profile(
    name="fidelity",
    volume_shape=(182, 218, 182),
    num_regions=17,
    slice_hw=(176, 224),
    g1_width=32,
    g2_width=32,
    d_width=32,
    batch_size=48,
)

PROFILES = {"desk": DESK, "fidelity": FIDELITY}


def get_profile(name: str) -> Profile:
    try:
        return PROFILES[name]
    except KeyError:
        raise ConfigurationError(f"unknown profile {name!r}; choose from {sorted(PROFILES)}") from None
