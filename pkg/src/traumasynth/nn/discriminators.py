"""Multi-scale conditional patch discriminators.

Three discriminators per set, each seeing the input downsampled by a
further factor of two. Every conv layer is spectrally normalized;
hidden layers add instance norm and leaky ReLU. Scores are raw patch
maps (no sigmoid) for the least-squares objective, and the
post-activation hidden feature maps are exposed for feature matching.
"""

from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn

from ..config import DiscriminatorConfig
from .blocks import INSTANCE_NORM_EPS, SNConv2d

FeatureStack = list  # per scale: list of per-layer activation tensors


class ScaleDiscriminator(nn.Module):
    def __init__(self, in_channels: int, base_width: int, num_layers: int, use_sn: bool):
        super().__init__()
        conv = SNConv2d if use_sn else nn.Conv2d
        layers = []
        w_in = in_channels
        w = base_width
        for _ in range(num_layers):
            layers.append(nn.ModuleDict({
                "conv": conv(w_in, w, kernel_size=4, stride=2, padding=1),
                "norm": nn.InstanceNorm2d(w, affine=True, eps=INSTANCE_NORM_EPS),
            }))
            w_in = w
            w = min(w * 2, base_width * 8)
        self.layers = nn.ModuleList(layers)
        self.head = conv(w_in, 1, kernel_size=3, stride=1, padding=1)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, list[torch.Tensor]]:
        feats = []
        for layer in self.layers:
            x = layer["conv"](x)
            if x.shape[-2] * x.shape[-1] > 1:  # instance stats undefined on 1x1 maps
                x = layer["norm"](x)
            x = F.leaky_relu(x, 0.2)
            feats.append(x)
        return self.head(x), feats


class MultiScaleDiscriminator(nn.Module):
    """K=3 patch discriminators over a dyadic input pyramid."""

    def __init__(self, config: DiscriminatorConfig):
        super().__init__()
        self.config = config
        self.scales = nn.ModuleList([
            ScaleDiscriminator(config.in_channels, config.base_width,
                               config.num_layers, config.spectral_norm)
            for _ in range(config.num_scales)
        ])

    def forward(self, x: torch.Tensor) -> tuple[list[torch.Tensor], FeatureStack]:
        scores, features = [], []
        cur = x
        for k, disc in enumerate(self.scales):
            if k > 0:
                cur = F.avg_pool2d(cur, kernel_size=2, stride=2)
            s, f = disc(cur)
            scores.append(s)
            features.append(f)
        return scores, features


def discriminate_image(d1: MultiScaleDiscriminator, image: torch.Tensor,
                       mask: torch.Tensor, sketch: torch.Tensor):
    """Judge an image conditioned on (mask, sketch)."""
    return d1(torch.cat([image, mask, sketch], dim=1))


def discriminate_label(d2: MultiScaleDiscriminator, label_onehot: torch.Tensor,
                       image: torch.Tensor, mask: torch.Tensor):
    """Judge a label map paired with its image, conditioned on the mask."""
    return d2(torch.cat([label_onehot, image, mask], dim=1))
