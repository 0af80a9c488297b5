"""Fixed random-feature pyramid standing in for a pretrained perceptual
encoder. Four stride-2 conv levels, parameters drawn once from a seed
and frozen; random projections preserve distances well enough to serve
as a feature-space metric without any external weights."""

from __future__ import annotations

import torch
from torch import nn


class RandomFeaturePyramid(nn.Module):
    """Frozen conv pyramid; forward returns one feature map per level."""

    def __init__(self, in_channels: int = 3, widths=(16, 32, 64, 128), seed: int = 0):
        super().__init__()
        self.widths = tuple(widths)
        gen = torch.Generator().manual_seed(seed)
        convs = []
        w_in = in_channels
        for w in self.widths:
            conv = nn.Conv2d(w_in, w, kernel_size=3, stride=2, padding=1)
            with torch.no_grad():
                fan_in = w_in * 9
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen) / fan_in ** 0.5)
                conv.bias.zero_()
            convs.append(conv)
            w_in = w
        self.convs = nn.ModuleList(convs)
        for p in self.parameters():
            p.requires_grad_(False)

    @property
    def num_layers(self) -> int:
        return len(self.convs)

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        feats = []
        for conv in self.convs:
            x = torch.relu(conv(x))
            feats.append(x)
        return feats


def build_perceptual_extractor(seed: int = 0, in_channels: int = 3) -> RandomFeaturePyramid:
    return RandomFeaturePyramid(in_channels=in_channels, seed=seed)
