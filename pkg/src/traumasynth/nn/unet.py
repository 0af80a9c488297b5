"""Segmentation U-Nets: 2D (batch norm + ReLU) and 3D (instance norm +
leaky ReLU), returning logits over the class channel."""

from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn


def _block2d(cin, cout):
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, padding=1), nn.BatchNorm2d(cout), nn.ReLU(inplace=True),
        nn.Conv2d(cout, cout, 3, padding=1), nn.BatchNorm2d(cout), nn.ReLU(inplace=True),
    )


def _block3d(cin, cout):
    return nn.Sequential(
        nn.Conv3d(cin, cout, 3, padding=1), nn.InstanceNorm3d(cout, affine=True),
        nn.LeakyReLU(0.2, inplace=True),
        nn.Conv3d(cout, cout, 3, padding=1), nn.InstanceNorm3d(cout, affine=True),
        nn.LeakyReLU(0.2, inplace=True),
    )


class SegUNet2d(nn.Module):
    def __init__(self, in_channels: int, num_classes: int, base_width: int = 8, depth: int = 3):
        super().__init__()
        self.depth = depth
        self.enc = nn.ModuleList()
        w = base_width
        self.enc.append(_block2d(in_channels, w))
        for _ in range(depth):
            self.enc.append(_block2d(w, w * 2))
            w *= 2
        self.dec = nn.ModuleList()
        for _ in range(depth):
            self.dec.append(_block2d(w + w // 2, w // 2))
            w //= 2
        self.head = nn.Conv2d(w, num_classes, 1)

    def forward(self, x):
        skips = [self.enc[0](x)]
        for blk in self.enc[1:]:
            skips.append(blk(F.max_pool2d(skips[-1], 2)))
        y = skips.pop()
        for blk in self.dec:
            y = F.interpolate(y, scale_factor=2, mode="bilinear", align_corners=True)
            sk = skips.pop()
            if y.shape[-2:] != sk.shape[-2:]:
                y = F.interpolate(y, size=sk.shape[-2:], mode="bilinear", align_corners=True)
            y = blk(torch.cat([y, sk], dim=1))
        return self.head(y)


class SegUNet3d(nn.Module):
    def __init__(self, in_channels: int, num_classes: int, base_width: int = 8, depth: int = 3):
        super().__init__()
        self.depth = depth
        self.enc = nn.ModuleList()
        w = base_width
        self.enc.append(_block3d(in_channels, w))
        for _ in range(depth):
            self.enc.append(_block3d(w, w * 2))
            w *= 2
        self.dec = nn.ModuleList()
        for _ in range(depth):
            self.dec.append(_block3d(w + w // 2, w // 2))
            w //= 2
        self.head = nn.Conv3d(w, num_classes, 1)

    def forward(self, x):
        skips = [self.enc[0](x)]
        for blk in self.enc[1:]:
            skips.append(blk(F.max_pool3d(skips[-1], 2)))
        y = skips.pop()
        for blk in self.dec:
            y = F.interpolate(y, scale_factor=2, mode="trilinear", align_corners=True)
            sk = skips.pop()
            if y.shape[-3:] != sk.shape[-3:]:
                y = F.interpolate(y, size=sk.shape[-3:], mode="trilinear", align_corners=True)
            y = blk(torch.cat([y, sk], dim=1))
        return self.head(y)
