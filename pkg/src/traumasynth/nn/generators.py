"""The two generators.

InpaintGenerator restores masked intensity slice stacks with a
two-branch coarse-to-fine stack of gated convolutions: the coarse branch
sees the inputs at half resolution, runs its own
downsample/dilated-bottleneck/upsample cycle, and its feature output is
added onto the refinement branch right after the refinement downsampling
stage. LabelUNet reconstructs the label map inside the mask, conditioned
on the restored image, with a plain skip-connected U-Net ending in a
per-pixel softmax.
"""

from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn

from ..config import G1Config, G2Config
from ..errors import ConfigurationError
from .blocks import GatedConv2d, GatedUpBlock, LayerSpec, bilinear_upsample


def _gated(cin, cout, kernel=3, stride=1, dilation=1, norm="instance"):
    return GatedConv2d(LayerSpec(cin, cout, kernel=kernel, stride=stride,
                                 dilation=dilation, gated=True, norm=norm, activation="elu"))


class _GatedTrunk(nn.Module):
    """stem -> stride-2 downs -> dilated bottleneck, shared by both branches."""

    def __init__(self, in_channels: int, width: int, down_steps: int, dilations):
        super().__init__()
        self.stem = _gated(in_channels, width, kernel=5)
        downs = []
        w = width
        for _ in range(down_steps):
            downs.append(_gated(w, w * 2, stride=2))
            w *= 2
        self.downs = nn.ModuleList(downs)
        self.bottleneck = nn.ModuleList([_gated(w, w, dilation=d) for d in dilations])
        self.out_width = w

    def forward(self, x: torch.Tensor, stop_after_downs: bool = False):
        x = self.stem(x)
        for blk in self.downs:
            x = blk(x)
        if stop_after_downs:
            return x
        for blk in self.bottleneck:
            x = blk(x)
        return x

    def run_bottleneck(self, x: torch.Tensor) -> torch.Tensor:
        for blk in self.bottleneck:
            x = blk(x)
        return x


class InpaintGenerator(nn.Module):
    """Coarse-to-fine gated-convolution inpainting network."""

    def __init__(self, config: G1Config):
        super().__init__()
        config.validate()
        self.config = config
        b, ds = config.base_width, config.down_steps
        rates = config.dilation_rates
        self.refine = _GatedTrunk(config.in_channels, b, ds, rates)
        wmax = self.refine.out_width
        if config.use_coarse:
            self.coarse = _GatedTrunk(config.in_channels, b, ds, rates)
            self.coarse_up = GatedUpBlock(wmax, wmax)
        ups = []
        w = wmax
        for _ in range(ds):
            ups.append(GatedUpBlock(w, w // 2))
            w //= 2
        self.ups = nn.ModuleList(ups)
        self.head = nn.Conv2d(w, config.out_channels, kernel_size=3, padding=1)

    def forward(self, masked_image: torch.Tensor, mask: torch.Tensor,
                sketch: torch.Tensor) -> torch.Tensor:
        x = torch.cat([masked_image, mask, sketch], dim=1)
        if x.shape[1] != self.config.in_channels:
            raise ConfigurationError(
                f"expected {self.config.in_channels} input channels, got {x.shape[1]}")
        feat = self.refine(x, stop_after_downs=True)
        if self.config.use_coarse:
            xc = F.interpolate(x, scale_factor=0.5, mode="bilinear", align_corners=True)
            c = self.coarse(xc)
            c = self.coarse_up(c)
            if c.shape[-2:] != feat.shape[-2:]:
                c = F.interpolate(c, size=feat.shape[-2:], mode="bilinear", align_corners=True)
            feat = feat + c
        feat = self.refine.run_bottleneck(feat)
        for blk in self.ups:
            feat = blk(feat)
        if feat.shape[-2:] != masked_image.shape[-2:]:
            feat = F.interpolate(feat, size=masked_image.shape[-2:],
                                 mode="bilinear", align_corners=True)
        return (torch.tanh(self.head(feat)) + 1) / 2


def composite(raw, original, mask):
    """original outside the mask, raw inside: original*(1-mask) + raw*mask."""
    return original * (1 - mask) + raw * mask


class _UNetDown(nn.Module):
    def __init__(self, cin, cout):
        super().__init__()
        self.conv = nn.Sequential(
            nn.Conv2d(cin, cout, 3, stride=2, padding=1),
            nn.InstanceNorm2d(cout, affine=True),
            nn.LeakyReLU(0.2),
            nn.Conv2d(cout, cout, 3, padding=1),
            nn.InstanceNorm2d(cout, affine=True),
            nn.LeakyReLU(0.2),
        )

    def forward(self, x):
        return self.conv(x)


class _UNetUp(nn.Module):
    def __init__(self, cin, skip, cout):
        super().__init__()
        self.conv = nn.Sequential(
            nn.Conv2d(cin + skip, cout, 3, padding=1),
            nn.InstanceNorm2d(cout, affine=True),
            nn.LeakyReLU(0.2),
        )

    def forward(self, x, sk):
        x = bilinear_upsample(x, 2)
        if x.shape[-2:] != sk.shape[-2:]:
            x = F.interpolate(x, size=sk.shape[-2:], mode="bilinear", align_corners=True)
        return self.conv(torch.cat([x, sk], dim=1))


class LabelUNet(nn.Module):
    """U-Net label reconstruction conditioned on the restored image."""

    def __init__(self, config: G2Config):
        super().__init__()
        config.validate()
        self.config = config
        b = config.base_width
        self.stem = nn.Sequential(
            nn.Conv2d(config.in_channels, b, 3, padding=1),
            nn.InstanceNorm2d(b, affine=True),
            nn.LeakyReLU(0.2),
        )
        downs, ups = [], []
        w = b
        for _ in range(config.depth):
            downs.append(_UNetDown(w, w * 2))
            w *= 2
        for _ in range(config.depth):
            ups.append(_UNetUp(w, w // 2, w // 2))
            w //= 2
        self.downs = nn.ModuleList(downs)
        self.ups = nn.ModuleList(ups)
        self.head = nn.Conv2d(b, config.num_classes, kernel_size=1)

    def forward(self, masked_onehot: torch.Tensor, restored_image: torch.Tensor) -> torch.Tensor:
        """Returns per-pixel class probabilities (softmax over channel 1)."""
        x = torch.cat([masked_onehot, restored_image], dim=1)
        if x.shape[1] != self.config.in_channels:
            raise ConfigurationError(
                f"expected {self.config.in_channels} input channels, got {x.shape[1]}")
        skips = [self.stem(x)]
        for blk in self.downs:
            skips.append(blk(skips[-1]))
        y = skips.pop()
        for blk in self.ups:
            y = blk(y, skips.pop())
        return torch.softmax(self.head(y), dim=1)


def hard_labels(probs: torch.Tensor) -> torch.Tensor:
    """Argmax over the class channel; ties resolve to the lowest index."""
    return probs.argmax(dim=1)


def composite_hard_labels(probs: torch.Tensor, input_labels: torch.Tensor,
                          mask: torch.Tensor) -> torch.Tensor:
    """Hard labels inside the mask, the input labels outside (exact)."""
    hard = hard_labels(probs)
    m = mask.squeeze(1) if mask.ndim == hard.ndim + 1 else mask
    return torch.where(m > 0.5, hard, input_labels)
