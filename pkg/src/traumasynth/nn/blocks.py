"""Shared differentiable blocks: gated/dilated convolutions, spectral
normalization with a persistent power-iteration vector, instance norm,
and bilinear upsampling (align-corners convention throughout)."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from ..errors import ConfigurationError

INSTANCE_NORM_EPS = 1e-5
_ACTIVATIONS = ("elu", "leaky_relu", "tanh", "sigmoid", "none")


@dataclass
class LayerSpec:
    in_channels: int
    out_channels: int
    kernel: int = 3
    stride: int = 1
    dilation: int = 1
    gated: bool = True
    norm: str = "instance"       # "instance" | "none"
    activation: str = "elu"

    def validate(self) -> "LayerSpec":
        if self.in_channels < 1 or self.out_channels < 1:
            raise ConfigurationError("channels must be >= 1")
        if self.kernel % 2 != 1:
            raise ConfigurationError("kernel must be odd")
        if self.dilation < 1:
            raise ConfigurationError("dilation must be >= 1")
        if self.norm not in ("instance", "none"):
            raise ConfigurationError(f"unknown norm {self.norm!r}")
        if self.activation not in _ACTIVATIONS:
            raise ConfigurationError(f"unknown activation {self.activation!r}")
        return self

    @property
    def padding(self) -> int:
        return self.dilation * (self.kernel // 2)


def apply_activation(x: torch.Tensor, name: str) -> torch.Tensor:
    if name == "elu":
        return F.elu(x)
    if name == "leaky_relu":
        return F.leaky_relu(x, 0.2)
    if name == "tanh":
        return torch.tanh(x)
    if name == "sigmoid":
        return torch.sigmoid(x)
    return x


def instance_normalize(x: torch.Tensor, weight: torch.Tensor | None = None,
                       bias: torch.Tensor | None = None,
                       eps: float = INSTANCE_NORM_EPS) -> torch.Tensor:
    """Per-sample, per-channel standardization with optional affine."""
    return F.instance_norm(x, weight=weight, bias=bias, eps=eps)


def bilinear_upsample(x: torch.Tensor, factor: int) -> torch.Tensor:
    """Bilinear upsampling by an integer factor, align-corners convention."""
    if factor < 2:
        raise ConfigurationError("factor must be >= 2")
    return F.interpolate(x, scale_factor=factor, mode="bilinear", align_corners=True)


def _init_power_vector(m: int, device, dtype) -> torch.Tensor:
    # fixed, generically non-orthogonal start so runs are reproducible
    u = torch.linspace(0.5, 1.5, m, device=device, dtype=dtype)
    return u / u.norm()


def spectral_normalize(weight: torch.Tensor, power_iters: int, state: dict,
                       eps: float = 1e-12) -> torch.Tensor:
    """Divide `weight` by its power-iteration estimate of the top singular value.

    `state` persists the left singular vector under key "u" across calls.
    The flattened matrix view is (rows = out features, cols = rest). A zero
    weight comes back unchanged thanks to the epsilon clamp.
    """
    if power_iters < 1:
        raise ConfigurationError("power_iters must be >= 1")
    w = weight.reshape(weight.shape[0], -1)
    u = state.get("u")
    if u is None or u.shape[0] != w.shape[0]:
        u = _init_power_vector(w.shape[0], w.device, w.dtype)
    with torch.no_grad():
        wd = w.detach()
        v = None
        for _ in range(power_iters):
            v = F.normalize(wd.t() @ u, dim=0, eps=eps)
            u = F.normalize(wd @ v, dim=0, eps=eps)
        state["u"] = u
    sigma = torch.dot(u, w @ v)
    return weight / sigma.clamp(min=eps)


class SNConv2d(nn.Conv2d):
    """Conv2d whose weight is spectrally normalized at every forward.

    The power-iteration vector advances only in training mode, so
    inference is a pure function of the stored parameters and buffers.
    """

    def __init__(self, *args, power_iters: int = 1, **kwargs):
        super().__init__(*args, **kwargs)
        self.power_iters = power_iters
        self.register_buffer("power_u", _init_power_vector(self.out_channels, None, None))

    def normalized_weight(self) -> torch.Tensor:
        state = {"u": self.power_u}
        iters = self.power_iters if self.training else 1
        if self.training:
            w = spectral_normalize(self.weight, iters, state)
            self.power_u = state["u"]
            return w
        # eval: use the stored vector without advancing it
        w2 = self.weight.reshape(self.out_channels, -1)
        with torch.no_grad():
            v = F.normalize(w2.detach().t() @ self.power_u, dim=0, eps=1e-12)
            u = F.normalize(w2.detach() @ v, dim=0, eps=1e-12)
        sigma = torch.dot(u, w2 @ v)
        return self.weight / sigma.clamp(min=1e-12)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self._conv_forward(x, self.normalized_weight(), self.bias)


class GatedConv2d(nn.Module):
    """Soft-gated convolution: activation(conv_f(x)) * sigmoid(conv_g(x)).

    Normalization, when requested, applies to the feature branch before
    its activation; the gate branch is always plain conv + sigmoid.
    """

    def __init__(self, spec: LayerSpec):
        super().__init__()
        spec.validate()
        self.spec = spec
        kw = dict(kernel_size=spec.kernel, stride=spec.stride,
                  dilation=spec.dilation, padding=spec.padding)
        self.conv_f = nn.Conv2d(spec.in_channels, spec.out_channels, **kw)
        self.conv_g = nn.Conv2d(spec.in_channels, spec.out_channels, **kw)
        if spec.norm == "instance":
            self.norm = nn.InstanceNorm2d(spec.out_channels, affine=True, eps=INSTANCE_NORM_EPS)
        else:
            self.norm = None

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[1] != self.spec.in_channels:
            raise ConfigurationError(
                f"expected {self.spec.in_channels} input channels, got {x.shape[1]}")
        f = self.conv_f(x)
        if self.norm is not None:
            f = self.norm(f)
        f = apply_activation(f, self.spec.activation)
        return f * torch.sigmoid(self.conv_g(x))


class ConvBlock(nn.Module):
    """Plain conv + optional instance norm + activation (non-gated path)."""

    def __init__(self, spec: LayerSpec):
        super().__init__()
        spec.validate()
        self.spec = spec
        self.conv = nn.Conv2d(spec.in_channels, spec.out_channels, kernel_size=spec.kernel,
                              stride=spec.stride, dilation=spec.dilation, padding=spec.padding)
        self.norm = (nn.InstanceNorm2d(spec.out_channels, affine=True, eps=INSTANCE_NORM_EPS)
                     if spec.norm == "instance" else None)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        y = self.conv(x)
        if self.norm is not None:
            y = self.norm(y)
        return apply_activation(y, self.spec.activation)


def make_block(spec: LayerSpec) -> nn.Module:
    return GatedConv2d(spec) if spec.gated else ConvBlock(spec)


class GatedUpBlock(nn.Module):
    """Bilinear x2 upsampling followed by a gated convolution."""

    def __init__(self, in_channels: int, out_channels: int, activation: str = "elu"):
        super().__init__()
        self.conv = GatedConv2d(LayerSpec(in_channels, out_channels, kernel=3, stride=1,
                                          gated=True, norm="instance", activation=activation))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.conv(bilinear_upsample(x, 2))
