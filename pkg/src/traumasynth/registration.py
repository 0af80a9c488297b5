"""Deformable registration as regularized optimization.

A dense per-voxel displacement field is optimized coarse-to-fine against
mean-squared dissimilarity plus a bending-energy penalty (squared second
spatial derivatives, mixed terms counted twice, interior stencil). Warping
is backward with border clamping; label maps must use nearest-neighbor
interpolation so the class alphabet is preserved.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np
import torch
import torch.nn.functional as F
from scipy import ndimage

from .config import RegistrationConfig
from .errors import ConfigurationError, DataError
from .phantom import LabelMap, Volume


@dataclass
class DeformationField:
    """Dense displacement in voxel units, shape (3, X, Y, Z)."""

    disp: np.ndarray

    def validate(self) -> "DeformationField":
        if self.disp.ndim != 4 or self.disp.shape[0] != 3:
            raise DataError(f"field must be (3, X, Y, Z), got {self.disp.shape}")
        if not np.all(np.isfinite(self.disp)):
            raise DataError("field contains non-finite values")
        return self

    @classmethod
    def identity(cls, shape: tuple[int, int, int]) -> "DeformationField":
        return cls(disp=np.zeros((3,) + tuple(shape), dtype=np.float64))

    @property
    def grid_shape(self) -> tuple[int, int, int]:
        return self.disp.shape[1:]


def bending_energy(field: DeformationField) -> float:
    """Mean over interior voxels of all squared second derivatives."""
    u = np.asarray(field.disp, dtype=np.float64)
    interior = u[:, 1:-1, 1:-1, 1:-1]
    if interior.size == 0:
        return 0.0
    total = np.zeros_like(interior)
    for ax in range(3):
        sl_p = [slice(1, -1)] * 3
        sl_m = [slice(1, -1)] * 3
        sl_p[ax] = slice(2, None)
        sl_m[ax] = slice(0, -2)
        second = u[(slice(None), *sl_p)] - 2 * interior + u[(slice(None), *sl_m)]
        total += second ** 2
    pairs = ((0, 1), (0, 2), (1, 2))
    for ax_a, ax_b in pairs:
        def shifted(da, db):
            sl = [slice(1, -1)] * 3
            sl[ax_a] = slice(1 + da, u.shape[1 + ax_a] - 1 + da)
            sl[ax_b] = slice(1 + db, u.shape[1 + ax_b] - 1 + db)
            return u[(slice(None), *sl)]
        mixed = (shifted(1, 1) - shifted(1, -1) - shifted(-1, 1) + shifted(-1, -1)) / 4.0
        total += 2.0 * mixed ** 2
    # sum over components, mean over interior voxels
    return float(total.sum(axis=0).mean())


def _bending_energy_torch(u: torch.Tensor) -> torch.Tensor:
    """Same stencil as bending_energy, on a (3, X, Y, Z) tensor."""
    interior = u[:, 1:-1, 1:-1, 1:-1]
    total = torch.zeros_like(interior)
    idx_all = slice(1, -1)
    for ax in range(3):
        sl_p = [idx_all] * 3
        sl_m = [idx_all] * 3
        sl_p[ax] = slice(2, None)
        sl_m[ax] = slice(0, -2)
        second = u[(slice(None), *sl_p)] - 2 * interior + u[(slice(None), *sl_m)]
        total = total + second ** 2
    for ax_a, ax_b in ((0, 1), (0, 2), (1, 2)):
        def shifted(da, db):
            sl = [idx_all] * 3
            sl[ax_a] = slice(1 + da, u.shape[1 + ax_a] - 1 + da)
            sl[ax_b] = slice(1 + db, u.shape[1 + ax_b] - 1 + db)
            return u[(slice(None), *sl)]
        mixed = (shifted(1, 1) - shifted(1, -1) - shifted(-1, 1) + shifted(-1, -1)) / 4.0
        total = total + 2.0 * mixed ** 2
    return total.sum(dim=0).mean()


def warp(inp: Volume | LabelMap, field: DeformationField, interp: str = "linear"):
    """Backward warp with border clamping: out(x) = in(x + u(x))."""
    if interp not in ("linear", "nearest"):
        raise ConfigurationError(f"interp must be linear or nearest, got {interp!r}")
    if isinstance(inp, LabelMap) and interp != "nearest":
        raise ConfigurationError("label maps must be warped with nearest interpolation")
    shape = inp.data.shape
    if field.grid_shape != shape:
        raise DataError(f"field grid {field.grid_shape} does not match input {shape}")
    grid = np.stack(np.meshgrid(*[np.arange(s, dtype=np.float64) for s in shape], indexing="ij"))
    coords = grid + field.disp
    order = 1 if interp == "linear" else 0
    out = ndimage.map_coordinates(inp.data.astype(np.float64), coords, order=order, mode="nearest")
    if isinstance(inp, LabelMap):
        return LabelMap(data=out.astype(inp.data.dtype), classes=inp.classes)
    return Volume(data=np.clip(out, 0.0, 1.0).astype(np.float32), spacing=inp.spacing)


def _warp_torch(vol: torch.Tensor, disp: torch.Tensor) -> torch.Tensor:
    """Differentiable backward warp; vol (1,1,X,Y,Z), disp (3,X,Y,Z) voxels."""
    shape = vol.shape[2:]
    axes = [torch.arange(s, dtype=vol.dtype, device=vol.device) for s in shape]
    grid = torch.stack(torch.meshgrid(*axes, indexing="ij"))
    coords = grid + disp
    normed = []
    for ax in (2, 1, 0):  # grid_sample wants (W, H, D) == (Z, Y, X) order
        size = shape[ax]
        denom = max(size - 1, 1)
        normed.append(2.0 * coords[ax] / denom - 1.0)
    sample_grid = torch.stack(normed, dim=-1).unsqueeze(0)
    return F.grid_sample(vol, sample_grid, mode="bilinear",
                         padding_mode="border", align_corners=True)


def _gaussian_kernel1d(sigma: float, dtype, device) -> torch.Tensor:
    radius = max(int(3.0 * sigma + 0.5), 1)
    x = torch.arange(-radius, radius + 1, dtype=dtype, device=device)
    k = torch.exp(-(x ** 2) / (2 * sigma ** 2))
    return k / k.sum()


def _smooth_field(g: torch.Tensor, sigma: float) -> torch.Tensor:
    """Separable Gaussian blur of a (3, X, Y, Z) field, reflect padding."""
    if sigma <= 0:
        return g
    k = _gaussian_kernel1d(sigma, g.dtype, g.device)
    pad = (k.numel() - 1) // 2
    x = g[None]
    for ax in range(3):
        shape = [1, 1, 1, 1, 1]
        shape[2 + ax] = k.numel()
        kern = k.reshape(shape).expand(3, 1, *shape[2:])
        padding = [0, 0, 0]
        padding[ax] = pad
        x = F.conv3d(x, kern, groups=3, padding=tuple(padding))
    return x[0]


@dataclass
class RegistrationResult:
    field: DeformationField
    objective_trace: list = dc_field(default_factory=list)  # finest level, accepted steps
    level_traces: list = dc_field(default_factory=list)
    diverged: bool = False

    @property
    def final_objective(self) -> float:
        return self.objective_trace[-1] if self.objective_trace else float("nan")


def mean_squared_dissimilarity(a: Volume, b: Volume) -> float:
    if a.shape != b.shape:
        raise DataError("volume shapes disagree")
    return float(np.mean((a.data.astype(np.float64) - b.data.astype(np.float64)) ** 2))


def register_deformable(moving: Volume, fixed: Volume,
                        config: RegistrationConfig | None = None,
                        seed: int = 0) -> RegistrationResult:
    """Multi-resolution dense-field registration of `moving` onto `fixed`.

    Descent directions are Gaussian-smoothed gradients of the objective
    (a preconditioner, the objective itself is untouched), normalized so
    the largest per-step voxel motion equals the learning rate. The
    objective trace collects accepted (improving) iterations only and is
    therefore non-increasing. If the objective fails to improve for
    `config.patience` consecutive steps, the best field so far is
    returned with the diverged flag set.
    """
    del seed  # the optimization is deterministic; kept for interface parity
    config = (config or RegistrationConfig()).validate()
    if moving.shape != fixed.shape:
        raise DataError("moving/fixed shapes disagree")

    mov = torch.from_numpy(moving.data.astype(np.float32))[None, None]
    fix = torch.from_numpy(fixed.data.astype(np.float32))[None, None]
    level_traces: list[list[float]] = []
    diverged = False
    disp = None

    for level in range(config.levels):
        factor = 2 ** (config.levels - 1 - level)
        if factor > 1:
            mov_l = F.avg_pool3d(mov, factor)
            fix_l = F.avg_pool3d(fix, factor)
        else:
            mov_l, fix_l = mov, fix
        shape_l = mov_l.shape[2:]
        if disp is None:
            disp = torch.zeros((3,) + tuple(shape_l), dtype=torch.float32)
        else:
            disp = 2.0 * F.interpolate(disp[None], size=shape_l, mode="trilinear",
                                       align_corners=True)[0]
        disp = disp.clone().requires_grad_(True)

        trace: list[float] = []
        best_loss = float("inf")
        best_disp = disp.detach().clone()
        fails = 0
        stop = False
        for _ in range(config.iters[level]):
            warped = _warp_torch(mov_l, disp)
            loss = F.mse_loss(warped, fix_l) + config.lambda_bend * _bending_energy_torch(disp)
            cur = float(loss.detach())
            if cur < best_loss:
                best_loss = cur
                best_disp = disp.detach().clone()
                trace.append(cur)
                fails = 0
                if cur < 1e-10:  # already at a numerically exact optimum
                    stop = True
            elif cur > best_loss:  # plateau steps are neutral
                fails += 1
                if fails >= config.patience:
                    diverged = True
                    stop = True
            if stop:
                break
            (grad,) = torch.autograd.grad(loss, disp)
            with torch.no_grad():
                step = _smooth_field(grad, config.precond_sigma)
                scale = step.abs().max()
                if scale > 0:
                    disp -= config.lr * step / scale
        disp = best_disp
        level_traces.append(trace)

    out = DeformationField(disp=disp.detach().numpy().astype(np.float64)).validate()
    return RegistrationResult(field=out, objective_trace=level_traces[-1],
                              level_traces=level_traces, diverged=diverged)
