"""Shared fixtures and numeric-check helpers."""

import numpy as np
import pytest
import torch

from traumasynth.config import PhantomConfig, TrainConfig
from traumasynth.phantom import generate_case
from traumasynth.training import build_gan_dataset, train_stage1, train_stage2

SMALL_SHAPE = (32, 32, 32)


def rel_err(a: torch.Tensor, b: torch.Tensor) -> float:
    na = float(a.norm())
    nb = float(b.norm())
    denom = max(na, nb, 1e-12)
    return float((a - b).norm()) / denom


def central_diff_grad(fn, x: torch.Tensor, h: float = 1e-6) -> torch.Tensor:
    """Central finite differences of a scalar function wrt every element of x."""
    g = torch.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.numel()):
        orig = float(flat[i])
        flat[i] = orig + h
        fp = float(fn(x))
        flat[i] = orig - h
        fm = float(fn(x))
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return g


def analytic_grad(fn, x: torch.Tensor) -> torch.Tensor:
    xg = x.clone().requires_grad_(True)
    out = fn(xg)
    out.backward()
    return xg.grad.detach()


def check_gradient(fn, x: torch.Tensor, tol: float = 1e-4, h: float = 1e-6) -> float:
    """Analytic-vs-central-difference relative error; asserts tol."""
    ga = analytic_grad(fn, x.clone())
    gn = central_diff_grad(fn, x.clone(), h=h)
    err = rel_err(ga, gn)
    assert err <= tol, f"gradient mismatch: rel err {err:.3e} > {tol}"
    return err


@pytest.fixture(scope="session")
def phantom_cases():
    """Four small lesioned subjects shared across test modules."""
    return [generate_case(f"s{i:02d}", PhantomConfig(seed=i)) for i in range(4)]


@pytest.fixture(scope="session")
def gan_dataset(phantom_cases):
    return build_gan_dataset(phantom_cases)


@pytest.fixture(scope="session")
def tiny_checkpoints(tmp_path_factory, gan_dataset):
    """Short two-stage training shared by synthesis/pipeline tests."""
    out = tmp_path_factory.mktemp("ckpt")
    cfg = TrainConfig(steps=12, batch_size=4, seed=1)
    r1 = train_stage1(cfg, gan_dataset, out / "s1")
    r2 = train_stage2(cfg, gan_dataset, r1.checkpoint, out / "s2")
    return {"stage1": r1, "stage2": r2}
