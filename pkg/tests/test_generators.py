"""Inpainting generator, label U-Net, compositing."""

import pytest
import torch

from conftest import check_gradient
from traumasynth.config import G1Config, G2Config
from traumasynth.errors import ConfigurationError
from traumasynth.losses import dice_loss
from traumasynth.nn.generators import (InpaintGenerator, LabelUNet, composite,
                                       composite_hard_labels, hard_labels)


@pytest.fixture(scope="module")
def g1():
    torch.manual_seed(0)
    return InpaintGenerator(G1Config(base_width=8))


@pytest.fixture(scope="module")
def g2():
    torch.manual_seed(0)
    return LabelUNet(G2Config(base_width=8, num_classes=6))


def _inputs(h, w, batch=2, seed=0):
    gen = torch.Generator().manual_seed(seed)
    x = torch.rand(batch, 3, h, w, generator=gen)
    m = (torch.rand(batch, 1, h, w, generator=gen) > 0.8).float()
    s = (torch.rand(batch, 1, h, w, generator=gen) > 0.9).float() * m
    return x, m, s


def test_g1_output_shape_64(g1):
    x, m, s = _inputs(64, 64)
    out = g1(x * (1 - m), m, s)
    assert out.shape == (2, 3, 64, 64)
    assert float(out.min()) >= 0 and float(out.max()) <= 1


def test_g1_output_shape_176x224(g1):
    x, m, s = _inputs(176, 224, batch=1)
    assert g1(x * (1 - m), m, s).shape == (1, 3, 176, 224)


def test_g1_deterministic(g1):
    x, m, s = _inputs(64, 64)
    assert torch.equal(g1(x * (1 - m), m, s), g1(x * (1 - m), m, s))


def test_g1_finite_over_seeds(g1):
    for seed in range(100):
        x, m, s = _inputs(32, 32, batch=1, seed=seed)
        out = g1(x * (1 - m), m, s)
        assert bool(torch.isfinite(out).all())


def test_g1_channel_mismatch(g1):
    x, m, s = _inputs(64, 64)
    with pytest.raises(ConfigurationError):
        g1(torch.cat([x, x], dim=1), m, s)


def test_g1_coarse_branch_wired():
    """Disabling the coarse addition changes outputs."""
    torch.manual_seed(1)
    full = InpaintGenerator(G1Config(base_width=8, use_coarse=True))
    ablated = InpaintGenerator(G1Config(base_width=8, use_coarse=False))
    shared = {k: v for k, v in full.state_dict().items()
              if not k.startswith(("coarse", "coarse_up"))}
    ablated.load_state_dict(shared)
    x, m, s = _inputs(64, 64)
    delta = (full(x * (1 - m), m, s) - ablated(x * (1 - m), m, s)).abs().max()
    assert float(delta) > 0


def test_g1_gradient_vs_finite_differences():
    torch.manual_seed(2)
    g = InpaintGenerator(G1Config(base_width=4, dilation_rates=(2,))).double()
    m = (torch.rand(1, 1, 16, 16) > 0.7).double()
    s = torch.zeros_like(m)

    def fn(x):
        return g(x, m, s).mean()

    for seed in range(3):
        torch.manual_seed(seed + 5)
        x = torch.rand(1, 3, 16, 16, dtype=torch.float64) * 0.8 + 0.1
        check_gradient(fn, x, h=1e-6)


def test_composite_identities():
    gen = torch.Generator().manual_seed(3)
    raw = torch.rand(1, 3, 8, 8, generator=gen)
    orig = torch.rand(1, 3, 8, 8, generator=gen)
    assert torch.equal(composite(raw, orig, torch.zeros(1, 1, 8, 8)), orig)
    assert torch.equal(composite(raw, orig, torch.ones(1, 1, 8, 8)), raw)
    m = (torch.rand(1, 1, 8, 8, generator=gen) > 0.5).float()
    comp = composite(raw, orig, m)
    outside = (m == 0).expand_as(comp)
    assert torch.equal(comp[outside], orig[outside])


def test_g2_probs_normalized(g2):
    x, m, _ = _inputs(64, 64)
    onehot = torch.zeros(2, 6, 64, 64)
    onehot[:, 0] = 1.0
    probs = g2(onehot * (1 - m), x)
    assert float((probs.sum(dim=1) - 1).abs().max()) <= 1e-5


def test_g2_outside_mask_labels_exact(g2):
    x, m, _ = _inputs(64, 64)
    labels = torch.randint(0, 6, (2, 64, 64))
    onehot = torch.nn.functional.one_hot(labels, 6).permute(0, 3, 1, 2).float()
    probs = g2(onehot * (1 - m), x)
    hard = composite_hard_labels(probs, labels, m)
    outside = m.squeeze(1) == 0
    assert torch.equal(hard[outside], labels[outside])


def test_g2_finite_over_seeds(g2):
    for seed in range(100):
        x, m, _ = _inputs(32, 32, batch=1, seed=seed + 200)
        onehot = torch.zeros(1, 6, 32, 32)
        onehot[:, seed % 6] = 1.0
        assert bool(torch.isfinite(g2(onehot * (1 - m), x)).all())


def test_g2_dice_gradient_vs_finite_differences():
    torch.manual_seed(4)
    g = LabelUNet(G2Config(base_width=4, depth=2, num_classes=3)).double()
    m = (torch.rand(1, 1, 16, 16) > 0.7).double()
    target = torch.zeros(1, 3, 16, 16, dtype=torch.float64)
    target[:, 1] = 1.0

    def fn(x):
        probs = g(x, torch.full((1, 3, 16, 16), 0.5, dtype=torch.float64))
        return dice_loss(target, probs)

    for seed in range(3):
        torch.manual_seed(seed + 7)
        x = torch.rand(1, 3, 16, 16, dtype=torch.float64)
        check_gradient(fn, x, h=1e-6)


def test_hard_labels_tie_breaks_low_index():
    probs = torch.full((1, 3, 2, 2), 1 / 3)
    assert torch.equal(hard_labels(probs), torch.zeros(1, 2, 2, dtype=torch.long))
