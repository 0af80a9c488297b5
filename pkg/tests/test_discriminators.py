"""Multi-scale conditional discriminators."""

import pytest
import torch

from conftest import check_gradient
from traumasynth.config import DiscriminatorConfig
from traumasynth.losses import lsgan_d_loss
from traumasynth.nn.discriminators import (MultiScaleDiscriminator, discriminate_image,
                                           discriminate_label)


@pytest.fixture(scope="module")
def d1():
    torch.manual_seed(0)
    return MultiScaleDiscriminator(DiscriminatorConfig(in_channels=5, base_width=8))


def _cond(batch=2, h=64, w=64, seed=0):
    gen = torch.Generator().manual_seed(seed)
    img = torch.rand(batch, 3, h, w, generator=gen)
    m = (torch.rand(batch, 1, h, w, generator=gen) > 0.8).float()
    s = (torch.rand(batch, 1, h, w, generator=gen) > 0.9).float()
    return img, m, s


def test_three_score_maps(d1):
    scores, _ = discriminate_image(d1, *_cond())
    assert len(scores) == 3


def test_scale_halving(d1):
    scores, _ = discriminate_image(d1, *_cond())
    for k in range(1, 3):
        assert scores[k].shape[-1] == scores[k - 1].shape[-1] // 2
        assert scores[k].shape[-2] == scores[k - 1].shape[-2] // 2


def test_patch_map_receptive_arithmetic(d1):
    """Shape oracle: 4 stride-2 layers then a stride-1 head, 64 -> 4."""
    scores, _ = discriminate_image(d1, *_cond())
    size = 64
    for _ in range(4):
        size = (size + 2 * 1 - 4) // 2 + 1
    assert scores[0].shape[-2:] == (size, size) == (4, 4)


def test_feature_stack_shapes_match_real_fake(d1):
    img, m, s = _cond()
    _, feats_a = discriminate_image(d1, img, m, s)
    _, feats_b = discriminate_image(d1, torch.rand_like(img), m, s)
    assert [len(f) for f in feats_a] == [len(f) for f in feats_b] == [4, 4, 4]
    for fa, fb in zip(feats_a, feats_b):
        for a, b in zip(fa, fb):
            assert a.shape == b.shape


def test_scores_finite(d1):
    for seed in range(20):
        scores, _ = discriminate_image(d1, *_cond(seed=seed))
        assert all(bool(torch.isfinite(s).all()) for s in scores)


def test_label_discriminator_conditioning_wired():
    torch.manual_seed(1)
    d2 = MultiScaleDiscriminator(DiscriminatorConfig(in_channels=10, base_width=8))
    img, m, _ = _cond()
    onehot = torch.rand(2, 6, 64, 64)
    s_a, _ = discriminate_label(d2, onehot, img, m)
    s_b, _ = discriminate_label(d2, onehot, torch.rand_like(img), m)
    assert max(float((a - b).abs().max()) for a, b in zip(s_a, s_b)) > 0


def test_spectral_norm_bounds_all_layers():
    """Operator norm of every conv weight <= 1 + 1e-2 after 50 iterations."""
    torch.manual_seed(2)
    d = MultiScaleDiscriminator(DiscriminatorConfig(in_channels=5, base_width=8))
    d.train()
    img, m, s = _cond(batch=1)
    for _ in range(50):
        discriminate_image(d, img, m, s)
    d.eval()
    from traumasynth.nn.blocks import SNConv2d
    for mod in d.modules():
        if isinstance(mod, SNConv2d):
            w = mod.normalized_weight().detach()
            sv = torch.linalg.matrix_norm(w.reshape(w.shape[0], -1), 2)
            assert float(sv) <= 1 + 1e-2


def test_d_loss_gradient_vs_finite_differences():
    torch.manual_seed(3)
    d2 = MultiScaleDiscriminator(
        DiscriminatorConfig(in_channels=7, base_width=4, num_scales=2, num_layers=2)).double()
    d2.eval()
    img = torch.rand(1, 3, 16, 16, dtype=torch.float64)
    m = (torch.rand(1, 1, 16, 16) > 0.7).double()
    real = torch.rand(1, 3, 16, 16, dtype=torch.float64)

    def fn(lab):
        fake_scores, _ = discriminate_label(d2, lab, img, m)
        real_scores, _ = discriminate_label(d2, real, img, m)
        return lsgan_d_loss(real_scores, fake_scores)

    for seed in range(3):
        torch.manual_seed(seed + 9)
        lab = torch.rand(1, 3, 16, 16, dtype=torch.float64)
        check_gradient(fn, lab, h=1e-6)
