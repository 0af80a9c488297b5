"""Gated conv, spectral norm, instance norm, bilinear upsampling."""

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from conftest import check_gradient
from traumasynth.errors import ConfigurationError
from traumasynth.nn.blocks import (GatedConv2d, LayerSpec, SNConv2d, bilinear_upsample,
                                   instance_normalize, spectral_normalize)

torch.manual_seed(0)


def test_layer_spec_validation():
    with pytest.raises(ConfigurationError):
        LayerSpec(0, 4).validate()
    with pytest.raises(ConfigurationError):
        LayerSpec(1, 1, kernel=4).validate()
    with pytest.raises(ConfigurationError):
        LayerSpec(1, 1, dilation=0).validate()


def test_gated_conv_zero_gate_halves_feature_branch():
    gc = GatedConv2d(LayerSpec(2, 4, norm="none", activation="elu")).double()
    with torch.no_grad():
        gc.conv_g.weight.zero_()
        gc.conv_g.bias.zero_()
    x = torch.randn(1, 2, 8, 8, dtype=torch.float64)
    assert torch.allclose(gc(x), 0.5 * F.elu(gc.conv_f(x)))


def test_gated_conv_stride_shape():
    gc = GatedConv2d(LayerSpec(1, 1, stride=2))
    assert gc(torch.randn(1, 1, 64, 64)).shape == (1, 1, 32, 32)


def test_gated_conv_scalar_oracle():
    """1x1 kernels with known weights, hand-evaluated formula."""
    spec = LayerSpec(1, 1, kernel=1, norm="none", activation="none")
    gc = GatedConv2d(spec).double()
    with torch.no_grad():
        gc.conv_f.weight.fill_(2.0)
        gc.conv_f.bias.fill_(0.5)
        gc.conv_g.weight.fill_(1.0)
        gc.conv_g.bias.fill_(-1.0)
    x = torch.tensor([[[[0.0, 1.0, -1.0], [2.0, 0.5, 0.0], [1.0, 1.0, 1.0]]]],
                     dtype=torch.float64)
    expect = (2.0 * x + 0.5) * torch.sigmoid(x - 1.0)
    assert torch.allclose(gc(x), expect, atol=1e-12)


def test_gated_conv_channel_mismatch():
    gc = GatedConv2d(LayerSpec(2, 4))
    with pytest.raises(ConfigurationError):
        gc(torch.randn(1, 3, 8, 8))


def test_gated_conv_zero_where_gate_forced_closed():
    gc = GatedConv2d(LayerSpec(1, 2, norm="none"))
    with torch.no_grad():
        gc.conv_g.weight.zero_()
        gc.conv_g.bias.fill_(-40.0)  # sigmoid ~ 0
    out = gc(torch.randn(1, 1, 8, 8))
    assert float(out.abs().max()) < 1e-12


def test_gated_conv_gradient_check():
    gc = GatedConv2d(LayerSpec(2, 3, norm="none", activation="elu")).double()
    proj = torch.randn(1, 3, 6, 6, dtype=torch.float64)
    for seed in range(5):
        torch.manual_seed(seed)
        x = torch.randn(1, 2, 6, 6, dtype=torch.float64)
        check_gradient(lambda t: (gc(t) * proj).sum(), x)


def test_spectral_normalize_diagonal():
    w = torch.diag(torch.tensor([3.0, 1.0]))
    wn = spectral_normalize(w, 50, {})
    assert torch.allclose(wn, torch.diag(torch.tensor([1.0, 1.0 / 3.0])), atol=1e-6)


def test_spectral_normalize_identity_unchanged():
    w = torch.eye(4)
    assert torch.allclose(spectral_normalize(w, 50, {}), w, atol=1e-6)


def test_spectral_normalize_svd_oracle():
    rng = torch.Generator().manual_seed(1)
    for _ in range(5):
        w = torch.randn(8, 8, generator=rng, dtype=torch.float64)
        wn = spectral_normalize(w, 50, {})
        assert float(torch.linalg.matrix_norm(wn, 2)) <= 1 + 1e-3


def test_spectral_normalize_zero_matrix():
    w = torch.zeros(3, 5)
    assert torch.equal(spectral_normalize(w, 5, {}), w)


def test_spectral_normalize_scale_equivariance():
    rng = torch.Generator().manual_seed(2)
    w = torch.randn(6, 6, generator=rng, dtype=torch.float64)
    a = spectral_normalize(w, 50, {})
    b = spectral_normalize(2.5 * w, 50, {})
    assert float((a - b).abs().max()) < 1e-4


def test_spectral_normalize_state_persists():
    w = torch.randn(5, 5, dtype=torch.float64)
    state = {}
    spectral_normalize(w, 1, state)
    u1 = state["u"].clone()
    spectral_normalize(w, 1, state)
    assert not torch.equal(u1, state["u"]) or torch.allclose(u1, state["u"], atol=1e-12)
    assert state["u"].shape == (5,)


def test_snconv_eval_deterministic():
    conv = SNConv2d(2, 3, kernel_size=3, padding=1)
    conv.eval()
    x = torch.randn(1, 2, 8, 8)
    assert torch.equal(conv(x), conv(x))


def test_instance_normalize_stats():
    x = torch.randn(2, 3, 7, 7)
    y = instance_normalize(x)
    assert float(y.mean(dim=(2, 3)).abs().max()) <= 1e-5
    assert float((y.var(dim=(2, 3), unbiased=False) - 1).abs().max()) <= 1e-4


def test_instance_normalize_constant_channel():
    # epsilon path: output collapses to zero up to float32 moment error
    x = torch.full((1, 2, 4, 4), 3.7)
    assert float(instance_normalize(x).abs().max()) < 1e-4


def test_instance_normalize_affine():
    x = torch.randn(1, 2, 16, 16)
    w = torch.full((2,), 2.0)
    b = torch.full((2,), 3.0)
    y = instance_normalize(x, weight=w, bias=b)
    assert torch.allclose(y.mean(dim=(2, 3)), torch.full((1, 2), 3.0), atol=1e-4)
    assert torch.allclose(y.std(dim=(2, 3), unbiased=False), torch.full((1, 2), 2.0), atol=1e-3)


def test_bilinear_upsample_constant():
    x = torch.full((1, 1, 3, 3), 0.42)
    assert torch.allclose(bilinear_upsample(x, 2), torch.full((1, 1, 6, 6), 0.42))


def test_bilinear_upsample_ramp():
    x = torch.tensor([[[[0.0, 1.0]]]])
    out = bilinear_upsample(x, 2)[0, 0, 0]
    assert torch.allclose(out, torch.tensor([0.0, 1 / 3, 2 / 3, 1.0]))


def test_bilinear_upsample_formula_oracle():
    rng = torch.Generator().manual_seed(3)
    x = torch.rand(1, 1, 2, 2, generator=rng)
    out = bilinear_upsample(x, 2)[0, 0].numpy()
    c = x[0, 0].numpy()
    ts = np.linspace(0, 1, 4)
    oracle = np.array([[c[0, 0] * (1 - ti) * (1 - tj) + c[0, 1] * (1 - ti) * tj
                        + c[1, 0] * ti * (1 - tj) + c[1, 1] * ti * tj
                        for tj in ts] for ti in ts])
    assert np.allclose(out, oracle, atol=1e-6)


def test_bilinear_upsample_rejects_factor_one():
    with pytest.raises(ConfigurationError):
        bilinear_upsample(torch.zeros(1, 1, 4, 4), 1)


def test_instance_norm_gradient_check():
    for seed in range(5):
        torch.manual_seed(seed + 10)
        x = torch.randn(1, 2, 5, 5, dtype=torch.float64)
        proj = torch.randn(1, 2, 5, 5, dtype=torch.float64)
        check_gradient(lambda t: (instance_normalize(t) * proj).sum(), x, h=1e-6)


def test_bilinear_gradient_check():
    for seed in range(5):
        torch.manual_seed(seed + 20)
        x = torch.randn(1, 1, 4, 4, dtype=torch.float64)
        proj = torch.randn(1, 1, 8, 8, dtype=torch.float64)
        check_gradient(lambda t: (bilinear_upsample(t, 2) * proj).sum(), x)


def test_snconv_gradient_check():
    conv = SNConv2d(1, 2, kernel_size=3, padding=1).double()
    conv.eval()
    for seed in range(5):
        torch.manual_seed(seed + 30)
        x = torch.randn(1, 1, 5, 5, dtype=torch.float64)
        proj = torch.randn(1, 2, 5, 5, dtype=torch.float64)
        check_gradient(lambda t: (conv(t) * proj).sum(), x)
