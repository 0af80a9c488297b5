"""Quality metrics against brute-force oracles."""

import numpy as np
import pytest

from traumasynth.errors import DataError
from traumasynth.metrics import (QualityReport, dice_score_per_region, evaluate_quality,
                                 l1_err, l2_err, psnr, ssim)
from traumasynth.phantom import LabelMap


def ssim_oracle(a, b, window=11, sigma=1.5, k1=0.01, k2=0.03):
    """Independent per-pixel loop over fully contained windows."""
    half = window // 2
    x = np.arange(window) - (window - 1) / 2
    g = np.exp(-(x ** 2) / (2 * sigma ** 2))
    w = np.outer(g, g)
    w /= w.sum()
    c1, c2 = k1 ** 2, k2 ** 2
    vals = []
    for i in range(half, a.shape[0] - half):
        for j in range(half, a.shape[1] - half):
            pa = a[i - half:i + half + 1, j - half:j + half + 1]
            pb = b[i - half:i + half + 1, j - half:j + half + 1]
            mu_a, mu_b = (w * pa).sum(), (w * pb).sum()
            va = (w * pa * pa).sum() - mu_a ** 2
            vb = (w * pb * pb).sum() - mu_b ** 2
            cov = (w * pa * pb).sum() - mu_a * mu_b
            vals.append(((2 * mu_a * mu_b + c1) * (2 * cov + c2))
                        / ((mu_a ** 2 + mu_b ** 2 + c1) * (va + vb + c2)))
    return float(np.mean(vals))


def test_psnr_cap_and_arithmetic():
    a = np.random.default_rng(0).random((16, 16))
    assert psnr(a, a) == 100.0
    assert psnr(a, a + 0.1) == pytest.approx(20.0, abs=1e-9)


def test_psnr_matches_formula_oracle():
    rng = np.random.default_rng(1)
    for _ in range(20):
        a, b = rng.random((16, 16)), rng.random((16, 16))
        mse = np.mean((a - b) ** 2)
        assert psnr(a, b) == pytest.approx(10 * np.log10(1 / mse), abs=1e-9)


def test_psnr_monotone_in_mse():
    a = np.random.default_rng(2).random((16, 16))
    last = np.inf
    for amp in (0.01, 0.05, 0.1, 0.2):
        cur = psnr(a, np.clip(a + amp, 0, 2))
        assert cur < last
        last = cur


def test_ssim_identity_symmetry_bounds():
    rng = np.random.default_rng(3)
    a, b = rng.random((16, 16)), rng.random((16, 16))
    assert ssim(a, a) == pytest.approx(1.0, abs=1e-12)
    assert ssim(a, b) == pytest.approx(ssim(b, a), abs=1e-12)
    assert -1.0 <= ssim(a, b) <= 1.0


def test_ssim_constant_pair_oracle():
    a = np.full((16, 16), 0.2)
    b = np.full((16, 16), 0.7)
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    expect = ((2 * 0.2 * 0.7 + c1) * c2) / ((0.04 + 0.49 + c1) * c2)
    assert ssim(a, b) == pytest.approx(expect, abs=1e-12)


def test_ssim_matches_loop_oracle():
    rng = np.random.default_rng(4)
    for _ in range(5):
        a, b = rng.random((16, 16)), rng.random((16, 16))
        assert ssim(a, b) == pytest.approx(ssim_oracle(a, b), abs=1e-6)


def test_ssim_window_too_large():
    with pytest.raises(DataError):
        ssim(np.zeros((8, 8)), np.zeros((8, 8)), window=11)


def test_l1_l2_oracles():
    rng = np.random.default_rng(5)
    a, b = rng.random((16, 16)), rng.random((16, 16))
    assert l1_err(a, b) == pytest.approx(np.abs(a - b).mean(), abs=1e-15)
    assert l2_err(a, b) == pytest.approx(((a - b) ** 2).mean(), abs=1e-15)
    assert l1_err(a, a + 0.1) == pytest.approx(0.1, abs=1e-12)
    assert l2_err(a, a + 0.1) == pytest.approx(0.01, abs=1e-12)


def test_dice_per_region_values():
    p = LabelMap(np.zeros((4, 4, 4), dtype=np.uint8), classes=3)
    g = LabelMap(np.zeros((4, 4, 4), dtype=np.uint8), classes=3)
    p.data[:2, 0, 0] = 1
    g.data[1:3, 0, 0] = 1
    scores = dice_score_per_region(p, g)
    assert scores[1] == pytest.approx(0.5)
    assert scores[2] == 1.0  # both empty


def test_dice_identity_and_symmetry():
    rng = np.random.default_rng(6)
    p = LabelMap(rng.integers(0, 4, (6, 6, 6)).astype(np.uint8), classes=4)
    g = LabelMap(rng.integers(0, 4, (6, 6, 6)).astype(np.uint8), classes=4)
    assert all(v == 1.0 for v in dice_score_per_region(p, p).values())
    assert dice_score_per_region(p, g) == dice_score_per_region(g, p)


def test_dice_alphabet_mismatch():
    p = LabelMap(np.zeros((4, 4, 4), dtype=np.uint8), classes=3)
    g = LabelMap(np.zeros((4, 4, 4), dtype=np.uint8), classes=4)
    with pytest.raises(DataError):
        dice_score_per_region(p, g)


def test_quality_report_scaling():
    rng = np.random.default_rng(7)
    a = rng.random((20, 20, 4))
    rep = evaluate_quality(a, np.clip(a + 0.1, 0, 1.2))
    assert rep.l1_err == pytest.approx(0.1 * 100, rel=1e-6)
    assert rep.l2_err == pytest.approx(0.01 * 1000, rel=1e-6)
    assert isinstance(rep, QualityReport)
    rep.validate()


def test_quality_report_in_mask_option():
    rng = np.random.default_rng(8)
    a = rng.random((24, 24, 6)).astype(np.float64)
    b = a.copy()
    mask = np.zeros(a.shape, dtype=bool)
    mask[6:18, 6:18, 2:4] = True
    b[mask] = np.clip(b[mask] + 0.2, 0, 1)
    whole = evaluate_quality(a, b)
    inmask = evaluate_quality(a, b, mask=mask)
    assert inmask.l1_err > whole.l1_err
