"""Built-in invariant and oracle suite behind `traumasynth selftest`.

Each check prints one PASS/FAIL line; the caller exits nonzero when any
check fails. Oracles here are brute-force re-derivations independent of
the implementation paths they verify.
"""

from __future__ import annotations

import numpy as np
import torch

from .banks import close_open
from .config import LossWeights, PhantomConfig
from .losses import dice_loss, lsgan_d_loss, lsgan_g_loss, total_loss_stage1
from .metrics import dice_score_per_region, l1_err, l2_err, psnr, ssim
from .nn.blocks import GatedConv2d, LayerSpec, bilinear_upsample, instance_normalize, spectral_normalize
from .phantom import LabelMap, generate_phantom
from .preprocessing import hadamard_mask, histogram_equalize
from .registration import DeformationField, bending_energy, warp
from .training import cosine_lr


def _ssim_oracle(a, b, window=11, sigma=1.5, k1=0.01, k2=0.03):
    """Per-pixel loop over fully contained windows."""
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
            mu_a = (w * pa).sum()
            mu_b = (w * pb).sum()
            va = (w * pa * pa).sum() - mu_a ** 2
            vb = (w * pb * pb).sum() - mu_b ** 2
            cov = (w * pa * pb).sum() - mu_a * mu_b
            vals.append(((2 * mu_a * mu_b + c1) * (2 * cov + c2))
                        / ((mu_a ** 2 + mu_b ** 2 + c1) * (va + vb + c2)))
    return float(np.mean(vals))


def _bending_oracle(u: np.ndarray) -> float:
    """Direct stencil loops."""
    _, nx, ny, nz = u.shape
    total = 0.0
    count = 0
    for i in range(1, nx - 1):
        for j in range(1, ny - 1):
            for k in range(1, nz - 1):
                acc = 0.0
                for c in range(3):
                    uxx = u[c, i + 1, j, k] - 2 * u[c, i, j, k] + u[c, i - 1, j, k]
                    uyy = u[c, i, j + 1, k] - 2 * u[c, i, j, k] + u[c, i, j - 1, k]
                    uzz = u[c, i, j, k + 1] - 2 * u[c, i, j, k] + u[c, i, j, k - 1]
                    uxy = (u[c, i + 1, j + 1, k] - u[c, i + 1, j - 1, k]
                           - u[c, i - 1, j + 1, k] + u[c, i - 1, j - 1, k]) / 4
                    uxz = (u[c, i + 1, j, k + 1] - u[c, i + 1, j, k - 1]
                           - u[c, i - 1, j, k + 1] + u[c, i - 1, j, k - 1]) / 4
                    uyz = (u[c, i, j + 1, k + 1] - u[c, i, j + 1, k - 1]
                           - u[c, i, j - 1, k + 1] + u[c, i, j - 1, k - 1]) / 4
                    acc += uxx ** 2 + uyy ** 2 + uzz ** 2 + 2 * (uxy ** 2 + uxz ** 2 + uyz ** 2)
                total += acc
                count += 1
    return total / count


def run_selftest(verbose: bool = True) -> int:
    """Run every check; returns the number of failures."""
    rng = np.random.default_rng(0)
    torch.manual_seed(0)
    failures = 0

    def check(name: str, ok: bool, detail: str = "") -> None:
        nonlocal failures
        if not ok:
            failures += 1
        if verbose:
            tail = f"  ({detail})" if detail else ""
            print(f"{'PASS' if ok else 'FAIL'}  {name}{tail}", flush=True)

    # metric oracles on random pairs
    ok_psnr = ok_ssim = ok_l1 = ok_l2 = True
    for _ in range(20):
        a = rng.random((16, 16))
        b = rng.random((16, 16))
        mse = np.mean((a - b) ** 2)
        ok_psnr &= abs(psnr(a, b) - 10 * np.log10(1.0 / mse)) < 1e-6
        ok_ssim &= abs(ssim(a, b) - _ssim_oracle(a, b)) < 1e-6
        ok_l1 &= abs(l1_err(a, b) - np.abs(a - b).mean()) < 1e-12
        ok_l2 &= abs(l2_err(a, b) - ((a - b) ** 2).mean()) < 1e-12
    check("psnr matches brute-force formula", ok_psnr)
    check("ssim matches windowed-loop oracle", ok_ssim)
    check("l1/l2 match direct means", ok_l1 and ok_l2)

    p = LabelMap(rng.integers(0, 4, (8, 8, 8)).astype(np.uint8), classes=4)
    g = LabelMap(rng.integers(0, 4, (8, 8, 8)).astype(np.uint8), classes=4)
    scores = dice_score_per_region(p, g)
    ok = True
    for r, s in scores.items():
        pi, gi = p.data == r, g.data == r
        denom = pi.sum() + gi.sum()
        expect = 1.0 if denom == 0 else 2 * (pi & gi).sum() / denom
        ok &= abs(s - expect) < 1e-12
    check("per-region dice matches counting oracle", ok)

    fake = [torch.tensor(rng.random((2, 1, 4, 4))) for _ in range(3)]
    real = [torch.tensor(rng.random((2, 1, 4, 4))) for _ in range(3)]
    expect_g = sum(((f - 1) ** 2).mean() for f in fake)
    expect_d = sum(((r - 1) ** 2).mean() + (f ** 2).mean() for r, f in zip(real, fake))
    check("lsgan losses match direct evaluation",
          torch.allclose(lsgan_g_loss(fake), expect_g)
          and torch.allclose(lsgan_d_loss(real, fake), expect_d))
    check("stage-1 weighted total at unit parts",
          abs(float(total_loss_stage1(
              {"g1": 1.0, "rec": 1.0, "prec": 1.0, "fm": 1.0}, LossWeights())) - 5.05) < 1e-12)

    w = torch.tensor(rng.standard_normal((8, 8)))
    wn = spectral_normalize(w, 50, {})
    sv = torch.linalg.matrix_norm(wn, 2)
    check("spectral norm vs SVD oracle", abs(float(sv) - 1.0) < 1e-2, f"opnorm {float(sv):.5f}")

    u = rng.standard_normal((3, 5, 5, 5))
    be = bending_energy(DeformationField(disp=u))
    be_o = _bending_oracle(u)
    check("bending energy vs stencil oracle", abs(be - be_o) < 1e-8, f"delta {abs(be - be_o):.2e}")
    grid = np.stack(np.meshgrid(*[np.arange(6.0)] * 3, indexing="ij"))
    check("bending energy of affine field is zero",
          bending_energy(DeformationField(disp=0.7 * grid + 0.2)) < 1e-20)

    x = rng.random((12, 12))
    m = (rng.random((12, 12)) > 0.5).astype(np.uint8)
    check("hadamard mask identities",
          np.array_equal(hadamard_mask(x, np.zeros_like(m)), x)
          and np.all(hadamard_mask(x, np.ones_like(m)) == 0)
          and np.all(hadamard_mask(x, m)[m == 1] == 0))

    vol, lab = generate_phantom(PhantomConfig(seed=5))
    he = histogram_equalize(vol)
    flat_in = vol.data.ravel()[:2000]
    flat_out = he.data.ravel()[:2000]
    order = np.argsort(flat_in, kind="stable")
    check("histogram equalization is rank-preserving",
          bool(np.all(np.diff(flat_out[order]) >= -1e-12)))

    ident = DeformationField.identity(vol.shape)
    check("identity warp is exact for both interp modes",
          np.array_equal(warp(vol, ident, "linear").data, vol.data)
          and np.array_equal(warp(lab, ident, "nearest").data, lab.data))
    fld = DeformationField(disp=rng.standard_normal((3,) + vol.shape) * 2)
    wl = warp(lab, fld, "nearest")
    check("nearest warp preserves the label alphabet",
          set(np.unique(wl.data)) <= set(np.unique(lab.data)))

    r = torch.tensor(rng.random((1, 1, 2, 2)))
    up = bilinear_upsample(r, 2)[0, 0].numpy()
    xs = np.linspace(0, 1, 4)
    oracle = np.empty((4, 4))
    corners = r[0, 0].numpy()
    for i, ti in enumerate(xs):
        for j, tj in enumerate(xs):
            oracle[i, j] = (corners[0, 0] * (1 - ti) * (1 - tj) + corners[0, 1] * (1 - ti) * tj
                            + corners[1, 0] * ti * (1 - tj) + corners[1, 1] * ti * tj)
    check("bilinear upsample matches align-corners formula", np.allclose(up, oracle, atol=1e-6))

    check("cosine schedule endpoints",
          cosine_lr(0, 100, 1.0) == 1.0 and cosine_lr(100, 100, 1.0) == 0.0
          and abs(cosine_lr(50, 100, 1.0) - 0.5) < 1e-12)

    gc = GatedConv2d(LayerSpec(2, 3, norm="none", activation="elu")).double()
    with torch.no_grad():
        gc.conv_g.weight.zero_()
        gc.conv_g.bias.zero_()
    xin = torch.tensor(rng.standard_normal((1, 2, 6, 6)))
    check("gated conv reduces to 0.5*activation at zero gate",
          torch.allclose(gc(xin), 0.5 * torch.nn.functional.elu(gc.conv_f(xin))))

    xi = torch.tensor(rng.standard_normal((2, 3, 8, 8)))
    y = instance_normalize(xi)
    check("instance norm zero-mean unit-var",
          float(y.mean(dim=(2, 3)).abs().max()) < 1e-5
          and float((y.var(dim=(2, 3), unbiased=False) - 1).abs().max()) < 1e-4)

    onehot = torch.zeros(1, 3, 4, 4)
    onehot[0, 1] = 1.0
    check("dice loss zero at perfect prediction", float(dice_loss(onehot, onehot)) < 1e-6)
    mask_a = torch.zeros(1, 1, 4, 4)
    mask_b = torch.zeros(1, 1, 4, 4)
    mask_a[0, 0, :2] = 1.0
    mask_b[0, 0, 2:] = 1.0
    check("dice loss near one for disjoint single-class masks",
          float(dice_loss(mask_a, mask_b)) > 0.999)

    line = np.zeros((10, 10, 10), dtype=bool)
    line[2:9, 5, 5] = True
    line[5, 5, 5] = False
    check("3^3 closing bridges a 1-voxel gap", bool(close_open(line)[5, 5, 5]))
    co = close_open(line)
    check("close-open filter is idempotent", np.array_equal(co, close_open(co)))

    if verbose:
        print(f"{'OK' if failures == 0 else 'FAILED'}: "
              f"{failures} failing check(s)", flush=True)
    return failures
