"""Training objectives for both stages.

Least-squares adversarial terms regress multi-scale patch scores to 0/1
targets; reconstruction is whole-image L1; the perceptual term is L1 in
the frozen pyramid's feature space; feature matching is L1 over the
discriminators' hidden activations; label reconstruction adds soft Dice
over the whole map. Expectations are realized as minibatch means.
"""

from __future__ import annotations

import torch

from .config import LossWeights
from .errors import DataError, NumericError
from .nn.perceptual import RandomFeaturePyramid, build_perceptual_extractor  # noqa: F401

DICE_EPS = 1e-6


def lsgan_g_loss(fake_scores: list[torch.Tensor]) -> torch.Tensor:
    """Sum over scales of mean squared deviation of fake scores from 1."""
    return sum(((s - 1.0) ** 2).mean() for s in fake_scores)


def lsgan_d_loss(real_scores: list[torch.Tensor], fake_scores: list[torch.Tensor]) -> torch.Tensor:
    """Sum over scales of mean[(real-1)^2] + mean[fake^2]."""
    if len(real_scores) != len(fake_scores):
        raise DataError("real/fake score lists differ in length")
    return sum(((r - 1.0) ** 2).mean() + (f ** 2).mean()
               for r, f in zip(real_scores, fake_scores))


def l1_recon(real: torch.Tensor, fake: torch.Tensor) -> torch.Tensor:
    """Mean absolute difference over every element of the image."""
    if real.shape != fake.shape:
        raise DataError(f"shape mismatch: {real.shape} vs {fake.shape}")
    return (real - fake).abs().mean()


def perceptual_loss(real: torch.Tensor, fake: torch.Tensor,
                    extractor: RandomFeaturePyramid) -> torch.Tensor:
    """Per-layer normalized L1 distance in the frozen feature pyramid."""
    fr = extractor(real)
    ff = extractor(fake)
    return sum((a - b).abs().mean() for a, b in zip(fr, ff))


def feature_matching_loss(real_feats: list, fake_feats: list) -> torch.Tensor:
    """L1 over discriminator activations, summed over scales and layers."""
    if len(real_feats) != len(fake_feats):
        raise DataError("feature stacks differ in scale count")
    total = None
    for r_scale, f_scale in zip(real_feats, fake_feats):
        if len(r_scale) != len(f_scale):
            raise DataError("feature stacks differ in layer count")
        for r, f in zip(r_scale, f_scale):
            if r.shape != f.shape:
                raise DataError(f"feature shape mismatch: {r.shape} vs {f.shape}")
            term = (r - f).abs().mean()
            total = term if total is None else total + term
    if total is None:
        raise DataError("empty feature stacks")
    return total


def dice_loss(real_onehot: torch.Tensor, pred_probs: torch.Tensor,
              eps: float = DICE_EPS) -> torch.Tensor:
    """Soft Dice over the whole map, averaged across classes."""
    if real_onehot.shape != pred_probs.shape:
        raise DataError(f"shape mismatch: {real_onehot.shape} vs {pred_probs.shape}")
    dims = (0,) + tuple(range(2, real_onehot.ndim))
    inter = (real_onehot * pred_probs).sum(dim=dims)
    denom = real_onehot.sum(dim=dims) + pred_probs.sum(dim=dims)
    dice = (2 * inter + eps) / (denom + eps)
    return 1.0 - dice.mean()


def _check_finite(parts: dict) -> None:
    for name, value in parts.items():
        v = float(value)
        if v != v or v in (float("inf"), float("-inf")):
            raise NumericError(f"non-finite loss component {name!r}: {v}")


def total_loss_stage1(parts: dict, weights: LossWeights) -> torch.Tensor:
    """Weighted stage-1 combination; missing parts count as zero."""
    _check_finite(parts)
    return (weights.g1 * parts.get("g1", 0.0)
            + weights.d1 * parts.get("d1", 0.0)
            + weights.rec * parts.get("rec", 0.0)
            + weights.prec * parts.get("prec", 0.0)
            + weights.fm1 * parts.get("fm", 0.0))


def total_loss_stage2(parts: dict, weights: LossWeights) -> torch.Tensor:
    """Weighted stage-2 combination; missing parts count as zero."""
    _check_finite(parts)
    return (weights.g2 * parts.get("g2", 0.0)
            + weights.d2 * parts.get("d2", 0.0)
            + weights.dice * parts.get("dice", 0.0)
            + weights.fm2 * parts.get("fm", 0.0))
