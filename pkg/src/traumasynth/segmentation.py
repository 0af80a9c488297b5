"""Segmentation benchmark harness: subject-wise cross-validation, seven
augmentation regimes, Novograd optimization, per-region Dice reporting.

All regimes build the model from the same seed and iterate the real
samples in the same seeded order; only the augmentation differs. The
synthetic regime interleaves extra samples into the stream without
disturbing the relative order of the real ones, and synthesized cases
must never derive from validation subjects (checked by provenance).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field as dc_field

import numpy as np
import torch
import torch.nn.functional as F

from .augment import cutmix, intensity_augment, mixup, spatial_augment
from .config import SegConfig
from .errors import ConfigurationError, DataError
from .losses import dice_loss
from .metrics import dice_score_per_region
from .nn.unet import SegUNet2d, SegUNet3d
from .phantom import LabelMap, Volume
from .training import cosine_lr


@dataclass
class SegCase:
    """One segmentation subject (or synthesized case)."""

    subject_id: str
    volume: Volume
    label: LabelMap
    synthetic: bool = False


@dataclass
class FoldSplit:
    folds: list  # list of lists of subject ids

    def validate(self) -> "FoldSplit":
        flat = [s for fold in self.folds for s in fold]
        if len(flat) != len(set(flat)):
            raise DataError("subject appears in more than one fold")
        return self

    def train_val(self, fold: int) -> tuple[list, list]:
        val = list(self.folds[fold])
        train = [s for i, f in enumerate(self.folds) for s in f if i != fold]
        return train, val


def cross_validate_split(subject_ids: list[str], k: int = 5, seed: int = 0) -> FoldSplit:
    """Deterministic subject partition; fold sizes differ by at most one."""
    ids = list(subject_ids)
    if len(ids) < k:
        raise ConfigurationError(f"need at least {k} subjects, got {len(ids)}")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(ids))
    folds: list[list[str]] = [[] for _ in range(k)]
    for i, idx in enumerate(order):
        folds[i % k].append(ids[idx])
    return FoldSplit(folds=[sorted(f) for f in folds]).validate()


def novograd_step(params: list[torch.Tensor], grads: list[torch.Tensor], state: dict,
                  lr: float, beta1: float = 0.95, beta2: float = 0.98,
                  eps: float = 1e-8, weight_decay: float = 0.0) -> None:
    """One layer-wise normalized update, in place.

    Per layer: v <- beta2*v + (1-beta2)*||g||^2 (v starts at ||g||^2),
    m <- beta1*m + g/(sqrt(v)+eps) + wd*p, p <- p - lr*m.
    """
    if "m" not in state:
        state["m"] = [torch.zeros_like(p) for p in params]
        state["v"] = [None] * len(params)
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            continue
        norm_sq = float((g ** 2).sum())
        if state["v"][i] is None:
            state["v"][i] = norm_sq
        else:
            state["v"][i] = beta2 * state["v"][i] + (1 - beta2) * norm_sq
        denom = math.sqrt(state["v"][i]) + eps
        state["m"][i].mul_(beta1).add_(g / denom + weight_decay * p)
        p.data.add_(state["m"][i], alpha=-lr)


class Novograd(torch.optim.Optimizer):
    """Layer-wise second-moment normalized SGD with momentum."""

    def __init__(self, params, lr=1e-3, betas=(0.95, 0.98), eps=1e-8, weight_decay=0.0):
        defaults = dict(lr=lr, betas=betas, eps=eps, weight_decay=weight_decay)
        super().__init__(params, defaults)

    @torch.no_grad()
    def step(self, closure=None):
        loss = closure() if closure is not None else None
        for group in self.param_groups:
            beta1, beta2 = group["betas"]
            for p in group["params"]:
                if p.grad is None:
                    continue
                g = p.grad
                st = self.state[p]
                norm_sq = float((g ** 2).sum())
                if "v" not in st:
                    st["v"] = norm_sq
                    st["m"] = torch.zeros_like(p)
                else:
                    st["v"] = beta2 * st["v"] + (1 - beta2) * norm_sq
                denom = math.sqrt(st["v"]) + group["eps"]
                st["m"].mul_(beta1).add_(g / denom + group["weight_decay"] * p)
                p.add_(st["m"], alpha=-group["lr"])
        return loss


@dataclass
class SegRunResult:
    regime: str
    fold: int
    seed: int
    per_region: dict        # region id -> mean dice over validation subjects
    mean_dice: float
    per_subject: dict = dc_field(default_factory=dict)


def _slices_of(case: SegCase, slice_range: tuple[int, int] | None):
    lo, hi = (0, case.volume.shape[2]) if slice_range is None else slice_range
    for k in range(lo, min(hi, case.volume.shape[2])):
        yield case.volume.data[:, :, k], case.label.data[:, :, k]


def _build_2d_items(cases: list[SegCase], slice_range) -> list[tuple[np.ndarray, np.ndarray]]:
    items = []
    for case in cases:
        for img, lab in _slices_of(case, slice_range):
            items.append((img.astype(np.float32), lab.astype(np.int64)))
    return items


def _onehot_np(label: np.ndarray, classes: int) -> np.ndarray:
    eye = np.eye(classes, dtype=np.float32)
    return np.moveaxis(eye[label], -1, 0)


def _merge_streams(n_real: int, n_synth: int, rng: np.random.Generator) -> list[tuple[bool, int]]:
    """Interleave synth indices into the real stream, keeping real order."""
    real_order = rng.permutation(n_real)
    if n_synth == 0:
        return [(False, int(i)) for i in real_order]
    synth_order = rng.permutation(n_synth)
    merged: list[tuple[bool, int]] = []
    ri, si = 0, 0
    total = n_real + n_synth
    for _ in range(total):
        take_synth = si < n_synth and (ri >= n_real or rng.random() < n_synth / total)
        if take_synth:
            merged.append((True, int(synth_order[si])))
            si += 1
        else:
            merged.append((False, int(real_order[ri])))
            ri += 1
    return merged


def _augment_batch(imgs: np.ndarray, labs: np.ndarray, onehots: np.ndarray,
                   regime: str, rng: np.random.Generator, mixup_alpha: float):
    """Apply the regime's augmentation to one batch (channel-less arrays)."""
    if regime in ("baseline", "tbigan"):
        return imgs, onehots
    n = imgs.shape[0]
    if regime in ("spatial", "composed"):
        for i in range(n):
            if rng.random() < 0.5:
                imgs[i], labs[i] = spatial_augment(imgs[i], labs[i],
                                                   seed=int(rng.integers(2 ** 62)))
                onehots[i] = _onehot_np(labs[i], onehots.shape[1])
    if regime in ("intensity", "composed"):
        for i in range(n):
            if rng.random() < 0.5:
                imgs[i] = intensity_augment(imgs[i], seed=int(rng.integers(2 ** 62)))
    if regime == "mixup":
        perm = rng.permutation(n)
        lam = float(rng.beta(mixup_alpha, mixup_alpha))
        imgs = lam * imgs + (1 - lam) * imgs[perm]
        onehots = lam * onehots + (1 - lam) * onehots[perm]
    if regime == "cutmix":
        perm = rng.permutation(n)
        for i in range(n):
            (imgs[i], labs[i]) = cutmix((imgs[i], labs[i]), (imgs[perm[i]], labs[perm[i]]),
                                        seed=int(rng.integers(2 ** 62)))
            onehots[i] = _onehot_np(labs[i], onehots.shape[1])
    return imgs, onehots


def _seg_loss(logits: torch.Tensor, target_onehot: torch.Tensor) -> torch.Tensor:
    logp = F.log_softmax(logits, dim=1)
    ce = -(target_onehot * logp).sum(dim=1).mean()
    return ce + dice_loss(target_onehot, torch.softmax(logits, dim=1))


def predict_volume_2d(model: torch.nn.Module, volume: Volume, classes: int) -> LabelMap:
    model.eval()
    out = np.zeros(volume.shape, dtype=np.uint8)
    with torch.no_grad():
        for k in range(volume.shape[2]):
            x = torch.from_numpy(volume.data[:, :, k].astype(np.float32))[None, None]
            out[:, :, k] = model(x).argmax(dim=1)[0].numpy().astype(np.uint8)
    return LabelMap(data=out, classes=classes)


def predict_volume_3d(model: torch.nn.Module, volume: Volume, classes: int,
                      patch: tuple[int, int, int], stride: tuple[int, int, int] | None = None) -> LabelMap:
    """Sliding-window inference with overlapping softmax averaging."""
    model.eval()
    stride = stride or tuple(max(p // 2, 1) for p in patch)
    shape = volume.shape
    acc = np.zeros((classes,) + shape, dtype=np.float64)
    cnt = np.zeros(shape, dtype=np.float64)
    starts = [sorted(set(list(range(0, max(shape[d] - patch[d], 0) + 1, stride[d]))
                         + [max(shape[d] - patch[d], 0)])) for d in range(3)]
    with torch.no_grad():
        for x0 in starts[0]:
            for y0 in starts[1]:
                for z0 in starts[2]:
                    sl = (slice(x0, x0 + patch[0]), slice(y0, y0 + patch[1]),
                          slice(z0, z0 + patch[2]))
                    x = torch.from_numpy(volume.data[sl].astype(np.float32))[None, None]
                    probs = torch.softmax(model(x), dim=1)[0].numpy()
                    acc[(slice(None),) + sl] += probs
                    cnt[sl] += 1
    return LabelMap(data=acc.argmax(axis=0).astype(np.uint8), classes=classes)


def train_segmenter(config: SegConfig, real_cases: list[SegCase],
                    synth_cases: list[SegCase] | None = None,
                    split_seed: int = 0) -> SegRunResult:
    """Train one fold under one regime; returns per-region validation Dice."""
    config.validate()
    if (config.regime == "tbigan") != (synth_cases is not None and len(synth_cases) > 0):
        raise ConfigurationError("synth_cases must be provided exactly for the tbigan regime")
    ids = sorted({c.subject_id for c in real_cases})
    split = cross_validate_split(ids, k=config.folds, seed=split_seed)
    train_ids, val_ids = split.train_val(config.fold)
    train_cases = [c for c in real_cases if c.subject_id in train_ids]
    val_cases = [c for c in real_cases if c.subject_id in val_ids]
    classes = config.num_classes

    torch.manual_seed(config.seed)
    if config.dims == "2d":
        model = SegUNet2d(1, classes, config.base_width, config.depth)
    else:
        model = SegUNet3d(1, classes, config.base_width, config.depth)

    if config.optimizer == "novograd":
        opt = Novograd(model.parameters(), lr=config.lr0)
    else:
        opt = torch.optim.Adam(model.parameters(), lr=config.lr0)

    rng = np.random.default_rng(config.seed)
    aug_rng = np.random.default_rng(config.seed + 1)

    if config.dims == "2d":
        real_items = _build_2d_items(train_cases, config.slice_range)
        synth_items = _build_2d_items(synth_cases or [], config.slice_range)
        total_steps = max((config.epochs * (len(real_items) + len(synth_items)))
                          // config.batch_size, 1)
        step = 0
        model.train()
        for _ in range(config.epochs):
            stream = _merge_streams(len(real_items), len(synth_items), rng)
            for i0 in range(0, len(stream) - config.batch_size + 1, config.batch_size):
                chunk = stream[i0:i0 + config.batch_size]
                imgs = np.stack([(synth_items if s else real_items)[j][0] for s, j in chunk])
                labs = np.stack([(synth_items if s else real_items)[j][1] for s, j in chunk])
                onehots = np.stack([_onehot_np(l, classes) for l in labs])
                imgs, onehots = _augment_batch(imgs, labs, onehots, config.regime,
                                               aug_rng, config.mixup_alpha)
                step += 1
                lr = cosine_lr(min(step, total_steps), total_steps, config.lr0)
                for group in opt.param_groups:
                    group["lr"] = lr
                x = torch.from_numpy(imgs.astype(np.float32))[:, None]
                t = torch.from_numpy(onehots.astype(np.float32))
                loss = _seg_loss(model(x), t)
                opt.zero_grad()
                loss.backward()
                opt.step()
        predict = lambda vol: predict_volume_2d(model, vol, classes)
    else:
        train_all = train_cases + list(synth_cases or [])
        steps_per_epoch = max(len(train_all), 1)
        total_steps = max(config.epochs * steps_per_epoch // config.batch_size, 1)
        patch = config.patch_size
        step = 0
        model.train()
        for _ in range(config.epochs):
            order = _merge_streams(len(train_cases), len(synth_cases or []), rng)
            for i0 in range(0, len(order) - config.batch_size + 1, config.batch_size):
                chunk = order[i0:i0 + config.batch_size]
                imgs, labs = [], []
                for s, j in chunk:
                    case = (list(synth_cases or []) if s else train_cases)[j]
                    shape = case.volume.shape
                    c0 = [int(rng.integers(max(shape[d] - patch[d], 0) + 1)) for d in range(3)]
                    sl = tuple(slice(c0[d], c0[d] + patch[d]) for d in range(3))
                    imgs.append(case.volume.data[sl].astype(np.float32))
                    labs.append(case.label.data[sl].astype(np.int64))
                imgs = np.stack(imgs)
                labs = np.stack(labs)
                onehots = np.stack([_onehot_np(l, classes) for l in labs])
                imgs, onehots = _augment_batch(imgs, labs, onehots, config.regime,
                                               aug_rng, config.mixup_alpha)
                step += 1
                lr = cosine_lr(min(step, total_steps), total_steps, config.lr0)
                for group in opt.param_groups:
                    group["lr"] = lr
                x = torch.from_numpy(imgs.astype(np.float32))[:, None]
                t = torch.from_numpy(onehots.astype(np.float32))
                loss = _seg_loss(model(x), t)
                opt.zero_grad()
                loss.backward()
                opt.step()
        predict = lambda vol: predict_volume_3d(model, vol, classes, patch)

    per_subject = {}
    regions = list(range(1, classes))
    for case in val_cases:
        pred = predict(case.volume)
        per_subject[case.subject_id] = dice_score_per_region(pred, case.label, regions)
    per_region = {r: float(np.mean([d[r] for d in per_subject.values()])) for r in regions}
    mean_dice = float(np.mean(list(per_region.values())))
    return SegRunResult(regime=config.regime, fold=config.fold, seed=config.seed,
                        per_region=per_region, mean_dice=mean_dice, per_subject=per_subject)
