"""Two-stage adversarial training with the published optimizer recipe.

Stage 1 trains the inpainting generator against its multi-scale
discriminators; stage 2 freezes it and trains the label network on the
restored images. Updates alternate 1:1, learning rates follow cosine
annealing, and every run is a pure function of its seed: model init,
batch order and all stochastic choices derive from it. Loss traces go to
append-only JSONL, checkpoints to a binary blob plus a JSON manifest.
"""

from __future__ import annotations

import copy
import dataclasses
import json
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np
import torch

from .config import (AblationFlags, DiscriminatorConfig, G1Config, G2Config, LossWeights,
                     TrainConfig)
from .errors import ConfigurationError, DataError, NumericError
from .losses import (dice_loss, feature_matching_loss, l1_recon, lsgan_d_loss, lsgan_g_loss,
                     perceptual_loss)
from .nn.discriminators import MultiScaleDiscriminator, discriminate_image, discriminate_label
from .nn.generators import InpaintGenerator, LabelUNet
from .nn.perceptual import build_perceptual_extractor
from .phantom import PhantomCase
from .preprocessing import CenterResize, make_slice_stacks

CHECKPOINT_SCHEMA = 1
SNAPSHOT_EVERY = 25


def cosine_lr(step: int, total: int, lr0: float) -> float:
    """lr0 * (1 + cos(pi * step / total)) / 2."""
    if not 0 <= step <= total:
        raise ConfigurationError(f"step {step} outside [0, {total}]")
    if total == 0:
        return lr0
    return lr0 * (1.0 + float(np.cos(np.pi * step / total))) / 2.0


@dataclass
class StackSample:
    """One 2.5D training tuple."""

    stack: np.ndarray              # (3, H, W) float32, the restoration target
    mask: np.ndarray               # (1, H, W) float32
    sketch: np.ndarray             # (1, H, W) float32
    label_onehot: np.ndarray       # (C, H, W) float32
    label: np.ndarray              # (H, W) int64
    subject_id: str


def build_gan_dataset(cases: list[PhantomCase],
                      resize: CenterResize | None = None) -> list[StackSample]:
    """Slice lesioned cases into per-slice training tuples."""
    samples: list[StackSample] = []
    for case in cases:
        if case.lesioned_volume is None or case.mask is None or case.lesioned_label is None:
            raise DataError(f"case {case.subject_id} has no lesioned variant")
        items = make_slice_stacks(case.lesioned_volume, case.mask, resize=resize)
        classes = case.lesioned_label.classes
        eye = np.eye(classes, dtype=np.float32)
        for it in items:
            k = it.stack.source_index
            lab = case.lesioned_label.data[:, :, k].astype(np.int64)
            if resize is not None:
                lab = resize.forward(lab)
            onehot = np.moveaxis(eye[lab], -1, 0)
            samples.append(StackSample(
                stack=it.stack.data.astype(np.float32),
                mask=it.mask[None].astype(np.float32),
                sketch=it.sketch.data[None].astype(np.float32),
                label_onehot=onehot,
                label=lab,
                subject_id=case.subject_id,
            ))
    return samples


def _batch(dataset: list[StackSample], idx: np.ndarray):
    stack = torch.from_numpy(np.stack([dataset[i].stack for i in idx]))
    mask = torch.from_numpy(np.stack([dataset[i].mask for i in idx]))
    sketch = torch.from_numpy(np.stack([dataset[i].sketch for i in idx]))
    onehot = torch.from_numpy(np.stack([dataset[i].label_onehot for i in idx]))
    return stack, mask, sketch, onehot


@dataclass
class TrainResult:
    checkpoint: Path
    manifest: Path
    trace_path: Path
    trace: list = dc_field(default_factory=list)


def save_checkpoint(path: str | Path, kind: str, models: dict, meta: dict) -> tuple[Path, Path]:
    """Binary parameter blob + JSON manifest (schema versioned)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save({name: m.state_dict() for name, m in models.items()}, path)
    manifest = {"schema_version": CHECKPOINT_SCHEMA, "kind": kind, **meta}
    mpath = path.with_suffix(".json")
    mpath.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path, mpath


def load_checkpoint(path: str | Path) -> tuple[dict, dict]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"checkpoint not found: {path}")
    mpath = path.with_suffix(".json")
    if not mpath.exists():
        raise DataError(f"checkpoint manifest not found: {mpath}")
    states = torch.load(path, weights_only=True)
    manifest = json.loads(mpath.read_text())
    if manifest.get("schema_version") != CHECKPOINT_SCHEMA:
        raise DataError(f"unsupported checkpoint schema {manifest.get('schema_version')}")
    return states, manifest


def build_stage1_models(g1_config: G1Config, d_config: DiscriminatorConfig, seed: int):
    torch.manual_seed(seed)
    g1 = InpaintGenerator(g1_config)
    d1 = MultiScaleDiscriminator(d_config)
    return g1, d1


def build_stage2_models(g2_config: G2Config, d_config: DiscriminatorConfig, seed: int):
    torch.manual_seed(seed)
    g2 = LabelUNet(g2_config)
    d2 = MultiScaleDiscriminator(d_config)
    return g2, d2


def load_g1(path: str | Path) -> tuple[InpaintGenerator, dict]:
    states, manifest = load_checkpoint(path)
    cfg = G1Config(**manifest["g1_config"])
    g1 = InpaintGenerator(cfg)
    g1.load_state_dict(states["g1"])
    g1.eval()
    return g1, manifest


def load_g2(path: str | Path) -> tuple[LabelUNet, dict]:
    states, manifest = load_checkpoint(path)
    cfg = G2Config(**manifest["g2_config"])
    g2 = LabelUNet(cfg)
    g2.load_state_dict(states["g2"])
    g2.eval()
    return g2, manifest


class _TraceWriter:
    """Append-only JSONL loss trace, one record per step."""

    def __init__(self, path: Path):
        self.path = path
        self.records: list[dict] = []
        path.parent.mkdir(parents=True, exist_ok=True)
        self._fh = open(path, "w")

    def append(self, record: dict) -> None:
        self.records.append(record)
        self._fh.write(json.dumps(record, sort_keys=True) + "\n")
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()


def _effective_weights(weights: LossWeights, ablation: AblationFlags) -> LossWeights:
    w = copy.deepcopy(weights)
    if ablation.no_pbl:
        w.prec = 0.0
        w.fm1 = 0.0
    if ablation.no_iid:
        w.g1 = 0.0
    return w


def _set_lr(opt: torch.optim.Optimizer, lr: float) -> None:
    for group in opt.param_groups:
        group["lr"] = lr


def _f(value) -> float:
    return float(value.detach()) if torch.is_tensor(value) else float(value)


def _check_finite_step(value: float, step: int, what: str) -> None:
    if not np.isfinite(value):
        raise NumericError(f"non-finite {what} at step {step}: {value}")


def train_stage1(config: TrainConfig, dataset: list[StackSample], out_dir: str | Path,
                 g1_config: G1Config | None = None,
                 d_config: DiscriminatorConfig | None = None) -> TrainResult:
    """Adversarial training of the image inpainting network."""
    config.validate()
    if not dataset:
        raise DataError("empty training dataset")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if config.num_threads > 0:
        torch.set_num_threads(config.num_threads)

    g1_config = g1_config or G1Config()
    g1_config.use_coarse = not config.ablation.no_c2f
    d_config = d_config or DiscriminatorConfig(in_channels=5)
    g1, d1 = build_stage1_models(g1_config, d_config, config.seed)
    extractor = build_perceptual_extractor(seed=0, in_channels=3)
    weights = _effective_weights(config.weights, config.ablation)
    train_d1 = not config.ablation.no_iid

    opt_g = torch.optim.Adam(g1.parameters(), lr=config.lr_g, betas=(config.beta1, config.beta2))
    opt_d = torch.optim.Adam(d1.parameters(), lr=config.lr_d, betas=(config.beta1, config.beta2))
    rng = np.random.default_rng(config.seed)
    trace = _TraceWriter(out / "stage1_trace.jsonl")

    meta = {
        "seed": config.seed,
        "g1_config": dataclasses.asdict(g1_config),
        "d_config": dataclasses.asdict(d_config),
        "loss_weights": dataclasses.asdict(config.weights),
        "ablation": dataclasses.asdict(config.ablation),
        "steps": config.steps,
    }
    snapshot = {"g1": copy.deepcopy(g1.state_dict()), "d1": copy.deepcopy(d1.state_dict())}
    ckpt_path = out / "stage1.pt"

    try:
        for step in range(1, config.steps + 1):
            lr_g = cosine_lr(step, config.steps, config.lr_g)
            lr_d = cosine_lr(step, config.steps, config.lr_d)
            _set_lr(opt_g, lr_g)
            _set_lr(opt_d, lr_d)

            idx = rng.integers(len(dataset), size=config.batch_size)
            stack, mask, sketch, _ = _batch(dataset, idx)
            if config.ablation.no_sketch:
                sketch = torch.zeros_like(sketch)
            masked = stack * (1 - mask)
            fake = g1(masked, mask, sketch)

            if train_d1:
                real_scores, _ = discriminate_image(d1, stack, mask, sketch)
                fake_scores_d, _ = discriminate_image(d1, fake.detach(), mask, sketch)
                d_loss = lsgan_d_loss(real_scores, fake_scores_d)
                opt_d.zero_grad()
                d_loss.backward()
                opt_d.step()
            else:
                with torch.no_grad():
                    real_scores, _ = discriminate_image(d1, stack, mask, sketch)
                    fake_scores_d, _ = discriminate_image(d1, fake, mask, sketch)
                    d_loss = lsgan_d_loss(real_scores, fake_scores_d)

            rec = l1_recon(stack, fake)
            parts = {"rec": rec}
            g_total = weights.rec * rec
            if weights.g1 > 0 or weights.fm1 > 0:
                fake_scores, fake_feats = discriminate_image(d1, fake, mask, sketch)
                with torch.no_grad():
                    _, real_feats = discriminate_image(d1, stack, mask, sketch)
                if weights.g1 > 0:
                    g_adv = lsgan_g_loss(fake_scores)
                    parts["g_adv"] = g_adv
                    g_total = g_total + weights.g1 * g_adv
                if weights.fm1 > 0:
                    fm = feature_matching_loss(real_feats, fake_feats)
                    parts["fm"] = fm
                    g_total = g_total + weights.fm1 * fm
            if weights.prec > 0:
                prec = perceptual_loss(stack, fake, extractor)
                parts["prec"] = prec
                g_total = g_total + weights.prec * prec

            _check_finite_step(_f(g_total), step, "generator loss")
            _check_finite_step(_f(d_loss), step, "discriminator loss")
            opt_g.zero_grad()
            g_total.backward()
            opt_g.step()

            record = {"step": step, "lr_g": lr_g, "lr_d": lr_d,
                      "d_adv": _f(d_loss), "g_total": _f(g_total)}
            record.update({k: _f(v) for k, v in parts.items()})
            trace.append(record)

            if step % SNAPSHOT_EVERY == 0:
                snapshot = {"g1": copy.deepcopy(g1.state_dict()),
                            "d1": copy.deepcopy(d1.state_dict())}
    except NumericError:
        # keep the last finite snapshot so the run remains usable
        g1.load_state_dict(snapshot["g1"])
        d1.load_state_dict(snapshot["d1"])
        save_checkpoint(ckpt_path, "stage1", {"g1": g1, "d1": d1},
                        {**meta, "aborted": True})
        trace.close()
        raise
    trace.close()

    path, mpath = save_checkpoint(ckpt_path, "stage1", {"g1": g1, "d1": d1}, meta)
    return TrainResult(checkpoint=path, manifest=mpath, trace_path=trace.path,
                       trace=trace.records)


def train_stage2(config: TrainConfig, dataset: list[StackSample], g1_checkpoint: str | Path,
                 out_dir: str | Path, g2_config: G2Config | None = None,
                 d_config: DiscriminatorConfig | None = None) -> TrainResult:
    """Adversarial training of the label reconstruction network, G1 frozen."""
    config.validate()
    if not dataset:
        raise DataError("empty training dataset")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if config.num_threads > 0:
        torch.set_num_threads(config.num_threads)

    g1, g1_manifest = load_g1(g1_checkpoint)
    for p in g1.parameters():
        p.requires_grad_(False)

    classes = dataset[0].label_onehot.shape[0]
    g2_config = g2_config or G2Config(num_classes=classes)
    if g2_config.num_classes != classes:
        raise ConfigurationError(
            f"g2 config expects {g2_config.num_classes} classes, dataset has {classes}")
    d_config = d_config or DiscriminatorConfig(in_channels=classes + 3 + 1)
    g2, d2 = build_stage2_models(g2_config, d_config, config.seed)
    weights = config.weights

    opt_g = torch.optim.Adam(g2.parameters(), lr=config.lr_g, betas=(config.beta1, config.beta2))
    opt_d = torch.optim.Adam(d2.parameters(), lr=config.lr_d, betas=(config.beta1, config.beta2))
    rng = np.random.default_rng(config.seed + 1)
    trace = _TraceWriter(out / "stage2_trace.jsonl")

    meta = {
        "seed": config.seed,
        "g2_config": dataclasses.asdict(g2_config),
        "d_config": dataclasses.asdict(d_config),
        "loss_weights": dataclasses.asdict(config.weights),
        "ablation": dataclasses.asdict(config.ablation),
        "steps": config.steps,
        "g1_checkpoint": str(g1_checkpoint),
        "g1_config": g1_manifest["g1_config"],
    }
    snapshot = {"g2": copy.deepcopy(g2.state_dict()), "d2": copy.deepcopy(d2.state_dict())}
    ckpt_path = out / "stage2.pt"

    try:
        for step in range(1, config.steps + 1):
            lr_g = cosine_lr(step, config.steps, config.lr_g)
            lr_d = cosine_lr(step, config.steps, config.lr_d)
            _set_lr(opt_g, lr_g)
            _set_lr(opt_d, lr_d)

            idx = rng.integers(len(dataset), size=config.batch_size)
            stack, mask, sketch, onehot = _batch(dataset, idx)
            if config.ablation.no_sketch:
                sketch = torch.zeros_like(sketch)
            with torch.no_grad():
                restored = g1(stack * (1 - mask), mask, sketch)

            masked_onehot = onehot * (1 - mask)
            fake_probs = g2(masked_onehot, restored)

            real_scores, _ = discriminate_label(d2, onehot, stack, mask)
            fake_scores_d, _ = discriminate_label(d2, fake_probs.detach(), restored, mask)
            d_loss = lsgan_d_loss(real_scores, fake_scores_d)
            opt_d.zero_grad()
            d_loss.backward()
            opt_d.step()

            fake_scores, fake_feats = discriminate_label(d2, fake_probs, restored, mask)
            with torch.no_grad():
                _, real_feats = discriminate_label(d2, onehot, stack, mask)
            g_adv = lsgan_g_loss(fake_scores)
            dice = dice_loss(onehot, fake_probs)
            fm = feature_matching_loss(real_feats, fake_feats)
            g_total = weights.g2 * g_adv + weights.dice * dice + weights.fm2 * fm

            _check_finite_step(_f(g_total), step, "generator loss")
            _check_finite_step(_f(d_loss), step, "discriminator loss")
            opt_g.zero_grad()
            g_total.backward()
            opt_g.step()

            trace.append({"step": step, "lr_g": lr_g, "lr_d": lr_d,
                          "g_adv": _f(g_adv), "dice": _f(dice), "fm": _f(fm),
                          "g_total": _f(g_total), "d_adv": _f(d_loss)})

            if step % SNAPSHOT_EVERY == 0:
                snapshot = {"g2": copy.deepcopy(g2.state_dict()),
                            "d2": copy.deepcopy(d2.state_dict())}
    except NumericError:
        g2.load_state_dict(snapshot["g2"])
        d2.load_state_dict(snapshot["d2"])
        save_checkpoint(ckpt_path, "stage2", {"g2": g2, "d2": d2},
                        {**meta, "aborted": True})
        trace.close()
        raise
    trace.close()

    path, mpath = save_checkpoint(ckpt_path, "stage2", {"g2": g2, "d2": d2}, meta)
    return TrainResult(checkpoint=path, manifest=mpath, trace_path=trace.path,
                       trace=trace.records)
