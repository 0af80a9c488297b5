"""Inference pipeline: template + disturbed mask/sketch in, paired case out.

A case samples one template-bank entry and one disturbed mask/sketch,
harmonizes the sketch with the template's own edges, runs the inpainting
generator per slice stack, composites, feeds the restored stacks to the
label network, composites labels, and reassembles both volumes. An
automated screen stands in for manual quality review; rejects carry
their reasons. Export writes NIfTI pairs with full provenance.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np
import torch
from scipy import ndimage

from .banks import MaskBank, TemplateBank, harmonize_sketch, sample_mask_bank
from .config import ScreenThresholds
from .errors import DataError
from .nifti import write_nifti, write_sidecar
from .nn.generators import composite
from .phantom import LabelMap, LesionMask, Volume
from .preprocessing import make_slice_stacks, reassemble_volume, sketch_volume
from .training import load_g1, load_g2


@dataclass
class ScreenReport:
    accept: bool
    reasons: list = dc_field(default_factory=list)


@dataclass
class SynthesisCase:
    volume: Volume
    label: LabelMap
    mask: LesionMask
    provenance: dict
    qc: ScreenReport | None = None


def _file_sha(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:16]


def synthesize_case(template_bank: TemplateBank, mask_bank: MaskBank,
                    g1_checkpoint: str | Path, g2_checkpoint: str | Path,
                    seed: int, _model_cache: dict | None = None) -> SynthesisCase:
    """Run the full inference pipeline for one seed; deterministic."""
    if len(template_bank) == 0 or len(mask_bank) == 0:
        raise DataError("banks must be nonempty")
    cache = _model_cache if _model_cache is not None else {}
    if "g1" not in cache:
        cache["g1"], _ = load_g1(g1_checkpoint)
        cache["g2"], _ = load_g2(g2_checkpoint)
        cache["g1_sha"] = _file_sha(g1_checkpoint)
        cache["g2_sha"] = _file_sha(g2_checkpoint)
    g1, g2 = cache["g1"], cache["g2"]

    rng = np.random.default_rng(seed)
    t_idx = int(rng.integers(len(template_bank)))
    entry = template_bank.entries[t_idx]
    mask_seed = int(rng.integers(2 ** 62))
    mask, sketch = sample_mask_bank(mask_bank, seed=mask_seed)
    if mask.shape != entry.volume.shape:
        raise DataError("mask bank grid differs from template bank")

    template_edges = sketch_volume(entry.volume)
    sketch = harmonize_sketch(sketch, template_edges, mask)

    items = make_slice_stacks(entry.volume, mask, sketch3d=sketch.data)
    if not items:
        # disturbed mask vanished against this template; keep the raw entry mask
        mask = LesionMask(data=mask_bank.entries[0].mask.data.copy())
        items = make_slice_stacks(entry.volume, mask, sketch3d=sketch.data)

    classes = entry.label.classes
    eye = np.eye(classes, dtype=np.float32)
    stacks = torch.from_numpy(np.stack([it.stack.data for it in items]))
    masks_t = torch.from_numpy(np.stack([it.mask[None].astype(np.float32) for it in items]))
    sketches_t = torch.from_numpy(np.stack([it.sketch.data[None].astype(np.float32)
                                            for it in items]))
    labels_np = np.stack([entry.label.data[:, :, it.stack.source_index] for it in items])
    onehot = torch.from_numpy(np.moveaxis(eye[labels_np.astype(np.int64)], -1, 1).copy())

    with torch.no_grad():
        raw = g1(stacks * (1 - masks_t), masks_t, sketches_t)
        comp_img = composite(raw, stacks, masks_t)
        probs = g2(onehot * (1 - masks_t), raw)
        hard = probs.argmax(dim=1).numpy()

    out_img = {}
    out_lab_volume = entry.label.data.copy()
    for j, it in enumerate(items):
        k = it.stack.source_index
        out_img[k] = comp_img[j].numpy()
        lab_slice = np.where(it.mask > 0, hard[j].astype(out_lab_volume.dtype), labels_np[j])
        out_lab_volume[:, :, k] = lab_slice

    out_volume = reassemble_volume(out_img, entry.volume, mask)
    out_label = LabelMap(data=out_lab_volume, classes=classes).validate()

    provenance = {
        "seed": seed,
        "template_index": t_idx,
        "template_target_id": entry.target_id,
        "template_field_hash": entry.field_hash,
        "mask_seed": mask_seed,
        "g1_checkpoint_sha": cache["g1_sha"],
        "g2_checkpoint_sha": cache["g2_sha"],
    }
    return SynthesisCase(volume=out_volume.validate(), label=out_label, mask=mask,
                         provenance=provenance)


def quality_screen(case: SynthesisCase, thresholds: ScreenThresholds | None = None,
                   reference_label: LabelMap | None = None) -> ScreenReport:
    """Automated accept/reject with reasons; rejection is a result, not an error.

    `reference_label` is the pre-synthesis template label for the class
    retention check; it defaults to the case's own label outside the mask.
    """
    th = thresholds or ScreenThresholds()
    reasons = []
    data = case.volume.data
    m = case.mask.data.astype(bool)

    if not np.all(np.isfinite(data)):
        reasons.append("non-finite")
    else:
        if data.min() < 0 or data.max() > 1:
            reasons.append("intensity range")
        if m.any() and float(data[m].std()) < th.min_inmask_std:
            reasons.append("collapsed texture")

    if reference_label is not None:
        ref_counts = np.bincount(reference_label.data.ravel(), minlength=case.label.classes)
        out_counts = np.bincount(case.label.data.ravel(), minlength=case.label.classes)
        for c in range(case.label.classes):
            if ref_counts[c] > 0 and out_counts[c] < th.min_class_retention * ref_counts[c]:
                reasons.append(f"class {c} lost")

    if m.any():
        # region-size check: the share of in-mask voxels sitting in label
        # components smaller than min_region_size must stay low (mask
        # boundaries always shave small slivers off real regions, so a
        # strict per-component floor would reject perfect label maps)
        struct = ndimage.generate_binary_structure(3, 1)
        inmask = np.where(m, case.label.data.astype(np.int64), -1)
        tiny = 0
        for c in np.unique(case.label.data[m]):
            comp, n = ndimage.label(inmask == c, structure=struct)
            if n:
                sizes = np.bincount(comp.ravel())[1:]
                tiny += int(sizes[sizes < th.min_region_size].sum())
        frac = tiny / float(m.sum())
        if frac > th.max_fragment_frac:
            reasons.append(f"fragmented labels ({frac:.0%} in tiny components)")

    report = ScreenReport(accept=not reasons, reasons=reasons)
    case.qc = report
    return report


def generate_cases(template_bank: TemplateBank, mask_bank: MaskBank,
                   g1_checkpoint: str | Path, g2_checkpoint: str | Path,
                   count: int, base_seed: int,
                   thresholds: ScreenThresholds | None = None,
                   max_attempts: int | None = None) -> tuple[list[SynthesisCase], dict]:
    """Synthesize until `count` cases pass the screen; returns rejection stats."""
    cache: dict = {}
    accepted: list[SynthesisCase] = []
    attempts = 0
    rejected = 0
    reasons: dict[str, int] = {}
    limit = max_attempts if max_attempts is not None else max(4 * count, count + 16)
    while len(accepted) < count and attempts < limit:
        seed = base_seed + attempts
        attempts += 1
        case = synthesize_case(template_bank, mask_bank, g1_checkpoint, g2_checkpoint,
                               seed, _model_cache=cache)
        t_idx = case.provenance["template_index"]
        report = quality_screen(case, thresholds,
                                reference_label=template_bank.entries[t_idx].label)
        if report.accept:
            accepted.append(case)
        else:
            rejected += 1
            for r in report.reasons:
                reasons[r] = reasons.get(r, 0) + 1
    if len(accepted) < count:
        raise DataError(f"only {len(accepted)}/{count} cases passed screening "
                        f"after {attempts} attempts; reasons: {reasons}")
    stats = {"attempts": attempts, "rejected": rejected,
             "rejection_rate": rejected / attempts, "reasons": reasons}
    return accepted, stats


def export_dataset(cases: list[SynthesisCase], out_dir: str | Path,
                   rejection_stats: dict | None = None) -> dict:
    """Write accepted cases as NIfTI pairs plus provenance; returns the manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, case in enumerate(cases):
        if case.qc is not None and not case.qc.accept:
            raise DataError(f"case {i} was rejected by screening; export accepted cases only")
        img = out / f"case_{i:04d}_image.nii.gz"
        lab = out / f"case_{i:04d}_label.nii.gz"
        write_nifti(img, case.volume.data.astype(np.float32), case.volume.spacing)
        write_nifti(lab, case.label.data.astype(np.uint8))
        side = out / f"case_{i:04d}.json"
        write_sidecar(side, {"provenance": case.provenance,
                             "classes": case.label.classes,
                             "mask_voxels": int(case.mask.data.sum())})
        entries.append({"image": img.name, "label": lab.name, "sidecar": side.name,
                        "image_sha": _file_sha(img), "label_sha": _file_sha(lab),
                        "seed": case.provenance["seed"]})
    manifest = {
        "kind": "synthetic_dataset",
        "count": len(entries),
        "entries": entries,
        "rejection_stats": rejection_stats or {},
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest
