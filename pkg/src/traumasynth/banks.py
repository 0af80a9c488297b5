"""Template and mask banks feeding the synthesis pipeline.

The template bank holds the labeled template warped onto each unlabeled
target (image interpolated linearly, labels nearest, same field). The
mask bank pools lesion masks and sketches from the training set; samples
are disturbed by a random elastic transform plus an axis flip, and the
sampled sketch is harmonized with the template's own edges by
morphological closing then opening.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .config import RegistrationConfig
from .errors import DataError
from .nifti import read_nifti, write_nifti
from .phantom import LabelMap, LesionMask, Volume
from .preprocessing import Sketch
from .registration import DeformationField, register_deformable, warp

STRUCT_3 = np.ones((3, 3, 3), dtype=bool)


@dataclass
class TemplateEntry:
    volume: Volume
    label: LabelMap
    target_id: str
    field_hash: str
    diverged: bool = False


@dataclass
class TemplateBank:
    entries: list[TemplateEntry] = dc_field(default_factory=list)

    def __len__(self) -> int:
        return len(self.entries)


@dataclass
class MaskEntry:
    mask: LesionMask
    sketch: Sketch   # 3D, support inside the mask
    source_id: str


@dataclass
class MaskBank:
    entries: list[MaskEntry] = dc_field(default_factory=list)

    def __len__(self) -> int:
        return len(self.entries)


def _hash_array(a: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(a).tobytes()).hexdigest()[:16]


def build_template_bank(template: tuple[Volume, LabelMap], targets: list[tuple[str, Volume]],
                        config: RegistrationConfig | None = None) -> TemplateBank:
    """Register the template onto every target and warp both image and label."""
    tvol, tlab = template
    bank = TemplateBank()
    for target_id, target in targets:
        if target.shape != tvol.shape:
            raise DataError(f"target {target_id} grid differs from template")
        res = register_deformable(tvol, target, config)
        wvol = warp(tvol, res.field, "linear")
        wlab = warp(tlab, res.field, "nearest")
        bank.entries.append(TemplateEntry(
            volume=wvol.validate(), label=wlab.validate(),
            target_id=target_id, field_hash=_hash_array(res.field.disp),
            diverged=res.diverged))
    return bank


def elastic_field(shape: tuple[int, int, int], rng: np.random.Generator,
                  control_points: int = 4, sigma_vox: float = 3.0) -> DeformationField:
    """Random smooth field from a coarse control grid of normal displacements."""
    ctrl = rng.normal(0.0, sigma_vox, size=(3, control_points, control_points, control_points))
    disp = np.stack([
        ndimage.zoom(ctrl[c], [s / control_points for s in shape], order=1,
                     mode="nearest", grid_mode=True)
        for c in range(3)
    ])
    return DeformationField(disp=disp).validate()


def sample_mask_bank(bank: MaskBank, seed: int,
                     sigma_vox: float = 1.5) -> tuple[LesionMask, Sketch]:
    """Draw one (mask, sketch) pair and disturb it elastically plus a flip."""
    if len(bank) == 0:
        raise DataError("mask bank is empty")
    rng = np.random.default_rng(seed)
    entry = bank.entries[int(rng.integers(len(bank)))]
    shape = entry.mask.shape
    fld = elastic_field(shape, rng, sigma_vox=sigma_vox)

    mask_f = warp(Volume(data=entry.mask.data.astype(np.float32)), fld, "linear").data
    sk_f = warp(Volume(data=entry.sketch.data.astype(np.float32)), fld, "linear").data
    if rng.random() < 0.5:
        mask_f = mask_f[::-1].copy()
        sk_f = sk_f[::-1].copy()
    mask = (mask_f >= 0.5).astype(np.uint8)
    sketch = ((sk_f >= 0.5) & (mask > 0)).astype(np.uint8)
    if mask.sum() == 0:
        # elastic push-out is pathological for sane banks; fall back to the raw entry
        mask = entry.mask.data.copy()
        sketch = entry.sketch.data.copy()
    return LesionMask(data=mask).validate(), Sketch(data=sketch).validate()


def close_open(binary: np.ndarray, structure: np.ndarray = STRUCT_3,
               min_component: int = 3) -> np.ndarray:
    """Morphological closing then opening; the composite filter is idempotent.

    The opening is an area opening (drop connected components smaller
    than `min_component`): sketch strokes are one voxel thick, so a
    structural opening with the same element would erase them outright.
    """
    closed = ndimage.binary_closing(binary.astype(bool), structure=structure)
    lab, n = ndimage.label(closed, structure=STRUCT_3)
    if n == 0:
        return closed
    counts = np.bincount(lab.ravel())
    keep = np.flatnonzero(counts >= min_component)
    return np.isin(lab, keep[keep > 0])


def harmonize_sketch(sketch: Sketch, template_edges: np.ndarray, mask: LesionMask) -> Sketch:
    """Blend the sampled sketch with the template's near-boundary edges.

    Union of the in-mask sketch with template edges in a 1-voxel shell
    around the mask boundary, then closing and opening; the result stays
    inside the dilated mask.
    """
    if sketch.data.shape != mask.data.shape or template_edges.shape != mask.data.shape:
        raise DataError("sketch/edges/mask shapes disagree")
    m = mask.data.astype(bool)
    dil = ndimage.binary_dilation(m, structure=STRUCT_3)
    ero = ndimage.binary_erosion(m, structure=STRUCT_3)
    shell = dil & ~ero
    union = (sketch.data.astype(bool) & m) | (template_edges.astype(bool) & shell)
    out = close_open(union) & dil
    return Sketch(data=out.astype(np.uint8)).validate()


# ---------------------------------------------------------------------------
# persistence: directories of NIfTI files plus a JSON index

def save_template_bank(bank: TemplateBank, out_dir: str | Path) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    index = []
    for i, e in enumerate(bank.entries):
        vp = out / f"template_{i:03d}_image.nii.gz"
        lp = out / f"template_{i:03d}_label.nii.gz"
        write_nifti(vp, e.volume.data.astype(np.float32), e.volume.spacing)
        write_nifti(lp, e.label.data.astype(np.uint8))
        index.append({"image": vp.name, "label": lp.name, "classes": e.label.classes,
                      "target_id": e.target_id, "field_hash": e.field_hash,
                      "diverged": e.diverged})
    (out / "index.json").write_text(json.dumps({"kind": "template_bank", "entries": index},
                                               indent=2, sort_keys=True) + "\n")
    return out


def load_template_bank(in_dir: str | Path) -> TemplateBank:
    src = Path(in_dir)
    meta = json.loads((src / "index.json").read_text())
    if meta.get("kind") != "template_bank":
        raise DataError(f"{src} is not a template bank")
    bank = TemplateBank()
    for rec in meta["entries"]:
        vdata, spacing = read_nifti(src / rec["image"])
        ldata, _ = read_nifti(src / rec["label"])
        bank.entries.append(TemplateEntry(
            volume=Volume(data=vdata.astype(np.float32), spacing=spacing).validate(),
            label=LabelMap(data=ldata.astype(np.uint8), classes=rec["classes"]).validate(),
            target_id=rec["target_id"], field_hash=rec["field_hash"],
            diverged=rec["diverged"]))
    return bank


def save_mask_bank(bank: MaskBank, out_dir: str | Path) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    index = []
    for i, e in enumerate(bank.entries):
        mp = out / f"mask_{i:03d}.nii.gz"
        sp = out / f"sketch_{i:03d}.nii.gz"
        write_nifti(mp, e.mask.data.astype(np.uint8))
        write_nifti(sp, e.sketch.data.astype(np.uint8))
        index.append({"mask": mp.name, "sketch": sp.name, "source_id": e.source_id})
    (out / "index.json").write_text(json.dumps({"kind": "mask_bank", "entries": index},
                                               indent=2, sort_keys=True) + "\n")
    return out


def load_mask_bank(in_dir: str | Path) -> MaskBank:
    src = Path(in_dir)
    meta = json.loads((src / "index.json").read_text())
    if meta.get("kind") != "mask_bank":
        raise DataError(f"{src} is not a mask bank")
    bank = MaskBank()
    for rec in meta["entries"]:
        mdata, _ = read_nifti(src / rec["mask"])
        sdata, _ = read_nifti(src / rec["sketch"])
        bank.entries.append(MaskEntry(
            mask=LesionMask(data=mdata.astype(np.uint8)).validate(),
            sketch=Sketch(data=sdata.astype(np.uint8)).validate(),
            source_id=rec["source_id"]))
    return bank
