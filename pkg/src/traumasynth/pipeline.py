"""Dataset persistence and the multi-regime benchmark driver.

Phantom datasets live as directories of NIfTI files plus JSON sidecars
and one dataset manifest; the benchmark loop runs regime x seed x fold
with shared model init and real-data order, keeping synthesis provenance
separate from validation subjects.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from .banks import MaskBank, MaskEntry
from .config import LesionParams, PhantomConfig, SegConfig
from .errors import DataError
from .nifti import read_nifti, write_nifti, write_sidecar
from .phantom import LabelMap, LesionMask, PhantomCase, Volume, generate_case
from .preprocessing import Sketch, sketch_volume
from .segmentation import SegCase, SegRunResult, train_segmenter


def generate_phantom_pool(count: int, base_seed: int, prefix: str = "s",
                          config: PhantomConfig | None = None,
                          lesion: LesionParams | None = None,
                          with_lesions: bool = True) -> list[PhantomCase]:
    base = config or PhantomConfig()
    cases = []
    for i in range(count):
        cfg = PhantomConfig(volume_shape=base.volume_shape, num_regions=base.num_regions,
                            intensity_noise_sd=base.intensity_noise_sd,
                            ventricle_scale=base.ventricle_scale, seed=base_seed + i)
        cases.append(generate_case(f"{prefix}{i:03d}", cfg, lesion=lesion,
                                   with_lesion=with_lesions))
    return cases


def save_phantom_dataset(cases: list[PhantomCase], out_dir: str | Path) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    index = []
    for case in cases:
        sid = case.subject_id
        write_nifti(out / f"{sid}_image.nii.gz", case.volume.data.astype(np.float32),
                    case.volume.spacing)
        write_nifti(out / f"{sid}_label.nii.gz", case.label.data.astype(np.uint8))
        rec = {"subject_id": sid, "classes": case.label.classes, "meta": case.meta,
               "lesioned": case.lesioned_volume is not None}
        if case.lesioned_volume is not None:
            write_nifti(out / f"{sid}_lesioned_image.nii.gz",
                        case.lesioned_volume.data.astype(np.float32))
            write_nifti(out / f"{sid}_lesioned_label.nii.gz",
                        case.lesioned_label.data.astype(np.uint8))
            write_nifti(out / f"{sid}_mask.nii.gz", case.mask.data.astype(np.uint8))
        write_sidecar(out / f"{sid}.json", rec)
        index.append(rec)
    (out / "dataset.json").write_text(json.dumps(
        {"kind": "phantom_dataset", "count": len(cases), "subjects": index},
        indent=2, sort_keys=True) + "\n")
    return out


def load_phantom_dataset(in_dir: str | Path) -> list[PhantomCase]:
    src = Path(in_dir)
    manifest_path = src / "dataset.json"
    if not manifest_path.exists():
        raise DataError(f"no dataset manifest at {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("kind") != "phantom_dataset":
        raise DataError(f"{src} is not a phantom dataset")
    cases = []
    for rec in manifest["subjects"]:
        sid = rec["subject_id"]
        vdata, spacing = read_nifti(src / f"{sid}_image.nii.gz")
        ldata, _ = read_nifti(src / f"{sid}_label.nii.gz")
        case = PhantomCase(
            subject_id=sid,
            volume=Volume(data=vdata.astype(np.float32), spacing=spacing).validate(),
            label=LabelMap(data=ldata.astype(np.uint8), classes=rec["classes"]).validate(),
            meta=rec.get("meta", {}),
        )
        if rec.get("lesioned"):
            lv, _ = read_nifti(src / f"{sid}_lesioned_image.nii.gz")
            ll, _ = read_nifti(src / f"{sid}_lesioned_label.nii.gz")
            mk, _ = read_nifti(src / f"{sid}_mask.nii.gz")
            case.lesioned_volume = Volume(data=lv.astype(np.float32)).validate()
            case.lesioned_label = LabelMap(data=ll.astype(np.uint8),
                                           classes=rec["classes"]).validate()
            case.mask = LesionMask(data=mk.astype(np.uint8)).validate()
        cases.append(case)
    return cases


def dataset_hash(in_dir: str | Path) -> str:
    """Order-stable hash over a dataset directory's content files.

    Run metadata (lock file, run manifests) is excluded: it carries
    wall-times and pids, not artifact content.
    """
    src = Path(in_dir)
    h = hashlib.sha256()
    for p in sorted(src.rglob("*")):
        if not p.is_file() or p.name == ".lock" or "manifests" in p.parts:
            continue
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return h.hexdigest()


def build_mask_bank(cases: list[PhantomCase]) -> MaskBank:
    """Pool masks and in-mask sketches from the training cases."""
    entries = []
    for case in cases:
        if case.mask is None or case.lesioned_volume is None:
            continue
        sk = sketch_volume(case.lesioned_volume, case.mask)
        entries.append(MaskEntry(mask=case.mask, sketch=Sketch(data=sk),
                                 source_id=case.subject_id))
    if not entries:
        raise DataError("no lesioned cases to build a mask bank from")
    return MaskBank(entries=entries)


def seg_cases_from_phantoms(cases: list[PhantomCase], lesioned: bool = True) -> list[SegCase]:
    out = []
    for c in cases:
        if lesioned:
            if c.lesioned_volume is None:
                raise DataError(f"case {c.subject_id} has no lesioned variant")
            out.append(SegCase(subject_id=c.subject_id, volume=c.lesioned_volume,
                               label=c.lesioned_label))
        else:
            out.append(SegCase(subject_id=c.subject_id, volume=c.volume, label=c.label))
    return out


def seg_cases_from_synthetic(import_dir: str | Path) -> list[SegCase]:
    """Load an exported synthetic dataset as segmentation cases."""
    src = Path(import_dir)
    manifest = json.loads((src / "manifest.json").read_text())
    if manifest.get("kind") != "synthetic_dataset":
        raise DataError(f"{src} is not a synthetic dataset")
    cases = []
    for rec in manifest["entries"]:
        vdata, _ = read_nifti(src / rec["image"])
        ldata, _ = read_nifti(src / rec["label"])
        side = json.loads((src / rec["sidecar"]).read_text())
        cases.append(SegCase(
            subject_id=f"synth_{rec['seed']}",
            volume=Volume(data=vdata.astype(np.float32)).validate(),
            label=LabelMap(data=ldata.astype(np.uint8), classes=side["classes"]).validate(),
            synthetic=True))
    return cases


def audit_no_leakage(synth_dir: str | Path, gan_subjects: set[str],
                     val_subjects: set[str]) -> None:
    """Provenance audit: synthesis inputs must avoid validation subjects."""
    if gan_subjects & val_subjects:
        raise DataError(f"validation subjects fed the synthesis pipeline: "
                        f"{sorted(gan_subjects & val_subjects)}")
    src = Path(synth_dir)
    manifest = json.loads((src / "manifest.json").read_text())
    for rec in manifest["entries"]:
        side = json.loads((src / rec["sidecar"]).read_text())
        tid = side["provenance"]["template_target_id"]
        if tid in val_subjects:
            raise DataError(f"synthetic case {rec['image']} derives from "
                            f"validation subject {tid}")


def run_benchmark(real_cases: list[SegCase], synth_cases: list[SegCase] | None,
                  regimes: list[str], seeds: list[int], base_config: SegConfig,
                  split_seed: int = 0,
                  progress: bool = False) -> list[SegRunResult]:
    """All regimes share init/seed/data order; only augmentation differs."""
    results = []
    for regime in regimes:
        for seed in seeds:
            for fold in range(base_config.folds):
                cfg = SegConfig(**{**base_config.__dict__,
                                   "regime": regime, "seed": seed, "fold": fold})
                synth = synth_cases if regime == "tbigan" else None
                res = train_segmenter(cfg, real_cases, synth, split_seed=split_seed)
                results.append(res)
                if progress:
                    print(f"  {regime} seed={seed} fold={fold}: "
                          f"mean dice {res.mean_dice:.3f}", flush=True)
    return results
