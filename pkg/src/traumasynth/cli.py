"""Command-line entry point wiring every stage of the pipeline.

Configuration precedence: command-line flags > config file (TOML or
JSON) > built-in defaults. Every command writes exactly one immutable
run manifest under its output directory, takes a lock file against
concurrent writers, and is deterministic given --seed. Exit codes:
0 success, 1 usage/configuration, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from pathlib import Path

from . import __version__
from .errors import ConfigurationError, DataError, TraumaSynthError

ARTIFACT_ROOT_ENV = "TRAUMASYNTH_ARTIFACTS"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        sys.exit(1)


def _load_config_file(path: str | None) -> dict:
    if not path:
        return {}
    p = Path(path)
    if not p.exists():
        raise ConfigurationError(f"config file not found: {p}")
    text = p.read_text()
    if p.suffix in (".toml", ".tml"):
        try:
            import tomllib  # py311+
        except ModuleNotFoundError:
            import tomli as tomllib
        return tomllib.loads(text)
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"config file {p} is neither TOML nor valid JSON: {exc}") from exc


def resolve_out(path: str) -> Path:
    """Relative outputs land under the artifact root (env override)."""
    p = Path(path)
    if p.is_absolute():
        return p
    root = os.environ.get(ARTIFACT_ROOT_ENV)
    return (Path(root) / p) if root else p


class _OutputLock:
    def __init__(self, out_dir: Path):
        self.path = out_dir / ".lock"

    def __enter__(self):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise DataError(f"output directory is locked by another run: {self.path}") from None
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        return self

    def __exit__(self, *exc):
        self.path.unlink(missing_ok=True)
        return False


def write_run_manifest(out_dir: Path, command: str, config: dict, inputs: dict,
                       outputs: dict, wall_time: float) -> Path:
    mdir = out_dir / "manifests"
    mdir.mkdir(parents=True, exist_ok=True)
    n = len(list(mdir.glob("run-*.json"))) + 1
    path = mdir / f"run-{n:04d}.json"
    payload = {
        "command": command,
        "config": config,
        "inputs": inputs,
        "outputs": outputs,
        "wall_time_s": round(wall_time, 3),
        "version": __version__,
    }
    path.write_text(json.dumps(payload, indent=2, sort_keys=True, default=str) + "\n")
    return path


def _merge(args: argparse.Namespace, file_cfg: dict, command: str, defaults: dict) -> dict:
    """flags > config file ([command] section, then top level) > defaults."""
    section = file_cfg.get(command.replace("-", "_"), {})
    merged = {}
    for key, default in defaults.items():
        flag_val = getattr(args, key, None)
        if flag_val is not None:
            merged[key] = flag_val
        elif key in section:
            merged[key] = section[key]
        elif key in file_cfg and not isinstance(file_cfg[key], dict):
            merged[key] = file_cfg[key]
        else:
            merged[key] = default
    return merged


# ---------------------------------------------------------------------------
# commands

def cmd_gen_phantoms(args, file_cfg) -> int:
    from .config import get_profile
    from .pipeline import dataset_hash, generate_phantom_pool, save_phantom_dataset

    cfg = _merge(args, file_cfg, "gen-phantoms", {
        "count": 10, "seed": 0, "profile": "desk", "prefix": "s", "with_lesions": True,
    })
    profile = get_profile(cfg["profile"])
    out = resolve_out(args.out)
    t0 = time.time()
    with _OutputLock(out):
        from .config import PhantomConfig
        pcfg = PhantomConfig(volume_shape=profile.volume_shape,
                             num_regions=profile.num_regions)
        cases = generate_phantom_pool(cfg["count"], cfg["seed"], prefix=cfg["prefix"],
                                      config=pcfg, with_lesions=cfg["with_lesions"])
        save_phantom_dataset(cases, out)
        digest = dataset_hash(out)
        write_run_manifest(out, "gen-phantoms", cfg, {}, {"dataset": str(out),
                                                          "dataset_sha256": digest},
                           time.time() - t0)
    print(f"wrote {len(cases)} phantoms to {out} (sha256 {digest[:16]})")
    return 0


def cmd_train_gan(args, file_cfg) -> int:
    from .config import (AblationFlags, DiscriminatorConfig, G1Config, G2Config, TrainConfig,
                         get_profile)
    from .pipeline import load_phantom_dataset
    from .training import build_gan_dataset, train_stage1, train_stage2

    cfg = _merge(args, file_cfg, "train-gan", {
        "steps": 300, "seed": 0, "batch_size": None, "profile": "desk", "stage": "both",
        "no_c2f": False, "no_sketch": False, "no_pbl": False, "no_iid": False,
        "lr_g": 5e-4, "lr_d": 2e-4,
    })
    profile = get_profile(cfg["profile"])
    batch = cfg["batch_size"] or profile.batch_size
    out = resolve_out(args.out)
    t0 = time.time()
    with _OutputLock(out):
        cases = load_phantom_dataset(args.data)
        dataset = build_gan_dataset(cases)
        tcfg = TrainConfig(steps=cfg["steps"], seed=cfg["seed"], batch_size=batch,
                           lr_g=cfg["lr_g"], lr_d=cfg["lr_d"],
                           ablation=AblationFlags(no_c2f=cfg["no_c2f"],
                                                  no_sketch=cfg["no_sketch"],
                                                  no_pbl=cfg["no_pbl"],
                                                  no_iid=cfg["no_iid"]))
        outputs = {}
        if cfg["stage"] in ("1", "both"):
            r1 = train_stage1(tcfg, dataset, out,
                              g1_config=G1Config(base_width=profile.g1_width),
                              d_config=DiscriminatorConfig(in_channels=5,
                                                           base_width=profile.d_width))
            outputs["stage1"] = str(r1.checkpoint)
            print(f"stage 1 done: {r1.checkpoint}")
        if cfg["stage"] in ("2", "both"):
            g1_ckpt = outputs.get("stage1", args.g1 or str(out / "stage1.pt"))
            classes = cases[0].label.classes
            r2 = train_stage2(tcfg, dataset, g1_ckpt, out,
                              g2_config=G2Config(base_width=profile.g2_width,
                                                 num_classes=classes),
                              d_config=DiscriminatorConfig(in_channels=classes + 4,
                                                           base_width=profile.d_width))
            outputs["stage2"] = str(r2.checkpoint)
            print(f"stage 2 done: {r2.checkpoint}")
        write_run_manifest(out, "train-gan", cfg, {"data": str(args.data)}, outputs,
                           time.time() - t0)
    return 0


def cmd_build_banks(args, file_cfg) -> int:
    from .banks import build_template_bank, save_mask_bank, save_template_bank
    from .config import RegistrationConfig
    from .pipeline import build_mask_bank, load_phantom_dataset

    cfg = _merge(args, file_cfg, "build-banks", {
        "template_subject": None, "max_targets": None, "lambda_bend": 0.1,
    })
    out = resolve_out(args.out)
    t0 = time.time()
    with _OutputLock(out):
        cases = load_phantom_dataset(args.data)
        tid = cfg["template_subject"] or cases[0].subject_id
        tcase = next((c for c in cases if c.subject_id == tid), None)
        if tcase is None:
            raise DataError(f"template subject {tid} not in dataset")
        targets = [(c.subject_id, c.volume) for c in cases if c.subject_id != tid]
        if cfg["max_targets"]:
            targets = targets[: cfg["max_targets"]]
        rcfg = RegistrationConfig(lambda_bend=cfg["lambda_bend"])
        tb = build_template_bank((tcase.volume, tcase.label), targets, rcfg)
        mb = build_mask_bank(cases)
        tdir = save_template_bank(tb, out / "templates")
        mdir = save_mask_bank(mb, out / "masks")
        write_run_manifest(out, "build-banks", cfg, {"data": str(args.data)},
                           {"templates": str(tdir), "masks": str(mdir)}, time.time() - t0)
    print(f"template bank: {len(tb)} entries; mask bank: {len(mb)} entries")
    return 0


def cmd_synthesize(args, file_cfg) -> int:
    from .banks import load_mask_bank, load_template_bank
    from .pipeline import dataset_hash
    from .synthesis import export_dataset, generate_cases

    cfg = _merge(args, file_cfg, "synthesize", {"count": 10, "seed": 0})
    out = resolve_out(args.out)
    t0 = time.time()
    with _OutputLock(out):
        tb = load_template_bank(args.templates)
        mb = load_mask_bank(args.masks)
        cases, stats = generate_cases(tb, mb, args.g1, args.g2, cfg["count"], cfg["seed"])
        manifest = export_dataset(cases, out, stats)
        digest = dataset_hash(out)
        write_run_manifest(out, "synthesize", cfg,
                           {"templates": str(args.templates), "masks": str(args.masks),
                            "g1": str(args.g1), "g2": str(args.g2)},
                           {"count": manifest["count"], "dataset_sha256": digest},
                           time.time() - t0)
    print(f"exported {manifest['count']} cases to {out} "
          f"(rejection rate {stats['rejection_rate']:.0%}, sha256 {digest[:16]})")
    return 0


def cmd_train_seg(args, file_cfg) -> int:
    from .config import SEG_REGIMES, SegConfig
    from .pipeline import (load_phantom_dataset, run_benchmark, seg_cases_from_phantoms,
                           seg_cases_from_synthetic)
    from .reporting import report_tables

    cfg = _merge(args, file_cfg, "train-seg", {
        "regime": "baseline", "dims": "2d", "folds": 5, "seed": 0, "seeds": None,
        "epochs": 2, "batch_size": 8, "base_width": 8, "lr0": 1e-3,
        "optimizer": "novograd", "slice_lo": None, "slice_hi": None,
    })
    regimes = [cfg["regime"]] if cfg["regime"] != "all" else list(SEG_REGIMES)
    seeds = ([int(s) for s in str(cfg["seeds"]).split(",")] if cfg["seeds"]
             else [cfg["seed"]])
    out = resolve_out(args.out)
    t0 = time.time()
    with _OutputLock(out):
        real = seg_cases_from_phantoms(load_phantom_dataset(args.data))
        synth = seg_cases_from_synthetic(args.synth) if args.synth else None
        needs_synth = any(r == "tbigan" for r in regimes)
        if needs_synth and synth is None:
            raise ConfigurationError("tbigan regime requires --synth DIR")
        slice_range = None
        if cfg["slice_lo"] is not None and cfg["slice_hi"] is not None:
            slice_range = (cfg["slice_lo"], cfg["slice_hi"])
        classes = real[0].label.classes
        base = SegConfig(dims=cfg["dims"], folds=cfg["folds"], epochs=cfg["epochs"],
                         batch_size=cfg["batch_size"], base_width=cfg["base_width"],
                         lr0=cfg["lr0"], optimizer=cfg["optimizer"],
                         num_classes=classes, slice_range=slice_range)
        results = run_benchmark(real, synth, regimes, seeds, base, progress=True)
        paths = report_tables(results, out)
        write_run_manifest(out, "train-seg", cfg, {"data": str(args.data),
                                                   "synth": str(args.synth)},
                           {k: str(v) for k, v in paths.items()}, time.time() - t0)
    print(f"wrote {paths['csv']} and {paths['markdown']}")
    return 0


def cmd_report(args, file_cfg) -> int:
    from .reporting import report_tables
    from .segmentation import SegRunResult

    out = resolve_out(args.out)
    t0 = time.time()
    rows: dict[tuple, dict] = {}
    for csv_file in args.results:
        lines = Path(csv_file).read_text().strip().splitlines()
        if lines[0] != "regime,fold,seed,region,dice":
            raise DataError(f"{csv_file}: unexpected CSV header {lines[0]!r}")
        for line in lines[1:]:
            regime, fold, seed, region, dice = line.split(",")
            key = (regime, int(fold), int(seed))
            rows.setdefault(key, {})[int(region)] = float(dice)
    if not rows:
        raise DataError("no result rows found")
    results = []
    for (regime, fold, seed), per_region in sorted(rows.items()):
        results.append(SegRunResult(regime=regime, fold=fold, seed=seed,
                                    per_region=per_region,
                                    mean_dice=float(sum(per_region.values())
                                                    / len(per_region))))
    with _OutputLock(out):
        paths = report_tables(results, out)
        write_run_manifest(out, "report", {"results": [str(r) for r in args.results]},
                           {}, {k: str(v) for k, v in paths.items()}, time.time() - t0)
    print(f"wrote {paths['csv']} and {paths['markdown']}")
    return 0


def cmd_selftest(args, file_cfg) -> int:
    from .selftest import run_selftest
    failures = run_selftest(verbose=True)
    return 0 if failures == 0 else 3


def build_parser() -> _Parser:
    parser = _Parser(prog="traumasynth",
                     description="Paired lesion-image/label synthesis and the "
                                 "segmentation-augmentation benchmark")
    parser.add_argument("--config", help="TOML or JSON config file")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-phantoms", help="generate a labeled phantom dataset")
    p.add_argument("--count", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--profile", choices=("desk", "fidelity"))
    p.add_argument("--prefix")
    p.add_argument("--no-lesions", dest="with_lesions", action="store_const", const=False)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_phantoms)

    p = sub.add_parser("train-gan", help="train the two-stage inpainting networks")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--stage", choices=("1", "2", "both"))
    p.add_argument("--steps", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--profile", choices=("desk", "fidelity"))
    p.add_argument("--g1", help="stage-1 checkpoint when running --stage 2 alone")
    p.add_argument("--lr-g", type=float)
    p.add_argument("--lr-d", type=float)
    for flag in ("no-c2f", "no-sketch", "no-pbl", "no-iid"):
        p.add_argument(f"--{flag}", dest=flag.replace("-", "_"),
                       action="store_const", const=True)
    p.set_defaults(func=cmd_train_gan)

    p = sub.add_parser("build-banks", help="build template and mask banks")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--template-subject")
    p.add_argument("--max-targets", type=int)
    p.add_argument("--lambda-bend", type=float)
    p.set_defaults(func=cmd_build_banks)

    p = sub.add_parser("synthesize", help="synthesize paired cases from the banks")
    p.add_argument("--templates", required=True)
    p.add_argument("--masks", required=True)
    p.add_argument("--g1", required=True)
    p.add_argument("--g2", required=True)
    p.add_argument("--count", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synthesize)

    p = sub.add_parser("train-seg", help="segmentation benchmark across regimes")
    p.add_argument("--data", required=True)
    p.add_argument("--synth")
    p.add_argument("--regime", choices=("baseline", "spatial", "intensity", "composed",
                                        "mixup", "cutmix", "tbigan", "all"))
    p.add_argument("--dims", choices=("2d", "3d"))
    p.add_argument("--folds", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--seeds", help="comma-separated list overriding --seed")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--base-width", type=int)
    p.add_argument("--lr0", type=float)
    p.add_argument("--optimizer", choices=("novograd", "adam"))
    p.add_argument("--slice-lo", type=int)
    p.add_argument("--slice-hi", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_seg)

    p = sub.add_parser("report", help="regenerate tables from result CSVs")
    p.add_argument("--results", nargs="+", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("selftest", help="run the invariant/oracle suite")
    p.set_defaults(func=cmd_selftest)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        file_cfg = _load_config_file(args.config)
        return args.func(args, file_cfg)
    except TraumaSynthError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
