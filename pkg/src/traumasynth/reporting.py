"""Result tables: CSV rows and a Markdown table mirroring the benchmark
layout (regimes as rows, regions as columns, mean +/- sd cells, best and
second-best flagged per column)."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import DataError
from .segmentation import SegRunResult

CSV_HEADER = "regime,fold,seed,region,dice"


def results_to_csv(results: list[SegRunResult], path: str | Path) -> Path:
    """Flat CSV, deterministic row order."""
    rows = []
    for r in sorted(results, key=lambda r: (r.regime, r.seed, r.fold)):
        for region in sorted(r.per_region):
            rows.append(f"{r.regime},{r.fold},{r.seed},{region},{r.per_region[region]:.6f}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(CSV_HEADER + "\n" + "\n".join(rows) + "\n")
    return path


def _aggregate(results: list[SegRunResult]):
    regimes = sorted({r.regime for r in results})
    regions = sorted({k for r in results for k in r.per_region})
    cells = {}
    for regime in regimes:
        runs = [r for r in results if r.regime == regime]
        for region in regions:
            vals = [r.per_region[region] for r in runs if region in r.per_region]
            if not vals:
                raise DataError(f"missing results for regime={regime} region={region}")
            cells[(regime, region)] = (float(np.mean(vals)), float(np.std(vals)))
        means = [r.mean_dice for r in runs]
        cells[(regime, "average")] = (float(np.mean(means)), float(np.std(means)))
    return regimes, regions + ["average"], cells


def report_tables(results: list[SegRunResult], out_dir: str | Path,
                  region_names: dict[int, str] | None = None,
                  stem: str = "segmentation") -> dict[str, Path]:
    """Write CSV + Markdown; regenerating from the same inputs is byte-identical."""
    if not results:
        raise DataError("no results to report")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = results_to_csv(results, out / f"{stem}.csv")

    regimes, columns, cells = _aggregate(results)
    names = {c: (region_names or {}).get(c, f"R{c}") if isinstance(c, int) else str(c)
             for c in columns}

    # per column: flag best and second-best means
    flags = {}
    for col in columns:
        ranked = sorted(regimes, key=lambda rg: -cells[(rg, col)][0])
        flags[(ranked[0], col)] = "**"
        if len(ranked) > 1:
            flags[(ranked[1], col)] = "*"

    lines = ["| regime | " + " | ".join(names[c] for c in columns) + " |",
             "|" + "---|" * (len(columns) + 1)]
    for regime in regimes:
        row = [regime]
        for col in columns:
            mean, sd = cells[(regime, col)]
            mark = flags.get((regime, col), "")
            row.append(f"{mark}{mean:.3f}±{sd:.3f}{mark}")
        lines.append("| " + " | ".join(row) + " |")
    lines.append("")
    lines.append("`**` best per column, `*` second best; cells are mean±sd over folds and seeds.")
    md_path = out / f"{stem}.md"
    md_path.write_text("\n".join(lines) + "\n")
    return {"csv": csv_path, "markdown": md_path}
