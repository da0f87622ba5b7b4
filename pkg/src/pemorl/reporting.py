"""Output files: schema-ordered CSV, the evaluation JSON, and the gnuplot script."""

from __future__ import annotations

import csv
import json
import math
import os
from functools import lru_cache
from importlib import resources

SCHEMA_FILE = "outputs.json"


@lru_cache(maxsize=1)
def load_schema() -> dict:
    return json.loads(resources.files("pemorl").joinpath("schemas").joinpath(SCHEMA_FILE).read_text(encoding="utf-8"))


def columns(name: str) -> list:
    spec = load_schema()["files"][name]
    return [c["name"] for c in spec.get("columns", spec.get("fields", []))]


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return str(int(v))
    if isinstance(v, float) or hasattr(v, "dtype"):
        v = v.item() if hasattr(v, "item") else v
        if isinstance(v, float):
            if not math.isfinite(v):
                raise ValueError(f"refusing to write non-finite value {v}")
            return repr(v)
    return str(v)


def write_csv(path, name: str, rows, config_hash: str, cols: list | None = None) -> str:
    """Write ``rows`` (dicts) with the schema's column order for ``name``.

    Missing keys become empty cells; keys outside the schema are an error so
    the schema cannot drift from the files.
    """
    cols = cols or columns(name)
    known = set(cols)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for row in rows:
            extra = set(row) - known
            if extra:
                raise KeyError(f"{name}: columns not in the schema: {sorted(extra)}")
            full = {**row, "config_hash": config_hash}
            w.writerow([_cell(full.get(c)) for c in cols])
    return str(path)


def read_csv(path) -> list:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def write_json(path, name: str, payload: dict, config_hash: str) -> str:
    body = {"config_hash": config_hash, **payload}
    missing = [f for f in columns(name) if f not in body]
    if missing:
        raise KeyError(f"{name}: missing fields {missing}")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(body, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return str(path)


def lam_column(lam: float) -> str:
    return f"lam_{lam:g}"


def curves(metrics_rows: list) -> tuple[list, list]:
    """Seed-averaged ``model_return`` per iteration and lambda from metrics rows (as read back)."""
    by = {}
    for r in metrics_rows:
        if r.get("variant", "pemorl") != "pemorl":
            continue
        key = (float(r["lam"]), int(r["iteration"]))
        by.setdefault(key, []).append(float(r["model_return"]))
    lams = sorted({k[0] for k in by})
    iters = sorted({k[1] for k in by})
    cols = ["config_hash", "iteration"] + [lam_column(x) for x in lams]
    rows = []
    for it in iters:
        row = {"iteration": it}
        for lam in lams:
            vals = by.get((lam, it))
            row[lam_column(lam)] = sum(vals) / len(vals) if vals else None
        rows.append(row)
    return cols, rows


def gnuplot_script(curve_cols: list, has_ablation: bool) -> str:
    lines = [
        "# gnuplot -p report.gp",
        "set datafile separator ','",
        "set key autotitle columnhead",
        "set terminal pngcairo size 900,600",
        "set output 'curves.png'",
        "set xlabel 'iteration'",
        "set ylabel 'model-evaluated return'",
    ]
    series = [f"'curves.csv' using 2:{i + 1} with lines" for i, c in enumerate(curve_cols) if c.startswith("lam_")]
    if series:
        lines.append("plot " + ", \\\n     ".join(series))
    if has_ablation:
        lines += [
            "set output 'ablation.png'",
            "set xlabel 'lambda'",
            "set ylabel 'R/R*'",
            "plot 'ablation.csv' using 2:4:5 with yerrorlines title 'R/R* (mean, std over seeds)'",
        ]
    return "\n".join(lines) + "\n"


def write_report(directory, config_hash: str) -> list:
    """Build ``curves.csv`` and ``report.gp`` from the run outputs in ``directory``."""
    metrics_path = os.path.join(directory, "metrics.csv")
    if not os.path.exists(metrics_path):
        raise FileNotFoundError(f"{metrics_path} not found; run train-policy or ablate first")
    cols, rows = curves(read_csv(metrics_path))
    out = [write_csv(os.path.join(directory, "curves.csv"), "curves.csv", rows, config_hash, cols)]
    gp = os.path.join(directory, "report.gp")
    with open(gp, "w", encoding="utf-8") as fh:
        fh.write(gnuplot_script(cols, os.path.exists(os.path.join(directory, "ablation.csv"))))
    out.append(gp)
    return out
