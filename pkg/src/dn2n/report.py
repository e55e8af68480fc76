"""Collect run metrics and lay them out as method x noise x mode tables."""
from __future__ import annotations

import csv
import math
from collections import defaultdict
from pathlib import Path

from . import manifest

METRICS_NAME = "metrics.txt"
LEAD_COLUMNS = ("run", "method", "mode", "lambda", "sigma", "seed", "mu", "sigma_tilde", "psnr", "ssim")
FLOAT_KEYS = ("lambda", "sigma", "mu", "sigma_tilde", "psnr", "ssim")
ABLATION_NOTE = ("note: for comparison, the published ablation reports a clear positive effect "
                 "of the averaging loss (mu > 0)")


def _coerce(row: dict) -> dict:
    out = dict(row)
    for k in FLOAT_KEYS:
        if k in out and isinstance(out[k], str):
            out[k] = float(out[k])
    return out


def collect_runs(roots) -> list[dict]:
    """One row per ``metrics.txt`` under any of ``roots``, in sorted path order."""
    rows = []
    for root in roots:
        root = Path(root)
        if not root.exists():
            raise FileNotFoundError(f"{root}: no such run directory")
        paths = [root] if root.is_file() else sorted(root.rglob(METRICS_NAME))
        for p in paths:
            row = _coerce(manifest.read(p))
            row.setdefault("run", str(p.parent))
            rows.append(row)
    return rows


def column_label(row: dict, varied: bool) -> str:
    if not varied or "mu" not in row:
        return row.get("method", "?")
    return f"{row['method']} mu={row['mu']:g} st={row['sigma_tilde']:g}"


def summarize(rows) -> tuple[list, list, dict]:
    """Mean PSNR/SSIM per (row key, column). Rows are ``(lambda, sigma, mode)``."""
    configs = {(r.get("mu"), r.get("sigma_tilde")) for r in rows if r.get("method") == "dn2n"}
    varied = len(configs) > 1
    cells = defaultdict(list)
    row_keys, col_keys = [], []
    for r in rows:
        rk = (r.get("lambda", math.nan), r.get("sigma", math.nan), r.get("mode", "?"))
        ck = column_label(r, varied)
        if rk not in row_keys:
            row_keys.append(rk)
        if ck not in col_keys:
            col_keys.append(ck)
        cells[rk, ck].append((r["psnr"], r["ssim"]))
    means = {k: (sum(p for p, _ in v) / len(v), sum(s for _, s in v) / len(v), len(v)) for k, v in cells.items()}
    return row_keys, col_keys, means


def format_table(rows) -> str:
    """Aligned text table, one line per (lambda, sigma, mode), PSNR/SSIM per column."""
    row_keys, col_keys, means = summarize(rows)
    header = ["lambda", "sigma", "mode"] + col_keys
    lines = []
    for lam, sig, mode in row_keys:
        line = [f"{lam:g}", f"{sig:g}", mode]
        for c in col_keys:
            m = means.get(((lam, sig, mode), c))
            line.append("-" if m is None else f"{m[0]:.2f} / {m[1]:.4f} (n={m[2]})")
        lines.append(line)
    widths = [max(len(x) for x in col) for col in zip(header, *lines)]
    fmt = "  ".join(f"{{:<{w}}}" for w in widths)
    out = [fmt.format(*header), fmt.format(*("-" * w for w in widths))]
    out += [fmt.format(*line) for line in lines]
    if any(c.startswith("dn2n mu=") for c in col_keys):
        out.append(ABLATION_NOTE)
    return "\n".join(out) + "\n"


def write_tsv(rows, path) -> None:
    extra = sorted({k for r in rows for k in r} - set(LEAD_COLUMNS))
    cols = list(LEAD_COLUMNS) + extra
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(cols)
        for r in rows:
            w.writerow([manifest.format_value(r[c]) if c in r else "" for c in cols])
