"""Markdown summaries of sweep CSVs: mean and spread over seeds per (method, w)."""
from __future__ import annotations

import csv
from collections import defaultdict
from pathlib import Path

import numpy as np

from cfgrl.pipelines import SWEEP_COLUMNS

BOLD_FRACTION = 0.95


class SchemaError(ValueError):
    pass


def read_sweep_csv(path) -> list[dict]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such CSV: {path}")
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != SWEEP_COLUMNS:
            raise SchemaError(f"{path}: expected columns {','.join(SWEEP_COLUMNS)}, got {','.join(reader.fieldnames or [])}")
        rows = list(reader)
    for i, r in enumerate(rows, start=2):
        try:
            r["w_or_beta"] = float(r["w_or_beta"])
            r["seed"] = int(r["seed"])
            r["success_rate"] = float(r["success_rate"])
            r["episodes"] = int(r["episodes"])
        except ValueError as exc:
            raise SchemaError(f"{path}:{i}: {exc}") from exc
    return rows


def aggregate(rows) -> list[dict]:
    """Mean and population std (ddof 0) of success over seeds, in first-seen method order."""
    groups = defaultdict(list)
    order = []
    for r in rows:
        key = (r["method"], r["w_or_beta"])
        if key not in groups:
            order.append(key)
        groups[key].append(r["success_rate"])
    methods = list(dict.fromkeys(m for m, _ in order))
    keys = sorted(order, key=lambda k: (methods.index(k[0]), k[1]))
    out = []
    for method, w in keys:
        vals = np.asarray(groups[(method, w)])
        out.append({"method": method, "w_or_beta": w, "mean": float(vals.mean()), "std": float(vals.std()),
                    "seeds": len(vals)})
    return out


def bold_mask(means) -> list[bool]:
    """Entries at or above 95% of the best mean in the block."""
    means = np.asarray(means, dtype=np.float64)
    if means.size == 0:
        return []
    return list(means >= BOLD_FRACTION * means.max())


def markdown_block(name: str, rows) -> str:
    agg = aggregate(rows)
    bold = bold_mask([a["mean"] for a in agg])
    lines = [f"### {name}", "", "| method | w or 1/beta | success | seeds |", "|---|---|---|---|"]
    for a, b in zip(agg, bold):
        cell = f"{a['mean']:.3f} ± {a['std']:.3f}"
        if b:
            cell = f"**{cell}**"
        lines.append(f"| {a['method']} | {a['w_or_beta']:g} | {cell} | {a['seeds']} |")
    return "\n".join(lines) + "\n"


def build_report(paths) -> tuple[str, dict]:
    blocks = {}
    for p in paths:
        name = Path(p).stem
        base, k = name, 2
        while name in blocks:
            name = f"{base}-{k}"
            k += 1
        blocks[name] = read_sweep_csv(p)
    text = "# Sweep summary\n\nBold: at or above 95% of the best mean in the block. Spread is the population std over seeds.\n\n"
    text += "\n".join(markdown_block(name, rows) for name, rows in blocks.items())
    return text, blocks
