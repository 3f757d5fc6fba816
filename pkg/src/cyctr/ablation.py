"""Ablation grid: every variant trained and evaluated over several seeds, plus depth and width sweeps.

Cells are independent, so they can run in worker processes; results are
collected in grid order, which keeps the table independent of scheduling.
"""

from __future__ import annotations

import statistics
from concurrent.futures import ProcessPoolExecutor
from typing import Dict, Iterable, List, Optional, Sequence

from .config import RunConfig, from_dict, merge
from .model import VARIANTS
from .train import evaluate_model, train


def run_cell(raw_cfg: dict) -> dict:
    cfg = from_dict(raw_cfg)
    result = train(cfg)
    metrics = evaluate_model(result.model, cfg)
    return {
        "variant": cfg.variant,
        "seed": cfg.seed,
        "L": cfg.model.L,
        "d": cfg.model.d,
        "miou": metrics["miou"],
        "fb_iou": metrics["fb_iou"],
        "final_loss": result.history[-1]["loss"] if result.history else None,
        "diagnostics": metrics["diagnostics"],
    }


def _run_all(cells: List[dict], workers: int) -> List[dict]:
    if workers <= 1:
        return [run_cell(c) for c in cells]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(run_cell, cells))


def _stats(values: Sequence[float]) -> Dict[str, float]:
    return {
        "mean": statistics.fmean(values),
        "std": statistics.stdev(values) if len(values) > 1 else 0.0,
    }


def _summarise(rows: List[dict], key: str, order: Iterable) -> List[dict]:
    out = []
    for value in order:
        cells = [r for r in rows if r[key] == value]
        mious = [c["miou"] for c in cells]
        out.append({key: value, "seeds": [c["seed"] for c in cells], "miou": mious, **_stats(mious)})
    return out


def paired_wins(cells: List[dict], a: str, b: str) -> dict:
    """Seeds on which variant ``a`` scores at least as high as ``b``."""
    by = {(c["variant"], c["seed"]): c["miou"] for c in cells}
    seeds = sorted({s for v, s in by if v == a} & {s for v, s in by if v == b})
    wins = [s for s in seeds if by[(a, s)] >= by[(b, s)]]
    return {"a": a, "b": b, "seeds": seeds, "wins": len(wins), "deltas": [by[(a, s)] - by[(b, s)] for s in seeds]}


def run_ablation(
    base: RunConfig,
    variants: Sequence[str] = VARIANTS,
    n_seeds: int = 5,
    L_sweep: Optional[Sequence[int]] = None,
    d_sweep: Optional[Sequence[int]] = None,
    workers: int = 1,
) -> dict:
    """Variant table (in canonical row order) and optional L / d sweeps of the full model."""
    unknown = [v for v in variants if v not in VARIANTS]
    if unknown or not variants:
        raise ValueError(f"variants must be a non-empty subset of {VARIANTS}, got {list(variants)}")
    if n_seeds < 1:
        raise ValueError("need at least one seed")
    variants = [v for v in VARIANTS if v in variants]
    seeds = [base.seed + r for r in range(n_seeds)]
    raw = base.to_dict()
    cells = [merge(raw, {"variant": v, "seed": s}) for v in variants for s in seeds]
    sweep_cells = {}
    for key, values in (("L", L_sweep), ("d", d_sweep)):
        for value in values or ():
            for s in seeds:
                sweep_cells.setdefault(key, []).append(merge(raw, {"variant": "cyctr", "seed": s, "model": {key: value}}))
    flat = cells + [c for key in sweep_cells for c in sweep_cells[key]]
    results = _run_all(flat, workers)
    main, rest = results[: len(cells)], results[len(cells):]
    table = {
        "config": raw,
        "seeds": seeds,
        "cells": main,
        "rows": _summarise(main, "variant", variants),
        "comparisons": [],
        "sweeps": {},
    }
    for a, b in (("cyctr", "vanilla_cross"), ("cyctr", "cyctr_fg_only")):
        if a in variants and b in variants:
            table["comparisons"].append(paired_wins(main, a, b))
    offset = 0
    for key, values in (("L", L_sweep), ("d", d_sweep)):
        if not values:
            continue
        chunk = rest[offset: offset + len(sweep_cells[key])]
        offset += len(sweep_cells[key])
        table["sweeps"][key] = {"cells": chunk, "rows": _summarise(chunk, key, values)}
    return table


def format_table(table: dict) -> str:
    lines = []

    def block(title: str, key: str, rows: List[dict]):
        width = max(len(key), *(len(str(r[key])) for r in rows))
        lines.append(title)
        lines.append(f"  {key:<{width}}  {'mIoU mean':>9}  {'std':>6}  per-seed")
        for r in rows:
            per_seed = " ".join(f"{v:.4f}" for v in r["miou"])
            lines.append(f"  {str(r[key]):<{width}}  {r['mean']:>9.4f}  {r['std']:>6.4f}  {per_seed}")

    block(f"variants (seeds {table['seeds']})", "variant", table["rows"])
    for cmp in table["comparisons"]:
        lines.append(f"  {cmp['a']} >= {cmp['b']} on {cmp['wins']}/{len(cmp['seeds'])} seeds")
    for key, sweep in table["sweeps"].items():
        block(f"cyctr, sweep over {key}", key, sweep["rows"])
    return "\n".join(lines)


__all__ = ["format_table", "paired_wins", "run_ablation", "run_cell"]
