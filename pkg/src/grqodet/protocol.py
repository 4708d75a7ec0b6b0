"""Multi-seed experiment grids: A/B runs and the ablation axes.

Every cell of a seed shares one SFT warmup checkpoint, so cells differ only in
what happens after the first epoch. Cells may run in worker processes; each
one owns its run directory.
"""
from __future__ import annotations

import csv
import json
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from multiprocessing import get_context
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .evalkit import map_over
from .synthdata import load_dataset
from .trainer import (ABSOLUTE, RELATIVE, Trainer, TrainConfig, continue_sft, model_from_checkpoint,
                      train_grqo)

log = logging.getLogger(__name__)

AXES = ("component", "reward-design", "loss-weights", "prompt-count")
DEFAULT_SEEDS = (0, 1, 2)
EVAL_PROMPT_COUNTS = (1, 8, 64)


@dataclass(frozen=True)
class Cell:
    name: str
    overrides: dict = field(default_factory=dict)
    sft: bool = False


def axis_cells(axis: str) -> list[Cell]:
    if axis == "component":
        return [Cell("sft", sft=True), Cell("reward-only", {"beta": 0.0}),
                Cell("kl-only", {"alpha": 0.0}), Cell("grqo")]
    if axis == "reward-design":
        return [Cell("relative", {"reward_norm": RELATIVE}), Cell("absolute", {"reward_norm": ABSOLUTE})]
    if axis == "loss-weights":
        grid = [(1e2, 0.04), (1e3, 0.04), (1e4, 0.04), (1e3, 0.0), (1e3, 0.4)]
        return [Cell(f"alpha{a:g}-beta{b:g}", {"alpha": a, "beta": b}) for a, b in grid]
    if axis == "prompt-count":
        return [Cell(f"train-m{m}", {"prompts_per_class": m}) for m in (1, 8)]
    raise ValueError(f"unknown ablation axis {axis!r}; choose from {AXES}")


def num_workers(default: int = 1) -> int:
    raw = os.environ.get("GRQO_NUM_WORKERS")
    if not raw:
        return default
    n = int(raw)
    if n < 1:
        raise ValueError("GRQO_NUM_WORKERS must be >= 1")
    return n


def _data(data):
    return load_dataset(data) if isinstance(data, (str, os.PathLike)) else data


def run_warmup(cfg: TrainConfig, data, out_dir) -> Path:
    """One SFT epoch under the full-length schedule; returns the checkpoint path."""
    out_dir = Path(out_dir)
    path = out_dir / "last.ckpt"
    if path.exists():
        return path
    tr = Trainer(cfg.replace(mode="sft"), _data(data), out_dir)
    tr.fit(until_epoch=cfg.sft_warmup_epochs)
    return path


def run_cell(cfg: TrainConfig, cell: Cell, data, warmup_ckpt, out_dir) -> Path:
    out_dir = Path(out_dir)
    if (out_dir / "last.ckpt").exists() and (out_dir / "done").exists():
        return out_dir
    data = _data(data)
    cell_cfg = cfg.replace(**cell.overrides)
    if cell.sft:
        continue_sft(cell_cfg, data, warmup_ckpt, out_dir)
    else:
        train_grqo(cell_cfg, data, warmup_ckpt, out_dir)
    (out_dir / "done").write_text("")
    return out_dir


def _run(job):
    kind, args = job
    return (run_warmup if kind == "warmup" else run_cell)(*args)


def _worker(job):
    torch.set_num_threads(1)
    return _run(job)


def _map(jobs, workers: int):
    if workers <= 1 or len(jobs) <= 1:
        return [_run(j) for j in jobs]
    # each cell reloads the dataset from disk; workers never share tensors
    with ProcessPoolExecutor(max_workers=min(workers, len(jobs)), mp_context=get_context("spawn")) as ex:
        return list(ex.map(_worker, jobs))


def read_metrics(run_dir) -> list[dict]:
    with open(Path(run_dir) / "metrics.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        for k, v in r.items():
            if k != "phase":
                r[k] = float(v)
    return rows


def tail_std(values: Sequence[float], n: int = 3) -> float:
    return float(np.std(np.asarray(values[-n:], dtype=np.float64)))


def prompt_count_sweep(ckpt, data, split: str = "val_ood", counts=EVAL_PROMPT_COUNTS,
                       eval_seeds=DEFAULT_SEEDS) -> dict[int, list[float]]:
    """AP@0.5 of one checkpoint per inference prompt count, one value per eval seed."""
    data = _data(data)
    model, _ = model_from_checkpoint(ckpt)
    out = {}
    for p in counts:
        out[p] = [map_over(data.splits[split], model, data.pool(split), p, s)["AP50"] for s in eval_seeds]
    return out


SUMMARY_FIELDS = ["axis", "cell", "seed", "run_dir", "final_val_id_AP50", "final_val_ood_AP50",
                  "final_val_ood_mAP", "val_ood_AP50_last3_std", "val_id_AP50_last3_std", "mean_kl"]


def summarize_run(axis: str, cell: str, seed: int, run_dir) -> dict:
    rows = read_metrics(run_dir)
    last = rows[-1]
    grqo_kl = [r["kl"] for r in rows if r["phase"] == "grqo"]
    return {
        "axis": axis, "cell": cell, "seed": seed, "run_dir": str(run_dir),
        "final_val_id_AP50": last.get("val_id_AP50", float("nan")),
        "final_val_ood_AP50": last.get("val_ood_AP50", float("nan")),
        "final_val_ood_mAP": last.get("val_ood_mAP", float("nan")),
        "val_ood_AP50_last3_std": tail_std([r["val_ood_AP50"] for r in rows]) if "val_ood_AP50" in last else float("nan"),
        "val_id_AP50_last3_std": tail_std([r["val_id_AP50"] for r in rows]) if "val_id_AP50" in last else float("nan"),
        "mean_kl": float(np.mean(grqo_kl)) if grqo_kl else 0.0,
    }


def run_grid(cells: Sequence[Cell], data, out_dir, cfg: TrainConfig | None = None,
             seeds: Sequence[int] | None = None, axis: str = "custom",
             workers: int | None = None) -> list[dict]:
    """Train every (cell, seed) pair off a per-seed shared warmup and write ``summary.csv``."""
    cfg = cfg or TrainConfig()
    seeds = DEFAULT_SEEDS if seeds is None else tuple(seeds)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    workers = num_workers() if workers is None else workers
    t0 = time.time()
    seed_cfg = {s: cfg.replace(seed=s) for s in seeds}
    warm = _map([("warmup", (seed_cfg[s], data, out_dir / f"warmup-seed{s}")) for s in seeds], workers)
    warm = dict(zip(seeds, warm))
    jobs = [("cell", (seed_cfg[s], c, data, warm[s], out_dir / f"{c.name}-seed{s}"))
            for s in seeds for c in cells]
    _map(jobs, workers)
    rows = [summarize_run(axis, c.name, s, out_dir / f"{c.name}-seed{s}") for s in seeds for c in cells]
    with open(out_dir / "summary.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, SUMMARY_FIELDS, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    (out_dir / "timing.json").write_text(json.dumps({"seconds": time.time() - t0, "workers": workers}))
    return rows


def run_axis(axis: str, data, out_dir, cfg: TrainConfig | None = None,
             seeds: Sequence[int] | None = None, workers: int | None = None) -> list[dict]:
    cells = axis_cells(axis)
    rows = run_grid(cells, data, out_dir, cfg, seeds, axis, workers)
    if axis == "prompt-count":
        sweep_rows = []
        for r in rows:
            sweep = prompt_count_sweep(Path(r["run_dir"]) / "last.ckpt", data)
            for p, vals in sweep.items():
                for es, v in zip(DEFAULT_SEEDS, vals):
                    sweep_rows.append({"cell": r["cell"], "seed": r["seed"], "prompts_per_class": p,
                                       "eval_seed": es, "val_ood_AP50": v})
        with open(Path(out_dir) / "prompt_sweep.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, ["cell", "seed", "prompts_per_class", "eval_seed", "val_ood_AP50"],
                               lineterminator="\n")
            w.writeheader()
            w.writerows(sweep_rows)
    return rows


def mean_by_cell(rows: Sequence[dict], key: str) -> dict[str, float]:
    out: dict[str, list[float]] = {}
    for r in rows:
        out.setdefault(r["cell"], []).append(float(r[key]))
    return {k: float(np.mean(v)) for k, v in out.items()}
