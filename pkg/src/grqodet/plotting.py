"""Training-curve figures built from run ``metrics.csv`` files only."""
from __future__ import annotations

import csv
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

PANELS = (("val_ood_AP50", "val_ood AP@0.5"), ("val_id_AP50", "val_id AP@0.5"),
          ("loss", "training loss"), ("kl", "objectness KL"))
PALETTE = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f"]


def read_curve(run_dir) -> list[dict]:
    path = Path(run_dir) / "metrics.csv"
    if not path.exists():
        raise FileNotFoundError(f"{path} not found")
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def run_label(run_dir) -> str:
    return Path(run_dir).resolve().name


def long_rows(runs: Sequence) -> list[dict]:
    """Flatten every plotted (run, epoch, metric) value; this is the sibling CSV."""
    out = []
    for run in runs:
        for r in read_curve(run):
            for key, _ in PANELS:
                if r.get(key, "") != "":
                    out.append({"run": run_label(run), "epoch": int(r["epoch"]), "phase": r["phase"],
                                "metric": key, "value": float(r[key])})
    return out


def plot_runs(runs: Sequence, out) -> tuple[Path, Path]:
    """Write ``out`` (.svg) plus ``out`` with a .csv suffix; returns both paths."""
    out = Path(out)
    if out.suffix.lower() not in (".svg", ".csv"):
        raise ValueError("plot output must end in .svg or .csv")
    svg, table = out.with_suffix(".svg"), out.with_suffix(".csv")
    rows = long_rows(runs)
    labels = list(dict.fromkeys(run_label(r) for r in runs))

    fig, axes = plt.subplots(2, 2, figsize=(9, 6.5))
    for ax, (key, title) in zip(axes.flat, PANELS):
        for i, lab in enumerate(labels):
            pts = [(r["epoch"], r["value"]) for r in rows if r["run"] == lab and r["metric"] == key]
            if pts:
                ax.plot(*zip(*pts), marker="o", ms=3, lw=1.4, color=PALETTE[i % len(PALETTE)], label=lab)
        ax.set_title(title, fontsize=10)
        ax.set_xlabel("epoch")
        ax.spines["top"].set_visible(False)
        ax.spines["right"].set_visible(False)
    axes.flat[0].legend(fontsize=7, frameon=False)
    fig.tight_layout()
    svg.parent.mkdir(parents=True, exist_ok=True)
    # fixed metadata and id salt keep the svg byte-stable across runs
    with plt.rc_context({"svg.hashsalt": "grqodet"}):
        fig.savefig(svg, format="svg", metadata={"Date": None})
    plt.close(fig)

    with open(table, "w", newline="") as fh:
        w = csv.DictWriter(fh, ["run", "epoch", "phase", "metric", "value"], lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    return svg, table
