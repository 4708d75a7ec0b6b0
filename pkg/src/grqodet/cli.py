"""Command-line entry point: gen-data, train, eval, ablate, plot.

Exit codes: 0 ok, 2 usage, 3 validation (bad config, missing or corrupt
inputs), 4 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

EXIT_OK, EXIT_USAGE, EXIT_VALIDATION, EXIT_RUNTIME = 0, 2, 3, 4


class UsageError(Exception):
    pass


class ValidationError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="grqodet", description="Visually-prompted detector: SFT vs GRQO training.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    g = sub.add_parser("gen-data", help="generate and save the synthetic shapes corpus")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--spec", help="JSON file overriding dataset spec fields")

    t = sub.add_parser("train", help="train one run")
    t.add_argument("--data", required=True)
    t.add_argument("--mode", choices=("sft", "grqo"), required=True)
    t.add_argument("--config", help="JSON training config")
    t.add_argument("--out", required=True)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a validation split")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", choices=("id", "ood"), required=True)
    e.add_argument("--prompts-per-class", type=int, default=8)
    e.add_argument("--seed", type=int, default=0)

    a = sub.add_parser("ablate", help="run one ablation axis over 3 seeds")
    a.add_argument("--axis", choices=("component", "reward-design", "loss-weights", "prompt-count"),
                   required=True)
    a.add_argument("--data", required=True)
    a.add_argument("--out", required=True)

    pl = sub.add_parser("plot", help="training curves from run directories")
    pl.add_argument("--runs", nargs="+", required=True)
    pl.add_argument("--out", required=True)
    return p


def _require_dir(path: str, what: str) -> Path:
    p = Path(path)
    if not p.is_dir():
        raise ValidationError(f"{what} directory not found: {path}")
    return p


def _load_data(path: str):
    from .synthdata import load_dataset
    _require_dir(path, "data")
    return load_dataset(path)


def cmd_gen_data(args) -> int:
    from .synthdata import DatasetSpec, make_dataset, save_dataset
    spec = DatasetSpec()
    if args.spec:
        sp = Path(args.spec)
        if not sp.is_file():
            raise ValidationError(f"spec file not found: {args.spec}")
        try:
            raw = json.loads(sp.read_text())
        except json.JSONDecodeError as e:
            raise ValidationError(f"spec file is not valid JSON: {e}") from None
        spec = DatasetSpec.from_dict(raw)
    ds = make_dataset(spec, args.seed)
    save_dataset(args.out, ds)
    print(json.dumps({"out": str(args.out), "checksum": ds.checksum,
                      "counts": {k: len(v) for k, v in ds.splits.items()}}))
    return EXIT_OK


def cmd_train(args) -> int:
    from .synthdata import dataset_checksum
    from .trainer import TrainConfig, load_config, train_grqo, train_sft, write_run_manifest
    if args.config and not Path(args.config).is_file():
        raise ValidationError(f"config file not found: {args.config}")
    cfg = load_config(args.config) if args.config else TrainConfig()
    cfg = cfg.replace(mode=args.mode)
    data = _load_data(args.data)
    out = Path(args.out)
    write_run_manifest(out, cfg, args.data, dataset_checksum(args.data), argv=sys.argv,
                       dataset={"master_seed": data.master_seed, "spec": data.spec.__dict__})
    run = (train_grqo if args.mode == "grqo" else train_sft)(cfg, data, out_dir=out)
    print(json.dumps({"out": str(out), "final": run.history[-1]}, default=str))
    return EXIT_OK


def cmd_eval(args) -> int:
    from .evalkit import map_over, report_csv_row, report_json
    from .trainer import model_from_checkpoint
    if not Path(args.ckpt).is_file():
        raise ValidationError(f"checkpoint not found: {args.ckpt}")
    if args.prompts_per_class < 1:
        raise ValidationError("--prompts-per-class must be >= 1")
    data = _load_data(args.data)
    split = "val_" + args.split
    model, _ = model_from_checkpoint(args.ckpt)
    rep = map_over(data.splits[split], model, data.pool(split), args.prompts_per_class, args.seed)
    run_id = Path(args.ckpt).resolve().parent.name
    table = Path(args.ckpt).resolve().parent / "eval_reports.csv"
    row = report_csv_row(rep, run_id, split, model.cfg.num_classes, header=not table.exists())
    with open(table, "a") as fh:
        fh.write(row if row.endswith("\n") else row + "\n")
    print(report_json(rep, run_id=run_id, split=split, checkpoint=str(args.ckpt)))
    return EXIT_OK


def cmd_ablate(args) -> int:
    from .protocol import mean_by_cell, run_axis
    _require_dir(args.data, "data")
    _load_data(args.data)  # validate before spawning runs
    rows = run_axis(args.axis, args.data, args.out)
    print(json.dumps({"out": str(args.out), "axis": args.axis,
                      "mean_val_ood_AP50": mean_by_cell(rows, "final_val_ood_AP50")}))
    return EXIT_OK


def cmd_plot(args) -> int:
    from .plotting import plot_runs
    for r in args.runs:
        if not (Path(r) / "metrics.csv").is_file():
            raise ValidationError(f"no metrics.csv in {r}")
    try:
        svg, table = plot_runs(args.runs, args.out)
    except ValueError as e:
        raise ValidationError(str(e)) from None
    print(json.dumps({"svg": str(svg), "csv": str(table)}))
    return EXIT_OK


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval,
            "ablate": cmd_ablate, "plot": cmd_plot}


def main(argv=None) -> int:
    from .synthdata import DatasetError
    from .trainer import CheckpointError, ConfigError

    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s %(message)s", stream=sys.stderr)
    try:
        args = build_parser().parse_args(argv)
    except UsageError as e:
        print(f"grqodet: usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    try:
        return COMMANDS[args.command](args)
    except (ValidationError, ConfigError, DatasetError, CheckpointError) as e:
        print(f"grqodet: invalid input: {e}".replace("\n", " "), file=sys.stderr)
        return EXIT_VALIDATION
    except Exception as e:  # noqa: BLE001 - any other failure is a runtime error
        print(f"grqodet: {args.command} failed: {type(e).__name__}: {e}".replace("\n", " "), file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
