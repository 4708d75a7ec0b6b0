import csv
import json
import subprocess
import sys

import pytest

from grqodet import cli, protocol
from grqodet.trainer import TrainConfig

TINY_DATA_SPEC = {"n_train": 24, "n_val_id": 12, "n_val_ood": 12, "pool_min_per_class": 2,
                  "train_pool_min_per_class": 2}
TINY_TRAIN = {"epochs": 2, "batch_size": 8, "max_steps_per_epoch": 2, "lr_warmup_steps": 0,
              "eval_prompts_per_class": 1,
              "model": {"dim": 16, "heads": 2, "ffn_dim": 32, "enc_layers": 1, "fusion_layers": 1,
                        "dec_layers": 1, "num_queries": 8}}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "spec.json").write_text(json.dumps(TINY_DATA_SPEC))
    (root / "train.json").write_text(json.dumps(TINY_TRAIN))
    assert cli.main(["gen-data", "--out", str(root / "data"), "--seed", "3", "--spec", str(root / "spec.json")]) == 0
    return root


def test_gen_data_writes_manifest(workspace):
    man = json.loads((workspace / "data" / "manifest.json").read_text())
    assert man["master_seed"] == 3
    assert len(man["splits"]["train"]["scenes"]) == 24


def test_train_sft_then_eval_prompt_counts(workspace):
    out = workspace / "sft"
    assert cli.main(["train", "--data", str(workspace / "data"), "--mode", "sft",
                     "--config", str(workspace / "train.json"), "--out", str(out)]) == 0
    rows = list(csv.DictReader(open(out / "metrics.csv")))
    assert [r["phase"] for r in rows] == ["sft", "sft"]
    man = json.loads((out / "run_manifest.json").read_text())
    assert man["config"]["mode"] == "sft" and man["dataset"]["master_seed"] == 3
    assert man["dataset_checksum"] and man["build"].startswith("grqodet-")
    for p in ("1", "64"):
        assert cli.main(["eval", "--ckpt", str(out / "last.ckpt"), "--data", str(workspace / "data"),
                         "--split", "ood", "--prompts-per-class", p, "--seed", "0"]) == 0
    lines = (out / "eval_reports.csv").read_text().splitlines()
    assert lines[0].startswith("run_id,split,prompts_per_class,AP50,mAP")
    a, b = lines[1].split(","), lines[2].split(",")
    assert a[:2] == b[:2] == ["sft", "val_ood"]
    assert (a[2], b[2]) == ("1", "64")


def test_train_grqo_writes_reference_and_plot(workspace):
    out = workspace / "grqo"
    assert cli.main(["train", "--data", str(workspace / "data"), "--mode", "grqo",
                     "--config", str(workspace / "train.json"), "--out", str(out)]) == 0
    assert (out / "reference.ckpt").exists()
    rows = list(csv.DictReader(open(out / "metrics.csv")))
    assert [r["phase"] for r in rows] == ["sft", "grqo"]
    svg = workspace / "figs" / "curves.svg"
    assert cli.main(["plot", "--runs", str(workspace / "sft"), str(out), "--out", str(svg)]) == 0
    assert svg.read_text().lstrip().startswith("<?xml")
    table = list(csv.DictReader(open(svg.with_suffix(".csv"))))
    assert {r["run"] for r in table} == {"sft", "grqo"}
    assert {"val_ood_AP50", "loss", "kl"} <= {r["metric"] for r in table}


def test_manifest_is_immutable(workspace):
    rc = cli.main(["train", "--data", str(workspace / "data"), "--mode", "sft",
                   "--config", str(workspace / "train.json"), "--out", str(workspace / "sft")])
    assert rc == cli.EXIT_RUNTIME


def test_exit_codes(workspace, tmp_path, capsys):
    data = str(workspace / "data")
    assert cli.main(["train", "--data", data]) == cli.EXIT_USAGE
    assert cli.main(["eval", "--ckpt", "x", "--data", data, "--split", "mid"]) == cli.EXIT_USAGE
    assert cli.main(["train", "--data", str(tmp_path / "none"), "--mode", "sft", "--out", str(tmp_path / "o")]) \
        == cli.EXIT_VALIDATION
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"beta": -1.0}))
    assert cli.main(["train", "--data", data, "--mode", "grqo", "--config", str(bad),
                     "--out", str(tmp_path / "o2")]) == cli.EXIT_VALIDATION
    junk = tmp_path / "junk.ckpt"
    junk.write_bytes(b"not a checkpoint")
    assert cli.main(["eval", "--ckpt", str(junk), "--data", data, "--split", "id"]) == cli.EXIT_VALIDATION
    assert cli.main(["plot", "--runs", str(tmp_path), "--out", str(tmp_path / "p.svg")]) == cli.EXIT_VALIDATION
    err = capsys.readouterr().err.strip().splitlines()
    assert all(line.startswith("grqodet:") for line in err)


def test_runtime_failure_exit_code(workspace, tmp_path, monkeypatch):
    import grqodet.trainer as trainer

    def boom(*a, **k):
        raise RuntimeError("simulated")

    monkeypatch.setattr(trainer, "train_sft", boom)
    rc = cli.main(["train", "--data", str(workspace / "data"), "--mode", "sft", "--out", str(tmp_path / "r")])
    assert rc == cli.EXIT_RUNTIME


def test_module_entry_point(workspace):
    res = subprocess.run([sys.executable, "-m", "grqodet", "plot", "--runs", str(workspace / "missing"),
                          "--out", "x.svg"], capture_output=True, text=True)
    assert res.returncode == 3
    assert len(res.stderr.strip().splitlines()) == 1


def test_ablate_component_runs_four_cells(workspace, monkeypatch):
    tiny = TrainConfig.from_dict({**TINY_TRAIN, "epochs": 2})
    monkeypatch.setattr(protocol, "TrainConfig", lambda: tiny)
    monkeypatch.setattr(protocol, "DEFAULT_SEEDS", (0,))
    out = workspace / "ablate"
    assert cli.main(["ablate", "--axis", "component", "--data", str(workspace / "data"), "--out", str(out)]) == 0
    rows = list(csv.DictReader(open(out / "summary.csv")))
    assert [r["cell"] for r in rows] == ["sft", "reward-only", "kl-only", "grqo"]
    runs = sorted(p.name for p in out.iterdir() if p.is_dir() and not p.name.startswith("warmup"))
    assert runs == ["grqo-seed0", "kl-only-seed0", "reward-only-seed0", "sft-seed0"]
    # every cell continues from the same warmup epoch
    first = {r: list(csv.DictReader(open(out / r / "metrics.csv")))[0]["loss"] for r in runs}
    assert len(set(first.values())) == 1
