import csv

import pytest

from grqodet.plotting import long_rows, plot_runs
from grqodet.protocol import tail_std

HEADER = "step,epoch,phase,lr,loss,focal,l1,giou,contra,reward_term,kl_term,kl,val_id_AP50,val_id_mAP,val_ood_AP50,val_ood_mAP\n"


def fake_run(root, name, ap):
    d = root / name
    d.mkdir()
    rows = [f"{10 * (e + 1)},{e + 1},{'sft' if e == 0 else 'grqo'},0.001,{9 - e},1,1,1,1,0,0,{0.1 * e},1,0.5,{a},0.2\n"
            for e, a in enumerate(ap)]
    (d / "metrics.csv").write_text(HEADER + "".join(rows))
    return d


def test_svg_is_byte_stable_and_csv_matches(tmp_path):
    runs = [fake_run(tmp_path, "a", [1.0, 2.0, 3.0]), fake_run(tmp_path, "b", [1.0, 1.5, 1.7])]
    svg1, table = plot_runs(runs, tmp_path / "o1" / "fig.svg")
    svg2, _ = plot_runs(runs, tmp_path / "o2" / "fig.svg")
    assert svg1.read_bytes() == svg2.read_bytes()
    got = list(csv.DictReader(open(table)))
    assert len(got) == len(long_rows(runs)) == 2 * 3 * 4
    assert [float(r["value"]) for r in got if r["run"] == "a" and r["metric"] == "val_ood_AP50"] == [1.0, 2.0, 3.0]


def test_rejects_other_formats(tmp_path):
    with pytest.raises(ValueError):
        plot_runs([fake_run(tmp_path, "a", [1.0])], tmp_path / "fig.png")


def test_tail_std_uses_last_three():
    assert tail_std([100.0, 1.0, 1.0, 1.0]) == 0.0
    assert tail_std([0.0, 1.0, 2.0]) == pytest.approx((2 / 3) ** 0.5)
