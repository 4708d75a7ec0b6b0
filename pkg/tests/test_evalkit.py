import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from grqodet.evalkit import (Detection, average_precision, evaluate_detections, match_detections,
                             report_csv_row, report_json, summarize)
from grqodet.geometry import Box
from grqodet.synthdata import Instance


def gt(c, *box):
    return Instance(c, Box(*box))


def test_single_match_at_iou_06():
    # (0.5,0.5,0.4,0.4) vs (0.55,0.5,0.4,0.4)... pick widths giving IoU exactly 0.6
    g = gt(0, 0.5, 0.5, 0.4, 0.4)
    # horizontal shift s: IoU = (0.4 - s) / (0.4 + s) = 0.6 -> s = 0.1
    d = Detection(0, (0.6, 0.5, 0.4, 0.4), 0.9)
    assert match_detections([d], [g], 0.5).tolist() == [True]
    assert match_detections([d], [g], 0.65).tolist() == [False]


def test_one_to_one_and_class_gate():
    g = gt(1, 0.5, 0.5, 0.2, 0.2)
    lo = Detection(1, (0.5, 0.5, 0.2, 0.2), 0.3)
    hi = Detection(1, (0.5, 0.5, 0.2, 0.2), 0.8)
    # returned in descending score order
    assert match_detections([lo, hi], [g]).tolist() == [True, False]
    assert match_detections([Detection(2, (0.5, 0.5, 0.2, 0.2), 0.9)], [g]).tolist() == [False]


def test_tie_goes_to_lower_index():
    g = gt(0, 0.5, 0.5, 0.2, 0.2)
    a = Detection(0, (0.5, 0.5, 0.2, 0.2), 0.5)
    b = Detection(0, (0.52, 0.5, 0.2, 0.2), 0.5)
    assert match_detections([a, b], [g]).tolist() == [True, False]
    assert match_detections([b, a], [g]).tolist() == [True, False]


def test_ap_examples():
    assert average_precision([True], 1) == 1.0
    assert average_precision([True, False], 1) == 1.0
    ap = average_precision([False, True], 2)
    assert ap == pytest.approx(51 * 0.5 / 101, abs=1e-12)
    assert ap == pytest.approx(0.25, abs=0.005)
    assert average_precision([], 3) == 0.0
    with pytest.raises(ValueError):
        average_precision([True], 0)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.booleans(), min_size=1, max_size=30), st.integers(0, 29), st.integers(0, 10))
def test_ap_monotone_in_fp_to_tp(flags, k, extra_gt):
    k %= len(flags)
    n_gt = sum(flags) + 1 + extra_gt
    ap = average_precision(flags, n_gt)
    assert 0.0 <= ap <= 1.0
    if not flags[k]:
        flipped = list(flags)
        flipped[k] = True
        assert average_precision(flipped, n_gt) >= ap - 1e-12


def _random_case(rng, n_img=6):
    dets, gts = [], []
    for _ in range(n_img):
        g = [gt(int(rng.integers(0, 3)), *rng.uniform(0.3, 0.7, 2), *rng.uniform(0.1, 0.3, 2))
             for _ in range(int(rng.integers(1, 4)))]
        d = []
        for x in g:
            cx, cy, w, h = x.box.as_tuple()
            d.append(Detection(x.class_id if rng.random() < 0.8 else int(rng.integers(0, 3)),
                               (cx + rng.normal(0, 0.03), cy + rng.normal(0, 0.03), w, h), float(rng.uniform(0.05, 0.95))))
        d += [Detection(int(rng.integers(0, 3)), (*rng.uniform(0.3, 0.7, 2), 0.2, 0.2), float(rng.uniform(0.05, 0.95)))
              for _ in range(3)]
        dets.append(d)
        gts.append(g)
    return dets, gts


def test_ap_invariant_under_monotone_score_rescaling():
    rng = np.random.default_rng(0)
    for _ in range(20):
        dets, gts = _random_case(rng)
        base = summarize(evaluate_detections(dets, gts, range(3)))
        warped = [[Detection(d.class_id, d.box, d.score ** 3 * 0.5) for d in ds] for ds in dets]
        other = summarize(evaluate_detections(warped, gts, range(3)))
        assert other["AP50"] == pytest.approx(base["AP50"], abs=1e-12)
        assert other["mAP"] == pytest.approx(base["mAP"], abs=1e-12)


def test_perfect_detections_and_excluded_classes():
    gts = [[gt(0, 0.3, 0.3, 0.2, 0.2), gt(1, 0.7, 0.7, 0.2, 0.2)]]
    dets = [[Detection(g.class_id, g.box.as_tuple(), 0.9) for g in gts[0]]]
    rep = summarize(evaluate_detections(dets, gts, range(4)))
    assert rep["AP50"] == pytest.approx(100.0)
    assert rep["mAP"] == pytest.approx(100.0)
    assert rep["excluded_classes"] == [2, 3]


def test_report_formats():
    rep = summarize(evaluate_detections([[Detection(0, (0.5, 0.5, 0.2, 0.2), 0.9)]],
                                        [[gt(0, 0.5, 0.5, 0.2, 0.2)]], range(2)))
    rep["prompts_per_class"] = 8
    row = report_csv_row(rep, "run0", "val_ood", num_classes=2, header=True).splitlines()
    assert row[0] == "run_id,split,prompts_per_class,AP50,mAP,AP50_c0,AP50_c1"
    assert row[1] == "run0,val_ood,8,100.0000,100.0000,100.0000,"
    assert '"AP50": 100.0' in report_json(rep, run_id="run0")
