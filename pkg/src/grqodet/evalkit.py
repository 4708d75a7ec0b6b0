"""Greedy detection matching and COCO-style interpolated average precision."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
import torch

from .model import encode_pool_prompts

IOU_THRESHOLDS = tuple(np.round(np.linspace(0.5, 0.95, 10), 2))
RECALL_POINTS = np.linspace(0.0, 1.0, 101)
MAX_DETS = 100


@dataclass
class Detection:
    class_id: int
    box: Sequence[float]  # (cx, cy, w, h)
    score: float


def _iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU of center-format boxes (N,4) x (M,4)."""
    if len(a) == 0 or len(b) == 0:
        return np.zeros((len(a), len(b)))
    a0, a1 = a[:, :2] - a[:, 2:] / 2, a[:, :2] + a[:, 2:] / 2
    b0, b1 = b[:, :2] - b[:, 2:] / 2, b[:, :2] + b[:, 2:] / 2
    wh = np.clip(np.minimum(a1[:, None], b1[None]) - np.maximum(a0[:, None], b0[None]), 0, None)
    inter = wh[..., 0] * wh[..., 1]
    area_a = a[:, 2] * a[:, 3]
    area_b = b[:, 2] * b[:, 3]
    return inter / (area_a[:, None] + area_b[None] - inter)


def match_detections(dets: Sequence[Detection], gts: Sequence, iou_threshold: float = 0.5) -> np.ndarray:
    """TP flags for ``dets`` in descending-score order (ties: lower index first).

    ``gts`` are objects with ``class_id`` and ``box`` (a geometry.Box or 4-tuple).
    A detection is a TP when it overlaps an unmatched GT of its own class with
    IoU >= threshold; it takes the highest-IoU such GT.
    """
    order = sorted(range(len(dets)), key=lambda k: -dets[k].score)
    gt_boxes = np.array([_as_tuple(g.box) for g in gts], dtype=np.float64).reshape(-1, 4)
    gt_cls = np.array([g.class_id for g in gts], dtype=np.int64)
    det_boxes = np.array([_as_tuple(dets[k].box) for k in order], dtype=np.float64).reshape(-1, 4)
    ious = _iou_matrix(det_boxes, gt_boxes)
    taken = np.zeros(len(gts), dtype=bool)
    flags = np.zeros(len(order), dtype=bool)
    for r, k in enumerate(order):
        cand = (~taken) & (gt_cls == dets[k].class_id) & (ious[r] >= iou_threshold)
        if cand.any():
            j = int(np.argmax(np.where(cand, ious[r], -1.0)))
            taken[j] = True
            flags[r] = True
    return flags


def _as_tuple(box) -> tuple:
    return box.as_tuple() if hasattr(box, "as_tuple") else tuple(box)


def average_precision(flags: Sequence[bool], n_gt: int) -> float:
    """101-point interpolated AP of a score-ordered TP/FP sequence."""
    if n_gt < 1:
        raise ValueError("average precision needs at least one ground truth")
    flags = np.asarray(flags, dtype=bool)
    if flags.size == 0:
        return 0.0
    tp = np.cumsum(flags)
    fp = np.cumsum(~flags)
    recall = tp / n_gt
    precision = tp / (tp + fp)
    # precision envelope, non-increasing from the right
    precision = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    q = np.zeros_like(RECALL_POINTS)
    ok = idx < len(precision)
    q[ok] = precision[idx[ok]]
    return float(q.mean())


def evaluate_detections(per_image_dets: Sequence[Sequence[Detection]], per_image_gts: Sequence[Sequence],
                        classes: Iterable[int], thresholds: Sequence[float] = IOU_THRESHOLDS) -> dict:
    """Dataset-level AP per class and threshold.

    Detections are matched per image, then pooled across images in
    descending-score order (stable on image order, then per-image rank).
    """
    classes = list(classes)
    n_gt = {c: 0 for c in classes}
    for gts in per_image_gts:
        for g in gts:
            if g.class_id in n_gt:
                n_gt[g.class_id] += 1
    # per (class, threshold): lists of (score, flag)
    scores = {c: [] for c in classes}
    flags = {c: {t: [] for t in thresholds} for c in classes}
    for dets, gts in zip(per_image_dets, per_image_gts):
        for c in classes:
            dc = [d for d in dets if d.class_id == c]
            if not dc:
                continue
            gc = [g for g in gts if g.class_id == c]
            dc_sorted = sorted(dc, key=lambda d: -d.score)
            scores[c].extend(d.score for d in dc_sorted)
            for t in thresholds:
                flags[c][t].extend(match_detections(dc_sorted, gc, t).tolist())
    ap = {}
    excluded = []
    for c in classes:
        if n_gt[c] == 0:
            excluded.append(c)
            continue
        order = np.argsort(-np.asarray(scores[c], dtype=np.float64), kind="stable")
        ap[c] = {t: average_precision(np.asarray(flags[c][t], dtype=bool)[order], n_gt[c])
                 for t in thresholds}
    return {"ap": ap, "n_gt": n_gt, "excluded": excluded}


def summarize(result: dict, thresholds: Sequence[float] = IOU_THRESHOLDS) -> dict:
    ap = result["ap"]
    if not ap:
        return {"AP50": 0.0, "mAP": 0.0, "per_class_AP50": {}, "per_class_mAP": {},
                "excluded_classes": result["excluded"]}
    t50 = min(thresholds, key=lambda t: abs(t - 0.5))
    per_cls50 = {c: v[t50] for c, v in ap.items()}
    per_cls = {c: float(np.mean([v[t] for t in thresholds])) for c, v in ap.items()}
    return {
        "AP50": 100.0 * float(np.mean(list(per_cls50.values()))),
        "mAP": 100.0 * float(np.mean(list(per_cls.values()))),
        "per_class_AP50": {int(c): 100.0 * v for c, v in per_cls50.items()},
        "per_class_mAP": {int(c): 100.0 * v for c, v in per_cls.items()},
        "excluded_classes": result["excluded"],
    }


# ---------------------------------------------------------------------------
# model evaluation


def detections_from_output(class_logits: torch.Tensor, boxes: torch.Tensor, class_ids: Sequence[int],
                           max_dets: int = MAX_DETS) -> list[list[Detection]]:
    """Top-scoring (query, class) pairs of the final decoder layer, per image."""
    probs = class_logits.sigmoid()
    b, n_q, k = probs.shape
    out = []
    for i in range(b):
        flat = probs[i].reshape(-1)
        order = torch.sort(flat, descending=True, stable=True).indices[:max_dets]
        dets = []
        for f in order.tolist():
            q, col = divmod(f, k)
            dets.append(Detection(int(class_ids[col]), tuple(boxes[i, q].tolist()), float(flat[f])))
        out.append(dets)
    return out


@torch.no_grad()
def map_over(scenes, model, pool, prompts_per_class: int = 1, seed: int = 0,
             thresholds: Sequence[float] = IOU_THRESHOLDS, batch_size: int = 50) -> dict:
    """Evaluate ``model`` on ``scenes`` prompted with ``prompts_per_class`` pool entries per class.

    The same seeded prompt draw is used for every scene.
    """
    model.eval()
    classes = sorted(pool.entries)
    rng = np.random.default_rng(seed)
    prompts, used = encode_pool_prompts(model, pool, classes, prompts_per_class, rng)
    dets, gts = [], []
    for start in range(0, len(scenes), batch_size):
        chunk = scenes[start:start + batch_size]
        px = torch.from_numpy(np.stack([s.pixels for s in chunk]))
        out = model(px, prompts)
        dets.extend(detections_from_output(out.class_logits[-1], out.boxes[-1], prompts.class_ids))
        gts.extend(s.instances for s in chunk)
    res = evaluate_detections(dets, gts, range(model.cfg.num_classes), thresholds)
    report = summarize(res, thresholds)
    report["prompts_per_class"] = prompts_per_class
    report["prompt_entries"] = {int(c): v for c, v in used.items()}
    report["seed"] = seed
    report["n_scenes"] = len(scenes)
    return report


CSV_FIELDS_HEAD = ["run_id", "split", "prompts_per_class", "AP50", "mAP"]


def report_json(report: dict, **extra) -> str:
    flat = {**extra, **{k: v for k, v in report.items() if k != "prompt_entries"}}
    return json.dumps(flat, sort_keys=True)


def report_csv_row(report: dict, run_id: str, split: str, num_classes: int = 12,
                   header: bool = False) -> str:
    fields = CSV_FIELDS_HEAD + [f"AP50_c{c}" for c in range(num_classes)]
    row = [run_id, split, report["prompts_per_class"], f"{report['AP50']:.4f}", f"{report['mAP']:.4f}"]
    pc = report["per_class_AP50"]
    row += [f"{pc[c]:.4f}" if c in pc else "" for c in range(num_classes)]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    if header:
        w.writerow(fields)
    w.writerow(row)
    return buf.getvalue()
