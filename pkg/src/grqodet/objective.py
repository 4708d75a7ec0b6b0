"""Matching costs, bipartite assignment and the per-instance detection losses."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .geometry import Box, elementwise_giou_t, giou, pairwise_giou_t

PROB_CLAMP = 1e-8


class NoGroundTruthError(ValueError):
    """Raised when a cost matrix is requested for an image without instances."""


@dataclass(frozen=True)
class CostWeights:
    lambda_focal: float = 2.0
    lambda_l1: float = 5.0
    lambda_giou: float = 2.0

    def __post_init__(self):
        ws = (self.lambda_focal, self.lambda_l1, self.lambda_giou)
        if any(w < 0 for w in ws) or not any(w > 0 for w in ws):
            raise ValueError(f"cost weights must be nonnegative with at least one > 0: {ws}")


# ---------------------------------------------------------------------------
# scalar costs


def focal_cost(class_prob: float, is_target: bool = True, alpha_f: float = 0.25,
               gamma_f: float = 2.0) -> float:
    """Focal matching cost of assigning a GT of this class to a query.

    ``pos(p) - neg(p)`` for the target class; a non-target class contributes 0.
    """
    if not is_target:
        return 0.0
    p = min(max(class_prob, PROB_CLAMP), 1.0 - PROB_CLAMP)
    pos = alpha_f * (1 - p) ** gamma_f * -math.log(p)
    neg = (1 - alpha_f) * p ** gamma_f * -math.log(1 - p)
    return pos - neg


def l1_cost(pred: Box, gt: Box) -> float:
    return sum(abs(a - b) for a, b in zip(pred.as_tuple(), gt.as_tuple()))


def giou_cost(pred: Box, gt: Box) -> float:
    return -giou(pred, gt)


# ---------------------------------------------------------------------------
# batched costs


def focal_cost_t(prob: torch.Tensor, alpha_f: float = 0.25, gamma_f: float = 2.0) -> torch.Tensor:
    p = prob.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
    pos = alpha_f * (1 - p) ** gamma_f * -torch.log(p)
    neg = (1 - alpha_f) * p ** gamma_f * -torch.log(1 - p)
    return pos - neg


def cost_matrix(class_logits: torch.Tensor, boxes: torch.Tensor, gt_labels: torch.Tensor,
                gt_boxes: torch.Tensor, weights: CostWeights = CostWeights(),
                alpha_f: float = 0.25, gamma_f: float = 2.0) -> torch.Tensor:
    """Weighted matching cost between every query and every ground truth.

    Args:
        class_logits: (N_q, K) per-class logits of one image.
        boxes: (N_q, 4) predicted boxes.
        gt_labels: (N_gt,) column index into ``class_logits`` for each GT.
        gt_boxes: (N_gt, 4) GT boxes.

    Returns:
        (N_q, N_gt) tensor; differentiable w.r.t. logits and boxes.
    """
    if gt_labels.numel() == 0:
        raise NoGroundTruthError("cost matrix requested for an image with no ground truth")
    prob = class_logits.sigmoid()[:, gt_labels]
    c_cls = focal_cost_t(prob, alpha_f, gamma_f)
    c_l1 = torch.cdist(boxes, gt_boxes.to(boxes.dtype), p=1)
    c_giou = -pairwise_giou_t(boxes, gt_boxes.to(boxes.dtype))
    return weights.lambda_focal * c_cls + weights.lambda_l1 * c_l1 + weights.lambda_giou * c_giou


# ---------------------------------------------------------------------------
# assignment


@dataclass(frozen=True)
class Assignment:
    """One-to-one match; ``queries[k]`` is matched to ground truth ``gts[k]``."""

    queries: tuple[int, ...]
    gts: tuple[int, ...]

    @property
    def pairs(self) -> dict[int, int]:
        return dict(zip(self.queries, self.gts))

    def total(self, costs) -> float:
        costs = np.asarray(costs, dtype=np.float64)
        return float(sum(costs[q, g] for q, g in zip(self.queries, self.gts)))


def _shortest_augmenting(c: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Minimum-cost assignment of every row of ``c`` (m x n, m <= n) to a distinct column.

    Returns (column per row, row potentials, column potentials).
    """
    m, n = c.shape
    u = np.zeros(m + 1)
    v = np.zeros(n + 1)
    owner = np.zeros(n + 1, dtype=np.int64)  # 1-based row owning column j; 0 = free
    way = np.zeros(n + 1, dtype=np.int64)
    for i in range(1, m + 1):
        owner[0] = i
        j0 = 0
        minv = np.full(n + 1, np.inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = owner[j0]
            cur = c[i0 - 1] - u[i0] - v[1:]
            free = ~used[1:]
            better = free & (cur < minv[1:])
            minv[1:][better] = cur[better]
            way[1:][better] = j0
            cand = np.where(free, minv[1:], np.inf)
            j1 = int(np.argmin(cand)) + 1
            delta = cand[j1 - 1]
            u[owner[used]] += delta
            v[used] -= delta
            minv[~used] -= delta
            j0 = j1
            if owner[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            owner[j0] = owner[j1]
            j0 = j1
    col_of_row = np.empty(m, dtype=np.int64)
    for j in range(1, n + 1):
        if owner[j]:
            col_of_row[owner[j] - 1] = j - 1
    return col_of_row, u[1:], v[1:]


def hungarian(costs) -> Assignment:
    """Optimal one-to-one assignment of all ground truths (columns) to queries (rows).

    Among optimal assignments, returns the one whose query sequence, read in
    ground-truth order, is lexicographically smallest.
    """
    c = np.asarray(costs, dtype=np.float64)
    if c.ndim != 2:
        raise ValueError("cost matrix must be 2-D")
    n_q, n_gt = c.shape
    if n_gt == 0:
        return Assignment((), ())
    if n_gt > n_q:
        raise ValueError(f"more ground truths ({n_gt}) than queries ({n_q})")
    if not np.all(np.isfinite(c)):
        raise ValueError("cost matrix has non-finite entries")

    ct = c.T  # rows = GTs, columns = queries
    sol, u, v = _shortest_augmenting(ct)
    best = float(ct[np.arange(n_gt), sol].sum())
    scale = max(1.0, float(np.abs(c).max()) * n_gt)
    tol = 1e-9 * scale
    slack = ct - u[:, None] - v[None, :]

    fixed_cost = 0.0
    used: set[int] = set()
    for j in range(n_gt):
        cur = int(sol[j])
        for i in range(cur):
            if i in used or slack[j, i] > 1e-6 * scale:
                continue
            rest_rows = list(range(j + 1, n_gt))
            rest_cols = [q for q in range(n_q) if q not in used and q != i]
            rest_total = 0.0
            rest_sol = np.empty(0, dtype=np.int64)
            if rest_rows:
                rest_sol, _, _ = _shortest_augmenting(ct[np.ix_(rest_rows, rest_cols)])
                rest_total = float(ct[rest_rows, np.asarray(rest_cols)[rest_sol]].sum())
            if fixed_cost + ct[j, i] + rest_total <= best + tol:
                cur = i
                sol[j + 1:] = np.asarray(rest_cols, dtype=np.int64)[rest_sol]
                break
        sol[j] = cur
        used.add(cur)
        fixed_cost += ct[j, cur]
    return Assignment(tuple(int(q) for q in sol), tuple(range(n_gt)))


@torch.no_grad()
def match_layer(class_logits: torch.Tensor, boxes: torch.Tensor, targets: list[dict],
                weights: CostWeights, alpha_f: float = 0.25, gamma_f: float = 2.0) -> list[Assignment]:
    """Hungarian-match every image of a batch; logits (B,N_q,K), boxes (B,N_q,4)."""
    out = []
    for b, t in enumerate(targets):
        if t["labels"].numel() == 0:
            out.append(Assignment((), ()))
            continue
        c = cost_matrix(class_logits[b], boxes[b], t["labels"], t["boxes"], weights, alpha_f, gamma_f)
        out.append(hungarian(c.double().cpu().numpy()))
    return out


# ---------------------------------------------------------------------------
# losses


def sigmoid_focal(logits: torch.Tensor, targets: torch.Tensor, alpha_f: float = 0.25,
                  gamma_f: float = 2.0) -> torch.Tensor:
    prob = logits.sigmoid()
    ce = F.binary_cross_entropy_with_logits(logits, targets, reduction="none")
    p_t = prob * targets + (1 - prob) * (1 - targets)
    loss = ce * (1 - p_t) ** gamma_f
    if alpha_f >= 0:
        loss = (alpha_f * targets + (1 - alpha_f) * (1 - targets)) * loss
    return loss


def focal_loss(logits: torch.Tensor, targets: torch.Tensor, num_gt: float,
               alpha_f: float = 0.25, gamma_f: float = 2.0) -> torch.Tensor:
    """Sigmoid focal loss summed over queries and classes, divided by ``num_gt``."""
    return sigmoid_focal(logits, targets, alpha_f, gamma_f).sum() / max(num_gt, 1.0)


def l1_loss(pred_boxes: torch.Tensor, gt_boxes: torch.Tensor, num_gt: float) -> torch.Tensor:
    return (pred_boxes - gt_boxes).abs().sum() / max(num_gt, 1.0)


def giou_loss(pred_boxes: torch.Tensor, gt_boxes: torch.Tensor, num_gt: float) -> torch.Tensor:
    if pred_boxes.numel() == 0:
        return pred_boxes.sum()
    return (1 - elementwise_giou_t(pred_boxes, gt_boxes)).sum() / max(num_gt, 1.0)


def detection_losses(class_logits: torch.Tensor, boxes: torch.Tensor, targets: list[dict],
                     matches: list[Assignment], alpha_f: float = 0.25,
                     gamma_f: float = 2.0) -> dict[str, torch.Tensor]:
    """Focal / L1 / GIoU for one decoder layer of a batch given its matching."""
    num_gt = float(sum(len(m.gts) for m in matches))
    onehot = torch.zeros_like(class_logits)
    bi, qi, gi = [], [], []
    for b, (m, t) in enumerate(zip(matches, targets)):
        for q, g in zip(m.queries, m.gts):
            onehot[b, q, t["labels"][g]] = 1.0
            bi.append(b)
            qi.append(q)
            gi.append(t["boxes"][g])
    if bi:
        pred = boxes[torch.tensor(bi), torch.tensor(qi)]
        gt = torch.stack(gi).to(boxes.dtype)
    else:
        pred = boxes.new_zeros((0, 4))
        gt = boxes.new_zeros((0, 4))
    return {
        "focal": focal_loss(class_logits, onehot, num_gt, alpha_f, gamma_f),
        "l1": l1_loss(pred, gt, num_gt),
        "giou": giou_loss(pred, gt, num_gt),
    }


def contrastive_loss(prompt_embeddings: torch.Tensor, class_anchors: torch.Tensor,
                     temperature: float = 0.07) -> torch.Tensor:
    """Symmetric InfoNCE between prompt embeddings and their class anchors.

    Row ``k`` of ``prompt_embeddings`` pairs with row ``k`` of ``class_anchors``;
    the other present classes act as negatives.
    """
    p = F.normalize(prompt_embeddings, dim=-1)
    a = F.normalize(class_anchors, dim=-1)
    sim = p @ a.T / temperature
    labels = torch.arange(sim.shape[0])
    return 0.5 * (F.cross_entropy(sim, labels) + F.cross_entropy(sim.T, labels))
