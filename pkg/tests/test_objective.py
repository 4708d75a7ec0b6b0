import itertools
import math

import numpy as np
import pytest
import torch

from grqodet.geometry import Box, giou
from grqodet.objective import (Assignment, CostWeights, NoGroundTruthError, contrastive_loss,
                               cost_matrix, focal_cost, focal_loss, giou_cost, giou_loss,
                               hungarian, l1_cost, l1_loss)


def brute_force(c):
    """Lexicographically smallest optimal assignment by enumeration."""
    n_q, n_gt = c.shape
    best = None
    for perm in itertools.permutations(range(n_q), n_gt):
        t = sum(c[q, j] for j, q in enumerate(perm))
        if best is None or t < best[0] - 1e-12 or (abs(t - best[0]) <= 1e-12 and perm < best[1]):
            best = (t, perm)
    return best


def central_fd(fn, x, eps=1e-6):
    """Central finite-difference gradient of scalar ``fn`` at float64 ``x``."""
    x = x.detach().double()
    g = torch.zeros_like(x)
    flat = g.view(-1)
    for k in range(x.numel()):
        e = torch.zeros_like(x).view(-1)
        e[k] = eps
        e = e.view_as(x)
        flat[k] = (fn(x + e) - fn(x - e)) / (2 * eps)
    return g


def rel_err(a, b):
    return (a.double() - b.double()).norm().item() / max(b.double().norm().item(), 1e-12)


# -- focal cost -----------------------------------------------------------------


def test_focal_cost_closed_form():
    pos = 0.25 * 0.5 ** 2 * math.log(2)
    neg = 0.75 * 0.5 ** 2 * math.log(2)
    assert pos == pytest.approx(0.0433217, abs=1e-7)
    assert neg == pytest.approx(0.1299651, abs=1e-7)
    assert focal_cost(0.5, True, 0.25, 2.0) == pytest.approx(-0.0866434, abs=1e-6)


def test_focal_cost_decreasing_and_diverging():
    grid = np.linspace(0.005, 0.995, 100)
    vals = [focal_cost(p) for p in grid]
    assert all(b < a for a, b in zip(vals, vals[1:]))
    assert focal_cost(1 - 1e-6) < focal_cost(1 - 1e-3) < focal_cost(0.99)
    assert math.isfinite(focal_cost(1.0)) and math.isfinite(focal_cost(0.0))


def test_focal_cost_non_target_is_zero():
    assert focal_cost(0.3, is_target=False) == 0.0


# -- box costs ------------------------------------------------------------------


def test_l1_cost():
    b = Box(0.5, 0.5, 0.2, 0.2)
    assert l1_cost(b, b) == 0
    assert l1_cost(b, Box(0.4, 0.5, 0.2, 0.3)) == pytest.approx(0.2, abs=1e-12)


def test_l1_triangle_inequality():
    rng = np.random.default_rng(0)

    def rb():
        w, h = rng.uniform(0.05, 0.5, 2)
        return Box(rng.uniform(0, 1), rng.uniform(0, 1), w, h)
    for _ in range(100):
        a, b, c = rb(), rb(), rb()
        assert l1_cost(a, c) <= l1_cost(a, b) + l1_cost(b, c) + 1e-12


def test_giou_cost():
    a = Box(0.25, 0.25, 0.5, 0.5)
    b = Box(0.5, 0.5, 0.5, 0.5)
    assert giou_cost(a, a) == pytest.approx(-1.0)
    assert giou_cost(a, b) == pytest.approx(5 / 63, abs=1e-12)
    rng = np.random.default_rng(3)
    for _ in range(50):
        x = Box(*rng.uniform(0.2, 0.8, 2), *rng.uniform(0.05, 0.4, 2))
        y = Box(*rng.uniform(0.2, 0.8, 2), *rng.uniform(0.05, 0.4, 2))
        assert giou_cost(x, y) + giou(x, y) == 0


# -- cost matrix ---------------------------------------------------------------


def test_cost_matrix_single_entry():
    box = torch.tensor([[0.5, 0.5, 0.2, 0.2]], dtype=torch.float64)
    logits = torch.zeros(1, 1, dtype=torch.float64)  # p = 0.5
    c = cost_matrix(logits, box, torch.tensor([0]), box, CostWeights(1, 1, 1))
    assert c.item() == pytest.approx(-1.0866434, abs=1e-6)


def test_cost_matrix_weight_masking_and_shape():
    g = torch.Generator().manual_seed(0)
    boxes = torch.rand(16, 4, generator=g, dtype=torch.float64) * 0.5 + 0.25
    gts = torch.rand(3, 4, generator=g, dtype=torch.float64) * 0.5 + 0.25
    logits = torch.randn(16, 5, generator=g, dtype=torch.float64)
    labels = torch.tensor([0, 3, 3])
    c = cost_matrix(logits, boxes, labels, gts, CostWeights(0, 1, 0))
    assert c.shape == (16, 3)
    expected = (boxes[:, None, :] - gts[None]).abs().sum(-1)
    torch.testing.assert_close(c, expected)


def test_cost_matrix_affine_in_each_weight():
    g = torch.Generator().manual_seed(1)
    boxes = torch.rand(6, 4, generator=g, dtype=torch.float64) * 0.5 + 0.25
    gts = torch.rand(2, 4, generator=g, dtype=torch.float64) * 0.5 + 0.25
    logits = torch.randn(6, 3, generator=g, dtype=torch.float64)
    labels = torch.tensor([2, 0])
    for k in range(3):
        vals = []
        for lam in (0.5, 1.5, 2.5):
            w = [1.0, 2.0, 3.0]
            w[k] = lam
            vals.append(cost_matrix(logits, boxes, labels, gts, CostWeights(*w)))
        torch.testing.assert_close(vals[1] - vals[0], vals[2] - vals[1])


def test_cost_matrix_empty_gt():
    with pytest.raises(NoGroundTruthError):
        cost_matrix(torch.zeros(4, 2), torch.full((4, 4), 0.3), torch.zeros(0, dtype=torch.long),
                    torch.zeros(0, 4))


def test_cost_weights_validation():
    with pytest.raises(ValueError):
        CostWeights(0, 0, 0)
    with pytest.raises(ValueError):
        CostWeights(-1, 1, 1)


# -- hungarian ----------------------------------------------------------------------


def test_hungarian_examples():
    a = hungarian([[1, 2], [2, 1]])
    assert a.pairs == {0: 0, 1: 1}
    assert a.total([[1, 2], [2, 1]]) == 2
    assert hungarian([[5], [1], [3]]).pairs == {1: 0}


def test_hungarian_matches_brute_force():
    rng = np.random.default_rng(2024)
    for k in range(200):
        n_q = int(rng.integers(1, 8))
        n_gt = int(rng.integers(1, n_q + 1))
        c = rng.normal(size=(n_q, n_gt)) * 3
        a = hungarian(c)
        t, perm = brute_force(c)
        assert a.total(c) == pytest.approx(t, abs=1e-9)
        assert len(set(a.queries)) == n_gt and sorted(a.gts) == list(range(n_gt))


def test_hungarian_tie_break_is_lexicographic():
    rng = np.random.default_rng(7)
    for _ in range(200):
        n_q = int(rng.integers(1, 7))
        n_gt = int(rng.integers(1, n_q + 1))
        c = rng.integers(0, 3, size=(n_q, n_gt)).astype(float)
        t, perm = brute_force(c)
        assert hungarian(c).queries == perm


def test_hungarian_rejects_more_gts_than_queries():
    with pytest.raises(ValueError):
        hungarian(np.zeros((2, 3)))


def test_assignment_pairs():
    a = Assignment((3, 1), (0, 1))
    assert a.pairs == {3: 0, 1: 1}


# -- losses ----------------------------------------------------------------------------


def test_box_losses_zero_on_identity():
    b = torch.tensor([[0.3, 0.4, 0.2, 0.1], [0.6, 0.6, 0.3, 0.3]])
    assert l1_loss(b, b, 2).item() == 0
    assert giou_loss(b, b, 2).item() == pytest.approx(0.0, abs=1e-7)


def test_focal_loss_vanishes_for_confident_negatives():
    logits = torch.full((16, 4), -30.0)
    assert focal_loss(logits, torch.zeros_like(logits), 1).item() < 1e-20


def test_losses_permutation_invariant():
    g = torch.Generator().manual_seed(0)
    p = torch.rand(5, 4, generator=g) * 0.4 + 0.3
    t = torch.rand(5, 4, generator=g) * 0.4 + 0.3
    perm = torch.tensor([3, 0, 4, 1, 2])
    assert l1_loss(p[perm], t[perm], 5).item() == pytest.approx(l1_loss(p, t, 5).item(), rel=1e-6)
    assert giou_loss(p[perm], t[perm], 5).item() == pytest.approx(giou_loss(p, t, 5).item(), rel=1e-6)
    logits = torch.randn(6, 3, generator=g)
    tg = torch.zeros(6, 3)
    tg[1, 2] = tg[4, 0] = 1
    qp = torch.tensor([5, 2, 0, 1, 4, 3])
    assert focal_loss(logits[qp], tg[qp], 2).item() == pytest.approx(focal_loss(logits, tg, 2).item(), rel=1e-6)


@pytest.mark.parametrize("which", ["focal", "l1", "giou"])
def test_loss_gradients_match_finite_differences(which):
    g = torch.Generator().manual_seed(5)
    if which == "focal":
        x0 = torch.randn(8, 3, generator=g, dtype=torch.float64)
        tgt = torch.zeros(8, 3, dtype=torch.float64)
        tgt[2, 1] = tgt[5, 0] = 1

        def fn(x):
            return focal_loss(x, tgt.to(x.dtype), 2)
    else:
        x0 = torch.rand(6, 4, generator=g, dtype=torch.float64) * 0.3 + 0.35
        gt = torch.rand(6, 4, generator=g, dtype=torch.float64) * 0.3 + 0.35
        loss = l1_loss if which == "l1" else giou_loss

        def fn(x):
            return loss(x, gt.to(x.dtype), 6)
    x32 = x0.float().requires_grad_(True)
    fn(x32).backward()
    assert rel_err(x32.grad, central_fd(fn, x0)) <= 1e-3


# -- contrastive -------------------------------------------------------------------


def test_contrastive_single_class_is_zero():
    v = torch.tensor([[1.0, 2.0, 3.0]])
    assert contrastive_loss(v, v).item() == pytest.approx(0.0, abs=1e-7)


def test_contrastive_prefers_aligned_anchors():
    e = torch.eye(2, 4)
    aligned = contrastive_loss(e, e, 0.07)
    swapped = contrastive_loss(e, e.flip(0), 0.07)
    assert aligned.item() < swapped.item()
    assert aligned.item() >= 0


def test_contrastive_scale_invariant():
    g = torch.Generator().manual_seed(0)
    p, a = torch.randn(4, 8, generator=g), torch.randn(4, 8, generator=g)
    assert contrastive_loss(3.7 * p, 3.7 * a).item() == pytest.approx(contrastive_loss(p, a).item(), rel=1e-5)
