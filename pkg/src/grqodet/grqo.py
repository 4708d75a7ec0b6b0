"""Group-relative query rewards, objectness KL regularization and the GRQO loss.

Each image is one group: its N_q decoder queries. A query's reward is the
negated cost of its best-matching ground truth; advantages standardize the
rewards within the group.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch

SCORE_WEIGHTED = "score-weighted"
DIRECT = "direct"
GRADIENT_MODES = (SCORE_WEIGHTED, DIRECT)


@dataclass
class RewardGroup:
    rewards: torch.Tensor
    group_mean: torch.Tensor
    group_std: torch.Tensor
    advantages: torch.Tensor
    alpha_mask: torch.Tensor | None = None


@dataclass
class ObjectnessPair:
    current_probs: torch.Tensor
    reference_probs: torch.Tensor

    def __post_init__(self):
        if self.current_probs.shape != self.reference_probs.shape:
            raise ValueError("objectness distributions must share the selected index set")


def query_rewards(costs: torch.Tensor) -> torch.Tensor:
    """``r_i = -min_j C[i, j]``; differentiable through ``costs``."""
    if costs.ndim != 2 or costs.shape[1] == 0:
        raise ValueError("query rewards need at least one ground-truth column")
    return -costs.min(dim=1).values


def group_advantages(rewards: torch.Tensor, eps: float = 1e-6,
                     detach_stats: bool = True, stats: tuple | None = None) -> torch.Tensor:
    """Standardize rewards with the population mean and std of the group.

    With ``detach_stats`` the group statistics are constants. ``stats`` pins
    ``(mean, std)`` to given values instead of measuring them. Returns zeros
    when the group is constant (std below ``eps``) or has fewer than 2 members.
    """
    if rewards.numel() < 2:
        return torch.zeros_like(rewards)
    if stats is not None:
        mu, sigma = (torch.as_tensor(v, dtype=rewards.dtype) for v in stats)
    else:
        mu = rewards.mean()
        sigma = rewards.std(unbiased=False)
    if detach_stats:
        mu, sigma = mu.detach(), sigma.detach()
    if sigma.item() < eps:
        return torch.zeros_like(rewards)
    return (rewards - mu) / sigma


def reward_stats(costs: torch.Tensor) -> tuple[float, float]:
    """Detached population ``(mean, std)`` of a group's rewards."""
    r = query_rewards(costs).detach()
    return float(r.mean()), float(r.std(unbiased=False))


def reward_group(costs: torch.Tensor, eps: float = 1e-6) -> RewardGroup:
    r = query_rewards(costs).detach()
    return RewardGroup(r, r.mean(), r.std(unbiased=False), group_advantages(r, eps))


def layerwise_advantages(per_layer_costs: Sequence[torch.Tensor], eps: float = 1e-6,
                         relative: bool = True, detach_stats: bool = True,
                         stats: Sequence[tuple] | None = None) -> torch.Tensor:
    """Mean over decoder layers of each layer's per-query advantages.

    ``relative=False`` uses the raw rewards instead of standardized ones.
    ``stats`` optionally pins each layer's ``(mean, std)``.
    """
    if not per_layer_costs:
        raise ValueError("need at least one decoder layer")
    shape = per_layer_costs[0].shape
    if any(c.shape != shape for c in per_layer_costs):
        raise ValueError("per-layer cost matrices must share a shape")
    terms = []
    for k, c in enumerate(per_layer_costs):
        r = query_rewards(c)
        pinned = stats[k] if stats is not None else None
        terms.append(group_advantages(r, eps, detach_stats, pinned) if relative else r)
    return torch.stack(terms).mean(dim=0)


def alpha_mask(objectness_probs: torch.Tensor, base_alpha: float,
               floor_fraction: float = 0.5) -> torch.Tensor:
    """``base_alpha`` where a query holds at least ``floor_fraction / N_q`` mass, else 0."""
    n_q = objectness_probs.shape[-1]
    keep = objectness_probs.detach() >= floor_fraction / n_q
    return keep.to(objectness_probs.dtype) * base_alpha


def kl_k3(pair: ObjectnessPair) -> torch.Tensor:
    """Per-query ``ratio - log(ratio) - 1`` with ``ratio = O_ref / O_theta``.

    Only the current distribution carries gradient.
    """
    ref = pair.reference_probs.detach()
    log_ratio = torch.log(ref) - torch.log(pair.current_probs)
    return torch.exp(log_ratio) - log_ratio - 1


def objectness_distribution(objectness_logits: torch.Tensor) -> torch.Tensor:
    return torch.softmax(objectness_logits, dim=-1)


def grqo_loss(advantages: torch.Tensor, alpha: torch.Tensor, objectness_log_probs: torch.Tensor,
              kl_terms: torch.Tensor, beta: float, mode: str = SCORE_WEIGHTED,
              reduce: bool = True):
    """GRQO objective for one query group (last axis = queries).

    score-weighted: ``-(1/N_q) sum_i (alpha_i * A_i * log O(q_i) - beta * KL_i)``
    with ``A`` held constant.
    direct: ``-(1/N_q) sum_i (alpha_i * A_i - beta * KL_i)`` where ``A`` keeps
    its gradient path through the rewards.

    With ``reduce=False`` returns ``(reward_term, kl_term)`` separately; the
    loss is their sum.
    """
    if not (advantages.shape == alpha.shape == objectness_log_probs.shape == kl_terms.shape):
        raise ValueError("advantages, alpha mask, log-probs and KL terms must have equal shapes")
    if mode == SCORE_WEIGHTED:
        signal = alpha * advantages.detach() * objectness_log_probs
    elif mode == DIRECT:
        signal = alpha * advantages
    else:
        raise ValueError(f"unknown gradient mode {mode!r}")
    reward_term = -signal.mean(dim=-1)
    kl_term = beta * kl_terms.mean(dim=-1)
    if reduce:
        return reward_term + kl_term
    return reward_term, kl_term
