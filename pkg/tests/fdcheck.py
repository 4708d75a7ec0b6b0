"""Finite-difference check of the full composite training loss on a tiny network."""
import copy

import numpy as np
import torch

from grqodet.model import ModelConfig
from grqodet.trainer import TrainConfig, build_model, compute_losses, make_batch, snapshot_reference

TINY_MODEL = dict(dim=8, heads=2, ffn_dim=16, enc_layers=1, fusion_layers=1, dec_layers=1, num_queries=4)


def composite_fd_check(data, grad_mode, eps=1e-6, coords_per_tensor=3, directions=4, seed=0):
    """Return (relative error, n_checked) of autograd vs central differences.

    Autograd runs in float32; the finite differences run on a float64 copy.
    Stop-gradient quantities (advantages or reward moments, and the prompts seen
    by the objectness policy) are frozen at the evaluation point so that the
    finite differences see the same surrogate that autograd differentiates.
    """
    cfg = TrainConfig(mode="grqo", grad_mode=grad_mode, alpha=3.0, beta=0.5, alpha_ref_queries=0,
                      model=ModelConfig(**TINY_MODEL), seed=seed)
    model32 = build_model(cfg)
    torch.manual_seed(seed + 1)
    reference32 = snapshot_reference(model32)
    with torch.no_grad():
        for p in reference32.parameters():
            p.add_(0.05 * torch.randn_like(p))
    rng = np.random.default_rng(seed)
    pool = data.pool("train")
    batch = make_batch(data.splits["train"][:2], pool, 1, rng)

    # analytic route: single precision autograd
    model32.zero_grad()
    compute_losses(model32, batch, pool, cfg, reference32, grqo_on=True, frozen={})["loss"].backward()
    analytic = [p.grad.detach().double() if p.grad is not None else torch.zeros_like(p, dtype=torch.float64)
                for p in model32.parameters()]

    # numeric route: central differences of a double precision copy
    model = copy.deepcopy(model32).double()
    reference = copy.deepcopy(reference32).double()
    batch64 = copy.copy(batch)
    batch64.pixels = batch.pixels.double()
    frozen: dict = {}

    def loss_at() -> torch.Tensor:
        return compute_losses(model, batch64, pool, cfg, reference, grqo_on=True, frozen=frozen)["loss"]

    loss_at()
    params = [p for p in model.parameters()]

    def central(direction: list[torch.Tensor]) -> float:
        with torch.no_grad():
            for p, d in zip(params, direction):
                p.add_(eps * d)
            up = loss_at().item()
            for p, d in zip(params, direction):
                p.sub_(2 * eps * d)
            dn = loss_at().item()
            for p, d in zip(params, direction):
                p.add_(eps * d)
        return (up - dn) / (2 * eps)

    num, ana = [], []
    for i, p in enumerate(params):
        for k in rng.choice(p.numel(), size=min(coords_per_tensor, p.numel()), replace=False):
            d = [torch.zeros_like(q) for q in params]
            d[i].view(-1)[k] = 1.0
            num.append(central(d))
            ana.append(analytic[i].view(-1)[k].item())
    g = torch.Generator().manual_seed(seed)
    for _ in range(directions):
        d = [torch.randn(q.shape, generator=g, dtype=q.dtype) for q in params]
        num.append(central(d))
        ana.append(sum((a * x).sum().item() for a, x in zip(analytic, d)))
    num, ana = np.array(num), np.array(ana)
    return float(np.linalg.norm(num - ana) / np.linalg.norm(num)), len(num)
