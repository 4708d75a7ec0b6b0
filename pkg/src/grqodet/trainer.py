"""SFT and GRQO training loops, the frozen reference model, and checkpoints."""
from __future__ import annotations

import copy
import csv
import hashlib
import json
import logging
import math
import os
import struct
import sys
import time
import zlib
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from . import __version__
from .evalkit import map_over
from .grqo import (GRADIENT_MODES, SCORE_WEIGHTED, alpha_mask, grqo_loss, kl_k3, reward_stats,
                   layerwise_advantages, ObjectnessPair)
from .model import (ModelConfig, PromptDetector, PromptSet, draw_prompt_indices,
                    encode_pool_prompts, token_objectness)
from .objective import (CostWeights, contrastive_loss, cost_matrix, detection_losses,
                        match_layer)

log = logging.getLogger(__name__)

MAGIC = b"GRQO1"
CKPT_VERSION = 1
RELATIVE, ABSOLUTE = "relative", "absolute"


class ConfigError(ValueError):
    pass


class CheckpointError(RuntimeError):
    pass


class CheckpointShapeError(CheckpointError):
    pass


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    mode: str = "sft"
    epochs: int = 6                 # total, warmup included
    sft_warmup_epochs: int = 1
    batch_size: int = 16
    lr: float = 1e-3
    lr_min_factor: float = 0.05
    lr_warmup_steps: int = 100
    weight_decay: float = 1e-4
    grad_clip: float = 1.0
    prompts_per_class: int = 1
    lambda_focal: float = 2.0
    lambda_l1: float = 5.0
    lambda_giou: float = 2.0
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    contrastive_weight: float = 1.0
    contrastive_temperature: float = 0.07
    aux_loss: bool = True
    det_loss_scale: float = 1.0     # scale of focal/L1/GIoU during GRQO epochs
    alpha: float = 1e3
    beta: float = 0.04
    # alpha is stated per this many selected queries; the applied weight is
    # alpha * N_q / alpha_ref_queries (0 applies alpha unchanged)
    alpha_ref_queries: int = 900
    masked_policy: bool = True          # log O over unmasked queries only
    objectness_prompt_grad: bool = False  # GRQO objectness sees detached prompts
    grad_mode: str = SCORE_WEIGHTED
    reward_norm: str = RELATIVE
    layerwise: bool = True
    objectness_floor: float = 0.5
    reward_lambda_focal: float = 2.0
    reward_lambda_l1: float = 5.0
    reward_lambda_giou: float = 2.0
    advantage_eps: float = 1e-6
    reference_refresh_epochs: int = 0
    seed: int = 0
    eval_prompts_per_class: int = 8
    eval_seed: int = 0
    eval_splits: tuple = ("val_id", "val_ood")
    select_split: str = "val_id"
    max_steps_per_epoch: int = 0    # 0 = full epoch
    train_subset: int = 0           # 0 = all training scenes
    save_epoch_checkpoints: bool = False
    model: ModelConfig = field(default_factory=ModelConfig)

    @property
    def cost_weights(self) -> CostWeights:
        return CostWeights(self.lambda_focal, self.lambda_l1, self.lambda_giou)

    @property
    def effective_alpha(self) -> float:
        if not self.alpha_ref_queries:
            return self.alpha
        return self.alpha * self.model.num_queries / self.alpha_ref_queries

    @property
    def reward_weights(self) -> CostWeights:
        return CostWeights(self.reward_lambda_focal, self.reward_lambda_l1, self.reward_lambda_giou)

    def validate(self) -> "TrainConfig":
        if self.mode not in ("sft", "grqo"):
            raise ConfigError(f"mode must be 'sft' or 'grqo', got {self.mode!r}")
        if self.grad_mode not in GRADIENT_MODES:
            raise ConfigError(f"grad_mode must be one of {GRADIENT_MODES}")
        if self.reward_norm not in (RELATIVE, ABSOLUTE):
            raise ConfigError("reward_norm must be 'relative' or 'absolute'")
        if self.epochs < 1 or self.batch_size < 1 or self.prompts_per_class < 1:
            raise ConfigError("epochs, batch_size and prompts_per_class must be >= 1")
        if self.mode == "grqo" and not 0 < self.sft_warmup_epochs < self.epochs + 1:
            raise ConfigError("grqo mode needs 0 < sft_warmup_epochs <= epochs (or a reference checkpoint)")
        if self.lr <= 0 or self.grad_clip <= 0:
            raise ConfigError("lr and grad_clip must be positive")
        if self.alpha < 0 or self.beta < 0:
            raise ConfigError("alpha and beta must be nonnegative")
        if self.alpha_ref_queries < 0:
            raise ConfigError("alpha_ref_queries must be >= 0")
        if not 0 <= self.objectness_floor <= 1:
            raise ConfigError("objectness_floor must lie in [0, 1]")
        try:
            self.cost_weights
            self.reward_weights
            self.model.validate()
        except ValueError as e:
            raise ConfigError(str(e)) from None
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["eval_splits"] = list(self.eval_splits)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        mdict = d.pop("model", {}) or {}
        mknown = {f.name for f in fields(ModelConfig)}
        if set(mdict) - mknown:
            raise ConfigError(f"unknown model config keys: {sorted(set(mdict) - mknown)}")
        if "eval_splits" in d:
            d["eval_splits"] = tuple(d["eval_splits"])
        try:
            cfg = cls(**d, model=ModelConfig(**mdict))
        except TypeError as e:
            raise ConfigError(str(e)) from None
        for f in fields(cls):
            if f.name == "model":
                continue
            v = getattr(cfg, f.name)
            if f.type in ("int", "float") and (isinstance(v, bool) or not isinstance(v, (int, float))):
                raise ConfigError(f"{f.name} must be numeric, got {v!r}")
            if f.type == "bool" and not isinstance(v, bool):
                raise ConfigError(f"{f.name} must be a boolean, got {v!r}")
        return cfg.validate()

    def replace(self, **kw) -> "TrainConfig":
        d = self.to_dict()
        model_kw = kw.pop("model", None)
        d.update(kw)
        if model_kw:
            d["model"] = {**d["model"], **model_kw}
        return TrainConfig.from_dict(d)


def load_config(path: str | os.PathLike) -> TrainConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"config {path} is not valid JSON: {e}") from None
    if not isinstance(raw, dict):
        raise ConfigError("config root must be an object")
    return TrainConfig.from_dict(raw)


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    tensors: dict[str, torch.Tensor]
    meta: dict


def save_checkpoint(path: str | os.PathLike, tensors: dict[str, torch.Tensor], meta: dict) -> Path:
    """Write ``GRQO1 | u32 version | u64 meta length | meta JSON | float32 LE payload``."""
    directory, payload_parts, offset = [], [], 0
    for name, t in tensors.items():
        arr = t.detach().cpu().to(torch.float32).contiguous().numpy().astype("<f4", copy=False)
        b = arr.tobytes(order="C")
        directory.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(b)})
        payload_parts.append(b)
        offset += len(b)
    payload = b"".join(payload_parts)
    meta = {**meta, "tensors": directory, "payload_bytes": len(payload),
            "payload_crc32": zlib.crc32(payload)}
    mb = json.dumps(meta, sort_keys=True).encode()
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", CKPT_VERSION, len(mb)))
        fh.write(mb)
        fh.write(payload)
    os.replace(tmp, path)
    return path


def load_checkpoint(path: str | os.PathLike) -> Checkpoint:
    data = Path(path).read_bytes()
    if data[:len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not a GRQO1 checkpoint")
    head = len(MAGIC) + 12
    if len(data) < head:
        raise CheckpointError(f"{path}: truncated header")
    version, mlen = struct.unpack("<IQ", data[len(MAGIC):head])
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: checkpoint version {version} != {CKPT_VERSION}")
    try:
        meta = json.loads(data[head:head + mlen])
    except (json.JSONDecodeError, UnicodeDecodeError):
        raise CheckpointError(f"{path}: corrupt metadata block") from None
    payload = data[head + mlen:]
    if len(payload) != meta.get("payload_bytes") or zlib.crc32(payload) != meta.get("payload_crc32"):
        raise CheckpointError(f"{path}: payload truncated or corrupt")
    tensors = {}
    for ent in meta["tensors"]:
        end = ent["offset"] + ent["nbytes"]
        if end > len(payload):
            raise CheckpointError(f"{path}: tensor {ent['name']} exceeds payload")
        arr = np.frombuffer(payload[ent["offset"]:end], dtype="<f4").reshape(ent["shape"])
        tensors[ent["name"]] = torch.from_numpy(arr.astype(np.float32))
    return Checkpoint(tensors, meta)


def params_hash(model: torch.nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in model.state_dict().items():
        h.update(name.encode())
        h.update(t.detach().cpu().to(torch.float32).contiguous().numpy().tobytes())
    return h.hexdigest()


def load_params(model: torch.nn.Module, ckpt: Checkpoint) -> None:
    state = model.state_dict()
    params = {k[len("model."):]: v for k, v in ckpt.tensors.items() if k.startswith("model.")}
    missing = set(state) - set(params)
    extra = set(params) - set(state)
    if missing or extra:
        raise CheckpointShapeError(f"parameter names differ; missing {sorted(missing)[:5]}, "
                                   f"unexpected {sorted(extra)[:5]}")
    for k, v in params.items():
        if tuple(v.shape) != tuple(state[k].shape):
            raise CheckpointShapeError(f"shape mismatch for {k}: checkpoint {tuple(v.shape)} "
                                       f"vs model {tuple(state[k].shape)}")
    model.load_state_dict({k: v.to(state[k].dtype) for k, v in params.items()})


def snapshot_reference(model: PromptDetector) -> PromptDetector:
    ref = copy.deepcopy(model)
    ref.eval()
    for p in ref.parameters():
        p.requires_grad_(False)
    return ref


def _optimizer_tensors(model, opt) -> tuple[dict[str, torch.Tensor], dict]:
    names = {id(p): n for n, p in model.named_parameters()}
    out, steps = {}, {}
    for p, st in opt.state.items():
        n = names[id(p)]
        out[f"optim.{n}.exp_avg"] = st["exp_avg"]
        out[f"optim.{n}.exp_avg_sq"] = st["exp_avg_sq"]
        steps[n] = float(st["step"])
    return out, steps


def _restore_optimizer(model, opt, ckpt: Checkpoint) -> None:
    steps = ckpt.meta.get("optim_steps") or {}
    for n, p in model.named_parameters():
        if n not in steps:
            continue
        opt.state[p] = {
            "step": torch.tensor(steps[n], dtype=torch.float32),
            "exp_avg": ckpt.tensors[f"optim.{n}.exp_avg"].clone(),
            "exp_avg_sq": ckpt.tensors[f"optim.{n}.exp_avg_sq"].clone(),
        }


def write_model_checkpoint(path, model, cfg: TrainConfig, step: int, epoch: int, history: list,
                           opt=None, extra: dict | None = None) -> Path:
    tensors = {f"model.{k}": v for k, v in model.state_dict().items()}
    meta = {"config": cfg.to_dict(), "step": step, "epoch": epoch, "history": history,
            "package_version": __version__, **(extra or {})}
    if opt is not None:
        ot, steps = _optimizer_tensors(model, opt)
        tensors.update(ot)
        meta["optim_steps"] = steps
    return save_checkpoint(path, tensors, meta)


def model_from_checkpoint(path) -> tuple[PromptDetector, Checkpoint]:
    ckpt = load_checkpoint(path)
    cfg = TrainConfig.from_dict(ckpt.meta["config"])
    model = PromptDetector(cfg.model)
    load_params(model, ckpt)
    return model, ckpt


# ---------------------------------------------------------------------------
# batches and losses


def _seed_rng(seed: int, purpose: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng([seed, purpose, *keys])


PURPOSE_INIT, PURPOSE_ORDER, PURPOSE_PROMPTS = 0, 1, 2


def build_model(cfg: TrainConfig) -> PromptDetector:
    init_seed = int(_seed_rng(cfg.seed, PURPOSE_INIT).integers(2 ** 31))
    g = torch.random.fork_rng()
    with g:
        torch.manual_seed(init_seed)
        model = PromptDetector(cfg.model)
    return model


@dataclass
class Batch:
    pixels: torch.Tensor
    targets: list[dict]
    class_ids: list[int]
    picks: dict[int, list[int]]


def make_batch(scenes, pool, m: int, rng: np.random.Generator) -> Batch:
    classes = sorted({i.class_id for s in scenes for i in s.instances})
    picks = draw_prompt_indices(pool.sizes(), classes, m, rng)
    col = {c: k for k, c in enumerate(classes)}
    targets = []
    for s in scenes:
        labels = torch.tensor([col[i.class_id] for i in s.instances], dtype=torch.long)
        boxes = torch.tensor([i.box.as_tuple() for i in s.instances], dtype=torch.float32).reshape(-1, 4)
        targets.append({"labels": labels, "boxes": boxes})
    px = torch.from_numpy(np.stack([s.pixels for s in scenes]))
    return Batch(px, targets, classes, picks)


def prompts_for(model, pool, batch: Batch) -> PromptSet:
    prompts, _ = encode_pool_prompts(model, pool, batch.class_ids, 0, picks=batch.picks)
    return prompts


def compute_losses(model: PromptDetector, batch: Batch, pool, cfg: TrainConfig,
                   reference: PromptDetector | None = None, grqo_on: bool = False,
                   frozen: dict | None = None) -> dict:
    """Total loss plus detached components for one batch."""
    prompts = prompts_for(model, pool, batch)
    out = model(batch.pixels, prompts)
    if not all(bool(torch.isfinite(t).all()) for t in out.class_logits + out.boxes):
        raise TrainingDiverged("non-finite network outputs")
    dtype = out.boxes[-1].dtype
    targets = [{"labels": t["labels"], "boxes": t["boxes"].to(dtype)} for t in batch.targets]

    layers = range(len(out.boxes)) if cfg.aux_loss else [len(out.boxes) - 1]
    parts = {"focal": 0.0, "l1": 0.0, "giou": 0.0}
    for li in layers:
        matches = match_layer(out.class_logits[li], out.boxes[li], targets, cfg.cost_weights,
                              cfg.focal_alpha, cfg.focal_gamma)
        d = detection_losses(out.class_logits[li], out.boxes[li], targets, matches,
                             cfg.focal_alpha, cfg.focal_gamma)
        for k in parts:
            parts[k] = parts[k] + d[k]
    det = cfg.lambda_focal * parts["focal"] + cfg.lambda_l1 * parts["l1"] + cfg.lambda_giou * parts["giou"]
    anchors = model.class_anchors[torch.tensor(prompts.class_ids)]
    contra = contrastive_loss(prompts.embeddings, anchors, cfg.contrastive_temperature)

    res = {k: v.detach() for k, v in parts.items()}
    res["contra"] = contra.detach()
    if not grqo_on:
        total = det + cfg.contrastive_weight * contra
        res.update(loss=total, reward_term=torch.zeros(()), kl_term=torch.zeros(()),
                   kl=torch.zeros(()))
        return res

    reward_term, kl_term, kl_mean = grqo_terms(model, out, batch, pool, targets, cfg, reference, frozen)
    total = cfg.det_loss_scale * det + cfg.contrastive_weight * contra + reward_term + kl_term
    res.update(loss=total, reward_term=reward_term.detach(), kl_term=kl_term.detach(), kl=kl_mean)
    return res


def grqo_terms(model, out, batch: Batch, pool, targets, cfg: TrainConfig,
               reference: PromptDetector, frozen: dict | None = None):
    """Batch-mean GRQO reward and KL terms, plus the mean raw KL (detached).

    ``frozen`` (for gradient checks) caches the stop-gradient quantities on
    first use and replays them afterwards: the advantages in score-weighted
    mode, the per-layer reward statistics in direct mode, and the fused
    prompts when ``objectness_prompt_grad`` is off.
    """
    if cfg.objectness_prompt_grad:
        logits = out.selection.objectness_logits
    else:
        prm = out.extras["prm"].detach()
        if frozen is not None:
            prm = frozen.setdefault("prm", prm.clone())
        logits = torch.gather(token_objectness(out.extras["img"], prm), 1, out.selection.indices)
    log_probs = torch.log_softmax(logits, dim=-1)
    probs = log_probs.exp()
    with torch.no_grad():
        ref_prompts = prompts_for(reference, pool, batch)
        ref_scores, _, _ = reference.token_scores(batch.pixels, ref_prompts)
        ref_probs = torch.softmax(torch.gather(ref_scores, 1, out.selection.indices).to(logits.dtype), -1)
    kl = kl_k3(ObjectnessPair(probs, ref_probs))

    direct = cfg.grad_mode != SCORE_WEIGHTED
    layers = range(len(out.boxes)) if cfg.layerwise else [len(out.boxes) - 1]
    reward_terms, kl_terms = [], []
    for b, t in enumerate(targets):
        if t["labels"].numel() == 0:
            adv = torch.zeros_like(logits[b])
        else:
            with torch.set_grad_enabled(direct and torch.is_grad_enabled()):
                costs = [cost_matrix(out.class_logits[li][b], out.boxes[li][b], t["labels"], t["boxes"],
                                     cfg.reward_weights, cfg.focal_alpha, cfg.focal_gamma)
                         for li in layers]
                stats = None
                if frozen is not None and direct:
                    stats = frozen.setdefault(b, [reward_stats(c) for c in costs])
                adv = layerwise_advantages(costs, cfg.advantage_eps, relative=cfg.reward_norm == RELATIVE,
                                           stats=stats)
                if frozen is not None and not direct:
                    adv = frozen.setdefault(b, adv.detach().clone())
        amask = alpha_mask(probs[b], cfg.effective_alpha, cfg.objectness_floor)
        lp = log_probs[b]
        if cfg.masked_policy:
            # masked queries carry zero weight; renormalize the policy over the kept ones
            keep = probs[b].detach() >= cfg.objectness_floor / probs.shape[-1]
            kept = torch.log_softmax(logits[b].masked_fill(~keep, float("-inf")), dim=-1)
            lp = torch.where(keep, kept, torch.zeros_like(lp))
        r, k = grqo_loss(adv, amask, lp, kl[b], cfg.beta, cfg.grad_mode, reduce=False)
        reward_terms.append(r)
        kl_terms.append(k)
    return torch.stack(reward_terms).mean(), torch.stack(kl_terms).mean(), kl.detach().mean()


# ---------------------------------------------------------------------------
# training loop


def lr_at(cfg: TrainConfig, step: int, total_steps: int) -> float:
    if cfg.lr_warmup_steps and step < cfg.lr_warmup_steps:
        return cfg.lr * (step + 1) / cfg.lr_warmup_steps
    span = max(total_steps - cfg.lr_warmup_steps, 1)
    frac = min(max(step - cfg.lr_warmup_steps, 0) / span, 1.0)
    return cfg.lr * (cfg.lr_min_factor + (1 - cfg.lr_min_factor) * 0.5 * (1 + math.cos(math.pi * frac)))


def make_optimizer(model, cfg: TrainConfig):
    return torch.optim.AdamW(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)


METRIC_FIELDS = ["step", "epoch", "phase", "lr", "loss", "focal", "l1", "giou", "contra",
                 "reward_term", "kl_term", "kl"]


def _fmt(v) -> str:
    if isinstance(v, str):
        return v
    if isinstance(v, int):
        return str(v)
    return repr(float(v))


@dataclass
class RunResult:
    model: PromptDetector
    history: list[dict]
    reference: PromptDetector | None = None
    out_dir: Path | None = None
    trajectory: list[dict] = field(default_factory=list)


class Trainer:
    """Runs SFT epochs, then (in grqo mode) GRQO epochs against a frozen reference."""

    def __init__(self, cfg: TrainConfig, data, out_dir: str | os.PathLike | None = None,
                 record_trajectory: bool = False, on_step=None):
        self.cfg = cfg.validate()
        self.data = data
        self.out_dir = Path(out_dir) if out_dir else None
        self.train_scenes = data.splits["train"]
        if cfg.train_subset:
            self.train_scenes = self.train_scenes[:cfg.train_subset]
        self.pool = data.pool("train")
        self.model = build_model(cfg)
        self.opt = make_optimizer(self.model, cfg)
        self.reference: PromptDetector | None = None
        self.reference_hash: str | None = None
        self.history: list[dict] = []
        self.step = 0
        self.start_epoch = 0
        self.best_score = -1.0
        self.record_trajectory = record_trajectory
        self.trajectory: list[dict] = []
        self.on_step = on_step
        n = len(self.train_scenes)
        self.steps_per_epoch = n // cfg.batch_size + (n % cfg.batch_size > 0)
        if cfg.max_steps_per_epoch:
            self.steps_per_epoch = min(self.steps_per_epoch, cfg.max_steps_per_epoch)
        self.total_steps = self.steps_per_epoch * cfg.epochs

    # -- state ------------------------------------------------------------

    def resume_from(self, ckpt: Checkpoint) -> None:
        load_params(self.model, ckpt)
        _restore_optimizer(self.model, self.opt, ckpt)
        self.step = int(ckpt.meta["step"])
        self.start_epoch = int(ckpt.meta["epoch"])
        self.history = list(ckpt.meta.get("history", []))
        self.best_score = float(ckpt.meta.get("best_score", -1.0))

    def set_reference(self, model: PromptDetector) -> None:
        self.reference = snapshot_reference(model)
        self.reference_hash = params_hash(self.reference)

    def _phase(self, epoch: int) -> str:
        if self.cfg.mode == "grqo" and epoch >= self.cfg.sft_warmup_epochs:
            return "grqo"
        return "sft"

    # -- loop ---------------------------------------------------------------

    def train_step(self, batch: Batch, grqo_on: bool) -> dict:
        cfg = self.cfg
        self.model.train()
        lr = lr_at(cfg, self.step, self.total_steps)
        for g in self.opt.param_groups:
            g["lr"] = lr
        res = compute_losses(self.model, batch, self.pool, cfg, self.reference, grqo_on)
        loss = res["loss"]
        if not torch.isfinite(loss):
            raise TrainingDiverged(f"non-finite loss at step {self.step}: {loss.item()}")
        self.opt.zero_grad(set_to_none=True)
        loss.backward()
        torch.nn.utils.clip_grad_norm_(self.model.parameters(), cfg.grad_clip)
        self.opt.step()
        if self.reference is not None and any(p.grad is not None for p in self.reference.parameters()):
            raise RuntimeError("gradient reached the reference model")
        self.step += 1
        out = {k: float(v.detach()) for k, v in res.items()}
        out["lr"] = lr
        if self.record_trajectory:
            self.trajectory.append({"step": self.step, "loss": out["loss"],
                                    "params": torch.cat([p.detach().reshape(-1).clone()
                                                         for p in self.model.parameters()])})
        if self.on_step:
            self.on_step(self, out)
        return out

    def run_epoch(self, epoch: int) -> dict:
        cfg = self.cfg
        phase = self._phase(epoch)
        order = _seed_rng(cfg.seed, PURPOSE_ORDER, epoch).permutation(len(self.train_scenes))
        sums: dict[str, float] = {}
        for s in range(self.steps_per_epoch):
            idx = order[s * cfg.batch_size:(s + 1) * cfg.batch_size]
            prng = _seed_rng(cfg.seed, PURPOSE_PROMPTS, self.step)
            batch = make_batch([self.train_scenes[i] for i in idx], self.pool, cfg.prompts_per_class, prng)
            out = self.train_step(batch, phase == "grqo")
            for k, v in out.items():
                sums[k] = sums.get(k, 0.0) + v
        row = {k: sums[k] / self.steps_per_epoch for k in METRIC_FIELDS[3:]}
        row.update(step=self.step, epoch=epoch + 1, phase=phase)
        return row

    def evaluate(self) -> dict:
        cfg = self.cfg
        out = {}
        for split in cfg.eval_splits:
            rep = map_over(self.data.splits[split], self.model, self.data.pool(split),
                           cfg.eval_prompts_per_class, cfg.eval_seed)
            out[f"{split}_AP50"] = rep["AP50"]
            out[f"{split}_mAP"] = rep["mAP"]
        return out

    def fit(self, until_epoch: int | None = None) -> RunResult:
        """Train to ``cfg.epochs`` (or stop after ``until_epoch``; the schedule still spans all epochs)."""
        cfg = self.cfg
        if self.out_dir:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            (self.out_dir / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
            if self.start_epoch == 0 or not (self.out_dir / "metrics.csv").exists():
                self._write_metrics_header()
        for epoch in range(self.start_epoch, min(cfg.epochs, until_epoch or cfg.epochs)):
            if self._phase(epoch) == "grqo":
                refresh = cfg.reference_refresh_epochs and self.reference is not None and \
                    (epoch - cfg.sft_warmup_epochs) % cfg.reference_refresh_epochs == 0
                if self.reference is None or refresh:
                    self.set_reference(self.model)
                    if self.out_dir:
                        write_model_checkpoint(self.out_dir / "reference.ckpt", self.reference, cfg,
                                               self.step, epoch, self.history)
            t0 = time.time()
            row = self.run_epoch(epoch)
            if self.reference is not None and params_hash(self.reference) != self.reference_hash:
                raise RuntimeError("reference model changed during GRQO")
            row.update(self.evaluate())
            self.history.append(row)
            log.info("epoch %d [%s] %.1fs %s", epoch + 1, row["phase"], time.time() - t0,
                     {k: round(v, 4) for k, v in row.items() if isinstance(v, float)})
            if self.out_dir:
                self._append_metrics(row)
                self._checkpoints(epoch, row)
        return RunResult(self.model, self.history, self.reference, self.out_dir, self.trajectory)

    # -- artifacts ---------------------------------------------------------------

    def _metric_fields(self) -> list[str]:
        return METRIC_FIELDS + [f"{s}_{m}" for s in self.cfg.eval_splits for m in ("AP50", "mAP")]

    def _write_metrics_header(self):
        with open(self.out_dir / "metrics.csv", "w", newline="") as fh:
            csv.writer(fh, lineterminator="\n").writerow(self._metric_fields())
            for row in self.history:
                csv.writer(fh, lineterminator="\n").writerow([_fmt(row[k]) for k in self._metric_fields()])

    def _append_metrics(self, row):
        with open(self.out_dir / "metrics.csv", "a", newline="") as fh:
            csv.writer(fh, lineterminator="\n").writerow([_fmt(row[k]) for k in self._metric_fields()])

    def _checkpoints(self, epoch, row):
        score = row.get(f"{self.cfg.select_split}_AP50", -1.0)
        extra = {"best_score": max(self.best_score, score)}
        write_model_checkpoint(self.out_dir / "last.ckpt", self.model, self.cfg, self.step, epoch + 1,
                               self.history, self.opt, extra)
        if self.cfg.save_epoch_checkpoints:
            write_model_checkpoint(self.out_dir / f"epoch{epoch + 1:03d}.ckpt", self.model, self.cfg,
                                   self.step, epoch + 1, self.history, self.opt, extra)
        if score > self.best_score:
            self.best_score = score
            write_model_checkpoint(self.out_dir / "best.ckpt", self.model, self.cfg, self.step, epoch + 1,
                                   self.history, None, extra)


def write_run_manifest(out_dir, cfg: TrainConfig, data_dir=None, dataset_checksum: str = "",
                       argv: Sequence[str] | None = None, run_id: str | None = None,
                       dataset: dict | None = None) -> Path:
    """Write ``run_manifest.json`` once; an existing manifest is never rewritten."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "run_manifest.json"
    if path.exists():
        raise FileExistsError(f"{path} already exists; run manifests are immutable")
    man = {
        "run_id": run_id or out_dir.name,
        "command_line": list(argv if argv is not None else sys.argv),
        "config": cfg.to_dict(),
        "data_dir": str(data_dir) if data_dir else None,
        "dataset_checksum": dataset_checksum,
        "dataset": dataset,
        "build": build_identifier(),
        "created": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
    }
    path.write_text(json.dumps(man, indent=2, sort_keys=True))
    return path


def build_identifier() -> str:
    src = Path(__file__).resolve().parent
    h = hashlib.sha256()
    for p in sorted(src.glob("*.py")):
        h.update(p.read_bytes())
    return f"grqodet-{__version__}+{h.hexdigest()[:12]}"


def train_sft(cfg: TrainConfig, data, out_dir=None, **kw) -> RunResult:
    return Trainer(cfg.replace(mode="sft"), data, out_dir, **kw).fit()


def continue_sft(cfg: TrainConfig, data, checkpoint: Checkpoint | str | os.PathLike, out_dir=None,
                 **kw) -> RunResult:
    """Resume an SFT run from a checkpoint that carries optimizer state."""
    tr = Trainer(cfg.replace(mode="sft"), data, out_dir, **kw)
    tr.resume_from(checkpoint if isinstance(checkpoint, Checkpoint) else load_checkpoint(checkpoint))
    return tr.fit()


def train_grqo(cfg: TrainConfig, data, reference: Checkpoint | str | os.PathLike | None = None,
               out_dir=None, **kw) -> RunResult:
    """GRQO training.

    Without ``reference`` the run performs its own ``sft_warmup_epochs`` first.
    With a reference checkpoint (an SFT snapshot that carries optimizer state),
    training resumes from it and it becomes the frozen KL anchor.
    """
    cfg = cfg.replace(mode="grqo")
    tr = Trainer(cfg, data, out_dir, **kw)
    if reference is not None:
        ckpt = reference if isinstance(reference, Checkpoint) else load_checkpoint(reference)
        tr.resume_from(ckpt)
        if tr.start_epoch < cfg.sft_warmup_epochs:
            raise ConfigError("reference checkpoint precedes the end of the SFT warmup")
        tr.set_reference(tr.model)
        if out_dir:
            Path(out_dir).mkdir(parents=True, exist_ok=True)
            write_model_checkpoint(Path(out_dir) / "reference.ckpt", tr.reference, cfg, tr.step,
                                   tr.start_epoch, tr.history)
    return tr.fit()
