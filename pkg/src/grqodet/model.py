"""Desk-scale visually-prompted query detector.

Pipeline: patch encoder -> visual prompt encoder -> image/prompt fusion ->
prompt-guided query selection -> iterative-refinement decoder -> contrastive
class head. Attention is dense and single-scale throughout.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn


@dataclass
class ModelConfig:
    image_size: int = 64
    patch: int = 8
    dim: int = 64
    heads: int = 4
    ffn_dim: int = 128
    enc_layers: int = 2
    fusion_layers: int = 2
    dec_layers: int = 3
    num_queries: int = 16
    num_classes: int = 12
    cls_temperature: float = 0.07
    init_box_size: float = 0.2
    prior_prob: float = 0.01

    @property
    def grid(self) -> int:
        return self.image_size // self.patch

    @property
    def num_tokens(self) -> int:
        return self.grid ** 2

    def validate(self):
        if self.image_size % self.patch:
            raise ValueError("image_size must be a multiple of patch")
        if self.dim % self.heads or self.dim % 4:
            raise ValueError("dim must be divisible by heads and by 4")
        if self.num_queries > self.num_tokens:
            raise ValueError(f"num_queries {self.num_queries} exceeds token count {self.num_tokens}")
        for name in ("enc_layers", "fusion_layers"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.dec_layers < 1:
            raise ValueError("dec_layers must be >= 1")
        return self


class PromptBelowResolution(ValueError):
    pass


@dataclass
class PromptSet:
    """Per-class prompt embeddings; row k belongs to ``class_ids[k]``."""

    class_ids: list[int]
    embeddings: torch.Tensor

    def __post_init__(self):
        if len(set(self.class_ids)) != len(self.class_ids):
            raise ValueError("one embedding per distinct class")
        if self.embeddings.shape[0] != len(self.class_ids):
            raise ValueError("embedding count does not match class ids")

    def column_of(self) -> dict[int, int]:
        return {c: k for k, c in enumerate(self.class_ids)}


@dataclass
class Selection:
    indices: torch.Tensor           # (B, N_q) token indices
    objectness_logits: torch.Tensor  # (B, N_q)
    proposals: torch.Tensor         # (B, N_q, 4)


@dataclass
class QueryOutput:
    class_logits: list[torch.Tensor]  # per layer (B, N_q, K)
    boxes: list[torch.Tensor]         # per layer (B, N_q, 4)
    selection: Selection
    token_scores: torch.Tensor        # (B, N_I) objectness of every token
    prompt_embeddings: torch.Tensor   # (K, C) fused-input prompts
    extras: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# embeddings


POS_TEMPERATURE = 20.0  # coordinates live in [0, 1]; 1e4 leaves almost no high-frequency channels


def sine_embed(x: torch.Tensor, dim: int, temperature: float | None = None) -> torch.Tensor:
    """Sine-cosine encoding of scalars in [0, 1]: (...,) -> (..., dim)."""
    temperature = POS_TEMPERATURE if temperature is None else temperature
    half = dim // 2
    freqs = temperature ** (-torch.arange(half, dtype=x.dtype, device=x.device) / half)
    a = x[..., None] * (2 * math.pi) * freqs
    return torch.cat([a.sin(), a.cos()], dim=-1)


def box_sine_embed(boxes: torch.Tensor, dim_per_coord: int) -> torch.Tensor:
    """(..., 4) boxes -> (..., 4 * dim_per_coord)."""
    return torch.cat([sine_embed(boxes[..., k], dim_per_coord) for k in range(4)], dim=-1)


def inverse_sigmoid(x: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    x = x.clamp(eps, 1 - eps)
    return torch.log(x / (1 - x))


def token_centers(grid: int) -> torch.Tensor:
    """(grid*grid, 2) normalized (x, y) centers in row-major token order."""
    c = (torch.arange(grid, dtype=torch.float64) + 0.5) / grid
    ys, xs = torch.meshgrid(c, c, indexing="ij")
    return torch.stack([xs.reshape(-1), ys.reshape(-1)], dim=-1)


def patchify(pixels: torch.Tensor, patch: int) -> torch.Tensor:
    b, h, w, ch = pixels.shape
    g_h, g_w = h // patch, w // patch
    x = pixels.reshape(b, g_h, patch, g_w, patch, ch).permute(0, 1, 3, 2, 4, 5)
    return x.reshape(b, g_h * g_w, patch * patch * ch)


# ---------------------------------------------------------------------------
# blocks


class FFN(nn.Module):
    def __init__(self, dim, hidden):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x)))


class EncoderBlock(nn.Module):
    def __init__(self, dim, heads, hidden):
        super().__init__()
        self.attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.norm1 = nn.LayerNorm(dim)
        self.ffn = FFN(dim, hidden)
        self.norm2 = nn.LayerNorm(dim)

    def forward(self, x, pos):
        q = x + pos
        x = self.norm1(x + self.attn(q, q, x, need_weights=False)[0])
        return self.norm2(x + self.ffn(x))


class FusionBlock(nn.Module):
    """Image self-attention plus bidirectional image/prompt cross-attention."""

    def __init__(self, dim, heads, hidden):
        super().__init__()
        self.img_self = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.img_from_prompt = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.prompt_from_img = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.norms = nn.ModuleList([nn.LayerNorm(dim) for _ in range(5)])
        self.img_ffn = FFN(dim, hidden)
        self.prompt_ffn = FFN(dim, hidden)
        # per-channel gate on the image->prompt update; zero start keeps prompt identity
        self.prompt_gate = nn.Parameter(torch.zeros(dim))

    def forward(self, img, pos, prm):
        n = self.norms
        q = img + pos
        img = n[0](img + self.img_self(q, q, img, need_weights=False)[0])
        img_q = img + pos
        prm = n[1](prm + self.prompt_gate * self.prompt_from_img(prm, img_q, img, need_weights=False)[0])
        img = n[2](img + self.img_from_prompt(img_q, prm, prm, need_weights=False)[0])
        img = n[3](img + self.img_ffn(img))
        prm = n[4](prm + self.prompt_ffn(prm))
        return img, prm


class DecoderBlock(nn.Module):
    def __init__(self, dim, heads, hidden):
        super().__init__()
        self.self_attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.img_attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.prompt_attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.norms = nn.ModuleList([nn.LayerNorm(dim) for _ in range(4)])
        self.ffn = FFN(dim, hidden)

    def forward(self, q, qpos, img, img_pos, prm):
        n = self.norms
        h = q + qpos
        q = n[0](q + self.self_attn(h, h, q, need_weights=False)[0])
        q = n[1](q + self.img_attn(q + qpos, img + img_pos, img, need_weights=False)[0])
        q = n[2](q + self.prompt_attn(q + qpos, prm, prm, need_weights=False)[0])
        return n[3](q + self.ffn(q))


class BoxHead(nn.Module):
    def __init__(self, dim):
        super().__init__()
        self.fc1 = nn.Linear(dim, dim)
        self.fc2 = nn.Linear(dim, dim)
        self.out = nn.Linear(dim, 4)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    def forward(self, x):
        return self.out(F.relu(self.fc2(F.relu(self.fc1(x)))))


# ---------------------------------------------------------------------------
# functional pieces


def classify(query_states: torch.Tensor, prompts: torch.Tensor, temperature: float,
             bias: torch.Tensor | float = 0.0) -> torch.Tensor:
    """Cosine similarity between queries (..., N_q, C) and prompts (..., K, C) over temperature."""
    q = F.normalize(query_states, dim=-1)
    p = F.normalize(prompts, dim=-1)
    return q @ p.transpose(-1, -2) / temperature + bias


def select_queries(scores: torch.Tensor, num_queries: int) -> torch.Tensor:
    """Indices of the ``num_queries`` highest token scores; ties go to the lower index.

    ``scores`` is (..., N_I); returns (..., num_queries) int64.
    """
    if num_queries > scores.shape[-1]:
        raise ValueError(f"cannot select {num_queries} queries from {scores.shape[-1]} tokens")
    order = torch.sort(scores.detach(), dim=-1, descending=True, stable=True).indices
    return order[..., :num_queries]


def token_objectness(img: torch.Tensor, prm: torch.Tensor) -> torch.Tensor:
    """Max over prompts of scaled token/prompt dot products: (B,N_I,C),(B,K,C) -> (B,N_I)."""
    sim = img @ prm.transpose(-1, -2) / math.sqrt(img.shape[-1])
    return sim.max(dim=-1).values


def mean_pool_prompts(class_ids: Sequence[int], groups: Sequence[torch.Tensor]) -> PromptSet:
    """Average each class's prompt embeddings and re-normalize to unit length."""
    emb = torch.stack([F.normalize(g.mean(dim=0), dim=-1) for g in groups])
    return PromptSet(list(class_ids), emb)


def draw_prompt_indices(pool_sizes: Mapping[int, int], classes: Sequence[int], m: int,
                        rng: np.random.Generator) -> dict[int, list[int]]:
    """``m`` pool indices per class; without replacement unless the pool is smaller than ``m``."""
    out = {}
    for c in classes:
        n = pool_sizes.get(c, 0)
        if n <= 0:
            raise KeyError(f"class {c} has no prompts in the pool")
        out[c] = [int(i) for i in rng.choice(n, size=m, replace=n < m)]
    return out


def sample_prompts(prompt_pool: Mapping[int, torch.Tensor], classes_present: Sequence[int],
                   m: int, rng: np.random.Generator) -> PromptSet:
    """Draw ``m`` encoded prompts per class from ``prompt_pool`` and mean-pool them."""
    picks = draw_prompt_indices({c: len(v) for c, v in prompt_pool.items()}, classes_present, m, rng)
    return mean_pool_prompts(list(classes_present),
                             [prompt_pool[c][picks[c]] for c in classes_present])


# ---------------------------------------------------------------------------
# the network


class PromptDetector(nn.Module):
    def __init__(self, cfg: ModelConfig | None = None):
        super().__init__()
        self.cfg = cfg = (cfg or ModelConfig()).validate()
        c, h, hid = cfg.dim, cfg.heads, cfg.ffn_dim
        patch_dim = cfg.patch * cfg.patch * 3

        self.patch_embed = nn.Sequential(nn.Linear(patch_dim, c), nn.GELU(), nn.Linear(c, c))
        self.encoder = nn.ModuleList([EncoderBlock(c, h, hid) for _ in range(cfg.enc_layers)])
        centers = token_centers(cfg.grid).float()
        self.register_buffer("centers", centers, persistent=False)
        pos = torch.cat([sine_embed(centers[:, 0], c // 2), sine_embed(centers[:, 1], c // 2)], -1)
        self.register_buffer("pos", pos, persistent=False)

        # visual prompt encoder
        self.prompt_box_proj = nn.Linear(4 * c, c)
        self.visual_query = nn.Parameter(torch.randn(1, c) * 0.02)
        self.prompt_cross = nn.MultiheadAttention(c, h, batch_first=True)
        self.prompt_norm1 = nn.LayerNorm(c)
        self.prompt_self = nn.MultiheadAttention(c, h, batch_first=True)
        self.prompt_norm2 = nn.LayerNorm(c)
        self.prompt_ffn = FFN(c, hid)
        self.prompt_norm3 = nn.LayerNorm(c)
        self.prompt_align = nn.Linear(c, c)

        self.fusion = nn.ModuleList([FusionBlock(c, h, hid) for _ in range(cfg.fusion_layers)])

        self.init_size_logit = nn.Parameter(inverse_sigmoid(torch.full((2,), cfg.init_box_size)))
        self.content_queries = nn.Parameter(torch.randn(cfg.num_queries, c) * 0.02)
        self.query_pos_head = nn.Sequential(nn.Linear(2 * c, c), nn.ReLU(), nn.Linear(c, c))
        self.decoder = nn.ModuleList([DecoderBlock(c, h, hid) for _ in range(cfg.dec_layers)])
        self.box_heads = nn.ModuleList([BoxHead(c) for _ in range(cfg.dec_layers)])
        self.cls_bias = nn.Parameter(torch.tensor(-math.log((1 - cfg.prior_prob) / cfg.prior_prob)))
        self.class_anchors = nn.Parameter(torch.randn(cfg.num_classes, c) * 0.02)
        self.detach_refs = True

    # -- stages -------------------------------------------------------------

    def encode_image(self, pixels: torch.Tensor) -> torch.Tensor:
        """(B, H, W, 3) in [0, 1] -> (B, N_I, C) tokens."""
        cfg = self.cfg
        if pixels.ndim != 4 or tuple(pixels.shape[1:]) != (cfg.image_size, cfg.image_size, 3):
            raise ValueError(f"expected (B, {cfg.image_size}, {cfg.image_size}, 3) pixels, "
                             f"got {tuple(pixels.shape)}")
        x = self.patch_embed(patchify(pixels.to(self.pos.dtype), cfg.patch))
        for blk in self.encoder:
            x = blk(x, self.pos)
        return x

    def inside_mask(self, boxes: torch.Tensor) -> torch.Tensor:
        """(N, N_I) bool, True where the token center lies inside the box."""
        x0 = boxes[:, 0:1] - boxes[:, 2:3] / 2
        x1 = boxes[:, 0:1] + boxes[:, 2:3] / 2
        y0 = boxes[:, 1:2] - boxes[:, 3:4] / 2
        y1 = boxes[:, 1:2] + boxes[:, 3:4] / 2
        cx = self.centers[None, :, 0].to(boxes.dtype)
        cy = self.centers[None, :, 1].to(boxes.dtype)
        return (cx >= x0) & (cx <= x1) & (cy >= y0) & (cy <= y1)

    def pixel_box_mask(self, boxes: torch.Tensor) -> torch.Tensor:
        """(N, H, W, 1) float mask of pixels whose centers fall inside each box."""
        s = self.cfg.image_size
        c = (torch.arange(s, dtype=boxes.dtype, device=boxes.device) + 0.5) / s
        x0 = (boxes[:, 0] - boxes[:, 2] / 2)[:, None]
        x1 = (boxes[:, 0] + boxes[:, 2] / 2)[:, None]
        y0 = (boxes[:, 1] - boxes[:, 3] / 2)[:, None]
        y1 = (boxes[:, 1] + boxes[:, 3] / 2)[:, None]
        mx = (c[None] >= x0) & (c[None] <= x1)
        my = (c[None] >= y0) & (c[None] <= y1)
        return (my[:, :, None] & mx[:, None, :]).to(self.pos.dtype)[..., None]

    def encode_prompts(self, ref_pixels: torch.Tensor, ref_index: torch.Tensor | Sequence[int],
                       boxes: torch.Tensor) -> torch.Tensor:
        """Encode N prompt boxes, box k lying on reference image ``ref_index[k]``.

        Pixels outside each box are zeroed before the shared image encoder and
        the prompt's cross-attention only sees tokens centered inside the box,
        so an embedding depends only on the content of its own box.
        Returns (N, C) raw prompt embeddings.
        """
        boxes = torch.as_tensor(boxes, dtype=self.pos.dtype)
        ref_index = torch.as_tensor(ref_index, dtype=torch.long)
        inside = self.inside_mask(boxes)
        if not bool(inside.any(dim=1).all()):
            raise PromptBelowResolution("prompt box below resolution: no token center inside")
        masked = ref_pixels.to(self.pos.dtype)[ref_index] * self.pixel_box_mask(boxes)
        tokens = self.encode_image(masked)
        c = self.cfg.dim
        qpos = self.prompt_box_proj(box_sine_embed(boxes, c))
        q = (self.visual_query + qpos)[:, None, :]
        att = self.prompt_cross(q, tokens + self.pos, tokens, key_padding_mask=~inside,
                                need_weights=False)[0]
        x = self.prompt_norm1(q + att)[:, 0, :][None]   # (1, N, C)
        # self-attention runs over the boxes drawn on the same reference scene
        same_scene = ref_index[:, None] == ref_index[None, :]
        x = self.prompt_norm2(x + self.prompt_self(x, x, x, attn_mask=~same_scene, need_weights=False)[0])
        x = self.prompt_norm3(x + self.prompt_ffn(x))[0]
        return self.prompt_align(x)

    def fuse(self, img: torch.Tensor, prompts: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """img (B, N_I, C), prompts (K, C) or (B, K, C) -> refined (img, prompts)."""
        if prompts.ndim == 2:
            prompts = prompts[None].expand(img.shape[0], -1, -1)
        # unit-norm prompts would be ~1/sqrt(C) per channel next to layer-normed
        # tokens; rescale to unit RMS so cross-attention cannot wash them out
        prompts = prompts.to(img.dtype)
        if len(self.fusion):
            prompts = prompts * math.sqrt(self.cfg.dim)
        for blk in self.fusion:
            img, prompts = blk(img, self.pos, prompts)
        return img, prompts

    def proposals(self, indices: torch.Tensor) -> torch.Tensor:
        centers = self.centers.to(self.init_size_logit.dtype)[indices]
        size = torch.sigmoid(self.init_size_logit).expand(*indices.shape, 2)
        return torch.cat([centers, size], dim=-1)

    def decode(self, selection: Selection, img: torch.Tensor, prm: torch.Tensor):
        cfg = self.cfg
        b = img.shape[0]
        q = self.content_queries[None].expand(b, -1, -1)
        ref = selection.proposals
        all_logits, all_boxes = [], []
        for blk, head in zip(self.decoder, self.box_heads):
            qpos = self.query_pos_head(box_sine_embed(ref, cfg.dim // 2))
            q = blk(q, qpos, img, self.pos, prm)
            new = torch.sigmoid(inverse_sigmoid(ref) + head(q))
            all_boxes.append(new)
            ref = new.detach() if self.detach_refs else new
            all_logits.append(classify(q, prm, cfg.cls_temperature, self.cls_bias))
        return all_logits, all_boxes

    def token_scores(self, pixels: torch.Tensor, prompts: PromptSet):
        img = self.encode_image(pixels)
        img, prm = self.fuse(img, prompts.embeddings)
        return token_objectness(img, prm), img, prm

    def forward(self, pixels: torch.Tensor, prompts: PromptSet) -> QueryOutput:
        scores, img, prm = self.token_scores(pixels, prompts)
        idx = select_queries(scores, self.cfg.num_queries)
        sel = Selection(idx, torch.gather(scores, 1, idx), self.proposals(idx))
        logits, boxes = self.decode(sel, img, prm)
        return QueryOutput(logits, boxes, sel, scores, prompts.embeddings, {"img": img, "prm": prm})


def config_dict(cfg: ModelConfig) -> dict:
    return asdict(cfg)


def encode_pool_prompts(model: PromptDetector, pool, classes: Sequence[int], m: int,
                        rng: np.random.Generator | None = None,
                        picks: Mapping[int, Sequence[int]] | None = None):
    """Draw (or reuse ``picks``) ``m`` pool entries per class, encode and mean-pool them.

    ``pool`` exposes ``scenes`` (with ``.pixels``) and ``entries`` mapping class
    to ``(scene index, Box)`` pairs. Returns ``(PromptSet, picks)``.
    """
    if picks is None:
        picks = draw_prompt_indices({c: len(v) for c, v in pool.entries.items()}, classes, m, rng)
    scene_ids, boxes, owner = [], [], []
    for c in classes:
        for k in picks[c]:
            si, box = pool.entries[c][k]
            scene_ids.append(si)
            boxes.append(box.as_tuple())
            owner.append(c)
    uniq = sorted(set(scene_ids))
    where = {s: i for i, s in enumerate(uniq)}
    ref_px = torch.from_numpy(np.stack([pool.scenes[s].pixels for s in uniq]))
    emb = model.encode_prompts(ref_px, [where[s] for s in scene_ids],
                               torch.tensor(boxes, dtype=model.pos.dtype))
    groups, start = [], 0
    for c in classes:
        n = len(picks[c])
        groups.append(emb[start:start + n])
        start += n
    return mean_pool_prompts(list(classes), groups), {c: list(picks[c]) for c in classes}
