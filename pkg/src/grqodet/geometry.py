"""Box primitives: center-format boxes, corner conversion, IoU and GIoU.

Scalar functions operate on :class:`Box` values; the ``*_t`` variants are the
batched torch equivalents used inside losses and matching.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import torch

MIN_SIDE = 1e-6


class CornerBox(NamedTuple):
    x0: float
    y0: float
    x1: float
    y1: float


@dataclass(frozen=True)
class Box:
    """Normalized center-format rectangle ``(cx, cy, w, h)``."""

    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        if not (0.0 <= self.cx <= 1.0 and 0.0 <= self.cy <= 1.0):
            raise ValueError(f"box center outside unit square: {self}")
        if not (MIN_SIDE < self.w <= 1.0 and MIN_SIDE < self.h <= 1.0):
            raise ValueError(f"degenerate or oversized box: {self}")

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.cx, self.cy, self.w, self.h)

    @property
    def area(self) -> float:
        return self.w * self.h


def to_corners(box: Box) -> CornerBox:
    return CornerBox(box.cx - box.w / 2, box.cy - box.h / 2,
                     box.cx + box.w / 2, box.cy + box.h / 2)


def from_corners(c: CornerBox | tuple) -> Box:
    x0, y0, x1, y1 = c
    return Box((x0 + x1) / 2, (y0 + y1) / 2, x1 - x0, y1 - y0)


def _overlap(a: CornerBox, b: CornerBox) -> float:
    iw = min(a.x1, b.x1) - max(a.x0, b.x0)
    ih = min(a.y1, b.y1) - max(a.y0, b.y0)
    if iw <= 0 or ih <= 0:
        return 0.0
    return iw * ih


def _corner_area(c: CornerBox) -> float:
    return (c.x1 - c.x0) * (c.y1 - c.y0)


def iou(a: Box, b: Box) -> float:
    ca, cb = to_corners(a), to_corners(b)
    inter = _overlap(ca, cb)
    return inter / (_corner_area(ca) + _corner_area(cb) - inter)


def giou(a: Box, b: Box) -> float:
    ca, cb = to_corners(a), to_corners(b)
    inter = _overlap(ca, cb)
    union = _corner_area(ca) + _corner_area(cb) - inter
    hull = (max(ca.x1, cb.x1) - min(ca.x0, cb.x0)) * (max(ca.y1, cb.y1) - min(ca.y0, cb.y0))
    return inter / union - (hull - union) / hull


# ---------------------------------------------------------------------------
# batched torch versions; boxes are (..., 4) tensors in (cx, cy, w, h)


def cxcywh_to_xyxy(boxes: torch.Tensor) -> torch.Tensor:
    cx, cy, w, h = boxes.unbind(-1)
    return torch.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], dim=-1)


def xyxy_to_cxcywh(boxes: torch.Tensor) -> torch.Tensor:
    x0, y0, x1, y1 = boxes.unbind(-1)
    return torch.stack([(x0 + x1) / 2, (y0 + y1) / 2, x1 - x0, y1 - y0], dim=-1)


def pairwise_iou_t(a: torch.Tensor, b: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """IoU and union for every pair of rows of ``a`` (N,4) and ``b`` (M,4)."""
    a, b = cxcywh_to_xyxy(a), cxcywh_to_xyxy(b)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    lt = torch.max(a[:, None, :2], b[None, :, :2])
    rb = torch.min(a[:, None, 2:], b[None, :, 2:])
    wh = (rb - lt).clamp(min=0)
    inter = wh[..., 0] * wh[..., 1]
    union = area_a[:, None] + area_b[None, :] - inter
    return inter / union, union


def pairwise_giou_t(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    iou_, union = pairwise_iou_t(a, b)
    a, b = cxcywh_to_xyxy(a), cxcywh_to_xyxy(b)
    lt = torch.min(a[:, None, :2], b[None, :, :2])
    rb = torch.max(a[:, None, 2:], b[None, :, 2:])
    wh = (rb - lt).clamp(min=0)
    hull = wh[..., 0] * wh[..., 1]
    return iou_ - (hull - union) / hull


def elementwise_giou_t(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """GIoU of matched rows, ``a`` and ``b`` both (N,4)."""
    a, b = cxcywh_to_xyxy(a), cxcywh_to_xyxy(b)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    wh = (torch.min(a[:, 2:], b[:, 2:]) - torch.max(a[:, :2], b[:, :2])).clamp(min=0)
    inter = wh[:, 0] * wh[:, 1]
    union = area_a + area_b - inter
    hwh = torch.max(a[:, 2:], b[:, 2:]) - torch.min(a[:, :2], b[:, :2])
    hull = hwh[:, 0] * hwh[:, 1]
    return inter / union - (hull - union) / hull
