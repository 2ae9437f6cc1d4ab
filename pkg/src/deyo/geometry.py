"""Box parameterizations, overlap measures and refinement primitives.

Boxes are normalized to the image size. Internally everything is kept in
center-size form ``(cx, cy, w, h)``; corner form ``(x1, y1, x2, y2)`` is used
only where overlaps are computed.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

INVERSE_SIGMOID_EPS = 1e-5


@dataclass(frozen=True)
class BoundingBox:
    cx: float
    cy: float
    w: float
    h: float

    @classmethod
    def from_xyxy(cls, x1: float, y1: float, x2: float, y2: float) -> "BoundingBox":
        if x2 - x1 <= 0 or y2 - y1 <= 0:
            raise ValueError(f"non-positive box extent: ({x1}, {y1}, {x2}, {y2})")
        return cls((x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1)

    def to_xyxy(self) -> tuple[float, float, float, float]:
        return (self.cx - self.w / 2, self.cy - self.h / 2,
                self.cx + self.w / 2, self.cy + self.h / 2)

    def to_cxcywh(self) -> tuple[float, float, float, float]:
        return (self.cx, self.cy, self.w, self.h)

    @property
    def area(self) -> float:
        return max(self.w, 0.0) * max(self.h, 0.0)

    def is_valid(self) -> bool:
        return (0 <= self.cx <= 1 and 0 <= self.cy <= 1
                and 0 < self.w <= 1 and 0 < self.h <= 1)


def _stack(parts, like):
    if isinstance(like, torch.Tensor):
        return torch.stack(parts, dim=-1)
    return np.stack(parts, axis=-1)


def box_cxcywh_to_xyxy(x):
    """Convert ``(..., 4)`` center-size boxes to corner form (tensor or array)."""
    cx, cy, w, h = x[..., 0], x[..., 1], x[..., 2], x[..., 3]
    return _stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], x)


def box_xyxy_to_cxcywh(x):
    x0, y0, x1, y1 = x[..., 0], x[..., 1], x[..., 2], x[..., 3]
    return _stack([(x0 + x1) / 2, (y0 + y1) / 2, x1 - x0, y1 - y0], x)


def convert(box, target: str):
    """Convert a single box to ``target`` parameterization.

    ``box`` is either a :class:`BoundingBox` or a 4-tuple in the *other*
    parameterization: ``convert((x1, y1, x2, y2), "cxcywh")`` and
    ``convert(BoundingBox(...), "xyxy")``. Corner input with non-positive
    extent is rejected.
    """
    if target == "xyxy":
        if not isinstance(box, BoundingBox):
            box = BoundingBox(*map(float, box))
        if box.w <= 0 or box.h <= 0:
            raise ValueError(f"non-positive box extent: {box}")
        return box.to_xyxy()
    if target == "cxcywh":
        if isinstance(box, BoundingBox):
            return box.to_cxcywh()
        return BoundingBox.from_xyxy(*map(float, box)).to_cxcywh()
    raise ValueError(f"unknown parameterization {target!r}")


def _as_xyxy(box) -> tuple[float, float, float, float]:
    if isinstance(box, BoundingBox):
        return box.to_xyxy()
    return tuple(float(v) for v in box)


def _overlap_terms(a, b):
    ax1, ay1, ax2, ay2 = _as_xyxy(a)
    bx1, by1, bx2, by2 = _as_xyxy(b)
    area_a = max(ax2 - ax1, 0.0) * max(ay2 - ay1, 0.0)
    area_b = max(bx2 - bx1, 0.0) * max(by2 - by1, 0.0)
    iw = max(min(ax2, bx2) - max(ax1, bx1), 0.0)
    ih = max(min(ay2, by2) - max(ay1, by1), 0.0)
    inter = iw * ih
    union = area_a + area_b - inter
    hull = (max(ax2, bx2) - min(ax1, bx1)) * (max(ay2, by2) - min(ay1, by1))
    return inter, union, hull


def iou(a, b) -> float:
    """IoU of two boxes (``BoundingBox`` or corner tuples). Degenerate boxes give 0."""
    inter, union, _ = _overlap_terms(a, b)
    if union <= 0:
        return 0.0
    return inter / union


def giou(a, b) -> float:
    inter, union, hull = _overlap_terms(a, b)
    value = inter / union if union > 0 else 0.0
    if hull > 0:
        value -= (hull - union) / hull
    return value


def _safe_div(num: torch.Tensor, den: torch.Tensor) -> torch.Tensor:
    # zero where den == 0, without NaN gradients through the masked branch
    positive = den > 0
    return torch.where(positive, num / torch.where(positive, den, torch.ones_like(den)),
                       torch.zeros_like(num))


def box_iou(boxes1: torch.Tensor, boxes2: torch.Tensor):
    """Pairwise IoU for corner-form boxes ``(N, 4)`` x ``(M, 4)``.

    Returns ``(iou, union)``, both ``(N, M)``.
    """
    area1 = (boxes1[:, 2] - boxes1[:, 0]).clamp(min=0) * (boxes1[:, 3] - boxes1[:, 1]).clamp(min=0)
    area2 = (boxes2[:, 2] - boxes2[:, 0]).clamp(min=0) * (boxes2[:, 3] - boxes2[:, 1]).clamp(min=0)

    lt = torch.max(boxes1[:, None, :2], boxes2[None, :, :2])
    rb = torch.min(boxes1[:, None, 2:], boxes2[None, :, 2:])
    wh = (rb - lt).clamp(min=0)
    inter = wh[..., 0] * wh[..., 1]

    union = area1[:, None] + area2[None, :] - inter
    return _safe_div(inter, union), union


def generalized_box_iou(boxes1: torch.Tensor, boxes2: torch.Tensor) -> torch.Tensor:
    """Pairwise GIoU for corner-form boxes, ``(N, M)``."""
    iou_, union = box_iou(boxes1, boxes2)

    lt = torch.min(boxes1[:, None, :2], boxes2[None, :, :2])
    rb = torch.max(boxes1[:, None, 2:], boxes2[None, :, 2:])
    wh = (rb - lt).clamp(min=0)
    hull = wh[..., 0] * wh[..., 1]

    return iou_ - _safe_div(hull - union, hull)


def elementwise_giou(boxes1: torch.Tensor, boxes2: torch.Tensor) -> torch.Tensor:
    """GIoU of aligned corner-form box pairs ``(N, 4)``, ``(N, 4)`` -> ``(N,)``."""
    area1 = (boxes1[:, 2] - boxes1[:, 0]).clamp(min=0) * (boxes1[:, 3] - boxes1[:, 1]).clamp(min=0)
    area2 = (boxes2[:, 2] - boxes2[:, 0]).clamp(min=0) * (boxes2[:, 3] - boxes2[:, 1]).clamp(min=0)
    lt = torch.max(boxes1[:, :2], boxes2[:, :2])
    rb = torch.min(boxes1[:, 2:], boxes2[:, 2:])
    wh = (rb - lt).clamp(min=0)
    inter = wh[:, 0] * wh[:, 1]
    union = area1 + area2 - inter
    lt = torch.min(boxes1[:, :2], boxes2[:, :2])
    rb = torch.max(boxes1[:, 2:], boxes2[:, 2:])
    wh = (rb - lt).clamp(min=0)
    hull = wh[:, 0] * wh[:, 1]
    return _safe_div(inter, union) - _safe_div(hull - union, hull)


def box_iou_numpy(boxes1: np.ndarray, boxes2: np.ndarray) -> np.ndarray:
    """Pairwise IoU for corner-form numpy boxes; used by evaluation."""
    boxes1 = np.asarray(boxes1, dtype=np.float64).reshape(-1, 4)
    boxes2 = np.asarray(boxes2, dtype=np.float64).reshape(-1, 4)
    area1 = np.clip(boxes1[:, 2] - boxes1[:, 0], 0, None) * np.clip(boxes1[:, 3] - boxes1[:, 1], 0, None)
    area2 = np.clip(boxes2[:, 2] - boxes2[:, 0], 0, None) * np.clip(boxes2[:, 3] - boxes2[:, 1], 0, None)
    lt = np.maximum(boxes1[:, None, :2], boxes2[None, :, :2])
    rb = np.minimum(boxes1[:, None, 2:], boxes2[None, :, 2:])
    wh = np.clip(rb - lt, 0, None)
    inter = wh[..., 0] * wh[..., 1]
    union = area1[:, None] + area2[None, :] - inter
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=union > 0)
    return out


def inverse_sigmoid(x, eps: float = INVERSE_SIGMOID_EPS):
    """Logit of ``x`` after clamping to ``[eps, 1 - eps]``."""
    if isinstance(x, torch.Tensor):
        x = x.clamp(min=eps, max=1 - eps)
        return torch.log(x / (1 - x))
    x = np.clip(np.asarray(x, dtype=np.float64), eps, 1 - eps)
    out = np.log(x / (1 - x))
    return float(out) if out.ndim == 0 else out
