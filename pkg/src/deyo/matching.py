"""One-to-one assignment between predictions and ground truth."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from scipy.optimize import linear_sum_assignment

from .geometry import box_cxcywh_to_xyxy, generalized_box_iou

FOCAL_ALPHA = 0.25
FOCAL_GAMMA = 2.0


@dataclass(frozen=True)
class Assignment:
    """Matched ``(pred_index, gt_index)`` pairs, sorted by prediction index."""

    pred_idx: np.ndarray
    gt_idx: np.ndarray

    @property
    def pairs(self) -> list[tuple[int, int]]:
        return [(int(i), int(j)) for i, j in zip(self.pred_idx, self.gt_idx)]

    def total(self, cost) -> float:
        cost = np.asarray(cost, dtype=np.float64)
        # correctly rounded, so equal assignments give equal totals regardless of order
        return math.fsum(cost[self.pred_idx, self.gt_idx].tolist())

    def __len__(self) -> int:
        return len(self.pred_idx)


def hungarian(cost) -> Assignment:
    """Minimum-cost maximal one-to-one assignment of a (possibly rectangular) matrix.

    An empty matrix gives an empty assignment. The solver is deterministic for a
    given matrix; exact ties resolve toward low prediction indices.
    """
    if isinstance(cost, torch.Tensor):
        cost = cost.detach().cpu().double().numpy()
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ValueError(f"cost matrix must be 2-D, got shape {cost.shape}")
    if cost.size == 0:
        empty = np.zeros(0, dtype=np.int64)
        return Assignment(empty, empty)
    if not np.isfinite(cost).all():
        raise ValueError("cost matrix contains NaN or Inf")
    rows, cols = linear_sum_assignment(cost)
    order = np.argsort(rows, kind="stable")
    return Assignment(rows[order].astype(np.int64), cols[order].astype(np.int64))


@dataclass(frozen=True)
class MatchWeights:
    cls: float = 2.0
    l1: float = 5.0
    giou: float = 2.0


def focal_class_cost(pred_logits: torch.Tensor, gt_labels: torch.Tensor,
                     alpha: float = FOCAL_ALPHA, gamma: float = FOCAL_GAMMA) -> torch.Tensor:
    """Focal-style classification cost of each gt class under each prediction, ``(K, M)``."""
    prob = pred_logits.sigmoid()
    neg = (1 - alpha) * prob.pow(gamma) * -(1 - prob + 1e-8).log()
    pos = alpha * (1 - prob).pow(gamma) * -(prob + 1e-8).log()
    return pos[:, gt_labels] - neg[:, gt_labels]


@torch.no_grad()
def match_cost(pred_logits: torch.Tensor, pred_boxes: torch.Tensor,
               gt_labels: torch.Tensor, gt_boxes: torch.Tensor,
               weights: MatchWeights = MatchWeights()) -> torch.Tensor:
    """Matching cost ``(K, M)`` between predictions and ground truth.

    Boxes are normalized center-size. ``cost = w_cls * focal + w_l1 * L1 + w_giou * (1 - GIoU)``.
    """
    if pred_logits.shape[0] != pred_boxes.shape[0]:
        raise ValueError(
            f"{pred_logits.shape[0]} logit rows but {pred_boxes.shape[0]} predicted boxes")
    k, m = pred_boxes.shape[0], gt_boxes.shape[0]
    if k == 0 or m == 0:
        return pred_boxes.new_zeros((k, m))
    gt_labels = gt_labels.long()
    cost_class = focal_class_cost(pred_logits, gt_labels)
    cost_bbox = torch.cdist(pred_boxes, gt_boxes.to(pred_boxes.dtype), p=1)
    cost_giou = 1 - generalized_box_iou(box_cxcywh_to_xyxy(pred_boxes),
                                        box_cxcywh_to_xyxy(gt_boxes.to(pred_boxes.dtype)))
    return weights.cls * cost_class + weights.l1 * cost_bbox + weights.giou * cost_giou
