"""Contrastive denoising (CDN) queries and the attention mask that isolates them.

Query layout along the sequence axis is ``[denoising | matching]``. The
denoising part holds ``G`` groups of ``2 * M`` queries: ``M`` positives
followed by ``M`` negatives, where ``M`` is the largest gt count in the batch.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .geometry import box_cxcywh_to_xyxy, box_xyxy_to_cxcywh

MIN_SIDE = 1e-4


@dataclass
class DenoiseBatch:
    boxes: torch.Tensor         # (B, K_dn, 4) noised, normalized cxcywh
    labels: torch.Tensor        # (B, K_dn) noised class ids
    positive: torch.Tensor      # (K_dn,) bool, same layout for every image
    target_index: torch.Tensor  # (B, K_dn) gt index for positives, -1 otherwise
    valid: torch.Tensor         # (B, K_dn) False for padding slots
    num_groups: int
    group_size: int             # M, gts per group half

    @property
    def num_queries(self) -> int:
        return self.boxes.shape[1]


def num_groups_for(max_gts: int, groups: int, max_queries: int) -> int:
    """Groups used for a batch whose largest image has ``max_gts`` objects."""
    if max_gts == 0:
        return 0
    return max(1, min(groups, max_queries // (2 * max_gts)))


def noise_boxes(boxes: torch.Tensor, magnitude: torch.Tensor, rng: np.random.Generator) -> torch.Tensor:
    """Shift each corner by ``+-magnitude * half-extent`` with random signs; clip to the image."""
    xyxy = box_cxcywh_to_xyxy(boxes)
    half = torch.cat([boxes[:, 2:], boxes[:, 2:]], -1) / 2
    signs = torch.from_numpy(rng.integers(0, 2, size=tuple(boxes.shape)) * 2.0 - 1.0).to(boxes)
    xyxy = xyxy + signs * magnitude.to(boxes) * half
    xyxy = xyxy.clamp(0.0, 1.0)
    x1 = torch.minimum(xyxy[:, 0], xyxy[:, 2]).clamp(max=1 - MIN_SIDE)
    y1 = torch.minimum(xyxy[:, 1], xyxy[:, 3]).clamp(max=1 - MIN_SIDE)
    x2 = torch.maximum(torch.maximum(xyxy[:, 0], xyxy[:, 2]), x1 + MIN_SIDE)
    y2 = torch.maximum(torch.maximum(xyxy[:, 1], xyxy[:, 3]), y1 + MIN_SIDE)
    return box_xyxy_to_cxcywh(torch.stack([x1, y1, x2, y2], -1))


def build_cdn(targets, num_classes: int, rng: np.random.Generator, label_noise: float = 0.5,
              box_noise: tuple[float, float] = (0.4, 1.0), groups: int = 5,
              max_queries: int = 200) -> DenoiseBatch | None:
    """Noised positive/negative gt queries for a batch, or ``None`` if no image has gts.

    Positive corner noise has magnitude in ``[0, lambda1)``, negative in
    ``(lambda1, lambda2]`` (as a fraction of the half-extent). Positives keep
    their gt as the reconstruction target; negatives target background.
    """
    lam1, lam2 = box_noise
    counts = [len(t["labels"]) for t in targets]
    m = max(counts, default=0)
    if m == 0:
        return None
    g = num_groups_for(m, groups, max_queries)
    k_dn = 2 * m * g
    bsz = len(targets)
    dtype = targets[0]["boxes"].dtype if targets[0]["boxes"].is_floating_point() else torch.float32
    out_boxes = torch.zeros(bsz, k_dn, 4, dtype=dtype)
    out_boxes[..., :2] = 0.5
    out_boxes[..., 2:] = 0.01
    out_labels = torch.zeros(bsz, k_dn, dtype=torch.long)
    target_index = torch.full((bsz, k_dn), -1, dtype=torch.long)
    valid = torch.zeros(bsz, k_dn, dtype=torch.bool)
    positive = torch.zeros(k_dn, dtype=torch.bool)
    for gi in range(g):
        positive[2 * m * gi: 2 * m * gi + m] = True
    for b, tgt in enumerate(targets):
        n = counts[b]
        if n == 0:
            continue
        gt_boxes = tgt["boxes"].to(dtype)
        gt_labels = tgt["labels"].long()
        # (group, half, gt, coord); half 0 = positive, 1 = negative
        pos_mag = rng.uniform(0.0, lam1, size=(g, 1, n, 4))
        neg_mag = lam2 - rng.uniform(0.0, lam2 - lam1, size=(g, 1, n, 4))  # (lam1, lam2]
        mag = torch.from_numpy(np.concatenate([pos_mag, neg_mag], 1))
        noised = noise_boxes(gt_boxes.repeat(2 * g, 1), mag.reshape(-1, 4), rng).view(g, 2, n, 4)
        if lam1 == 0:
            noised[:, 0] = gt_boxes
        flip = torch.from_numpy(rng.random((g, 2, n)) < label_noise)
        random_labels = torch.from_numpy(rng.integers(0, num_classes, size=(g, 2, n)))
        labels = torch.where(flip, random_labels, gt_labels.expand(g, 2, n))
        slots = (torch.arange(g)[:, None, None] * 2 * m + torch.arange(2)[None, :, None] * m
                 + torch.arange(n)[None, None, :])
        out_boxes[b, slots.reshape(-1)] = noised.reshape(-1, 4)
        out_labels[b, slots.reshape(-1)] = labels.reshape(-1)
        valid[b, slots.reshape(-1)] = True
        target_index[b, slots[:, 0].reshape(-1)] = torch.arange(n).repeat(g)
    return DenoiseBatch(out_boxes, out_labels, positive, target_index, valid, g, m)


def build_attention_mask(num_queries: int, group_size: int, num_groups: int) -> torch.Tensor:
    """Boolean self-attention mask, ``True`` = blocked.

    Matching queries and denoising queries cannot see each other in either
    direction, and denoising groups cannot see other groups.
    """
    k_dn = 2 * group_size * num_groups
    size = k_dn + num_queries
    mask = torch.zeros(size, size, dtype=torch.bool)
    if k_dn == 0:
        return mask
    mask[k_dn:, :k_dn] = True
    mask[:k_dn, k_dn:] = True
    span = 2 * group_size
    for i in range(num_groups):
        lo, hi = i * span, (i + 1) * span
        mask[lo:hi, :lo] = True
        mask[lo:hi, hi:k_dn] = True
    return mask
