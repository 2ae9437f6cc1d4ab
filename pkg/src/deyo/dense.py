"""One-to-many branch: conv backbone, FPN+PAN neck and a dense decoupled head.

This is the detector trained in the first phase. Its backbone and neck are
later frozen under the query branch, and its box head is inherited to propose
reference boxes.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .config import ModelConfig
from .evaluation import Detections, nms
from .geometry import box_cxcywh_to_xyxy, box_xyxy_to_cxcywh, elementwise_giou
from .losses import sigmoid_focal_loss

BOX_DELTA_CLAMP = 4.0


class ConvBNAct(nn.Module):
    def __init__(self, c_in: int, c_out: int, k: int = 3, s: int = 1):
        super().__init__()
        self.conv = nn.Conv2d(c_in, c_out, k, s, k // 2, bias=False)
        self.bn = nn.BatchNorm2d(c_out)
        self.act = nn.SiLU()

    def forward(self, x):
        return self.act(self.bn(self.conv(x)))


class Backbone(nn.Module):
    """Five stride-2 stages of conv-BN-SiLU; returns the stride 8/16/32 maps."""

    def __init__(self, channels: tuple[int, ...]):
        super().__init__()
        stages = []
        c_in = 3
        for i, c in enumerate(channels):
            layers = [ConvBNAct(c_in, c, 3, 2)]
            if i > 0:
                layers.append(ConvBNAct(c, c, 3, 1))
            stages.append(nn.Sequential(*layers))
            c_in = c
        self.stages = nn.ModuleList(stages)
        self.out_channels = tuple(channels[2:])

    def forward(self, x):
        outs = []
        for i, stage in enumerate(self.stages):
            x = stage(x)
            if i >= 2:
                outs.append(x)
        return outs


class Neck(nn.Module):
    """Top-down FPN followed by bottom-up PAN fusion."""

    def __init__(self, in_channels: tuple[int, int, int], channels: tuple[int, int, int]):
        super().__init__()
        c3, c4, c5 = in_channels
        n3, n4, n5 = channels
        self.reduce5 = ConvBNAct(c5, n5, 1)
        self.td4 = ConvBNAct(n5 + c4, n4, 3)
        self.td3 = ConvBNAct(n4 + c3, n3, 3)
        self.down3 = ConvBNAct(n3, n3, 3, 2)
        self.bu4 = ConvBNAct(n3 + n4, n4, 3)
        self.down4 = ConvBNAct(n4, n4, 3, 2)
        self.bu5 = ConvBNAct(n4 + n5, n5, 3)
        self.out_channels = tuple(channels)

    def forward(self, feats):
        c3, c4, c5 = feats
        x5 = self.reduce5(c5)
        t4 = self.td4(torch.cat([F.interpolate(x5, scale_factor=2.0, mode="nearest"), c4], 1))
        p3 = self.td3(torch.cat([F.interpolate(t4, scale_factor=2.0, mode="nearest"), c3], 1))
        p4 = self.bu4(torch.cat([self.down3(p3), t4], 1))
        p5 = self.bu5(torch.cat([self.down4(p4), x5], 1))
        return [p3, p4, p5]


@dataclass
class Anchors:
    """Anchor points over all levels in level-major, row-major order."""

    centers: torch.Tensor  # (L, 2) pixel centers
    strides: torch.Tensor  # (L,)
    levels: torch.Tensor   # (L,) level id
    level_shapes: list[tuple[int, int]]
    image_size: tuple[int, int]  # (H, W)

    def __len__(self):
        return self.centers.shape[0]

    @property
    def normalized_centers(self) -> torch.Tensor:
        h, w = self.image_size
        return self.centers / self.centers.new_tensor([w, h])


def make_anchors(level_shapes, strides, image_size, dtype=torch.float32) -> Anchors:
    if isinstance(image_size, int):
        image_size = (image_size, image_size)
    centers, strides_out, levels = [], [], []
    for lvl, ((h, w), s) in enumerate(zip(level_shapes, strides)):
        ys, xs = torch.meshgrid(torch.arange(h, dtype=dtype), torch.arange(w, dtype=dtype), indexing="ij")
        pts = torch.stack([(xs + 0.5) * s, (ys + 0.5) * s], -1).reshape(-1, 2)
        centers.append(pts)
        strides_out.append(torch.full((h * w,), float(s), dtype=dtype))
        levels.append(torch.full((h * w,), lvl, dtype=torch.long))
    return Anchors(torch.cat(centers), torch.cat(strides_out), torch.cat(levels),
                   [tuple(s) for s in level_shapes], tuple(image_size))


def decode_boxes(deltas: torch.Tensor, anchors: Anchors, prior_scale: float,
                 center_range: float) -> torch.Tensor:
    """Map ``(..., L, 4)`` regressions to normalized center-size boxes clipped to the image.

    center = anchor + center_range * stride * tanh(d_xy); side = prior_scale * stride * exp(d_wh)
    """
    centers = anchors.centers.to(deltas)
    stride = anchors.strides.to(deltas)[:, None]
    h, w = anchors.image_size
    scale = deltas.new_tensor([w, h])
    xy = centers + center_range * stride * torch.tanh(deltas[..., :2])
    wh = prior_scale * stride * torch.exp(deltas[..., 2:].clamp(max=BOX_DELTA_CLAMP))
    boxes = torch.cat([xy / scale, wh / scale], -1)
    return box_xyxy_to_cxcywh(box_cxcywh_to_xyxy(boxes).clamp(0.0, 1.0))


class DenseHead(nn.Module):
    """Decoupled per-level classification and box branches."""

    def __init__(self, in_channels: tuple[int, int, int], num_classes: int, cfg: ModelConfig,
                 prior_prob: float = 0.01):
        super().__init__()
        self.num_classes = num_classes
        self.strides = cfg.strides
        self.prior_scale = cfg.prior_scale
        self.center_range = cfg.center_range
        hidden = max(32, in_channels[0])
        self.cls_convs = nn.ModuleList(
            nn.Sequential(ConvBNAct(c, hidden, 3), nn.Conv2d(hidden, num_classes, 1)) for c in in_channels)
        self.box_convs = nn.ModuleList(
            nn.Sequential(ConvBNAct(c, hidden, 3), nn.Conv2d(hidden, 4, 1)) for c in in_channels)
        bias = -math.log((1 - prior_prob) / prior_prob)
        for seq in self.cls_convs:
            nn.init.constant_(seq[-1].bias, bias)

    def box_deltas(self, pyramid) -> torch.Tensor:
        return torch.cat([conv(p).flatten(2).transpose(1, 2)
                          for conv, p in zip(self.box_convs, pyramid)], 1)

    def class_logits(self, pyramid) -> torch.Tensor:
        return torch.cat([conv(p).flatten(2).transpose(1, 2)
                          for conv, p in zip(self.cls_convs, pyramid)], 1)

    def anchors_for(self, pyramid, image_size) -> Anchors:
        shapes = [tuple(p.shape[-2:]) for p in pyramid]
        return make_anchors(shapes, self.strides, image_size, dtype=pyramid[0].dtype)

    def decode(self, pyramid, image_size) -> torch.Tensor:
        """Candidate boxes ``(B, L, 4)`` at every anchor point."""
        return decode_boxes(self.box_deltas(pyramid), self.anchors_for(pyramid, image_size),
                            self.prior_scale, self.center_range)

    def forward(self, pyramid, image_size) -> "DenseOutput":
        anchors = self.anchors_for(pyramid, image_size)
        deltas = self.box_deltas(pyramid)
        return DenseOutput(self.class_logits(pyramid), deltas,
                           decode_boxes(deltas, anchors, self.prior_scale, self.center_range), anchors)


@dataclass
class DenseOutput:
    cls_logits: torch.Tensor  # (B, L, C)
    box_deltas: torch.Tensor  # (B, L, 4)
    boxes: torch.Tensor       # (B, L, 4) normalized cxcywh
    anchors: Anchors


class DenseDetector(nn.Module):
    """Backbone + neck + dense head; the phase-one detector."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.backbone = Backbone(cfg.stage_channels)
        self.neck = Neck(self.backbone.out_channels, cfg.neck_channels)
        self.dense_head = DenseHead(cfg.neck_channels, cfg.num_classes, cfg)

    def forward_pyramid(self, images: torch.Tensor):
        h, w = images.shape[-2:]
        if h % 32 or w % 32:
            raise ValueError(f"input size {h}x{w} is not divisible by 32")
        return self.neck(self.backbone(images))

    def forward(self, images: torch.Tensor) -> DenseOutput:
        return self.dense_head(self.forward_pyramid(images), tuple(images.shape[-2:]))


def level_for_size(max_side_px: float, strides, level_limit: float) -> int:
    for lvl, s in enumerate(strides[:-1]):
        if max_side_px <= level_limit * s:
            return lvl
    return len(strides) - 1


@dataclass
class DenseAssignment:
    gt_index: torch.Tensor  # (L,) -1 for background
    skipped: int = 0

    @property
    def positives(self) -> torch.Tensor:
        return self.gt_index >= 0


def assign_one_to_many(gt_boxes: torch.Tensor, anchors: Anchors, radius: float = 1.5,
                       level_limit: float = 4.0, strides=None) -> DenseAssignment:
    """Center-radius one-to-many assignment.

    A gt is positive at every anchor point of its size-matched level lying
    within ``radius`` cells (Chebyshev) of the cell that holds the gt center.
    Overlapping claims go to the gt with smaller area.
    """
    n_points = len(anchors)
    gt_index = torch.full((n_points,), -1, dtype=torch.long)
    if gt_boxes.numel() == 0:
        return DenseAssignment(gt_index)
    if strides is None:
        strides = sorted({int(s) for s in anchors.strides.tolist()})
    h, w = anchors.image_size
    scale = torch.tensor([w, h, w, h], dtype=torch.float64)
    boxes_px = gt_boxes.detach().double().cpu() * scale
    centers = anchors.centers.double()
    point_strides = anchors.strides.double()
    areas = boxes_px[:, 2] * boxes_px[:, 3]
    skipped = 0
    # larger boxes first so that smaller ones overwrite contested points
    order = sorted(range(len(boxes_px)), key=lambda i: (-float(areas[i]), -i))
    for i in order:
        cx, cy, bw, bh = boxes_px[i].tolist()
        if not (0 <= cx <= w and 0 <= cy <= h) or bw <= 0 or bh <= 0:
            skipped += 1
            continue
        lvl = level_for_size(max(bw, bh), strides, level_limit)
        on_level = anchors.levels == lvl
        # distances are measured from the center of the cell holding the gt center
        s = float(strides[lvl])
        sx = (min(math.floor(cx / s), math.ceil(w / s) - 1) + 0.5) * s
        sy = (min(math.floor(cy / s), math.ceil(h / s) - 1) + 0.5) * s
        reach = radius * point_strides + 1e-9
        near = ((centers[:, 0] - sx).abs() <= reach) & ((centers[:, 1] - sy).abs() <= reach)
        gt_index[on_level & near] = i
    # a gt whose points were all claimed by smaller ones takes its nearest point that
    # is not the last positive of another gt
    for i in sorted(order, key=lambda i: float(areas[i])):
        cx, cy, bw, bh = boxes_px[i].tolist()
        if not (0 <= cx <= w and 0 <= cy <= h) or bw <= 0 or bh <= 0 or (gt_index == i).any():
            continue
        lvl = level_for_size(max(bw, bh), strides, level_limit)
        candidates = torch.nonzero(anchors.levels == lvl).flatten()
        dist = torch.maximum((centers[candidates, 0] - cx).abs(), (centers[candidates, 1] - cy).abs())
        counts = torch.bincount(gt_index[gt_index >= 0], minlength=len(boxes_px))
        for j in candidates[torch.argsort(dist, stable=True)].tolist():
            owner = int(gt_index[j])
            if owner < 0 or counts[owner] > 1:
                gt_index[j] = i
                break
    return DenseAssignment(gt_index, skipped)


DENSE_LOSS_WEIGHTS = {"cls": 1.0, "l1": 2.5, "giou": 1.0}


def dense_loss(out: DenseOutput, assignments, targets, weights=None):
    """One-to-many loss: focal over all points, L1 + GIoU over positives.

    Returns ``(total, components)`` with unweighted components.
    """
    weights = weights or DENSE_LOSS_WEIGHTS
    logits = out.cls_logits
    cls_target = torch.zeros_like(logits)
    pred_pos, gt_pos = [], []
    for b, (asg, tgt) in enumerate(zip(assignments, targets)):
        pos = asg.gt_index.to(logits.device) >= 0
        if pos.any():
            idx = asg.gt_index.to(logits.device)[pos]
            labels = tgt["labels"].to(logits.device)[idx]
            cls_target[b, pos.nonzero(as_tuple=True)[0], labels] = 1.0
            pred_pos.append(out.boxes[b, pos])
            gt_pos.append(tgt["boxes"].to(out.boxes)[idx])
    num_pos = sum(len(p) for p in pred_pos)
    norm = max(num_pos, 1)
    loss_cls = sigmoid_focal_loss(logits, cls_target) / norm
    if num_pos:
        pred = torch.cat(pred_pos)
        gt = torch.cat(gt_pos)
        loss_l1 = (pred - gt).abs().sum() / norm
        loss_giou = (1 - elementwise_giou(box_cxcywh_to_xyxy(pred), box_cxcywh_to_xyxy(gt))).sum() / norm
    else:
        loss_l1 = logits.sum() * 0.0
        loss_giou = logits.sum() * 0.0
    components = {"cls": loss_cls, "l1": loss_l1, "giou": loss_giou}
    total = sum(weights[k] * v for k, v in components.items())
    return total, components


@torch.no_grad()
def dense_predictions(out: DenseOutput, max_det: int = 100, score_threshold: float = 0.001,
                      nms_iou: float | None = None) -> list[Detections]:
    """Top-scoring (point, class) pairs per image, optionally filtered by per-class NMS."""
    results = []
    num_classes = out.cls_logits.shape[-1]
    for b in range(out.cls_logits.shape[0]):
        scores = out.cls_logits[b].sigmoid().flatten()
        idx = (scores > score_threshold).nonzero(as_tuple=True)[0]
        order = torch.sort(scores[idx], descending=True, stable=True).indices
        # NMS needs a deeper candidate pool than the final detection budget
        idx = idx[order[: max_det * 10 if nms_iou is not None else max_det]]
        dets = Detections(out.boxes[b][idx // num_classes].double().cpu().numpy(),
                          scores[idx].double().cpu().numpy(), (idx % num_classes).cpu().numpy())
        if nms_iou is not None:
            dets = nms(dets, nms_iou)
            dets = dets.subset(np.arange(min(len(dets), max_det)))
        results.append(dets)
    return results
