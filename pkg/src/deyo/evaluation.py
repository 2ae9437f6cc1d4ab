"""COCO-style AP, log-average miss rate, greedy NMS and a duplicate-detection probe."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .geometry import BoundingBox, box_cxcywh_to_xyxy, box_iou_numpy

COCO_IOU_THRESHOLDS = np.round(np.arange(0.5, 0.951, 0.05), 2)
RECALL_POINTS = np.linspace(0.0, 1.0, 101)
MMR_FPPI_POINTS = np.logspace(-2.0, 0.0, 9)
MMR_FLOOR = 1e-4


@dataclass
class Detections:
    """Scored detections of one image; boxes are normalized center-size."""

    boxes: np.ndarray
    scores: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.boxes = np.asarray(self.boxes, dtype=np.float64).reshape(-1, 4)
        self.scores = np.asarray(self.scores, dtype=np.float64).reshape(-1)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)

    def __len__(self):
        return len(self.scores)

    def subset(self, idx) -> "Detections":
        return Detections(self.boxes[idx], self.scores[idx], self.labels[idx])

    def as_tuples(self) -> list[tuple[int, float, BoundingBox]]:
        return [(int(l), float(s), BoundingBox(*map(float, b)))
                for b, s, l in zip(self.boxes, self.scores, self.labels)]

    @classmethod
    def empty(cls) -> "Detections":
        return cls(np.zeros((0, 4)), np.zeros(0), np.zeros(0, dtype=np.int64))


@dataclass
class GroundTruth:
    boxes: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.boxes = np.asarray(self.boxes, dtype=np.float64).reshape(-1, 4)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)


@dataclass
class EvalReport:
    AP: float
    AP50: float
    AP75: float
    AR: float
    per_class_AP: dict[int, float] = field(default_factory=dict)
    mMR: float | None = None
    duplicate_rate: float | None = None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["per_class_AP"] = {str(k): v for k, v in self.per_class_AP.items()}
        return d

    def table(self) -> str:
        rows = [("AP", self.AP), ("AP50", self.AP50), ("AP75", self.AP75), ("AR", self.AR)]
        if self.mMR is not None:
            rows.append(("mMR", self.mMR))
        if self.duplicate_rate is not None:
            rows.append(("dup", self.duplicate_rate))
        rows += [(f"AP[c{k}]", v) for k, v in sorted(self.per_class_AP.items())]
        return "\n".join(f"{name:<10}{100 * value:7.2f}" for name, value in rows)


def nms_from_iou(iou: np.ndarray, scores: np.ndarray, iou_threshold: float) -> np.ndarray:
    """Greedy suppression given a precomputed IoU matrix; returns kept indices by descending score."""
    order = np.argsort(-np.asarray(scores), kind="stable")
    suppressed = np.zeros(len(order), dtype=bool)
    keep = []
    for pos, i in enumerate(order):
        if suppressed[i]:
            continue
        keep.append(i)
        rest = order[pos + 1:]
        suppressed[rest[iou[i, rest] >= iou_threshold]] = True
    return np.asarray(keep, dtype=np.int64)


def nms(dets: Detections, iou_threshold: float) -> Detections:
    """Per-class greedy NMS; a box is dropped when IoU with a kept higher-scoring box is >= threshold."""
    if len(dets) == 0:
        return dets
    xyxy = box_cxcywh_to_xyxy(dets.boxes)
    keep = []
    for c in np.unique(dets.labels):
        idx = np.nonzero(dets.labels == c)[0]
        iou = box_iou_numpy(xyxy[idx], xyxy[idx])
        keep.extend(idx[nms_from_iou(iou, dets.scores[idx], iou_threshold)])
    keep = np.asarray(keep, dtype=np.int64)
    keep = keep[np.argsort(-dets.scores[keep], kind="stable")]
    return dets.subset(keep)


def _check_images(dets: dict, gts: dict):
    missing = [k for k in dets if k not in gts]
    if missing:
        raise ValueError(f"detections for images absent from ground truth: {missing[:5]}")


def _match_image(det_boxes, gt_boxes, thr) -> np.ndarray:
    """Greedy TP flags for detections already sorted by descending score."""
    tp = np.zeros(len(det_boxes), dtype=bool)
    if len(det_boxes) == 0 or len(gt_boxes) == 0:
        return tp
    iou = box_iou_numpy(box_cxcywh_to_xyxy(det_boxes), box_cxcywh_to_xyxy(gt_boxes))
    taken = np.zeros(len(gt_boxes), dtype=bool)
    for d in range(len(det_boxes)):
        cand = np.where(taken, -1.0, iou[d])
        j = int(np.argmax(cand))
        if cand[j] >= thr:
            taken[j] = True
            tp[d] = True
    return tp


def _pr_flags(dets: dict, gts: dict, cls: int | None, thr: float):
    """Global score-sorted TP flags and gt count for one class (``None`` = class-agnostic)."""
    scores, flags = [], []
    n_gt = 0
    for img, gt in gts.items():
        gmask = np.ones(len(gt.labels), bool) if cls is None else gt.labels == cls
        n_gt += int(gmask.sum())
        d = dets.get(img)
        if d is None or len(d) == 0:
            continue
        dmask = np.ones(len(d), bool) if cls is None else d.labels == cls
        idx = np.nonzero(dmask)[0]
        idx = idx[np.argsort(-d.scores[idx], kind="stable")]
        flags.append(_match_image(d.boxes[idx], gt.boxes[gmask], thr))
        scores.append(d.scores[idx])
    if not scores:
        return np.zeros(0), np.zeros(0, bool), n_gt
    scores = np.concatenate(scores)
    flags = np.concatenate(flags)
    order = np.argsort(-scores, kind="stable")
    return scores[order], flags[order], n_gt


def interpolated_ap(tp_flags: np.ndarray, n_gt: int) -> tuple[float, float]:
    """101-point interpolated AP and final recall from score-ordered TP flags."""
    if n_gt == 0:
        return float("nan"), float("nan")
    if len(tp_flags) == 0:
        return 0.0, 0.0
    tp = np.cumsum(tp_flags)
    fp = np.cumsum(~tp_flags)
    recall = tp / n_gt
    precision = tp / (tp + fp)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    sampled = np.where(idx < len(envelope), envelope[np.minimum(idx, len(envelope) - 1)], 0.0)
    # correctly rounded sum, independent of summation order
    return math.fsum(sampled) / len(RECALL_POINTS), float(recall[-1])


def compute_ap(dets: dict, gts: dict, num_classes: int | None = None,
               iou_thresholds=COCO_IOU_THRESHOLDS) -> EvalReport:
    """COCO-style AP over IoU thresholds; classes without gts are excluded.

    ``dets`` and ``gts`` map image ids to :class:`Detections` and :class:`GroundTruth`.
    """
    _check_images(dets, gts)
    if num_classes is None:
        labels = [g.labels for g in gts.values()] + [d.labels for d in dets.values()]
        num_classes = int(max((l.max() for l in labels if len(l)), default=-1)) + 1
    thresholds = np.asarray(iou_thresholds, dtype=np.float64)
    ap = np.full((len(thresholds), num_classes), np.nan)
    rec = np.full((len(thresholds), num_classes), np.nan)
    for t, thr in enumerate(thresholds):
        for c in range(num_classes):
            _, flags, n_gt = _pr_flags(dets, gts, c, thr)
            ap[t, c], rec[t, c] = interpolated_ap(flags, n_gt)

    def mean(x):
        x = x[~np.isnan(x)]
        return math.fsum(x.ravel()) / x.size if x.size else 0.0

    def at(thr):
        hit = np.nonzero(np.isclose(thresholds, thr))[0]
        return mean(ap[hit[0]]) if hit.size else float("nan")

    per_class = {c: mean(ap[:, c]) for c in range(num_classes) if not np.isnan(ap[:, c]).all()}
    ap50 = at(0.5)
    overall = mean(ap)
    if not np.isnan(ap50):
        # AP <= AP50 holds exactly; the cap only absorbs rounding in the two means
        overall = min(overall, ap50)
    return EvalReport(AP=overall, AP50=ap50, AP75=at(0.75), AR=mean(rec), per_class_AP=per_class)


def compute_mmr(dets: dict, gts: dict, fppi_points=MMR_FPPI_POINTS, iou_threshold: float = 0.5,
                floor: float = MMR_FLOOR) -> float | None:
    """Log-average miss rate over FPPI reference points (class-agnostic); ``None`` without gts."""
    _check_images(dets, gts)
    _, flags, n_gt = _pr_flags(dets, gts, None, iou_threshold)
    if n_gt == 0:
        return None
    n_img = max(len(gts), 1)
    tp = np.concatenate([[0], np.cumsum(flags)])
    fp = np.concatenate([[0], np.cumsum(~flags)])
    fppi = fp / n_img
    miss = 1.0 - tp / n_gt
    rates = []
    for ref in fppi_points:
        j = np.nonzero(fppi <= ref)[0]
        rates.append(miss[j[-1]])
    rates = np.maximum(np.asarray(rates), floor)
    return float(np.exp(np.log(rates).mean()))


def duplicate_rate(dets: dict, gts: dict, score_threshold: float = 0.3,
                   iou_threshold: float = 0.5) -> float:
    """Fraction of gts covered by two or more same-class detections above the score threshold."""
    n_gt = 0
    dup = 0
    for img, gt in gts.items():
        n_gt += len(gt.labels)
        d = dets.get(img)
        if d is None or len(d) == 0 or len(gt.labels) == 0:
            continue
        d = d.subset(d.scores > score_threshold)
        if len(d) == 0:
            continue
        iou = box_iou_numpy(box_cxcywh_to_xyxy(d.boxes), box_cxcywh_to_xyxy(gt.boxes))
        same = d.labels[:, None] == gt.labels[None, :]
        hits = ((iou >= iou_threshold) & same).sum(0)
        dup += int((hits >= 2).sum())
    return dup / n_gt if n_gt else 0.0


def evaluate(dets: dict, gts: dict, num_classes: int | None = None, with_mmr: bool = False,
             dup_score_threshold: float = 0.3) -> EvalReport:
    report = compute_ap(dets, gts, num_classes)
    if with_mmr:
        report.mMR = compute_mmr(dets, gts)
    report.duplicate_rate = duplicate_rate(dets, gts, dup_score_threshold)
    return report


def to_coco_results(dets: dict, image_sizes: dict, category_ids=None) -> list[dict]:
    """COCO results records ``{image_id, category_id, bbox [x, y, w, h] pixels, score}``."""
    out = []
    for img, d in dets.items():
        h, w = image_sizes[img]
        for (cx, cy, bw, bh), s, l in zip(d.boxes, d.scores, d.labels):
            cat = int(category_ids[l]) if category_ids is not None else int(l)
            out.append({"image_id": int(img), "category_id": cat,
                        "bbox": [float((cx - bw / 2) * w), float((cy - bh / 2) * h),
                                 float(bw * w), float(bh * h)],
                        "score": float(s)})
    return out


def from_coco_results(records: list[dict], image_sizes: dict, category_ids=None) -> dict:
    """Inverse of :func:`to_coco_results`; images without records are absent from the result."""
    remap = {int(c): i for i, c in enumerate(category_ids)} if category_ids is not None else None
    grouped: dict[int, list] = {}
    for r in records:
        grouped.setdefault(int(r["image_id"]), []).append(r)
    out = {}
    for img, recs in grouped.items():
        h, w = image_sizes[img]
        boxes = [[(x + bw / 2) / w, (y + bh / 2) / h, bw / w, bh / h] for x, y, bw, bh in (r["bbox"] for r in recs)]
        labels = [remap[int(r["category_id"])] if remap else int(r["category_id"]) for r in recs]
        out[img] = Detections(boxes, [r["score"] for r in recs], labels)
    return out


def write_report(report: EvalReport, path) -> None:
    Path(path).write_text(json.dumps(report.to_dict(), indent=2))
