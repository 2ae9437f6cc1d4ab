"""Hungarian set-prediction loss with auxiliary decoder layers and denoising terms."""
from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

from .geometry import box_cxcywh_to_xyxy, elementwise_giou
from .matching import FOCAL_ALPHA, FOCAL_GAMMA, MatchWeights, hungarian, match_cost


def sigmoid_focal_loss(logits: torch.Tensor, targets: torch.Tensor,
                       alpha: float = FOCAL_ALPHA, gamma: float = FOCAL_GAMMA) -> torch.Tensor:
    """Summed (not normalized) sigmoid focal loss."""
    prob = logits.sigmoid()
    ce = F.binary_cross_entropy_with_logits(logits, targets, reduction="none")
    p_t = prob * targets + (1 - prob) * (1 - targets)
    loss = ce * (1 - p_t) ** gamma
    if alpha >= 0:
        loss = (alpha * targets + (1 - alpha) * (1 - targets)) * loss
    return loss.sum()


def focal_classification_loss(logits: torch.Tensor, target_labels: torch.Tensor,
                              num_matched: int | None = None) -> torch.Tensor:
    """Focal loss for ``(K, C)`` logits against per-query labels (``-1`` = background).

    Normalized by the number of matched queries (at least 1).
    """
    onehot = torch.zeros_like(logits)
    matched = target_labels >= 0
    onehot[matched.nonzero(as_tuple=True)[0], target_labels[matched]] = 1.0
    if num_matched is None:
        num_matched = int(matched.sum())
    return sigmoid_focal_loss(logits, onehot) / max(num_matched, 1)


@dataclass(frozen=True)
class LossWeights:
    cls: float = 1.0
    l1: float = 5.0
    giou: float = 2.0


@dataclass
class LossReport:
    """Total loss plus unweighted components keyed ``<group>.<term>``.

    Groups are ``layer<i>``, ``dn.layer<i>`` and ``enc``. ``total`` equals
    ``sum(group_scale[g] * weight[term] * value)`` over all components.
    """

    total: torch.Tensor
    components: dict[str, torch.Tensor]
    group_scale: dict[str, float] = field(default_factory=dict)
    weights: LossWeights = LossWeights()
    num_matched: int = 0

    def recompute_total(self) -> torch.Tensor:
        total = self.total.new_zeros(())
        for key, value in self.components.items():
            group, term = key.rsplit(".", 1)
            total = total + self.group_scale[group] * getattr(self.weights, term) * value
        return total

    def summary(self) -> dict[str, float]:
        """Per-term values averaged over decoder layers, for logging."""
        out = {"total": self.total.item()}
        for prefix, name in (("layer", ""), ("dn.layer", "_dn"), ("enc", "_enc")):
            for term in ("cls", "l1", "giou"):
                vals = [v.item() for k, v in self.components.items()
                        if k.startswith(prefix) and k.endswith("." + term)]
                out[term + name] = sum(vals) / len(vals) if vals else 0.0
        return out


def _pair_terms(logits, boxes, target_labels, matched_pred, matched_gt_boxes, norm):
    loss_cls = focal_classification_loss(logits, target_labels, norm)
    if len(matched_pred):
        pred = boxes[matched_pred]
        loss_l1 = (pred - matched_gt_boxes).abs().sum() / max(norm, 1)
        loss_giou = (1 - elementwise_giou(box_cxcywh_to_xyxy(pred),
                                          box_cxcywh_to_xyxy(matched_gt_boxes))).sum() / max(norm, 1)
    else:
        loss_l1 = boxes.sum() * 0.0
        loss_giou = boxes.sum() * 0.0
    return loss_cls, loss_l1, loss_giou


def matched_layer_loss(logits: torch.Tensor, boxes: torch.Tensor, targets,
                       matcher_weights: MatchWeights = MatchWeights()):
    """Hungarian-matched focal / L1 / GIoU for one prediction layer over a batch.

    ``logits`` is ``(B, K, C)``, ``boxes`` ``(B, K, 4)``; ``targets`` is a list of
    dicts with ``labels`` and ``boxes``. Returns ``(cls, l1, giou, num_matched)``.
    """
    bsz, k, _ = logits.shape
    flat_labels = torch.full((bsz, k), -1, dtype=torch.long, device=logits.device)
    pred_list, gt_list = [], []
    counts = [len(t["labels"]) for t in targets]
    if sum(counts):
        all_labels = torch.cat([t["labels"] for t in targets]).to(logits.device).long()
        all_boxes = torch.cat([t["boxes"] for t in targets]).to(boxes)
        # one cost matrix for the whole batch, sliced per image
        cost = match_cost(logits.detach().flatten(0, 1), boxes.detach().flatten(0, 1),
                          all_labels, all_boxes, matcher_weights).view(bsz, k, -1).cpu()
        start = 0
        for b, n in enumerate(counts):
            if n == 0:
                continue
            asg = hungarian(cost[b, :, start:start + n])
            pi = torch.as_tensor(asg.pred_idx, device=logits.device)
            gi = torch.as_tensor(asg.gt_idx, device=logits.device) + start
            flat_labels[b, pi] = all_labels[gi]
            pred_list.append(pi + b * k)
            gt_list.append(all_boxes[gi])
            start += n
    num_matched = sum(len(p) for p in pred_list)
    pred_idx = torch.cat(pred_list) if pred_list else torch.zeros(0, dtype=torch.long)
    gt_boxes_cat = torch.cat(gt_list) if gt_list else boxes.new_zeros((0, 4))
    cls, l1, giou = _pair_terms(logits.reshape(bsz * k, -1), boxes.reshape(bsz * k, 4),
                                flat_labels.reshape(-1), pred_idx, gt_boxes_cat, num_matched)
    return cls, l1, giou, num_matched


def denoising_layer_loss(logits: torch.Tensor, boxes: torch.Tensor, dn, targets):
    """Identity-assigned reconstruction loss for the denoising queries of one layer."""
    bsz, k_dn, _ = logits.shape
    labels = torch.full((bsz, k_dn), -1, dtype=torch.long, device=logits.device)
    pred_list, gt_list = [], []
    valid = dn.valid.to(logits.device)
    for b, tgt in enumerate(targets):
        gt_idx = dn.target_index[b].to(logits.device)
        pos = gt_idx >= 0
        if pos.any():
            q = pos.nonzero(as_tuple=True)[0]
            labels[b, q] = tgt["labels"].to(logits.device).long()[gt_idx[q]]
            pred_list.append(q + b * k_dn)
            gt_list.append(tgt["boxes"].to(boxes)[gt_idx[q]])
    num_pos = sum(len(p) for p in pred_list)
    keep = valid.reshape(-1)
    flat_logits = logits.reshape(bsz * k_dn, -1)
    flat_labels = labels.reshape(-1)
    # padding queries carry no target at all
    onehot = torch.zeros_like(flat_logits)
    m = flat_labels >= 0
    onehot[m.nonzero(as_tuple=True)[0], flat_labels[m]] = 1.0
    loss_cls = sigmoid_focal_loss(flat_logits[keep], onehot[keep]) / max(num_pos, 1)
    pred_idx = torch.cat(pred_list) if pred_list else torch.zeros(0, dtype=torch.long)
    gt_cat = torch.cat(gt_list) if gt_list else boxes.new_zeros((0, 4))
    _, l1, giou = _pair_terms(flat_logits, boxes.reshape(bsz * k_dn, 4), flat_labels,
                              pred_idx, gt_cat, num_pos)
    return loss_cls, l1, giou


def set_prediction_loss(out, targets, dn=None, weights: LossWeights = LossWeights(),
                        matcher_weights: MatchWeights = MatchWeights()) -> LossReport:
    """Total one-to-one training loss.

    ``out`` is a :class:`~deyo.query.DecoderOutput`. Every decoder layer is
    matched independently; layer totals are averaged, denoising totals (when
    ``dn`` is given and ``out`` carries denoising predictions) are averaged and
    added, and the query-selection term (``out.enc_*``) is added when present.
    """
    components: dict[str, torch.Tensor] = {}
    group_scale: dict[str, float] = {}
    n_layers = len(out.logits)
    num_matched = 0
    for i in range(n_layers):
        cls, l1, giou, n = matched_layer_loss(out.logits[i], out.boxes[i], targets, matcher_weights)
        num_matched = n
        components[f"layer{i}.cls"], components[f"layer{i}.l1"], components[f"layer{i}.giou"] = cls, l1, giou
        group_scale[f"layer{i}"] = 1.0 / n_layers
    if dn is not None and getattr(out, "dn_logits", None) is not None:
        for i in range(n_layers):
            cls, l1, giou = denoising_layer_loss(out.dn_logits[i], out.dn_boxes[i], dn, targets)
            components[f"dn.layer{i}.cls"] = cls
            components[f"dn.layer{i}.l1"] = l1
            components[f"dn.layer{i}.giou"] = giou
            group_scale[f"dn.layer{i}"] = 1.0 / n_layers
    if getattr(out, "enc_logits", None) is not None:
        cls, l1, giou, _ = matched_layer_loss(out.enc_logits, out.enc_boxes, targets, matcher_weights)
        components["enc.cls"], components["enc.l1"], components["enc.giou"] = cls, l1, giou
        group_scale["enc"] = 1.0
    report = LossReport(out.logits[0].new_zeros(()), components, group_scale, weights, num_matched)
    report.total = report.recompute_total()
    return report
