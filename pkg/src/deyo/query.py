"""One-to-one branch: feature projection, decoupled query generation and the refining decoder."""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .config import ModelConfig
from .denoising import DenoiseBatch, build_attention_mask
from .dense import Backbone, DenseHead, DenseOutput, Neck
from .evaluation import Detections
from .geometry import inverse_sigmoid


@dataclass
class EncoderSequence:
    """Flattened multi-scale tokens, level-major then row-major."""

    tokens: torch.Tensor      # (B, L, d)
    pos: torch.Tensor         # (1, L, d) sine position + level embedding
    level_ids: torch.Tensor   # (L,)
    grid: torch.Tensor        # (L, 2) normalized (x, y) cell centers
    level_shapes: list[tuple[int, int]]

    def __len__(self):
        return self.tokens.shape[1]


def sine_embed(coords: torch.Tensor, num_feats: int, temperature: float = 10000.0) -> torch.Tensor:
    """Sine/cosine embedding of each coordinate in ``[0, 1]``; ``(..., n)`` -> ``(..., n * num_feats)``."""
    dim_t = torch.arange(num_feats // 2, dtype=coords.dtype, device=coords.device)
    dim_t = temperature ** (2 * dim_t / num_feats)
    x = coords[..., None] * 2 * math.pi / dim_t
    emb = torch.stack([x.sin(), x.cos()], -1).flatten(-2)
    return emb.flatten(-2)


class FeatureProjection(nn.Module):
    """Per-level linear maps to the hidden width, then flatten and concatenate."""

    def __init__(self, in_channels, hidden_dim: int):
        super().__init__()
        self.hidden_dim = hidden_dim
        self.in_channels = tuple(in_channels)
        self.proj = nn.ModuleList(nn.Linear(c, hidden_dim) for c in in_channels)
        self.level_embed = nn.Parameter(torch.zeros(len(in_channels), hidden_dim))
        nn.init.normal_(self.level_embed, std=0.02)

    def forward(self, pyramid) -> EncoderSequence:
        tokens, pos, levels, grids, shapes = [], [], [], [], []
        for lvl, (proj, feat) in enumerate(zip(self.proj, pyramid)):
            if feat.shape[1] != self.in_channels[lvl]:
                raise ValueError(f"level {lvl} has {feat.shape[1]} channels, "
                                 f"projection expects {self.in_channels[lvl]}")
            h, w = feat.shape[-2:]
            tokens.append(proj(feat.flatten(2).transpose(1, 2)))
            ys, xs = torch.meshgrid(torch.arange(h, dtype=feat.dtype, device=feat.device),
                                    torch.arange(w, dtype=feat.dtype, device=feat.device), indexing="ij")
            grid = torch.stack([(xs + 0.5) / w, (ys + 0.5) / h], -1).reshape(-1, 2)
            grids.append(grid)
            pos.append(sine_embed(grid, self.hidden_dim // 2) + self.level_embed[lvl])
            levels.append(torch.full((h * w,), lvl, dtype=torch.long, device=feat.device))
            shapes.append((h, w))
        return EncoderSequence(torch.cat(tokens, 1), torch.cat(pos, 0)[None], torch.cat(levels),
                               torch.cat(grids), shapes)


@dataclass
class QuerySet:
    content: torch.Tensor     # (B, K, d)
    reference: torch.Tensor   # (B, K, 4) normalized cxcywh, no gradient
    indices: torch.Tensor     # (B, K) positions in the sequence
    logits: torch.Tensor      # (B, K, C) selection-head logits of the chosen tokens
    proposals: torch.Tensor | None = None  # reference boxes before detaching


def select_topk(scores: torch.Tensor, k: int) -> torch.Tensor:
    """Indices of the ``k`` highest scores per row; ties go to lower indices."""
    return torch.sort(scores, dim=-1, descending=True, stable=True).indices[..., :k]


class QuerySelector(nn.Module):
    """Scores tokens, keeps the top ``K`` and builds their content embeddings.

    Reference boxes come from candidate boxes decoded by the inherited dense
    box head; content embeddings come from a separate projection of the
    selected tokens, so the box path and the embedding path are decoupled.
    """

    def __init__(self, hidden_dim: int, num_classes: int, num_queries: int, prior_prob: float = 0.01):
        super().__init__()
        self.num_queries = num_queries
        self.score_head = nn.Linear(hidden_dim, num_classes)
        self.content_proj = nn.Sequential(nn.Linear(hidden_dim, hidden_dim), nn.LayerNorm(hidden_dim))
        nn.init.constant_(self.score_head.bias, -math.log((1 - prior_prob) / prior_prob))

    def forward(self, seq: EncoderSequence, candidates: torch.Tensor) -> QuerySet:
        k = self.num_queries
        if k > len(seq):
            raise ValueError(f"num_queries={k} exceeds sequence length {len(seq)}")
        logits = self.score_head(seq.tokens)
        idx = select_topk(logits.max(-1).values, k)
        gather = lambda t: torch.gather(t, 1, idx[..., None].expand(-1, -1, t.shape[-1]))
        proposals = gather(candidates)
        return QuerySet(self.content_proj(gather(seq.tokens)), proposals.detach(), idx, gather(logits),
                        proposals)


class MLP(nn.Module):
    def __init__(self, d_in: int, d_hidden: int, d_out: int, num_layers: int):
        super().__init__()
        dims = [d_in] + [d_hidden] * (num_layers - 1) + [d_out]
        self.layers = nn.ModuleList(nn.Linear(a, b) for a, b in zip(dims[:-1], dims[1:]))

    def forward(self, x):
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = F.relu(x)
        return x


class MultiHeadAttention(nn.Module):
    """Dense multi-head attention with a boolean mask (``True`` = blocked)."""

    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        self.num_heads = num_heads
        self.q_proj = nn.Linear(dim, dim)
        self.k_proj = nn.Linear(dim, dim)
        self.v_proj = nn.Linear(dim, dim)
        self.out_proj = nn.Linear(dim, dim)

    def _split(self, x):
        b, n, d = x.shape
        return x.view(b, n, self.num_heads, d // self.num_heads).transpose(1, 2)

    def forward(self, query, key, value, mask: torch.Tensor | None = None):
        q, k, v = self._split(self.q_proj(query)), self._split(self.k_proj(key)), self._split(self.v_proj(value))
        out = F.scaled_dot_product_attention(q, k, v, attn_mask=None if mask is None else ~mask)
        out = out.transpose(1, 2).reshape(query.shape)
        return self.out_proj(out)


class DecoderLayer(nn.Module):
    def __init__(self, dim: int, num_heads: int, ffn_ratio: int):
        super().__init__()
        self.self_attn = MultiHeadAttention(dim, num_heads)
        self.norm1 = nn.LayerNorm(dim)
        self.cross_attn = MultiHeadAttention(dim, num_heads)
        self.norm2 = nn.LayerNorm(dim)
        self.ffn = nn.Sequential(nn.Linear(dim, dim * ffn_ratio), nn.ReLU(), nn.Linear(dim * ffn_ratio, dim))
        self.norm3 = nn.LayerNorm(dim)

    def forward(self, tgt, query_pos, memory, memory_pos, self_mask=None):
        q = k = tgt + query_pos
        tgt = self.norm1(tgt + self.self_attn(q, k, tgt, self_mask))
        tgt = self.norm2(tgt + self.cross_attn(tgt + query_pos, memory + memory_pos, memory))
        return self.norm3(tgt + self.ffn(tgt))


class QueryDecoder(nn.Module):
    """Stack of refining layers, each with its own class and box-delta head."""

    def __init__(self, dim: int, num_heads: int, ffn_ratio: int, num_layers: int, num_classes: int,
                 prior_prob: float = 0.01):
        super().__init__()
        self.dim = dim
        self.layers = nn.ModuleList(DecoderLayer(dim, num_heads, ffn_ratio) for _ in range(num_layers))
        self.ref_point_head = MLP(2 * dim, dim, dim, 2)
        self.class_heads = nn.ModuleList(nn.Linear(dim, num_classes) for _ in range(num_layers))
        self.box_heads = nn.ModuleList(MLP(dim, dim, 4, 3) for _ in range(num_layers))
        bias = -math.log((1 - prior_prob) / prior_prob)
        for head in self.class_heads:
            nn.init.constant_(head.bias, bias)
        for head in self.box_heads:
            nn.init.zeros_(head.layers[-1].weight)
            nn.init.zeros_(head.layers[-1].bias)

    def forward(self, memory, memory_pos, content, reference, self_mask=None):
        """Returns per-layer ``(logits, boxes)`` lists; boxes are sigmoid-bounded cxcywh."""
        all_logits, all_boxes = [], []
        tgt = content
        ref = reference
        for layer, cls_head, box_head in zip(self.layers, self.class_heads, self.box_heads):
            query_pos = self.ref_point_head(sine_embed(ref, self.dim // 2))
            tgt = layer(tgt, query_pos, memory, memory_pos, self_mask)
            boxes = (box_head(tgt) + inverse_sigmoid(ref)).sigmoid()
            all_logits.append(cls_head(tgt))
            all_boxes.append(boxes)
            ref = boxes.detach()
        return all_logits, all_boxes


@dataclass
class DecoderOutput:
    logits: list[torch.Tensor]   # per layer (B, K, C)
    boxes: list[torch.Tensor]    # per layer (B, K, 4)
    queries: QuerySet
    enc_logits: torch.Tensor | None = None
    enc_boxes: torch.Tensor | None = None
    dn_logits: list[torch.Tensor] | None = None
    dn_boxes: list[torch.Tensor] | None = None

    @property
    def pred_logits(self) -> torch.Tensor:
        return self.logits[-1]

    @property
    def pred_boxes(self) -> torch.Tensor:
        return self.boxes[-1]


class DEYO(nn.Module):
    """Full detector: frozen-able backbone + neck, inherited dense head, query decoder.

    Submodule names ``backbone``, ``neck`` and ``dense_head`` match
    :class:`~deyo.dense.DenseDetector` so phase-one weights load by name.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.backbone = Backbone(cfg.stage_channels)
        self.neck = Neck(self.backbone.out_channels, cfg.neck_channels)
        self.dense_head = DenseHead(cfg.neck_channels, cfg.num_classes, cfg)
        self.projection = FeatureProjection(cfg.neck_channels, cfg.hidden_dim)
        self.selector = QuerySelector(cfg.hidden_dim, cfg.num_classes, cfg.num_queries)
        self.decoder = QueryDecoder(cfg.hidden_dim, cfg.num_heads, cfg.ffn_ratio,
                                    cfg.num_decoder_layers, cfg.num_classes)
        self.label_embed = nn.Embedding(cfg.num_classes, cfg.hidden_dim)

    def forward_pyramid(self, images: torch.Tensor):
        h, w = images.shape[-2:]
        if h % 32 or w % 32:
            raise ValueError(f"input size {h}x{w} is not divisible by 32")
        return self.neck(self.backbone(images))

    def dense_forward(self, images: torch.Tensor) -> DenseOutput:
        return self.dense_head(self.forward_pyramid(images), tuple(images.shape[-2:]))

    def generate_queries(self, pyramid, image_size) -> tuple[EncoderSequence, QuerySet]:
        seq = self.projection(pyramid)
        # the box head learns from the selection loss only; the decoder sees detached references
        with torch.set_grad_enabled(torch.is_grad_enabled() and self.cfg.finetune_box_head):
            candidates = self.dense_head.decode(pyramid, image_size)
        return seq, self.selector(seq, candidates)

    def forward(self, images: torch.Tensor, dn: DenoiseBatch | None = None) -> DecoderOutput:
        pyramid = self.forward_pyramid(images)
        seq, queries = self.generate_queries(pyramid, tuple(images.shape[-2:]))
        return self.decode(seq, queries, dn)

    def decode(self, seq: EncoderSequence, queries: QuerySet, dn: DenoiseBatch | None = None) -> DecoderOutput:
        content, reference = queries.content, queries.reference
        mask = None
        k_dn = 0
        if dn is not None and dn.num_queries > 0:
            k_dn = dn.num_queries
            dn_content = self.label_embed(dn.labels.to(content.device))
            content = torch.cat([dn_content.to(content.dtype), content], 1)
            reference = torch.cat([dn.boxes.to(reference), reference], 1)
            mask = build_attention_mask(queries.content.shape[1], dn.group_size, dn.num_groups)
            mask = mask.to(content.device)
        logits, boxes = self.decoder(seq.tokens, seq.pos, content, reference, mask)
        out = DecoderOutput([l[:, k_dn:] for l in logits], [b[:, k_dn:] for b in boxes], queries,
                            enc_logits=queries.logits,
                            enc_boxes=queries.reference if queries.proposals is None else queries.proposals)
        if k_dn:
            out.dn_logits = [l[:, :k_dn] for l in logits]
            out.dn_boxes = [b[:, :k_dn] for b in boxes]
        return out


@torch.no_grad()
def predict(out: DecoderOutput, score_threshold: float = 0.0, top_n: int | None = 100) -> list[Detections]:
    """Final-layer detections per image: top ``(query, class)`` pairs by score, no NMS."""
    logits, boxes = out.pred_logits, out.pred_boxes
    num_classes = logits.shape[-1]
    results = []
    for b in range(logits.shape[0]):
        scores = logits[b].sigmoid().flatten()
        order = torch.sort(scores, descending=True, stable=True).indices
        if top_n is not None:
            order = order[:top_n]
        order = order[scores[order] > score_threshold]
        results.append(Detections(boxes[b][order // num_classes].double().cpu().numpy(),
                                  scores[order].double().cpu().numpy(),
                                  (order % num_classes).cpu().numpy()))
    return results
