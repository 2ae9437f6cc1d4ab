"""Architecture configuration shared by both branches."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, fields


class ConfigError(ValueError):
    """Invalid configuration; ``field`` names the offending entry when known."""

    def __init__(self, message: str, field: str | None = None):
        super().__init__(message)
        self.field = field


@dataclass
class ModelConfig:
    image_size: int = 128
    num_classes: int = 3
    # backbone stage widths at strides 2, 4, 8, 16, 32 before the width multiplier
    backbone_channels: tuple[int, ...] = (16, 32, 64, 128, 256)
    width: float = 0.5
    neck_channels: tuple[int, int, int] = (32, 64, 64)
    strides: tuple[int, int, int] = (8, 16, 32)
    hidden_dim: int = 64
    num_queries: int = 100
    num_decoder_layers: int = 6
    num_heads: int = 8
    ffn_ratio: int = 4
    # dense box decode: prior side = prior_scale * stride, center offset <= center_range cells
    prior_scale: float = 3.0
    center_range: float = 2.0
    assign_radius: float = 1.5
    # max object side (in strides of the level) handled by P3 and P4; larger goes to P5
    level_limit: float = 4.0
    # phase 2: the inherited box head learns from the one-to-one selection loss (False keeps it fixed)
    finetune_box_head: bool = True
    cdn_label_noise: float = 0.5
    cdn_box_noise: tuple[float, float] = (0.4, 1.0)
    cdn_groups: int = 5
    cdn_max_queries: int = 200

    def __post_init__(self):
        self.backbone_channels = tuple(self.backbone_channels)
        self.neck_channels = tuple(self.neck_channels)
        self.strides = tuple(self.strides)
        self.cdn_box_noise = tuple(self.cdn_box_noise)
        self.validate()

    def validate(self):
        if self.image_size % 32 != 0 or self.image_size <= 0:
            raise ConfigError(f"image_size must be a positive multiple of 32, got {self.image_size}",
                              "image_size")
        if len(self.backbone_channels) != 5:
            raise ConfigError("backbone_channels needs 5 stage widths", "backbone_channels")
        if len(self.neck_channels) != 3:
            raise ConfigError("neck_channels needs 3 entries", "neck_channels")
        if self.hidden_dim % self.num_heads != 0:
            raise ConfigError("hidden_dim must be divisible by num_heads", "hidden_dim")
        if self.num_queries > self.num_tokens:
            raise ConfigError(
                f"num_queries={self.num_queries} exceeds sequence length {self.num_tokens}",
                "num_queries")
        if self.num_classes < 1:
            raise ConfigError("num_classes must be >= 1", "num_classes")
        lo, hi = self.cdn_box_noise
        if not 0 <= lo < hi:
            raise ConfigError("cdn_box_noise must satisfy 0 <= lambda1 < lambda2", "cdn_box_noise")

    @property
    def level_shapes(self) -> list[tuple[int, int]]:
        return [(self.image_size // s, self.image_size // s) for s in self.strides]

    @property
    def num_tokens(self) -> int:
        return sum(h * w for h, w in self.level_shapes)

    @property
    def stage_channels(self) -> tuple[int, ...]:
        return tuple(max(8, int(round(c * self.width))) for c in self.backbone_channels)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        for key in data:
            if key not in known:
                raise ConfigError(f"unknown model config field {key!r}", key)
        return cls(**data)

    def arch_hash(self) -> str:
        """Hash of everything that determines parameter shapes."""
        keys = ("num_classes", "backbone_channels", "width", "neck_channels", "hidden_dim",
                "num_decoder_layers", "num_heads", "ffn_ratio")
        payload = json.dumps({k: getattr(self, k) for k in keys}, sort_keys=True)
        return hashlib.sha256(payload.encode()).hexdigest()[:16]

    def dense_arch_hash(self) -> str:
        """Hash of the backbone/neck/dense-head shapes shared by both phases."""
        keys = ("num_classes", "backbone_channels", "width", "neck_channels", "strides")
        payload = json.dumps({k: getattr(self, k) for k in keys}, sort_keys=True)
        return hashlib.sha256(payload.encode()).hexdigest()[:16]


def config_hash(data: dict) -> str:
    return hashlib.sha256(json.dumps(data, sort_keys=True, default=list).encode()).hexdigest()[:16]

