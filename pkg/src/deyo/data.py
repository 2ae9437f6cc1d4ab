"""Synthetic shapes dataset, COCO-format I/O and training augmentation (incl. mosaic)."""
from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch
from PIL import Image
from scipy import ndimage

from .config import ConfigError
from .geometry import BoundingBox, box_cxcywh_to_xyxy, box_xyxy_to_cxcywh

CLASSES = ("circle", "square", "triangle")
FILL_VALUE = 0.5
MOSAIC_MIN_KEEP = 0.10


class CocoFormatError(ValueError):
    """Malformed COCO annotation file; the message names the offending record."""


@dataclass
class ImageSample:
    image: np.ndarray   # (H, W, 3) float32 in [0, 1]
    labels: np.ndarray  # (n,) int64 contiguous class ids
    boxes: np.ndarray   # (n, 4) float64 normalized cxcywh
    id: int = 0

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        self.boxes = np.asarray(self.boxes, dtype=np.float64).reshape(-1, 4)

    @property
    def annotations(self) -> list[tuple[int, BoundingBox]]:
        return [(int(l), BoundingBox(*map(float, b))) for l, b in zip(self.labels, self.boxes)]

    @property
    def size(self) -> tuple[int, int]:
        return self.image.shape[0], self.image.shape[1]

    def target(self) -> dict:
        return {"labels": torch.from_numpy(self.labels.copy()),
                "boxes": torch.from_numpy(self.boxes.astype(np.float32))}


DENSITY_PRESETS = {
    # objects per image, object side range (fraction of image), max IoU to earlier objects
    "default": {"objects_min": 1, "objects_max": 4, "size_min": 0.18, "size_max": 0.5, "max_overlap": 0.3},
    "crowded": {"objects_min": 3, "objects_max": 6, "size_min": 0.2, "size_max": 0.45, "max_overlap": 0.8},
}


@dataclass
class DatasetManifest:
    seed: int = 0
    size: int = 100
    image_size: int = 128
    classes: tuple[str, ...] = CLASSES
    density: str = "default"
    objects_min: int | None = None
    objects_max: int | None = None
    size_min: float | None = None
    size_max: float | None = None
    max_overlap: float | None = None
    split: str = "train"

    def __post_init__(self):
        self.classes = tuple(self.classes)
        if self.density not in DENSITY_PRESETS:
            raise ConfigError(f"unknown density preset {self.density!r}", "density")
        for key, value in DENSITY_PRESETS[self.density].items():
            if getattr(self, key) is None:
                setattr(self, key, value)
        if self.size < 0:
            raise ConfigError("size must be >= 0", "size")
        if self.image_size <= 0:
            raise ConfigError("image_size must be positive", "image_size")
        if not set(self.classes) <= set(CLASSES):
            raise ConfigError(f"classes must be drawn from {CLASSES}", "classes")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "DatasetManifest":
        known = {f.name for f in fields(cls)}
        for key in data:
            if key not in known:
                raise ConfigError(f"unknown manifest field {key!r}", key)
        return cls(**data)

    @classmethod
    def from_json(cls, path) -> "DatasetManifest":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


def _shape_mask(kind: str, cx: float, cy: float, side: float, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    half = side / 2
    if kind == "circle":
        return (xs - cx) ** 2 + (ys - cy) ** 2 <= half ** 2
    if kind == "square":
        return (np.abs(xs - cx) <= half) & (np.abs(ys - cy) <= half)
    if kind == "triangle":
        depth = ys - (cy - half)
        return (depth >= 0) & (ys <= cy + half) & (np.abs(xs - cx) <= depth / 2)
    raise ValueError(kind)


def _mask_box(mask: np.ndarray) -> tuple[int, int, int, int]:
    rows = np.nonzero(mask.any(1))[0]
    cols = np.nonzero(mask.any(0))[0]
    return int(cols[0]), int(rows[0]), int(cols[-1]) + 1, int(rows[-1]) + 1


def _pairwise_iou_px(a, b) -> float:
    iw = max(min(a[2], b[2]) - max(a[0], b[0]), 0)
    ih = max(min(a[3], b[3]) - max(a[1], b[1]), 0)
    inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0 else 0.0


def render_image(manifest: DatasetManifest, index: int):
    """Render one synthetic image; returns ``(uint8 image, [(class_idx, (x1, y1, x2, y2) px)])``."""
    rng = np.random.default_rng([manifest.seed, index])
    s = manifest.image_size
    ys, xs = np.mgrid[0:s, 0:s].astype(np.float64) + 0.5
    base = rng.uniform(0.0, 1.0, 3)
    tilt = rng.uniform(-0.15, 0.15, 3)
    img = base[None, None] + tilt[None, None] * (xs / s - 0.5)[..., None]
    img = img + rng.normal(0.0, 0.03, img.shape)
    n_obj = int(rng.integers(manifest.objects_min, manifest.objects_max + 1))
    objects = []
    for _ in range(n_obj):
        for _attempt in range(50):
            kind = int(rng.integers(len(manifest.classes)))
            side = rng.uniform(manifest.size_min, manifest.size_max) * s
            if manifest.density == "crowded" and objects:
                ref = objects[int(rng.integers(len(objects)))][1]
                rcx, rcy = (ref[0] + ref[2]) / 2, (ref[1] + ref[3]) / 2
                cx = rcx + rng.uniform(-0.5, 0.5) * side
                cy = rcy + rng.uniform(-0.5, 0.5) * side
            else:
                cx, cy = rng.uniform(0, s, 2)
            lo, hi = side / 2 + 1, s - side / 2 - 1
            if lo >= hi:
                continue
            cx, cy = float(np.clip(cx, lo, hi)), float(np.clip(cy, lo, hi))
            mask = _shape_mask(manifest.classes[kind], cx, cy, side, xs, ys)
            if mask.sum() < 4:
                continue
            box = _mask_box(mask)
            if all(_pairwise_iou_px(box, o[1]) <= manifest.max_overlap for o in objects):
                break
        else:
            continue
        color = np.clip(1.0 - base + rng.uniform(-0.25, 0.25, 3), 0, 1)
        img[mask] = color
        objects.append((kind, box))
    img = np.clip(img, 0, 1)
    return (img * 255 + 0.5).astype(np.uint8), objects


def _sample_from_render(img_u8, objects, index, n_classes=None) -> ImageSample:
    s_h, s_w = img_u8.shape[:2]
    labels = [k for k, _ in objects]
    boxes = [[(b[0] + b[2]) / 2 / s_w, (b[1] + b[3]) / 2 / s_h, (b[2] - b[0]) / s_w, (b[3] - b[1]) / s_h]
             for _, b in objects]
    return ImageSample(img_u8.astype(np.float32) / 255.0, labels, boxes, index)


def synthesize(manifest: DatasetManifest) -> list[ImageSample]:
    """In-memory dataset, identical to what :func:`generate_synthetic` writes."""
    return [_sample_from_render(*render_image(manifest, i), i) for i in range(manifest.size)]


def coco_dict(manifest: DatasetManifest, renders) -> dict:
    images, annotations = [], []
    ann_id = 1
    for i, (img, objects) in enumerate(renders):
        images.append({"id": i, "file_name": f"images/{i:06d}.png",
                       "width": int(img.shape[1]), "height": int(img.shape[0])})
        for kind, (x1, y1, x2, y2) in objects:
            annotations.append({"id": ann_id, "image_id": i, "category_id": kind + 1,
                                "bbox": [x1, y1, x2 - x1, y2 - y1], "area": (x2 - x1) * (y2 - y1),
                                "iscrowd": 0})
            ann_id += 1
    categories = [{"id": i + 1, "name": name} for i, name in enumerate(manifest.classes)]
    return {"images": images, "annotations": annotations, "categories": categories,
            "info": {"manifest": manifest.to_dict()}}


def generate_synthetic(manifest: DatasetManifest, out_dir) -> Path:
    """Write ``images/*.png``, ``annotations.json`` and ``manifest.json`` under ``out_dir``."""
    out = Path(out_dir)
    try:
        (out / "images").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create dataset directory {out}: {exc}") from exc
    if not os.access(out, os.W_OK):
        raise PermissionError(f"dataset directory {out} is not writable")
    renders = []
    for i in range(manifest.size):
        img, objects = render_image(manifest, i)
        Image.fromarray(img).save(out / "images" / f"{i:06d}.png")
        renders.append((img, objects))
    (out / "annotations.json").write_text(json.dumps(coco_dict(manifest, renders), sort_keys=True, indent=1))
    (out / "manifest.json").write_text(json.dumps(manifest.to_dict(), sort_keys=True, indent=1))
    return out


@dataclass
class CocoData:
    samples: list[ImageSample]
    categories: list[dict]
    skipped: dict[str, int] = field(default_factory=dict)
    image_ids: list[int] = field(default_factory=list)

    def __len__(self):
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    def __getitem__(self, i):
        return self.samples[i]

    @property
    def category_ids(self) -> list[int]:
        return [c["id"] for c in self.categories]


def _require(record: dict, keys, where: str):
    if not isinstance(record, dict):
        raise CocoFormatError(f"{where}: expected an object, got {type(record).__name__}")
    missing = [k for k in keys if k not in record]
    if missing:
        raise CocoFormatError(f"{where}: missing key(s) {missing}")


def load_coco(path, image_root=None, load_images: bool = True) -> CocoData:
    """Load a COCO detection file into normalized samples.

    Category ids are remapped to contiguous ``0..C-1`` in sorted-id order.
    Zero-area and ``iscrowd`` annotations are skipped and counted.
    """
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise CocoFormatError(f"{path}: invalid JSON ({exc})") from exc
    _require(data, ("images", "annotations", "categories"), str(path))
    for i, c in enumerate(data["categories"]):
        _require(c, ("id",), f"categories[{i}]")
    categories = sorted(data["categories"], key=lambda c: c["id"])
    remap = {c["id"]: i for i, c in enumerate(categories)}
    images = {}
    for i, im in enumerate(data["images"]):
        _require(im, ("id", "width", "height"), f"images[{i}]")
        images[im["id"]] = im
    per_image: dict = {k: ([], []) for k in images}
    skipped = {"zero_area": 0, "iscrowd": 0}
    for i, ann in enumerate(data["annotations"]):
        where = f"annotations[{i}] (id={ann.get('id') if isinstance(ann, dict) else None})"
        _require(ann, ("image_id", "category_id", "bbox"), where)
        if ann["image_id"] not in images:
            raise CocoFormatError(f"{where}: unknown image_id {ann['image_id']}")
        if ann["category_id"] not in remap:
            raise CocoFormatError(f"{where}: unknown category_id {ann['category_id']}")
        bbox = ann["bbox"]
        if not isinstance(bbox, (list, tuple)) or len(bbox) != 4:
            raise CocoFormatError(f"{where}: bbox must be [x, y, w, h]")
        if ann.get("iscrowd", 0):
            skipped["iscrowd"] += 1
            continue
        x, y, w, h = map(float, bbox)
        if w <= 0 or h <= 0:
            skipped["zero_area"] += 1
            continue
        im = images[ann["image_id"]]
        W, H = float(im["width"]), float(im["height"])
        per_image[ann["image_id"]][0].append(remap[ann["category_id"]])
        per_image[ann["image_id"]][1].append([(x + w / 2) / W, (y + h / 2) / H, w / W, h / H])
    root = Path(image_root) if image_root is not None else path.parent
    samples = []
    for img_id, im in images.items():
        if load_images:
            if "file_name" not in im:
                raise CocoFormatError(f"images (id={img_id}): missing key ['file_name']")
            pixels = np.asarray(Image.open(root / im["file_name"]).convert("RGB"), dtype=np.float32) / 255.0
        else:
            pixels = np.zeros((int(im["height"]), int(im["width"]), 3), dtype=np.float32)
        labels, boxes = per_image[img_id]
        samples.append(ImageSample(pixels, labels, boxes, img_id))
    return CocoData(samples, categories, skipped, list(images))


# ---------------------------------------------------------------- augmentation


@dataclass
class AugmentConfig:
    flip_prob: float = 0.5
    hue: float = 0.015
    saturation: float = 0.5
    value: float = 0.3
    translate: float = 0.1
    scale: float = 0.25
    min_keep: float = 0.25


def flip_horizontal(sample: ImageSample) -> ImageSample:
    boxes = sample.boxes.copy()
    boxes[:, 0] = 1.0 - boxes[:, 0]
    return ImageSample(sample.image[:, ::-1].copy(), sample.labels.copy(), boxes, sample.id)


def color_jitter(image: np.ndarray, rng: np.random.Generator, hue: float, saturation: float,
                 value: float) -> np.ndarray:
    """HSV-style jitter: channel gain tilt (hue), blend with gray (saturation), global gain (value)."""
    gray = image.mean(-1, keepdims=True)
    sat = 1.0 + rng.uniform(-saturation, saturation)
    out = gray + (image - gray) * sat
    out = out * (1.0 + rng.uniform(-hue, hue, 3) * 10)[None, None]
    out = out * (1.0 + rng.uniform(-value, value))
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def affine_boxes(boxes: np.ndarray, scale: float, tx: float, ty: float) -> np.ndarray:
    """Zoom about the image center by ``scale`` then shift by ``(tx, ty)`` (normalized units)."""
    out = boxes.astype(np.float64).copy()
    out[:, 0] = scale * (out[:, 0] - 0.5) + 0.5 + tx
    out[:, 1] = scale * (out[:, 1] - 0.5) + 0.5 + ty
    out[:, 2:] *= scale
    return out


def clip_boxes(boxes: np.ndarray, labels: np.ndarray, min_keep: float,
               window=(0.0, 0.0, 1.0, 1.0)):
    """Clip center-size boxes to ``window`` and drop those keeping less than ``min_keep`` of their area."""
    if len(boxes) == 0:
        return boxes.reshape(0, 4), labels
    xyxy = box_cxcywh_to_xyxy(boxes)
    area = boxes[:, 2] * boxes[:, 3]
    x1, y1, x2, y2 = window
    clipped = np.stack([np.clip(xyxy[:, 0], x1, x2), np.clip(xyxy[:, 1], y1, y2),
                        np.clip(xyxy[:, 2], x1, x2), np.clip(xyxy[:, 3], y1, y2)], -1)
    new_area = np.clip(clipped[:, 2] - clipped[:, 0], 0, None) * np.clip(clipped[:, 3] - clipped[:, 1], 0, None)
    keep = (new_area > 0) & (new_area >= min_keep * area)
    return box_xyxy_to_cxcywh(clipped[keep]), labels[keep]


def warp_image(image: np.ndarray, scale: float, tx: float, ty: float) -> np.ndarray:
    """Apply :func:`affine_boxes`'s map to pixels; uncovered area is filled with constant gray."""
    h, w = image.shape[:2]
    # output (r, c) samples input at ((r - 0.5h - ty*h) / scale + 0.5h, ...)
    matrix = np.diag([1.0 / scale, 1.0 / scale])
    offset = np.array([0.5 * h - (0.5 * h + ty * h) / scale, 0.5 * w - (0.5 * w + tx * w) / scale])
    # pixel centers sit at +0.5; the affine map above is exact for continuous coordinates
    offset += 0.5 / scale - 0.5
    out = np.empty_like(image)
    for c in range(image.shape[2]):
        out[..., c] = ndimage.affine_transform(image[..., c], matrix, offset, order=1,
                                               mode="constant", cval=FILL_VALUE)
    return out


def augment(sample: ImageSample, rng: np.random.Generator, cfg: AugmentConfig = AugmentConfig()) -> ImageSample:
    """Flip, color jitter and random translate/zoom with box transform and clipping."""
    if rng.random() < cfg.flip_prob:
        sample = flip_horizontal(sample)
    image = color_jitter(sample.image, rng, cfg.hue, cfg.saturation, cfg.value)
    scale = 1.0 + rng.uniform(-cfg.scale, cfg.scale)
    tx, ty = rng.uniform(-cfg.translate, cfg.translate, 2)
    if cfg.scale or cfg.translate:
        image = warp_image(image, scale, tx, ty)
        boxes, labels = clip_boxes(affine_boxes(sample.boxes, scale, tx, ty), sample.labels, cfg.min_keep)
    else:
        boxes, labels = sample.boxes, sample.labels
    return ImageSample(image, labels, boxes, sample.id)


def _resize(image: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    if image.shape[:2] == tuple(size):
        return image
    zoom = (size[0] / image.shape[0], size[1] / image.shape[1], 1)
    out = ndimage.zoom(image, zoom, order=1, mode="nearest", grid_mode=True)
    return out[: size[0], : size[1]]


def mosaic4(samples, rng: np.random.Generator, out_size: int, center=None,
            scale_range=(0.75, 1.25), min_keep: float = MOSAIC_MIN_KEEP) -> ImageSample:
    """Collage four samples around a (jittered) center on a ``2S x 2S`` canvas, then crop ``S x S``.

    Tile ``i`` (top-left, top-right, bottom-left, bottom-right) touches the
    center with its inner corner. The visible window is the central ``S x S``
    crop of the canvas. Boxes are clipped to their tile and to the window and
    dropped when less than ``min_keep`` of their area survives.
    """
    if len(samples) != 4:
        raise ValueError("mosaic4 needs exactly 4 samples")
    s = out_size
    if center is None:
        center = rng.uniform(0.5 * s, 1.5 * s, 2)
    cx, cy = float(center[0]), float(center[1])
    canvas = np.full((2 * s, 2 * s, 3), FILL_VALUE, dtype=np.float32)
    all_boxes, all_labels = [], []
    win = (0.5 * s, 0.5 * s, 1.5 * s, 1.5 * s)
    for i, smp in enumerate(samples):
        f = rng.uniform(*scale_range) if scale_range is not None else 1.0
        h0, w0 = smp.image.shape[:2]
        th, tw = max(1, int(round(h0 * f))), max(1, int(round(w0 * f)))
        tile = _resize(smp.image, (th, tw))
        left = cx - tw if i in (0, 2) else cx
        top = cy - th if i in (0, 1) else cy
        x0, y0 = int(round(left)), int(round(top))
        # paste the part of the tile that lies on the canvas
        cx0, cy0 = max(x0, 0), max(y0, 0)
        cx1, cy1 = min(x0 + tw, 2 * s), min(y0 + th, 2 * s)
        if cx1 > cx0 and cy1 > cy0:
            canvas[cy0:cy1, cx0:cx1] = tile[cy0 - y0:cy1 - y0, cx0 - x0:cx1 - x0]
        if len(smp.boxes) == 0:
            continue
        px = smp.boxes * np.array([tw, th, tw, th]) + np.array([x0, y0, 0, 0])
        visible = (max(cx0, win[0]), max(cy0, win[1]), min(cx1, win[2]), min(cy1, win[3]))
        if visible[2] <= visible[0] or visible[3] <= visible[1]:
            continue
        boxes, labels = clip_boxes(px, smp.labels, min_keep, visible)
        all_boxes.append(boxes)
        all_labels.append(labels)
    image = canvas[s // 2: s // 2 + s, s // 2: s // 2 + s].copy()
    if all_boxes:
        boxes = np.concatenate(all_boxes)
        labels = np.concatenate(all_labels)
        boxes = (boxes - np.array([0.5 * s, 0.5 * s, 0, 0])) / s
    else:
        boxes, labels = np.zeros((0, 4)), np.zeros(0, dtype=np.int64)
    return ImageSample(image, labels, boxes, samples[0].id)


class TrainingSet:
    """Deterministic augmented batches: ``(seed, epoch, index)`` fixes every sample."""

    def __init__(self, samples, image_size: int, seed: int = 0, augment_cfg: AugmentConfig | None = None,
                 mosaic_prob: float = 0.0, augment_enabled: bool = True):
        if not samples:
            raise ConfigError("training set is empty", "dataset")
        self.samples = list(samples)
        self.image_size = image_size
        self.seed = seed
        self.augment_cfg = augment_cfg or AugmentConfig()
        self.mosaic_prob = mosaic_prob
        self.augment_enabled = augment_enabled

    def __len__(self):
        return len(self.samples)

    def _base(self, i: int) -> ImageSample:
        smp = self.samples[i]
        size = (self.image_size, self.image_size)
        if smp.image.shape[:2] != size:
            smp = ImageSample(_resize(smp.image, size), smp.labels, smp.boxes, smp.id)
        return smp

    def get(self, index: int, epoch: int, mosaic: bool = True) -> ImageSample:
        rng = np.random.default_rng([self.seed, epoch, index])
        smp = self._base(index)
        if not self.augment_enabled:
            return smp
        if mosaic and self.mosaic_prob > 0 and rng.random() < self.mosaic_prob:
            others = rng.integers(len(self.samples), size=3)
            smp = mosaic4([smp] + [self._base(int(j)) for j in others], rng, self.image_size)
        return augment(smp, rng, self.augment_cfg)

    def batches(self, epoch: int, batch_size: int, mosaic: bool = True):
        order = np.random.default_rng([self.seed, epoch]).permutation(len(self.samples))
        for start in range(0, len(order), batch_size):
            items = [self.get(int(i), epoch, mosaic) for i in order[start:start + batch_size]]
            yield collate(items)


def collate(samples) -> tuple[torch.Tensor, list[dict]]:
    images = torch.from_numpy(np.stack([s.image.transpose(2, 0, 1) for s in samples]).astype(np.float32))
    return images, [s.target() for s in samples]
