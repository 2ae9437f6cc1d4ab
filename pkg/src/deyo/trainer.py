"""Step-by-step training: dense phase from scratch, then the query decoder on a frozen backbone and neck.

Also holds checkpoint I/O and the ablation suites. Every ablation arm is a
:class:`TrainConfig` override; no arm needs code of its own.
"""
from __future__ import annotations

import hashlib
import io
import json
import logging
import math
import statistics
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .config import ConfigError, ModelConfig, config_hash
from .data import AugmentConfig, ImageSample, TrainingSet, collate
from .denoising import build_cdn
from .dense import DenseDetector, assign_one_to_many, dense_loss, dense_predictions
from .evaluation import EvalReport, GroundTruth, evaluate, nms
from .losses import set_prediction_loss
from .query import DEYO, predict

log = logging.getLogger(__name__)

FREEZE_SPECS = {"backbone+neck": ("backbone", "neck"), "backbone-only": ("backbone",), "none": ()}
INIT_SPECS = ("phase1-checkpoint", "backbone-only-from-phase1", "random")


class TrainingDiverged(RuntimeError):
    """Non-finite loss; ``last_good`` points at the newest checkpoint written before it."""

    def __init__(self, message: str, last_good: Path | None):
        super().__init__(message)
        self.last_good = last_good


class FreezeViolation(RuntimeError):
    """A frozen parameter or buffer changed during training."""


class CheckpointError(ValueError):
    """Unreadable, inconsistent or incompatible checkpoint."""


@dataclass
class TrainConfig:
    phase: int = 2
    seed: int = 0
    image_size: int = 128
    epochs: int = 50
    batch_size: int = 8
    optimizer: dict = field(default_factory=lambda: {"kind": "adamw", "lr": 1e-4, "weight_decay": 1e-4})
    warmup_steps: int = 500
    grad_clip: float | None = 0.1
    num_queries: int = 100
    hidden_dim: int = 64
    num_classes: int = 3
    freeze_spec: str = "backbone+neck"
    init_spec: str = "phase1-checkpoint"
    cdn_enabled: bool = True
    mosaic_enabled: bool = True
    mosaic_prob: float = 0.5
    # mosaic is switched off for this trailing fraction of epochs
    mosaic_off_fraction: float = 0.1
    augment: bool = True
    max_steps: int | None = None
    eval_every: int = 1
    log_steps: bool = True
    model: dict = field(default_factory=dict)

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.phase not in (1, 2):
            raise ConfigError(f"phase must be 1 or 2, got {self.phase}", "phase")
        opt = self.optimizer
        if not isinstance(opt, dict) or opt.get("kind", "adamw") != "adamw":
            raise ConfigError("optimizer.kind must be 'adamw'", "optimizer.kind")
        unknown = set(opt) - {"kind", "lr", "weight_decay"}
        if unknown:
            raise ConfigError(f"unknown optimizer field {sorted(unknown)[0]!r}", f"optimizer.{sorted(unknown)[0]}")
        if not opt.get("lr", 0) > 0:
            raise ConfigError("lr must be > 0", "optimizer.lr")
        if opt.get("weight_decay", 0) < 0:
            raise ConfigError("weight_decay must be >= 0", "optimizer.weight_decay")
        if self.freeze_spec not in FREEZE_SPECS:
            raise ConfigError(f"freeze_spec must be one of {sorted(FREEZE_SPECS)}", "freeze_spec")
        if self.init_spec not in INIT_SPECS:
            raise ConfigError(f"init_spec must be one of {list(INIT_SPECS)}", "init_spec")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1", "epochs")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1", "batch_size")
        if self.warmup_steps < 0:
            raise ConfigError("warmup_steps must be >= 0", "warmup_steps")
        self.model_config()

    @property
    def lr(self) -> float:
        return float(self.optimizer.get("lr", 1e-4))

    @property
    def weight_decay(self) -> float:
        return float(self.optimizer.get("weight_decay", 1e-4))

    def model_config(self) -> ModelConfig:
        base = {"image_size": self.image_size, "num_classes": self.num_classes,
                "hidden_dim": self.hidden_dim, "num_queries": self.num_queries}
        overlap = set(base) & set(self.model)
        if overlap:
            key = sorted(overlap)[0]
            raise ConfigError(f"{key!r} is a top-level field, not a model override", f"model.{key}")
        try:
            return ModelConfig.from_dict({**base, **self.model})
        except ConfigError as exc:
            raise ConfigError(str(exc), f"model.{exc.field}" if exc.field and exc.field in self.model
                              else exc.field) from exc
        except TypeError as exc:
            raise ConfigError(str(exc), "model") from exc

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        for key in data:
            if key not in known:
                raise ConfigError(f"unknown config field {key!r}", key)
        try:
            return cls(**data)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def from_json(cls, path) -> "TrainConfig":
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        return cls.from_dict(data)

    def hash(self) -> str:
        return config_hash(self.to_dict())


# ---------------------------------------------------------------- determinism and checksums


def set_determinism(seed: int, threads: int | None = 1):
    """Seed torch and pin the thread count; single-threaded runs are bitwise reproducible."""
    torch.manual_seed(seed)
    if threads is not None:
        torch.set_num_threads(threads)
    torch.use_deterministic_algorithms(True, warn_only=True)


def tensor_sha256(t: torch.Tensor) -> str:
    t = t.detach().cpu().contiguous()
    return hashlib.sha256(t.view(-1).view(torch.uint8).numpy().tobytes() if t.numel() else b"").hexdigest()


def state_checksums(state: dict, prefixes) -> dict[str, str]:
    """sha256 of every state entry (parameters and buffers) under the given module prefixes."""
    prefixes = tuple(p + "." for p in prefixes)
    return {k: tensor_sha256(v) for k, v in sorted(state.items()) if prefixes and k.startswith(prefixes)}


def module_checksums(model: nn.Module, prefixes) -> dict[str, str]:
    return state_checksums(model.state_dict(), prefixes)


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


# ---------------------------------------------------------------- checkpoints


@dataclass
class Checkpoint:
    path: Path | None
    sidecar: dict
    # weights held in memory when the run had no output directory
    state: dict | None = field(default=None, repr=False)

    @property
    def phase(self) -> int:
        return int(self.sidecar["phase"])

    @property
    def model_config(self) -> ModelConfig:
        return ModelConfig.from_dict(self.sidecar["model_config"])

    @property
    def eval(self) -> dict | None:
        return self.sidecar.get("eval")

    def state_dict(self) -> dict:
        return self.state if self.path is None else load_checkpoint(self.path)[0]


SIDECAR_KEYS = ("phase", "config_hash", "epoch", "eval", "frozen_checksums", "archive_sha256",
                "model_config", "arch_hash", "dense_arch_hash")


def sidecar_path(path) -> Path:
    return Path(str(path) + ".json")


def save_checkpoint(path, model: nn.Module, model_cfg: ModelConfig, phase: int, train_cfg: TrainConfig | None,
                    epoch: int, eval_report: EvalReport | None = None, frozen_prefixes=("backbone", "neck"),
                    extra: dict | None = None) -> Checkpoint:
    """Write the weight archive and its JSON sidecar; returns the :class:`Checkpoint`."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    state = {k: v.detach().cpu().clone() for k, v in model.state_dict().items()}
    buf = io.BytesIO()
    torch.save(state, buf)
    path.write_bytes(buf.getvalue())
    sidecar = {
        "phase": phase,
        "config_hash": train_cfg.hash() if train_cfg is not None else None,
        "train_config": train_cfg.to_dict() if train_cfg is not None else None,
        "epoch": epoch,
        "eval": eval_report.to_dict() if eval_report is not None else None,
        "frozen_prefixes": list(frozen_prefixes),
        "frozen_checksums": state_checksums(state, frozen_prefixes),
        "archive_sha256": file_sha256(path),
        "model_config": model_cfg.to_dict(),
        "arch_hash": model_cfg.arch_hash(),
        "dense_arch_hash": model_cfg.dense_arch_hash(),
    }
    if extra:
        sidecar.update(extra)
    sidecar_path(path).write_text(json.dumps(sidecar, indent=1, sort_keys=True))
    return Checkpoint(path, sidecar)


def read_sidecar(path) -> dict:
    sc = sidecar_path(path)
    if not sc.exists():
        raise CheckpointError(f"{path}: missing sidecar {sc.name}")
    try:
        sidecar = json.loads(sc.read_text())
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{sc}: corrupted sidecar ({exc})") from exc
    if not isinstance(sidecar, dict):
        raise CheckpointError(f"{sc}: sidecar must be a JSON object")
    missing = [k for k in SIDECAR_KEYS if k not in sidecar]
    if missing:
        raise CheckpointError(f"{sc}: sidecar missing key(s) {missing}")
    return sidecar


def load_checkpoint(path) -> tuple[dict, dict]:
    """Load ``(state_dict, sidecar)``, verifying the archive hash and the frozen checksums."""
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"{path}: no such checkpoint")
    sidecar = read_sidecar(path)
    digest = file_sha256(path)
    if digest != sidecar["archive_sha256"]:
        raise CheckpointError(f"{path}: archive sha256 {digest[:12]} does not match sidecar "
                              f"{str(sidecar['archive_sha256'])[:12]}")
    state = torch.load(path, map_location="cpu", weights_only=True)
    recomputed = state_checksums(state, sidecar.get("frozen_prefixes", ("backbone", "neck")))
    if recomputed != sidecar["frozen_checksums"]:
        raise CheckpointError(f"{path}: frozen-parameter checksums do not match the archive")
    return state, sidecar


def open_checkpoint(path) -> Checkpoint:
    load_checkpoint(path)
    return Checkpoint(Path(path), read_sidecar(path))


def model_from_checkpoint(ckpt: Checkpoint | str | Path) -> nn.Module:
    """Rebuild the phase-1 :class:`DenseDetector` or phase-2 :class:`DEYO` stored in a checkpoint."""
    if isinstance(ckpt, Checkpoint) and ckpt.path is None:
        state, sidecar = ckpt.state, ckpt.sidecar
    else:
        state, sidecar = load_checkpoint(ckpt.path if isinstance(ckpt, Checkpoint) else Path(ckpt))
    cfg = ModelConfig.from_dict(sidecar["model_config"])
    model = DenseDetector(cfg) if int(sidecar["phase"]) == 1 else DEYO(cfg)
    model.load_state_dict(state)
    return model.eval()


# ---------------------------------------------------------------- evaluation


def ground_truth(samples) -> dict:
    return {i: GroundTruth(s.boxes, s.labels) for i, s in enumerate(samples)}


@torch.no_grad()
def run_inference(model: nn.Module, samples, batch_size: int = 16, branch: str = "auto",
                  nms_iou: float | None = None, max_det: int = 100) -> dict:
    """Detections keyed by sample position.

    ``branch`` is ``"decoder"`` (one-to-one outputs), ``"dense"`` (one-to-many
    head) or ``"auto"`` (decoder when the model has one). ``nms_iou`` applies
    greedy per-class NMS on top, which the decoder branch does not need.
    """
    was_training = model.training
    model.eval()
    if branch == "auto":
        branch = "decoder" if isinstance(model, DEYO) else "dense"
    dets = {}
    try:
        for start in range(0, len(samples), batch_size):
            images, _ = collate(samples[start:start + batch_size])
            if branch == "dense":
                out = model.dense_forward(images) if isinstance(model, DEYO) else model(images)
                batch = dense_predictions(out, max_det=max_det, nms_iou=nms_iou)
            else:
                batch = predict(model(images), top_n=max_det)
                if nms_iou is not None:
                    batch = [nms(d, nms_iou) for d in batch]
            for j, d in enumerate(batch):
                dets[start + j] = d
    finally:
        model.train(was_training)
    return dets


def evaluate_model(model: nn.Module, samples, branch: str = "auto", nms_iou: float | None = None,
                   with_mmr: bool = False, num_classes: int | None = None) -> EvalReport:
    samples = list(samples)
    dets = run_inference(model, samples, branch=branch, nms_iou=nms_iou)
    if num_classes is None:
        num_classes = model.cfg.num_classes
    return evaluate(dets, ground_truth(samples), num_classes, with_mmr=with_mmr)


# ---------------------------------------------------------------- training loops


class JsonLog:
    def __init__(self, path: Path | None):
        self.path = path
        if path is not None:
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text("")

    def write(self, record: dict):
        if self.path is not None:
            with open(self.path, "a") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")


@dataclass
class RunResult:
    checkpoint: Checkpoint
    history: list[dict]
    best: Checkpoint | None = None

    @property
    def final_eval(self) -> dict:
        return self.history[-1]["eval"] if self.history else {}

    @property
    def epoch0_loss(self) -> float:
        return self.history[0]["loss"] if self.history else float("nan")


def _as_samples(dataset) -> list[ImageSample]:
    samples = list(dataset) if dataset is not None else []
    return samples


def _warmup(step: int, warmup: int) -> float:
    return 1.0 if warmup <= 0 else min(1.0, (step + 1) / warmup)


def _make_optimizer(params, cfg: TrainConfig):
    opt = torch.optim.AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    sched = torch.optim.lr_scheduler.LambdaLR(opt, lambda s: _warmup(s, cfg.warmup_steps))
    return opt, sched


def _mosaic_on(cfg: TrainConfig, epoch: int) -> bool:
    if not cfg.mosaic_enabled:
        return False
    cutoff = cfg.epochs - int(math.ceil(cfg.mosaic_off_fraction * cfg.epochs))
    return epoch < max(cutoff, 0)


def _training_set(cfg: TrainConfig, samples) -> TrainingSet:
    return TrainingSet(samples, cfg.image_size, seed=cfg.seed, augment_cfg=AugmentConfig(),
                       mosaic_prob=cfg.mosaic_prob if cfg.mosaic_enabled else 0.0,
                       augment_enabled=cfg.augment)


def _check_finite(loss: torch.Tensor, epoch: int, step: int, last_good: Path | None):
    if not torch.isfinite(loss):
        raise TrainingDiverged(f"non-finite loss at epoch {epoch} step {step}", last_good)


def train_phase1(cfg: TrainConfig, dataset, val=None, out_dir=None) -> RunResult:
    """Train the dense detector from scratch with the one-to-many loss; keeps the best-AP50 checkpoint."""
    if cfg.phase != 1:
        raise ConfigError("train_phase1 needs phase=1", "phase")
    samples = _as_samples(dataset)
    if not samples:
        raise ConfigError("training dataset is empty", "dataset")
    val = _as_samples(val) or samples
    out = Path(out_dir) if out_dir is not None else None
    set_determinism(cfg.seed)
    mcfg = cfg.model_config()
    model = DenseDetector(mcfg)
    opt, sched = _make_optimizer([p for p in model.parameters() if p.requires_grad], cfg)
    data = _training_set(cfg, samples)
    logger = JsonLog(out / "log.jsonl" if out else None)
    history, best, best_ap, last_good, step = [], None, -1.0, None, 0
    for epoch in range(cfg.epochs):
        model.train()
        t0, losses = time.time(), []
        for images, targets in data.batches(epoch, cfg.batch_size, mosaic=_mosaic_on(cfg, epoch)):
            dense = model(images)
            assignments = [assign_one_to_many(t["boxes"], dense.anchors, mcfg.assign_radius,
                                              mcfg.level_limit, mcfg.strides) for t in targets]
            loss, comps = dense_loss(dense, assignments, targets)
            _check_finite(loss, epoch, step, last_good)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            if cfg.grad_clip:
                nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
            opt.step()
            sched.step()
            losses.append(loss.item())
            if cfg.log_steps:
                logger.write({"kind": "step", "epoch": epoch, "step": step, "loss": loss.item(),
                              **{k: v.item() for k, v in comps.items()}, "lr": sched.get_last_lr()[0]})
            step += 1
            if cfg.max_steps is not None and step >= cfg.max_steps:
                break
        last_epoch = epoch == cfg.epochs - 1 or (cfg.max_steps is not None and step >= cfg.max_steps)
        report = None
        if (epoch + 1) % cfg.eval_every == 0 or last_epoch:
            report = evaluate_model(model, val, branch="dense", nms_iou=0.7)
        record = {"kind": "epoch", "epoch": epoch, "loss": float(np.mean(losses)) if losses else None,
                  "first_step_loss": losses[0] if losses else None, "steps": step,
                  "seconds": time.time() - t0, "eval": report.to_dict() if report else None}
        history.append(record)
        logger.write(record)
        if out is not None:
            last_good = save_checkpoint(out / "last.ckpt", model, mcfg, 1, cfg, epoch, report).path
        if report is not None and report.AP50 > best_ap:
            best_ap = report.AP50
            best = (save_checkpoint(out / "best.ckpt", model, mcfg, 1, cfg, epoch, report) if out is not None
                    else _memory_checkpoint(model, mcfg, 1, epoch, report))
        if last_epoch:
            break
    return RunResult(best, history, best)


@dataclass
class Phase2State:
    model: DEYO
    frozen_prefixes: tuple[str, ...]
    frozen_checksums: dict[str, str]
    init_checksums: dict[str, str]

    def trainable_parameters(self) -> list[nn.Parameter]:
        return [p for p in self.model.parameters() if p.requires_grad]

    def trainable_names(self) -> list[str]:
        return [n for n, p in self.model.named_parameters() if p.requires_grad]

    def train(self):
        """Training mode with frozen modules kept in eval mode (their BN statistics never move)."""
        self.model.train()
        for prefix in self.frozen_prefixes:
            getattr(self.model, prefix).eval()

    def verify_frozen(self):
        now = module_checksums(self.model, self.frozen_prefixes)
        changed = [k for k in self.frozen_checksums if now.get(k) != self.frozen_checksums[k]]
        if changed:
            raise FreezeViolation(f"frozen entries changed: {changed[:5]}")


def _memory_checkpoint(model, mcfg: ModelConfig, phase: int, epoch: int, report) -> Checkpoint:
    sidecar = {"phase": phase, "epoch": epoch, "eval": report.to_dict() if report else None,
               "model_config": mcfg.to_dict()}
    return Checkpoint(None, sidecar, {k: v.detach().clone() for k, v in model.state_dict().items()})


def _p1_state(p1) -> tuple[dict, dict]:
    if isinstance(p1, Checkpoint):
        if p1.path is None:
            return p1.state, p1.sidecar
        return load_checkpoint(p1.path)
    return load_checkpoint(p1)


def init_phase2(cfg: TrainConfig, p1=None) -> Phase2State:
    """Build the phase-2 model: copy inherited weights from ``p1`` per ``init_spec`` and freeze per ``freeze_spec``.

    ``phase1-checkpoint`` copies backbone, neck and the dense head (whose box
    branch generates queries). ``backbone-only-from-phase1`` copies only the
    backbone; neck and dense head keep their fresh random init. Decoder,
    projection, selection head and denoising embeddings are always fresh.
    """
    set_determinism(cfg.seed)
    mcfg = cfg.model_config()
    model = DEYO(mcfg)
    init_checksums = {}
    if cfg.init_spec != "random":
        if p1 is None:
            raise ConfigError("phase 2 needs an init checkpoint unless init_spec is 'random'", "init_spec")
        state, sidecar = _p1_state(p1)
        p1_cfg = ModelConfig.from_dict(sidecar["model_config"])
        if p1_cfg.dense_arch_hash() != mcfg.dense_arch_hash():
            own = model.state_dict()
            diff = [f"{k}: {tuple(v.shape)} vs {tuple(own[k].shape)}" for k, v in state.items()
                    if k in own and own[k].shape != v.shape]
            raise CheckpointError("architecture mismatch with phase-1 checkpoint; "
                                  + ("; ".join(diff[:8]) or "config fields differ"))
        prefixes = ("backbone", "neck", "dense_head") if cfg.init_spec == "phase1-checkpoint" else ("backbone",)
        copy = {k: v for k, v in state.items() if k.startswith(tuple(p + "." for p in prefixes))}
        missing, unexpected = model.load_state_dict(copy, strict=False)
        if unexpected:
            raise CheckpointError(f"unexpected entries in phase-1 checkpoint: {unexpected[:5]}")
        init_checksums = state_checksums(state, ("backbone", "neck"))
    frozen = FREEZE_SPECS[cfg.freeze_spec]
    for prefix in frozen:
        for p in getattr(model, prefix).parameters():
            p.requires_grad_(False)
    return Phase2State(model, frozen, module_checksums(model, frozen), init_checksums)


def train_phase2(cfg: TrainConfig, dataset, state: Phase2State, val=None, out_dir=None) -> RunResult:
    """Train decoder, projection and selection (plus CDN) with the set-prediction loss.

    Frozen checksums are verified before the first step and after every epoch.
    """
    if cfg.phase != 2:
        raise ConfigError("train_phase2 needs phase=2", "phase")
    samples = _as_samples(dataset)
    if not samples:
        raise ConfigError("training dataset is empty", "dataset")
    val = _as_samples(val) or samples
    out = Path(out_dir) if out_dir is not None else None
    set_determinism(cfg.seed)
    model, mcfg = state.model, state.model.cfg
    opt, sched = _make_optimizer(state.trainable_parameters(), cfg)
    data = _training_set(cfg, samples)
    cdn_rng = np.random.default_rng([cfg.seed, 2])
    logger = JsonLog(out / "log.jsonl" if out else None)
    history, best, best_ap, last_good, step = [], None, -1.0, None, 0
    state.verify_frozen()
    params = state.trainable_parameters()
    for epoch in range(cfg.epochs):
        state.train()
        t0, losses = time.time(), []
        for images, targets in data.batches(epoch, cfg.batch_size, mosaic=_mosaic_on(cfg, epoch)):
            dn = None
            if cfg.cdn_enabled:
                dn = build_cdn(targets, mcfg.num_classes, cdn_rng, mcfg.cdn_label_noise, mcfg.cdn_box_noise,
                               mcfg.cdn_groups, mcfg.cdn_max_queries)
            report = set_prediction_loss(model(images, dn), targets, dn)
            loss = report.total
            _check_finite(loss, epoch, step, last_good)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            if cfg.grad_clip:
                nn.utils.clip_grad_norm_(params, cfg.grad_clip)
            opt.step()
            sched.step()
            losses.append(loss.item())
            if cfg.log_steps:
                logger.write({"kind": "step", "epoch": epoch, "step": step, **report.summary(),
                              "lr": sched.get_last_lr()[0]})
            step += 1
            if cfg.max_steps is not None and step >= cfg.max_steps:
                break
        state.verify_frozen()
        last_epoch = epoch == cfg.epochs - 1 or (cfg.max_steps is not None and step >= cfg.max_steps)
        report = None
        if (epoch + 1) % cfg.eval_every == 0 or last_epoch:
            report = evaluate_model(model, val)
        record = {"kind": "epoch", "epoch": epoch, "loss": float(np.mean(losses)) if losses else None,
                  "first_step_loss": losses[0] if losses else None, "steps": step,
                  "seconds": time.time() - t0, "eval": report.to_dict() if report else None,
                  "frozen_checksums_ok": True}
        history.append(record)
        logger.write(record)
        ckpt = None
        if out is not None:
            ckpt = save_checkpoint(out / "last.ckpt", model, mcfg, 2, cfg, epoch, report, state.frozen_prefixes)
            last_good = ckpt.path
        if report is not None and report.AP50 > best_ap:
            best_ap = report.AP50
            if out is not None:
                best = save_checkpoint(out / "best.ckpt", model, mcfg, 2, cfg, epoch, report, state.frozen_prefixes)
        if last_epoch:
            break
    final = ckpt if out is not None else _memory_checkpoint(model, mcfg, 2, history[-1]["epoch"], report)
    return RunResult(final, history, best)


# ---------------------------------------------------------------- ablations


ARMS = {
    "step-by-step": {"init_spec": "phase1-checkpoint", "freeze_spec": "backbone+neck", "mosaic_enabled": True},
    "one-to-one-scratch": {"init_spec": "random", "freeze_spec": "none", "mosaic_enabled": True},
    "backbone-only-init": {"init_spec": "backbone-only-from-phase1", "freeze_spec": "backbone-only",
                           "mosaic_enabled": True},
    "frozen-no-mosaic": {"init_spec": "phase1-checkpoint", "freeze_spec": "backbone+neck", "mosaic_enabled": False},
    "unfrozen-no-mosaic": {"init_spec": "phase1-checkpoint", "freeze_spec": "none", "mosaic_enabled": False},
}

SUITES = {
    "table5": ("step-by-step", "one-to-one-scratch"),
    "table7": ("step-by-step", "backbone-only-init"),
    "table8": ("unfrozen-no-mosaic", "frozen-no-mosaic", "step-by-step"),
}


def arm_config(base: TrainConfig, arm: str) -> TrainConfig:
    if arm not in ARMS:
        raise ConfigError(f"unknown ablation arm {arm!r}", "arm")
    return replace(base, phase=2, **ARMS[arm])


def _cached(path: Path, key: str):
    if path.exists():
        try:
            data = json.loads(path.read_text())
        except json.JSONDecodeError:
            return None
        if data.get("key") == key:
            return data
    return None


def _sample_digest(samples) -> str:
    h = hashlib.sha256()
    for s in samples:
        h.update(np.ascontiguousarray(s.image).tobytes())
        h.update(s.labels.tobytes())
        h.update(s.boxes.tobytes())
    return h.hexdigest()[:16]


def run_arms(arms, p1_cfg: TrainConfig, p2_cfg: TrainConfig, train, val, seeds, out_dir,
             reuse: bool = True, extra_eval: bool = False) -> dict:
    """Train every arm for every seed, sharing one phase-1 run per seed.

    Each run writes ``result.json`` keyed by a hash of its configs and data; with
    ``reuse`` a matching result is read back instead of retrained.
    """
    out = Path(out_dir)
    train, val = list(train), list(val)
    data_key = _sample_digest(train) + _sample_digest(val)
    results: dict[str, list[dict]] = {a: [] for a in arms}
    for seed in seeds:
        c1 = replace(p1_cfg, phase=1, seed=seed)
        p1_dir = out / f"seed{seed}" / "phase1"
        p1_key = config_hash({"p1": c1.to_dict(), "data": data_key})
        p1_ckpt = None
        needs_p1 = any(ARMS[a]["init_spec"] != "random" for a in arms)
        cached = _cached(p1_dir / "result.json", p1_key) if reuse else None
        if needs_p1:
            if cached is not None and (p1_dir / "best.ckpt").exists():
                p1_ckpt = open_checkpoint(p1_dir / "best.ckpt")
            else:
                log.info("seed %d: phase 1", seed)
                run = train_phase1(c1, train, val, p1_dir)
                p1_ckpt = run.checkpoint
                (p1_dir / "result.json").write_text(json.dumps(
                    {"key": p1_key, "eval": p1_ckpt.eval, "history": run.history}, indent=1))
        for arm in arms:
            c2 = replace(arm_config(p2_cfg, arm), seed=seed)
            arm_dir = out / f"seed{seed}" / arm
            key = config_hash({"p2": c2.to_dict(), "p1": p1_key if c2.init_spec != "random" else None,
                               "data": data_key, "extra": extra_eval})
            cached = _cached(arm_dir / "result.json", key) if reuse else None
            if cached is None:
                log.info("seed %d: arm %s", seed, arm)
                state = init_phase2(c2, p1_ckpt)
                run = train_phase2(c2, train, state, val, arm_dir)
                final = run.history[-1]["eval"]
                cached = {"key": key, "arm": arm, "seed": seed, "eval": final,
                          "AP50": final["AP50"], "AP": final["AP"], "history": run.history}
                if extra_eval:
                    cached["nms_eval"] = evaluate_model(state.model, val, nms_iou=0.7).to_dict()
                    if p1_ckpt is not None:
                        dense = model_from_checkpoint(p1_ckpt)
                        cached["dense_eval"] = evaluate_model(dense, val, branch="dense").to_dict()
                        cached["dense_nms_eval"] = evaluate_model(dense, val, branch="dense",
                                                                  nms_iou=0.7).to_dict()
                (arm_dir / "result.json").write_text(json.dumps(cached, indent=1))
            results[arm].append(cached)
    return results


def summarize(results: dict) -> dict:
    """Median AP/AP50 per arm and the arms ordered by median AP50."""
    arms = {}
    for arm, runs in results.items():
        arms[arm] = {"AP50": statistics.median(r["AP50"] for r in runs),
                     "AP": statistics.median(r["AP"] for r in runs),
                     "per_seed": {str(r["seed"]): {"AP50": r["AP50"], "AP": r["AP"]} for r in runs}}
    ordering = sorted(arms, key=lambda a: -arms[a]["AP50"])
    return {"arms": arms, "ordering_by_AP50": ordering}


def run_suite(suite: str, p1_cfg: TrainConfig, p2_cfg: TrainConfig, train, val, seeds=(0, 1, 2),
              out_dir="ablation", reuse: bool = True) -> dict:
    if suite not in SUITES:
        raise ConfigError(f"unknown suite {suite!r}; choose from {sorted(SUITES)}", "suite")
    results = run_arms(SUITES[suite], p1_cfg, p2_cfg, train, val, seeds, Path(out_dir), reuse)
    summary = {"suite": suite, "seeds": list(seeds), **summarize(results)}
    Path(out_dir).mkdir(parents=True, exist_ok=True)
    (Path(out_dir) / f"{suite}.json").write_text(json.dumps(summary, indent=1))
    return summary
