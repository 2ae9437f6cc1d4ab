"""``deyo`` command line: data generation, both training phases, evaluation, inference and ablations."""
from __future__ import annotations

import datetime as _dt
import json
import logging
import sys
from pathlib import Path

import click
import numpy as np
import torch
from PIL import Image

from . import __version__
from .config import ConfigError, config_hash
from .data import DatasetManifest, ImageSample, collate, generate_synthetic, load_coco, CocoFormatError
from .evaluation import to_coco_results, write_report
from .query import DEYO, predict
from .dense import dense_predictions
from .trainer import (CheckpointError, FreezeViolation, TrainConfig, TrainingDiverged, evaluate_model,
                      file_sha256, init_phase2, model_from_checkpoint, open_checkpoint, run_suite,
                      train_phase1, train_phase2, SUITES)
from .presets import ablation_preset

EXIT_USAGE = 2
EXIT_RUNTIME = 1


class Context:
    def __init__(self, seed, device, out_dir):
        self.seed = seed
        self.device = device
        self.out_dir = Path(out_dir)
        self.started = _dt.datetime.now(_dt.timezone.utc).isoformat()


def _fail(message: str, code: int, field: str | None = None):
    payload = {"error": message}
    if field:
        payload["field"] = field
    click.echo(json.dumps(payload), err=True)
    sys.exit(code)


def _usage(exc: Exception):
    field = getattr(exc, "field", None)
    prefix = f"invalid field {field!r}: " if field else ""
    _fail(prefix + str(exc), EXIT_USAGE, field)


def _read_json(path: Path, what: str) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{what} {path} is not valid JSON ({exc})") from exc


def write_run_record(run_dir: Path, ctx: Context, config: dict, inputs: dict | None = None,
                     outputs: dict | None = None, extra: dict | None = None) -> Path:
    """Write ``run.json``: resolved config, content hashes of inputs/outputs, timestamps, command line."""
    def hashes(paths):
        out = {}
        for name, p in (paths or {}).items():
            p = Path(p)
            out[name] = {"path": str(p), "sha256": file_sha256(p) if p.is_file() else None}
        return out

    record = {
        "command": [Path(sys.argv[0]).name] + sys.argv[1:],
        "version": __version__,
        "seed": ctx.seed,
        "device": ctx.device,
        "config": config,
        "config_hash": config_hash(config),
        "inputs": hashes(inputs),
        "outputs": hashes(outputs),
        "started": ctx.started,
        "finished": _dt.datetime.now(_dt.timezone.utc).isoformat(),
    }
    if extra:
        record.update(extra)
    run_dir.mkdir(parents=True, exist_ok=True)
    path = run_dir / "run.json"
    path.write_text(json.dumps(record, indent=1, sort_keys=True))
    return path


def _load_config(ctx: Context, path, phase: int) -> TrainConfig:
    data = _read_json(Path(path), "config")
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    data.setdefault("phase", phase)
    if ctx.seed is not None:
        data["seed"] = ctx.seed
    cfg = TrainConfig.from_dict(data)
    if cfg.phase != phase:
        raise ConfigError(f"config has phase={cfg.phase}, command needs phase={phase}", "phase")
    return cfg


def _dataset(path: Path, image_size: int):
    ann = path / "annotations.json" if path.is_dir() else path
    if not ann.exists():
        raise FileNotFoundError(f"no annotations.json under {path}")
    data = load_coco(ann)
    bad = [s.id for s in data.samples if s.image.shape[:2] != (image_size, image_size)]
    if bad:
        raise ConfigError(f"{path}: images {bad[:3]} are not {image_size}x{image_size}", "image_size")
    return data


@click.group(context_settings={"help_option_names": ["-h", "--help"]})
@click.option("--seed", type=int, default=None, help="Override the seed of the config.")
@click.option("--device", default="cpu", show_default=True, help="Compute device (only 'cpu' is supported).")
@click.option("--out-dir", type=click.Path(file_okay=False), envvar="DEYO_OUT", default="runs",
              show_default=True, help="Output root; defaults to $DEYO_OUT when set.")
@click.option("-v", "--verbose", is_flag=True)
@click.version_option(__version__)
@click.pass_context
def main(click_ctx, seed, device, out_dir, verbose):
    """Step-by-step trained detector on synthetic shapes."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, format="%(message)s")
    if device != "cpu":
        raise click.BadParameter(f"device {device!r} is not supported; use 'cpu'", param_hint="--device")
    click_ctx.obj = Context(seed, device, out_dir)


@main.command("gen-data")
@click.option("--manifest", "manifest_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--dest", type=click.Path(file_okay=False), default=None,
              help="Dataset directory (default: OUT_DIR/data/<split>).")
@click.pass_obj
def gen_data(ctx: Context, manifest_path, dest):
    """Render a synthetic dataset from a manifest JSON."""
    try:
        data = _read_json(Path(manifest_path), "manifest")
        if ctx.seed is not None:
            data["seed"] = ctx.seed
        manifest = DatasetManifest.from_dict(data)
    except (ConfigError, TypeError) as exc:
        _usage(exc)
    target = Path(dest) if dest else ctx.out_dir / "data" / manifest.split
    try:
        generate_synthetic(manifest, target)
        load_coco(target / "annotations.json", load_images=False)
    except OSError as exc:
        _fail(str(exc), EXIT_RUNTIME)
    write_run_record(target, ctx, manifest.to_dict(), {"manifest": manifest_path},
                     {"annotations": target / "annotations.json"})
    click.echo(json.dumps({"dataset": str(target), "images": manifest.size}))


def _default_split(ctx: Context, given, split: str) -> Path:
    return Path(given) if given else ctx.out_dir / "data" / split


@main.command("train-p1")
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--data", "data_dir", type=click.Path(), default=None, help="Training set (default OUT_DIR/data/train).")
@click.option("--val", "val_dir", type=click.Path(), default=None, help="Validation set (default OUT_DIR/data/val).")
@click.option("--name", default="phase1", show_default=True)
@click.pass_obj
def train_p1(ctx: Context, config_path, data_dir, val_dir, name):
    """Phase 1: train the dense detector from scratch."""
    try:
        cfg = _load_config(ctx, config_path, 1)
        train = _dataset(_default_split(ctx, data_dir, "train"), cfg.image_size)
        val_path = _default_split(ctx, val_dir, "val")
        val = _dataset(val_path, cfg.image_size) if (val_dir or val_path.exists()) else None
    except (ConfigError, FileNotFoundError, CocoFormatError) as exc:
        _usage(exc)
    run_dir = ctx.out_dir / name
    try:
        result = train_phase1(cfg, train.samples, val.samples if val else None, run_dir)
    except TrainingDiverged as exc:
        _fail(f"{exc}; last good checkpoint: {exc.last_good}", EXIT_RUNTIME)
    write_run_record(run_dir, ctx, cfg.to_dict(), {"config": config_path},
                     {"best": result.checkpoint.path, "last": run_dir / "last.ckpt"})
    click.echo(json.dumps({"checkpoint": str(result.checkpoint.path), "eval": result.checkpoint.eval}))


@main.command("train-p2")
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--init", "init_path", type=click.Path(exists=True, dir_okay=False), default=None,
              help="Phase-1 checkpoint (required unless init_spec is 'random').")
@click.option("--data", "data_dir", type=click.Path(), default=None)
@click.option("--val", "val_dir", type=click.Path(), default=None)
@click.option("--name", default="phase2", show_default=True)
@click.pass_obj
def train_p2(ctx: Context, config_path, init_path, data_dir, val_dir, name):
    """Phase 2: train the query decoder on the frozen backbone and neck."""
    try:
        cfg = _load_config(ctx, config_path, 2)
        if cfg.init_spec != "random" and init_path is None:
            raise ConfigError("--init is required unless init_spec is 'random'", "init_spec")
        train = _dataset(_default_split(ctx, data_dir, "train"), cfg.image_size)
        val_path = _default_split(ctx, val_dir, "val")
        val = _dataset(val_path, cfg.image_size) if (val_dir or val_path.exists()) else None
        p1 = open_checkpoint(init_path) if init_path else None
        state = init_phase2(cfg, p1)
    except (ConfigError, FileNotFoundError, CocoFormatError) as exc:
        _usage(exc)
    except CheckpointError as exc:
        _fail(str(exc), EXIT_USAGE)
    run_dir = ctx.out_dir / name
    try:
        result = train_phase2(cfg, train.samples, state, val.samples if val else None, run_dir)
    except TrainingDiverged as exc:
        _fail(f"{exc}; last good checkpoint: {exc.last_good}", EXIT_RUNTIME)
    except FreezeViolation as exc:
        _fail(f"freeze invariant violated: {exc}", EXIT_RUNTIME)
    write_run_record(run_dir, ctx, cfg.to_dict(), {"config": config_path, "init": init_path},
                     {"final": result.checkpoint.path, "best": result.best.path if result.best else None})
    click.echo(json.dumps({"checkpoint": str(result.checkpoint.path), "eval": result.final_eval}))


@main.command("eval")
@click.option("--ckpt", "ckpt_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--split", default="val", show_default=True, help="Split under OUT_DIR/data, or a dataset path.")
@click.option("--nms", "nms_iou", type=float, default=None, help="Apply greedy NMS at this IoU.")
@click.option("--branch", type=click.Choice(["auto", "decoder", "dense"]), default="auto", show_default=True)
@click.option("--mmr", is_flag=True, help="Also compute the log-average miss rate.")
@click.pass_obj
def eval_cmd(ctx: Context, ckpt_path, split, nms_iou, branch, mmr):
    """Evaluate a checkpoint on a dataset split."""
    try:
        model = model_from_checkpoint(ckpt_path)
        path = Path(split) if Path(split).exists() else ctx.out_dir / "data" / split
        data = _dataset(path, model.cfg.image_size)
        if branch == "decoder" and not isinstance(model, DEYO):
            raise ConfigError("phase-1 checkpoints have no decoder branch", "branch")
    except (ConfigError, FileNotFoundError, CocoFormatError) as exc:
        _usage(exc)
    except CheckpointError as exc:
        _fail(str(exc), EXIT_USAGE)
    report = evaluate_model(model, data.samples, branch=branch, nms_iou=nms_iou, with_mmr=mmr)
    run_dir = ctx.out_dir / "eval" / f"{Path(ckpt_path).stem}-{Path(split).name}"
    run_dir.mkdir(parents=True, exist_ok=True)
    write_report(report, run_dir / "report.json")
    write_run_record(run_dir, ctx, {"split": str(path), "nms": nms_iou, "branch": branch, "mmr": mmr},
                     {"checkpoint": ckpt_path, "annotations": path / "annotations.json"},
                     {"report": run_dir / "report.json"})
    click.echo(report.table())


@main.command("infer")
@click.option("--ckpt", "ckpt_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--image", "image_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--out", "out_path", type=click.Path(dir_okay=False), required=True)
@click.option("--score-threshold", type=float, default=0.3, show_default=True)
@click.pass_obj
def infer(ctx: Context, ckpt_path, image_path, out_path, score_threshold):
    """Detect objects in one image and write COCO-style result records."""
    try:
        model = model_from_checkpoint(ckpt_path)
    except CheckpointError as exc:
        _fail(str(exc), EXIT_USAGE)
    try:
        pil = Image.open(image_path).convert("RGB")
    except OSError as exc:
        _usage(exc)
    size = model.cfg.image_size
    w0, h0 = pil.size
    if (w0, h0) != (size, size):
        pil = pil.resize((size, size), Image.BILINEAR)
    sample = ImageSample(np.asarray(pil, dtype=np.float32) / 255.0, [], np.zeros((0, 4)), 0)
    images, _ = collate([sample])
    with torch.no_grad():
        if isinstance(model, DEYO):
            dets = predict(model(images), score_threshold=score_threshold)[0]
        else:
            dets = dense_predictions(model(images), score_threshold=score_threshold, nms_iou=0.7)[0]
    records = to_coco_results({0: dets}, {0: (h0, w0)})
    for r in records:
        r["image"] = str(image_path)
    Path(out_path).parent.mkdir(parents=True, exist_ok=True)
    Path(out_path).write_text(json.dumps(records, indent=1))
    click.echo(json.dumps({"detections": len(records), "out": str(out_path)}))


@main.command("ablate")
@click.option("--suite", type=click.Choice(sorted(SUITES)), required=True)
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), default=None,
              help="Ablation JSON with 'phase1', 'phase2', 'train', 'val' and 'seeds' entries.")
@click.option("--fresh", is_flag=True, help="Retrain arms even when cached results match.")
@click.pass_obj
def ablate(ctx: Context, suite, config_path, fresh):
    """Run every arm of a table suite and write a comparison JSON ordered by AP50."""
    try:
        spec = ablation_preset()
        if config_path:
            user = _read_json(Path(config_path), "ablation config")
            unknown = set(user) - set(spec)
            if unknown:
                raise ConfigError(f"unknown ablation field {sorted(unknown)[0]!r}", sorted(unknown)[0])
            for key, value in user.items():
                spec[key] = {**spec[key], **value} if isinstance(spec[key], dict) else value
        seeds = [ctx.seed] if ctx.seed is not None else list(spec["seeds"])
        c1 = TrainConfig.from_dict({**spec["phase1"], "phase": 1})
        c2 = TrainConfig.from_dict({**spec["phase2"], "phase": 2})
        train_m = DatasetManifest.from_dict(spec["train"])
        val_m = DatasetManifest.from_dict(spec["val"])
    except (ConfigError, TypeError) as exc:
        _usage(exc)
    from .data import synthesize
    out = ctx.out_dir / "ablation"
    summary = run_suite(suite, c1, c2, synthesize(train_m), synthesize(val_m), seeds, out, reuse=not fresh)
    write_run_record(out / suite, ctx, spec, {"config": config_path} if config_path else {},
                     {"comparison": out / f"{suite}.json"})
    click.echo(json.dumps(summary, indent=1))


if __name__ == "__main__":
    main()
