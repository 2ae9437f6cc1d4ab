import json

import numpy as np
import pytest
import torch

import deyo.trainer as trainer
from deyo.config import ConfigError
from deyo.data import DatasetManifest, synthesize
from deyo.trainer import (CheckpointError, FreezeViolation, TrainConfig, TrainingDiverged, init_phase2,
                          model_from_checkpoint, open_checkpoint, run_inference, save_checkpoint,
                          state_checksums, train_phase1, train_phase2)

SMALL = {"image_size": 64, "batch_size": 4, "num_queries": 20, "eval_every": 100,
         "optimizer": {"kind": "adamw", "lr": 1e-3, "weight_decay": 1e-4}, "warmup_steps": 5}


@pytest.fixture(scope="module")
def samples():
    return synthesize(DatasetManifest(seed=21, size=8, image_size=64))


@pytest.fixture(scope="module")
def p1(samples, tmp_path_factory):
    cfg = TrainConfig.from_dict({**SMALL, "phase": 1, "epochs": 1, "max_steps": 2})
    return train_phase1(cfg, samples, samples[:2], tmp_path_factory.mktemp("p1")).checkpoint


def _p2_cfg(**kw):
    return TrainConfig.from_dict({**SMALL, "phase": 2, "epochs": 1, **kw})


def test_config_errors_name_the_field():
    for data, field in (({"epochz": 3}, "epochz"), ({"freeze_spec": "all"}, "freeze_spec"),
                        ({"optimizer": {"kind": "adamw", "lr": -1}}, "optimizer.lr"),
                        ({"optimizer": {"kind": "sgd"}}, "optimizer.kind"),
                        ({"model": {"neck_channels": [8, 8]}}, "model.neck_channels"),
                        ({"num_queries": 500, "image_size": 64}, "num_queries")):
        with pytest.raises(ConfigError) as err:
            TrainConfig.from_dict(data)
        assert err.value.field == field, data


def test_config_hash_is_stable():
    assert TrainConfig().hash() == TrainConfig.from_dict(TrainConfig().to_dict()).hash()
    assert TrainConfig().hash() != TrainConfig(seed=1).hash()


def test_optimizer_excludes_frozen(p1):
    state = init_phase2(_p2_cfg(), p1)
    names = state.trainable_names()
    assert names and not any(n.startswith(("backbone.", "neck.")) for n in names)
    assert any(n.startswith("dense_head.") for n in names)
    opt, _ = trainer._make_optimizer(state.trainable_parameters(), _p2_cfg())
    in_opt = {id(p) for g in opt.param_groups for p in g["params"]}
    for n, p in state.model.named_parameters():
        assert (id(p) in in_opt) == (not n.startswith(("backbone.", "neck.")))
    unfrozen = init_phase2(_p2_cfg(freeze_spec="none"), p1)
    assert len(unfrozen.trainable_names()) == len(list(unfrozen.model.parameters()))


def test_inherited_weights_are_bitwise_copies(p1):
    state = init_phase2(_p2_cfg(), p1)
    src = p1.state_dict()
    own = state.model.state_dict()
    for k, v in src.items():
        assert torch.equal(own[k], v), k


def test_backbone_only_reinitializes_neck(p1):
    state = init_phase2(_p2_cfg(init_spec="backbone-only-from-phase1", freeze_spec="backbone-only"), p1)
    src = p1.state_dict()
    ours = state_checksums(state.model.state_dict(), ("backbone", "neck"))
    theirs = state_checksums(src, ("backbone", "neck"))
    backbone = [k for k in ours if k.startswith("backbone.")]
    neck = [k for k in ours if k.startswith("neck.") and k.endswith("weight")]
    assert all(ours[k] == theirs[k] for k in backbone)
    assert all(ours[k] != theirs[k] for k in neck)
    assert any(n.startswith("neck.") for n in state.trainable_names())


def test_random_init_needs_no_checkpoint():
    state = init_phase2(_p2_cfg(init_spec="random", freeze_spec="none"))
    assert state.frozen_prefixes == ()
    with pytest.raises(ConfigError):
        init_phase2(_p2_cfg())


def test_freeze_holds_for_100_steps(samples, p1, tmp_path):
    cfg = _p2_cfg(epochs=100, max_steps=100, optimizer={"kind": "adamw", "lr": 1e-2, "weight_decay": 0.1})
    state = init_phase2(cfg, p1)
    before = state_checksums(state.model.state_dict(), ("backbone", "neck"))
    decoder_before = state.model.decoder.layers[0].ffn[0].weight.clone()
    run = train_phase2(cfg, samples, state, samples[:2], tmp_path)
    after = state_checksums(state.model.state_dict(), ("backbone", "neck"))
    assert before == after == state_checksums(p1.state_dict(), ("backbone", "neck"))
    assert run.history[-1]["steps"] == 100
    assert all(h["frozen_checksums_ok"] for h in run.history)
    assert not torch.equal(decoder_before, state.model.decoder.layers[0].ffn[0].weight)
    # batch-norm statistics of frozen modules are buffers: they must not move either
    assert open_checkpoint(tmp_path / "last.ckpt").sidecar["frozen_checksums"] == after


def test_tampering_is_detected(p1):
    state = init_phase2(_p2_cfg(), p1)
    with torch.no_grad():
        next(state.model.neck.parameters()).add_(1.0)
    with pytest.raises(FreezeViolation):
        state.verify_frozen()


def test_cdn_off_logs_zero_denoising_terms(samples, p1, tmp_path):
    cfg = _p2_cfg(cdn_enabled=False, epochs=2, max_steps=3)
    train_phase2(cfg, samples, init_phase2(cfg, p1), samples[:2], tmp_path)
    steps = [json.loads(l) for l in (tmp_path / "log.jsonl").read_text().splitlines()]
    steps = [s for s in steps if s["kind"] == "step"]
    assert len(steps) == 3
    assert all(s["cls_dn"] == s["l1_dn"] == s["giou_dn"] == 0.0 for s in steps)
    on = tmp_path / "on"
    cfg = _p2_cfg(max_steps=1)
    train_phase2(cfg, samples, init_phase2(cfg, p1), samples[:2], on)
    first = json.loads((on / "log.jsonl").read_text().splitlines()[0])
    assert first["cls_dn"] > 0


def test_save_load_gives_identical_predictions(samples, p1, tmp_path):
    state = init_phase2(_p2_cfg(), p1)
    ckpt = save_checkpoint(tmp_path / "m.ckpt", state.model, state.model.cfg, 2, _p2_cfg(), 0)
    loaded = model_from_checkpoint(ckpt.path)
    a = run_inference(state.model, samples[:3])
    b = run_inference(loaded, samples[:3])
    for k in a:
        assert np.array_equal(a[k].boxes, b[k].boxes) and np.array_equal(a[k].scores, b[k].scores)
    dense = model_from_checkpoint(p1.path)
    assert type(dense).__name__ == "DenseDetector"


def test_corrupted_checkpoints_are_rejected(p1, tmp_path):
    state = init_phase2(_p2_cfg(), p1)
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, state.model, state.model.cfg, 2, _p2_cfg(), 0)
    side = path.with_name("m.ckpt.json")
    good = side.read_text()
    side.write_text(good[: len(good) // 2])
    with pytest.raises(CheckpointError, match="corrupted"):
        open_checkpoint(path)
    data = json.loads(good)
    del data["frozen_checksums"]
    side.write_text(json.dumps(data))
    with pytest.raises(CheckpointError, match="frozen_checksums"):
        open_checkpoint(path)
    side.write_text(good)
    blob = bytearray(path.read_bytes())
    blob[-20] ^= 0xFF
    path.write_bytes(bytes(blob))
    with pytest.raises(CheckpointError, match="sha256"):
        open_checkpoint(path)
    side.unlink()
    with pytest.raises(CheckpointError, match="missing sidecar"):
        open_checkpoint(path)
    with pytest.raises(CheckpointError, match="no such"):
        open_checkpoint(tmp_path / "absent.ckpt")


def test_empty_dataset_rejected(p1):
    with pytest.raises(ConfigError):
        train_phase1(TrainConfig.from_dict({**SMALL, "phase": 1}), [])
    with pytest.raises(ConfigError):
        train_phase2(_p2_cfg(), [], init_phase2(_p2_cfg(), p1))


def test_architecture_mismatch(p1):
    cfg = _p2_cfg(model={"neck_channels": [32, 48, 64]})
    with pytest.raises(CheckpointError, match="mismatch") as err:
        init_phase2(cfg, p1)
    assert "neck" in str(err.value)


def test_divergence_reports_last_good(samples, tmp_path, monkeypatch):
    real = trainer.dense_loss
    calls = {"n": 0}

    def flaky(*args, **kw):
        loss, comps = real(*args, **kw)
        calls["n"] += 1
        return (loss * float("nan"), comps) if calls["n"] > 2 else (loss, comps)

    monkeypatch.setattr(trainer, "dense_loss", flaky)
    cfg = TrainConfig.from_dict({**SMALL, "phase": 1, "epochs": 3})
    with pytest.raises(TrainingDiverged) as err:
        train_phase1(cfg, samples, samples[:2], tmp_path)
    assert err.value.last_good == tmp_path / "last.ckpt"


def test_mosaic_switched_off_for_last_tenth():
    cfg = _p2_cfg(epochs=20)
    assert [trainer._mosaic_on(cfg, e) for e in range(20)] == [True] * 18 + [False] * 2
    assert not any(trainer._mosaic_on(_p2_cfg(epochs=5, mosaic_enabled=False), e) for e in range(5))


def test_in_memory_runs(samples, p1):
    cfg = _p2_cfg(max_steps=2)
    run = train_phase2(cfg, samples, init_phase2(cfg, p1), samples[:2])
    assert run.checkpoint.path is None and run.final_eval is not None
    assert type(model_from_checkpoint(run.checkpoint)).__name__ == "DEYO"
