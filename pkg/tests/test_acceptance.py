"""End-to-end acceptance checks, one test per criterion.

Each test prints a single ``criterion N: PASS|FAIL`` line; the lines are also
collected into the terminal summary. Training runs are cached under
``$DEYO_ACCEPTANCE_DIR`` (default ``<repo>/.acceptance``) keyed by a hash of
their configs and data, so a rerun with unchanged settings reads the results
back. Delete the directory to retrain from scratch.
"""
import json
import os
import statistics
import time
from pathlib import Path

import numpy as np
import pytest
import torch

from deyo.config import ModelConfig, config_hash
from deyo.data import DatasetManifest, synthesize
from deyo.dense import DenseOutput, assign_one_to_many, dense_loss, make_anchors
from deyo.denoising import build_attention_mask, build_cdn
from deyo.evaluation import Detections, GroundTruth, compute_ap, nms, nms_from_iou
from deyo.geometry import box_cxcywh_to_xyxy, giou, iou
from deyo.losses import set_prediction_loss
from deyo.matching import hungarian
from deyo.presets import ablation_preset
from deyo.query import DEYO, DecoderOutput
from deyo.trainer import (ARMS, TrainConfig, evaluate_model, init_phase2, model_from_checkpoint,
                          open_checkpoint, run_arms, run_inference, set_determinism, state_checksums,
                          train_phase1, train_phase2)
from oracles import brute_force_assignment, exhaustive_ap, finite_difference_grad, pixel_overlap

pytestmark = pytest.mark.slow

CACHE = Path(os.environ.get("DEYO_ACCEPTANCE_DIR", Path(__file__).resolve().parent.parent / ".acceptance"))
VERDICTS: list[str] = []


def verdict(n: int, name: str, ok: bool, detail: str):
    line = f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {name}  ({detail})"
    VERDICTS.append(line)
    print(line)
    assert ok, line


# ---------------------------------------------------------------- 1. matching


def test_criterion_01_matching_optimality():
    t0 = time.time()
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(200):
        n, m = rng.integers(1, 8, 2)
        cost = rng.normal(size=(n, m))
        worst = max(worst, abs(hungarian(cost).total(cost) - brute_force_assignment(cost)))
    elapsed = time.time() - t0
    verdict(1, "hungarian equals brute-force minimum on 200 matrices", worst == 0.0 and elapsed < 10,
            f"max |diff| {worst:.1e}, {elapsed:.1f}s")


# ---------------------------------------------------------------- 2. geometry


def _random_corner_box(rng):
    x = np.sort(rng.uniform(0, 1, 2))
    y = np.sort(rng.uniform(0, 1, 2))
    return (x[0], y[0], x[1], y[1])


def test_criterion_02_geometry_oracle():
    t0 = time.time()
    rng = np.random.default_rng(99)
    worst = 0.0
    for _ in range(1000):
        a, b = _random_corner_box(rng), _random_corner_box(rng)
        o_iou, o_giou = pixel_overlap(a, b)
        worst = max(worst, abs(iou(a, b) - o_iou), abs(giou(a, b) - o_giou))
    hand = abs(giou((0, 0, 1, 1), (1, 1, 2, 2)) + 0.5)
    elapsed = time.time() - t0
    verdict(2, "iou/giou match the 512x512 pixel oracle", worst < 5e-3 and hand < 1e-6 and elapsed < 30,
            f"max |diff| {worst:.2e}, hand case {hand:.1e}, {elapsed:.1f}s")


# ---------------------------------------------------------------- 3. gradients


def _set_loss_grad_error():
    g = torch.Generator().manual_seed(11)
    logits = torch.randn(1, 5, 3, generator=g, dtype=torch.float64)
    boxes = torch.rand(1, 5, 4, generator=g, dtype=torch.float64) * 0.4 + 0.2
    boxes[0, 0] = torch.tensor([0.32, 0.283, 0.21, 0.17])
    boxes[0, 2] = torch.tensor([0.68, 0.62, 0.28, 0.22])
    tg = [{"labels": torch.tensor([0, 2]),
           "boxes": torch.tensor([[0.3, 0.3, 0.2, 0.2], [0.7, 0.6, 0.3, 0.2]], dtype=torch.float64)}]

    def loss(lg, bx):
        return set_prediction_loss(DecoderOutput([lg] * 2, [bx] * 2, queries=None), tg).total

    x, lg = boxes.clone().requires_grad_(True), logits.clone().requires_grad_(True)
    loss(lg, x).backward()
    fd_boxes = finite_difference_grad(lambda a: float(loss(logits, torch.from_numpy(a))), boxes.numpy().copy())
    fd_logits = finite_difference_grad(lambda a: float(loss(torch.from_numpy(a), boxes)), logits.numpy().copy())
    return max(np.linalg.norm(x.grad.numpy() - fd_boxes) / np.linalg.norm(fd_boxes),
               np.linalg.norm(lg.grad.numpy() - fd_logits) / np.linalg.norm(fd_logits))


def _dense_loss_grad_error():
    anchors = make_anchors([(16, 16), (8, 8), (4, 4)], (8, 16, 32), 128, dtype=torch.float64)
    gt = torch.tensor([[0.4, 0.6, 0.15, 0.2], [0.7, 0.3, 0.3, 0.25]], dtype=torch.float64)
    asg = assign_one_to_many(gt, anchors)
    n = len(anchors)
    rng = np.random.default_rng(3)
    logits0 = torch.tensor(rng.normal(0, 1, (1, n, 3)))
    boxes0 = torch.full((1, n, 4), 0.3, dtype=torch.float64)
    pos = asg.positives.nonzero().flatten()
    boxes0[0, pos] = gt[asg.gt_index[pos]] + torch.tensor(rng.uniform(-0.03, 0.03, (len(pos), 4)))
    tg = [{"labels": torch.tensor([1, 2]), "boxes": gt}]
    pick = pos[:: max(1, len(pos) // 4)][:4]

    def loss_of(flat):
        lg, bx = logits0.clone(), boxes0.clone()
        lg[0, pick] = flat[: 3 * len(pick)].reshape(len(pick), 3)
        bx[0, pick] = flat[3 * len(pick):].reshape(len(pick), 4)
        out = DenseOutput(lg, torch.zeros(1, n, 4, dtype=torch.float64), bx, anchors)
        return dense_loss(out, [asg], tg)[0]

    x0 = torch.cat([logits0[0, pick].reshape(-1), boxes0[0, pick].reshape(-1)])
    x = x0.clone().requires_grad_(True)
    loss_of(x).backward()
    fd = finite_difference_grad(lambda v: loss_of(torch.from_numpy(v)).item(), x0.numpy().copy())
    return np.linalg.norm(x.grad.numpy() - fd) / np.linalg.norm(fd)


def test_criterion_03_gradient_checks():
    t0 = time.time()
    a, b = _set_loss_grad_error(), _dense_loss_grad_error()
    elapsed = time.time() - t0
    verdict(3, "set-prediction and dense losses match finite differences",
            a < 1e-3 and b < 1e-3 and elapsed < 60, f"rel err {a:.1e} / {b:.1e}, {elapsed:.1f}s")


# ---------------------------------------------------------------- 4. freeze invariance


def test_criterion_04_freeze_invariance(tmp_path):
    samples = synthesize(DatasetManifest(seed=4, size=16, image_size=64))
    base = {"image_size": 64, "batch_size": 4, "num_queries": 20, "eval_every": 100, "log_steps": False}
    p1 = train_phase1(TrainConfig.from_dict({**base, "phase": 1, "epochs": 1, "max_steps": 3}),
                      samples, samples[:4], tmp_path / "p1").checkpoint
    reference = state_checksums(p1.state_dict(), ("backbone", "neck"))
    seen = []
    cfg = TrainConfig.from_dict({**base, "phase": 2, "epochs": 5,
                                 "optimizer": {"kind": "adamw", "lr": 1e-2, "weight_decay": 0.1}})
    state = init_phase2(cfg, p1)
    original = state.verify_frozen

    def recording():
        seen.append(state_checksums(state.model.state_dict(), ("backbone", "neck")))
        original()

    state.verify_frozen = recording
    train_phase2(cfg, samples, state, samples[:4], tmp_path / "p2")
    ok = len(seen) == cfg.epochs + 1 and all(s == reference for s in seen)
    verdict(4, "backbone+neck checksums identical at every epoch", ok,
            f"{len(seen)} checkpoints of {len(reference)} tensors")


# ---------------------------------------------------------------- 5. CDN isolation


def test_criterion_05_cdn_isolation():
    t0 = time.time()
    torch.manual_seed(5)
    model = DEYO(ModelConfig(image_size=64, num_queries=8, hidden_dim=32, num_heads=4,
                             num_decoder_layers=2)).double().eval()
    images = torch.rand(1, 3, 64, 64, dtype=torch.float64)
    tg = [{"labels": torch.tensor([0, 2]),
           "boxes": torch.tensor([[0.3, 0.3, 0.2, 0.2], [0.6, 0.6, 0.3, 0.3]], dtype=torch.float64)}]
    dn = build_cdn(tg, 3, np.random.default_rng(0), max_queries=40)
    with torch.no_grad():
        seq, queries = model.generate_queries(model.forward_pyramid(images), (64, 64))
    k_dn, k = dn.num_queries, queries.content.shape[1]
    mask = build_attention_mask(k, dn.group_size, dn.num_groups)
    dn_content = model.label_embed(dn.labels).detach()
    dn_ref = dn.boxes.double()

    def matching_outputs(content_dn, ref_dn):
        content = torch.cat([content_dn, queries.content], 1)
        reference = torch.cat([ref_dn, queries.reference], 1)
        logits, boxes = model.decoder(seq.tokens, seq.pos, content, reference, mask)
        return torch.cat([logits[-1][:, k_dn:], boxes[-1][:, k_dn:]], -1)

    with torch.no_grad():
        live = matching_outputs(dn_content, dn_ref)
        zeroed = matching_outputs(torch.zeros_like(dn_content), torch.full_like(dn_ref, 0.5))
    bitwise = torch.equal(live, zeroed)

    def probe(flat):
        c = torch.from_numpy(flat).reshape(dn_content.shape)
        with torch.no_grad():
            return float(matching_outputs(c, dn_ref).sum())

    fd = finite_difference_grad(probe, dn_content.numpy().copy().reshape(-1))
    cross = float(np.abs(fd).max())
    elapsed = time.time() - t0
    verdict(5, "denoising inputs do not reach matching queries", bitwise and cross <= 1e-10 and elapsed < 60,
            f"bitwise {bitwise}, max |FD cross-grad| {cross:.1e}, {k_dn} dn x {k} matching, {elapsed:.1f}s")


# ---------------------------------------------------------------- 6. overfit


OVERFIT_P1 = {"phase": 1, "image_size": 128, "epochs": 300, "warmup_steps": 50, "grad_clip": 10.0,
              "optimizer": {"kind": "adamw", "lr": 1e-3, "weight_decay": 1e-4}, "eval_every": 50,
              "log_steps": False}
OVERFIT_P2 = {"phase": 2, "image_size": 128, "epochs": 500, "max_steps": 1000, "eval_every": 100,
              "optimizer": {"kind": "adamw", "lr": 1e-4, "weight_decay": 1e-4}, "log_steps": False}


@pytest.fixture(scope="module")
def overfit():
    samples = synthesize(DatasetManifest(seed=0, size=16, image_size=128))
    c1, c2 = TrainConfig.from_dict(OVERFIT_P1), TrainConfig.from_dict(OVERFIT_P2)
    out = CACHE / "overfit"
    key = config_hash({"p1": c1.to_dict(), "p2": c2.to_dict(), "n": len(samples)})
    meta = out / "result.json"
    if meta.exists() and json.loads(meta.read_text())["key"] == key and (out / "p2" / "last.ckpt").exists():
        result = json.loads(meta.read_text())
    else:
        t0 = time.time()
        r1 = train_phase1(c1, samples, out_dir=out / "p1")
        r2 = train_phase2(c2, samples, init_phase2(c2, r1.checkpoint), out_dir=out / "p2")
        result = {"key": key, "seconds": time.time() - t0, "steps": r2.history[-1]["steps"],
                  "dense_AP50": r1.history[-1]["eval"]["AP50"]}
        meta.write_text(json.dumps(result, indent=1))
    model = model_from_checkpoint(open_checkpoint(out / "p2" / "last.ckpt"))
    return samples, model, result


def test_criterion_06_overfit(overfit):
    samples, model, result = overfit
    ap50 = evaluate_model(model, samples).AP50
    ok = ap50 >= 0.90 and result["steps"] <= 1000 and result["seconds"] <= 20 * 60
    verdict(6, "16-image overfit reaches one-to-one AP50 >= 0.90", ok,
            f"AP50 {ap50:.3f}, {result['steps']} phase-2 steps, {result['seconds'] / 60:.1f} min")


def test_overfit_single_image_top1_hits_its_gt():
    sample = synthesize(DatasetManifest(seed=0, size=1, image_size=64))
    base = {"image_size": 64, "batch_size": 1, "num_queries": 20, "warmup_steps": 20, "eval_every": 1000,
            "augment": False, "log_steps": False, "optimizer": {"kind": "adamw", "lr": 1e-3, "weight_decay": 1e-4}}
    r1 = train_phase1(TrainConfig.from_dict({**base, "phase": 1, "epochs": 200}), sample)
    cfg = TrainConfig.from_dict({**base, "phase": 2, "epochs": 300})
    state = init_phase2(cfg, r1.checkpoint)
    train_phase2(cfg, sample, state)
    dets = run_inference(state.model, sample)[0]
    gt = box_cxcywh_to_xyxy(torch.as_tensor(sample[0].boxes)).numpy()
    top = box_cxcywh_to_xyxy(torch.as_tensor(dets.boxes[:1])).numpy()[0]
    assert max(iou(top, g) for g in gt) > 0.9


def test_overfit_nms_changes_little(overfit):
    samples, model, _ = overfit
    plain = evaluate_model(model, samples).AP50
    with_nms = evaluate_model(model, samples, nms_iou=0.7).AP50
    assert abs(plain - with_nms) < 0.005


# ---------------------------------------------------------------- 7-10. ablations


@pytest.fixture(scope="module")
def ablation():
    p = ablation_preset()
    train = synthesize(DatasetManifest.from_dict(p["train"]))
    val = synthesize(DatasetManifest.from_dict(p["val"]))
    set_determinism(0)
    c1 = TrainConfig.from_dict({**p["phase1"], "phase": 1})
    c2 = TrainConfig.from_dict({**p["phase2"], "phase": 2})
    t0 = time.time()
    results = run_arms(list(ARMS), c1, c2, train, val, p["seeds"], CACHE / "ablation", extra_eval=True)
    return results, time.time() - t0


def _median(results, arm, metric="AP50", source=None):
    return statistics.median((r[source] if source else r)[metric] for r in results[arm])


def _per_seed(results, arm, metric="AP50"):
    return ", ".join(f"{r[metric]:.3f}" for r in results[arm])


def test_criterion_07_table5_ordering(ablation):
    res, _ = ablation
    gaps = [a["AP50"] - b["AP50"] for a, b in zip(res["step-by-step"], res["one-to-one-scratch"])]
    gap = statistics.median(gaps)
    verdict(7, "step-by-step beats one-to-one from scratch by >= 2 AP50", gap >= 0.02,
            f"median gap {100 * gap:.1f} pts; step-by-step [{_per_seed(res, 'step-by-step')}], "
            f"scratch [{_per_seed(res, 'one-to-one-scratch')}]")


def test_criterion_08_table7_ordering(ablation):
    res, _ = ablation
    gaps = [a["AP50"] - b["AP50"] for a, b in zip(res["step-by-step"], res["backbone-only-init"])]
    gap = statistics.median(gaps)
    verdict(8, "backbone+neck init beats backbone-only init by >= 2 AP50", gap >= 0.02,
            f"median gap {100 * gap:.1f} pts; backbone-only [{_per_seed(res, 'backbone-only-init')}]")


def test_criterion_09_table8_ordering(ablation):
    res, _ = ablation
    frozen, unfrozen = _median(res, "frozen-no-mosaic", "AP"), _median(res, "unfrozen-no-mosaic", "AP")
    mosaic, no_mosaic = _median(res, "step-by-step", "AP"), _median(res, "frozen-no-mosaic", "AP")
    ok = frozen >= unfrozen and mosaic >= no_mosaic - 0.005
    verdict(9, "frozen >= unfrozen and mosaic does not hurt (AP)", ok,
            f"frozen {frozen:.3f} vs unfrozen {unfrozen:.3f}; mosaic {mosaic:.3f} vs off {no_mosaic:.3f}")


def test_criterion_10_nms_free(ablation):
    res, _ = ablation
    runs = res["step-by-step"]
    one_to_one = statistics.median(abs(r["nms_eval"]["AP50"] - r["AP50"]) for r in runs)
    dense = statistics.median(r["dense_nms_eval"]["AP50"] - r["dense_eval"]["AP50"] for r in runs)
    ok = one_to_one < 0.005 and dense >= 0.05
    verdict(10, "NMS barely moves one-to-one AP50 but the dense branch needs it", ok,
            f"one-to-one |delta| {100 * one_to_one:.2f} pts, dense loss without NMS {100 * dense:.1f} pts")


# ---------------------------------------------------------------- 11. determinism


def _short_run(out):
    samples = synthesize(DatasetManifest(seed=11, size=16, image_size=64))
    base = {"image_size": 64, "batch_size": 4, "num_queries": 20, "epochs": 2, "eval_every": 1,
            "log_steps": False, "seed": 3}
    p1 = train_phase1(TrainConfig.from_dict({**base, "phase": 1}), samples, samples[:8], out / "p1")
    cfg = TrainConfig.from_dict({**base, "phase": 2})
    p2 = train_phase2(cfg, samples, init_phase2(cfg, p1.checkpoint), samples[:8], out / "p2")
    return p1, p2


def test_criterion_11_determinism(tmp_path):
    a1, a2 = _short_run(tmp_path / "a")
    b1, b2 = _short_run(tmp_path / "b")
    same_loss = (a1.epoch0_loss == b1.epoch0_loss and a2.epoch0_loss == b2.epoch0_loss
                 and a1.history[0]["first_step_loss"] == b1.history[0]["first_step_loss"])
    drift = abs(a2.final_eval["AP50"] - b2.final_eval["AP50"])
    verdict(11, "same config and seed reproduce the run", same_loss and drift <= 1e-6,
            f"epoch-0 losses bitwise {same_loss}, final AP50 drift {drift:.1e}")


# ---------------------------------------------------------------- 12. metric oracles


_PALETTE = [(0.0, 0.0, 0.5, 0.5), (0.125, 0.0, 0.5, 0.5), (0.0, 0.0, 0.25, 0.5), (0.25, 0.25, 0.75, 0.75),
            (0.5, 0.5, 1.0, 1.0), (0.25, 0.125, 0.75, 0.625), (0.375, 0.25, 0.875, 0.75)]


def _cxcywh(b):
    return [(b[0] + b[2]) / 2, (b[1] + b[3]) / 2, b[2] - b[0], b[3] - b[1]]


def _nms_fixtures_pass():
    gt = (0.25, 0.25, 0.75, 0.75)
    single = Detections([_cxcywh(gt)], [0.5], [0])
    identical = Detections([_cxcywh(gt)] * 2, [0.8, 0.9], [0, 0])
    chain = Detections([_cxcywh((k, 0.0, 10.0 + k, 1.0)) for k in range(3)], [0.9, 0.8, 0.7], [0, 0, 0])
    overlap = np.array([[1.0, 0.8, 0.1], [0.8, 1.0, 0.8], [0.1, 0.8, 1.0]])
    return (np.array_equal(nms(single, 0.7).boxes, single.boxes)
            and nms(identical, 0.7).scores.tolist() == [0.9]
            and nms(chain, 0.7).scores.tolist() == [0.9, 0.7]
            and nms_from_iou(overlap, np.array([0.9, 0.8, 0.7]), 0.7).tolist() == [0, 2])


def test_criterion_12_metric_oracles():
    rng = np.random.default_rng(12)
    checked = mismatched = 0
    for _ in range(500):
        n_img = int(rng.integers(1, 3))
        gts = [(int(rng.integers(0, n_img)), _PALETTE[int(rng.integers(len(_PALETTE)))])
               for _ in range(int(rng.integers(1, 3)))]
        scores = rng.permutation(np.arange(1, 10))[: int(rng.integers(0, 4))] / 10
        dets = [(int(rng.integers(0, n_img)), float(s), _PALETTE[int(rng.integers(len(_PALETTE)))])
                for s in scores]
        det_map = {i: Detections([_cxcywh(b) for img, _, b in dets if img == i] or np.zeros((0, 4)),
                                 [s for img, s, _ in dets if img == i], [0] * sum(img == i for img, _, _ in dets))
                   for i in range(n_img)}
        gt_map = {i: GroundTruth([_cxcywh(b) for img, b in gts if img == i] or np.zeros((0, 4)),
                                 [0] * sum(img == i for img, _ in gts)) for i in range(n_img)}
        for thr in np.linspace(0.5, 0.95, 10):
            got = compute_ap(det_map, gt_map, num_classes=1, iou_thresholds=[thr]).AP
            mismatched += got != exhaustive_ap(dets, gts, thr)
            checked += 1
    nms_ok = _nms_fixtures_pass()
    verdict(12, "compute_ap equals the exhaustive PR oracle; nms fixtures hold", mismatched == 0 and nms_ok,
            f"{checked - mismatched}/{checked} AP fixtures exact, nms fixtures {'ok' if nms_ok else 'broken'}")
