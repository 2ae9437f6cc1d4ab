"""
Two-phase training on a toy set
===============================

Phase one trains the convolutional dense detector with one-to-many labels.
Phase two copies its backbone and neck, freezes them, and trains the query
decoder from scratch with Hungarian matching. The run below is tiny and only
shows the mechanics; expect low scores.
"""
import numpy as np
import torch

from deyo.data import DatasetManifest, synthesize
from deyo.trainer import (TrainConfig, evaluate_model, init_phase2, run_inference, state_checksums,
                          train_phase1, train_phase2)

torch.set_num_threads(1)
train = synthesize(DatasetManifest(seed=1, size=32, image_size=64))
val = synthesize(DatasetManifest(seed=2, size=8, image_size=64, split="val"))

############################################################
# Phase one: the dense branch.

# short warmup, since the default is sized for much longer runs
common = {"image_size": 64, "batch_size": 8, "num_queries": 20, "warmup_steps": 20,
          "eval_every": 10, "log_steps": False}
p1 = train_phase1(TrainConfig.from_dict({**common, "phase": 1, "epochs": 30,
                                         "optimizer": {"kind": "adamw", "lr": 1e-3, "weight_decay": 1e-4}}),
                  train, val)
print("dense AP50:", p1.checkpoint.eval["AP50"])

############################################################
# Phase two: inherit, freeze, decode.

cfg = TrainConfig.from_dict({**common, "phase": 2, "epochs": 30})
state = init_phase2(cfg, p1.checkpoint)
print("trainable tensors:", len(state.trainable_names()), "frozen prefixes:", state.frozen_prefixes)
before = state_checksums(state.model.state_dict(), ("backbone", "neck"))
p2 = train_phase2(cfg, train, state, val)
after = state_checksums(state.model.state_dict(), ("backbone", "neck"))
print("frozen weights untouched:", before == after)
print([(h["epoch"], round(h["loss"], 3)) for h in p2.history][::5])

############################################################
# One-to-one outputs need no NMS; compare both ways.

plain = evaluate_model(state.model, val)
with_nms = evaluate_model(state.model, val, nms_iou=0.7)
print(plain.table())
print("AP50 without / with NMS: %.3f / %.3f" % (plain.AP50, with_nms.AP50))

dets = run_inference(state.model, val[:1])[0]
print("top detections:", np.round(dets.scores[:5], 3).tolist())
