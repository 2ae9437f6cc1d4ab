"""
Ablation suites
===============

``run_suite`` trains each arm of a comparison on shared phase-one weights
and reports median AP50 over seeds. The settings here are shrunk so the script
finishes in a few minutes; ``deyo.presets.ablation_preset()`` holds the full
desk-scale configuration used by the acceptance tests.
"""
import json
import tempfile

import torch

from deyo.data import DatasetManifest, synthesize
from deyo.trainer import SUITES, TrainConfig, run_suite

torch.set_num_threads(1)
print({name: arms for name, arms in SUITES.items()})

train = synthesize(DatasetManifest(seed=1000, size=64, image_size=64))
val = synthesize(DatasetManifest(seed=2000, size=16, image_size=64, split="val"))
common = {"image_size": 64, "batch_size": 8, "num_queries": 30, "eval_every": 100, "log_steps": False}
p1 = TrainConfig.from_dict({**common, "phase": 1, "epochs": 6,
                            "optimizer": {"kind": "adamw", "lr": 1e-3, "weight_decay": 1e-4}})
p2 = TrainConfig.from_dict({**common, "phase": 2, "epochs": 4})

############################################################
# Step-by-step against a one-to-one detector trained from scratch.

with tempfile.TemporaryDirectory() as tmp:
    summary = run_suite("table5", p1, p2, train, val, seeds=(0,), out_dir=tmp)
print(json.dumps(summary["arms"], indent=1))
print("ordering:", summary["ordering_by_AP50"])
