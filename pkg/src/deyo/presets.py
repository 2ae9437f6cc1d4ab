"""Desk-scale settings for the ablation suites (500 training and 100 validation images)."""
from __future__ import annotations

import copy

_ABLATION = {
    "seeds": [0, 1, 2],
    "train": {"seed": 1000, "size": 500, "image_size": 64, "split": "train"},
    "val": {"seed": 2000, "size": 100, "image_size": 64, "split": "val"},
    "phase1": {"image_size": 64, "epochs": 30, "batch_size": 8, "num_queries": 20,
               "optimizer": {"kind": "adamw", "lr": 1e-3, "weight_decay": 1e-4},
               "warmup_steps": 100, "grad_clip": 10.0, "eval_every": 5, "log_steps": False},
    # 64 px inputs give only 84 tokens, so 20 queries keeps the selection sparse
    "phase2": {"image_size": 64, "epochs": 25, "batch_size": 8, "num_queries": 20,
               "optimizer": {"kind": "adamw", "lr": 1e-4, "weight_decay": 1e-4},
               "warmup_steps": 500, "grad_clip": 0.1, "eval_every": 5, "log_steps": False},
}


def ablation_preset() -> dict:
    """Fresh copy of the default ablation settings; the CLI merges user JSON on top."""
    return copy.deepcopy(_ABLATION)
