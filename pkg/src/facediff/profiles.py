"""Named configuration profiles.

``desk`` fits a single CPU core in minutes; ``paper`` carries the full-scale
sizes (512-d, 8 heads, 8 blocks, 1000 steps, batch 16, lr 1e-4) and is only
practical on accelerators.
"""
from __future__ import annotations

import copy

PROFILES = {
    "desk": {
        "model": {"d_model": 64, "n_heads": 4, "n_blocks": 2, "d_cond": 64, "steps": 100},
        "data": {"n_clips": 500, "T": 50},
        "stage1": {"lr": 1e-3, "batch_size": 8, "iterations": 12_000, "lr_schedule": "cosine", "warmup": 200},
        "stage2": {"lr": 1e-3, "batch_size": 8, "iterations": 3000, "p_swap": 0.5, "lr_schedule": "cosine",
                   "warmup": 100},
        "guidance": {"alpha": 2.0, "beta": 2.0},
        "classifier": {"d_model": 64, "n_heads": 4, "epochs": 10},
        "dtype": "float32",
    },
    "paper": {
        "model": {"d_model": 512, "n_heads": 8, "n_blocks": 8, "d_cond": 512, "steps": 1000},
        "data": {"n_clips": 5000, "T": 100},
        "stage1": {"lr": 1e-4, "batch_size": 16, "iterations": 400_000, "lr_schedule": "constant", "warmup": 0},
        "stage2": {"lr": 1e-4, "batch_size": 16, "iterations": 300_000, "p_swap": 0.5, "lr_schedule": "constant",
                   "warmup": 0},
        "guidance": {"alpha": 2.0, "beta": 2.0},
        "classifier": {"d_model": 512, "n_heads": 8, "epochs": 200},
        "dtype": "float64",
    },
}


def get_profile(name: str) -> dict:
    if name not in PROFILES:
        raise KeyError(f"unknown profile {name!r}; choose from {sorted(PROFILES)}")
    return copy.deepcopy(PROFILES[name])
