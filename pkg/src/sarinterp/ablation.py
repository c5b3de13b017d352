"""Desk-scale ablation: three-stage SAR vs. original AR vs. no smoothing."""
from __future__ import annotations

import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dataio import stack, synth_generate
from .depgraph import build_original_ar, build_three_stage, topological_schedule
from .inference import interpolate_slerp, run_schedule, run_without_smoothing
from .metrics import evaluate, mean_report
from .model import ModelConfig, load_model
from .motion import Skeleton
from .training import TrainConfig, train

DEFAULT_KEYFRAMES = (1, 9, 19, 29)


@dataclass
class AblationSettings:
    n_train: int = 200
    n_test: int = 40
    J: int = 4
    T: int = 29
    fps: float = 30.0
    keyframes: tuple = DEFAULT_KEYFRAMES
    steps1: int = 2000
    steps2: int = 500
    lr: float = 1e-3
    batch_size: int = 16
    data_seed: int = 100


def _report(frames, test, skeleton) -> dict:
    return mean_report(evaluate(f, g, skeleton) for f, g in zip(frames, test))


def run_ablation(seed: int, settings: AblationSettings | None = None, workdir=None) -> dict:
    """Train and evaluate every variant for one seed; ``{variant: metrics}``."""
    s = settings or AblationSettings()
    data = stack(synth_generate(s.n_train + s.n_test, s.J, s.T + 2, s.fps, seed=s.data_seed + seed))
    train_set, test = data[:s.n_train], data[s.n_train:]
    skeleton = Skeleton.chain(s.J)
    mc = ModelConfig(J=s.J, N=s.T + 2)
    starts, ends = test[:, 0], test[:, -1]
    with tempfile.TemporaryDirectory() as tmp:
        root = Path(workdir or tmp)
        sar = topological_schedule(build_three_stage(s.T, s.keyframes))
        cfg = TrainConfig(batch_size=s.batch_size, steps1=s.steps1, steps2=s.steps2, lr=s.lr,
                          seed=seed, log_every=max(1, s.steps1), checkpoint_dir=str(root / "sar"))
        full, _ = train(train_set, sar, mc, cfg)
        step1 = load_model(root / "sar" / "step1.sarm")
        ar = topological_schedule(build_original_ar(s.T))
        ar_cfg = TrainConfig(batch_size=s.batch_size, steps1=s.steps1, steps2=0, lr=s.lr,
                             seed=seed, log_every=max(1, s.steps1))
        ar_model, _ = train(train_set, ar, mc, ar_cfg)
        return {
            "full": _report(run_schedule(starts, ends, full, sar).numpy(), test, skeleton),
            "nosmooth": _report(run_without_smoothing(starts, ends, step1, sar).numpy(), test, skeleton),
            "ar": _report(run_schedule(starts, ends, ar_model, ar).numpy(), test, skeleton),
            "slerp": _report([interpolate_slerp(a, b, s.T).frames for a, b in zip(starts, ends)],
                             test, skeleton),
        }


def orderings(result: dict) -> dict:
    return {
        "sar_beats_ar_mpjae": result["full"]["mpjae"] < result["ar"]["mpjae"],
        "smoothing_shrinks_neighbor_gap":
            abs(result["full"]["neighbor_gap"]) < abs(result["nosmooth"]["neighbor_gap"]),
    }


if __name__ == "__main__":
    import sys

    for seed in map(int, sys.argv[1:] or ["0"]):
        res = run_ablation(seed)
        for name, row in res.items():
            print(seed, name, {k: round(v, 4) for k, v in row.items()})
        print(seed, orderings(res), flush=True)
