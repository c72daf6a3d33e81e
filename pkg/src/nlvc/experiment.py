"""Scaled-down synthetic pipeline: train three model families, average, quantize, ensemble.

Shared by the acceptance suite and ``scripts/synthetic_pipeline.py``.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .data import SyntheticSpec, gen_synthetic
from .ensemble import EnsembleModel, predict_dataset, quantize_model
from .metrics import gap_at_k
from .models import ModelConfig, VideoModel, build_model
from .numerics import derive_seed, make_rng
from .training import TrainConfig, average_checkpoints, load_into, train

# name -> scaled config overrides
MEMBERS = {
    "M1": dict(family="LFNL-NetVLAD", k_visual=8, k_audio=4, hidden=64, experts=4),
    "M4": dict(family="SoftBoF4K", k_visual=64, k_audio=32, hidden=64, experts=2),
    "M6": dict(family="GRU", hidden=32, experts=2),
}


@dataclass
class PipelineConfig:
    data: SyntheticSpec = field(default_factory=lambda: SyntheticSpec(videos=2000, classes=20, d_visual=64,
                                                                       d_audio=16, noise=0.5, seed=7))
    holdout: float = 0.2
    train: TrainConfig = field(default_factory=lambda: TrainConfig(steps=2000, batch_size=64, frames=30,
                                                                   checkpoint_every=250, seed=7))
    members: tuple = ("M1", "M4", "M6")
    average_last: int = 4
    eval_frames: int = 30
    eval_runs: int = 10
    eval_seed: int = 11


@dataclass
class PipelineResult:
    gap: dict          # label -> GAP@20 (labels like "M1", "M1 avg", "ensemble", "... R=10")
    drift: dict        # member -> max |p_f32 - p_bf16| on the eval set
    checkpoints: dict  # member -> list of Checkpoint
    seconds: dict      # member -> training time


def _gap(probs, videos) -> float:
    return gap_at_k(list(probs), [v.labels for v in videos], 20)


def run_pipeline(cfg: PipelineConfig | None = None, log=print) -> PipelineResult:
    cfg = cfg or PipelineConfig()
    ds = gen_synthetic(cfg.data)
    train_set, test_set = ds.split(cfg.holdout)
    gap, drift, cks, secs = {}, {}, {}, {}
    models: dict[str, VideoModel] = {}
    for i, name in enumerate(cfg.members):
        mc = ModelConfig(num_classes=ds.num_classes, d_visual=ds.d_visual, d_audio=ds.d_audio, **MEMBERS[name])
        model = build_model(mc, make_rng(derive_seed(cfg.train.seed, 0x6D6F, i)))
        t0 = time.perf_counter()
        res = train(model, train_set.videos, cfg.train)
        secs[name] = time.perf_counter() - t0
        cks[name] = res.checkpoints
        models[name] = model

        def score(m, runs):
            return predict_dataset(EnsembleModel([m]), test_set.videos, runs=runs,
                                   frames=cfg.eval_frames, seed=cfg.eval_seed)

        p = score(model, 1)
        gap[name] = _gap(p, test_set.videos)
        gap[f"{name} R={cfg.eval_runs}"] = _gap(score(model, cfg.eval_runs), test_set.videos)
        drift[name] = float(np.max(np.abs(p - score(quantize_model(model), 1))))
        if cfg.average_last > 1:
            avg = load_into(model.copy(), average_checkpoints(res.checkpoints[-cfg.average_last:]))
            gap[f"{name} avg"] = _gap(score(avg, 1), test_set.videos)
        log(f"{name}: GAP={gap[name]:.5f} R={cfg.eval_runs} GAP={gap[f'{name} R={cfg.eval_runs}']:.5f} "
            f"drift={drift[name]:.2e} train={secs[name]:.1f}s")

    ens = EnsembleModel([models[n] for n in cfg.members])
    for runs in (1, cfg.eval_runs):
        p = predict_dataset(ens, test_set.videos, runs=runs, frames=cfg.eval_frames, seed=cfg.eval_seed)
        key = "ensemble" if runs == 1 else f"ensemble R={runs}"
        gap[key] = _gap(p, test_set.videos)
        log(f"{key}: GAP={gap[key]:.5f}")
    return PipelineResult(gap, drift, cks, secs)
