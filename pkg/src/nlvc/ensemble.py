"""bfloat16 checkpoint compression and score-averaging ensembles with repeated subsampling."""
from __future__ import annotations

import zlib
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from .bf16 import bf16_to_f32_array, f32_to_bf16_array
from .checkpoint import Checkpoint
from .data import LabeledVideo
from .models import VideoModel, forward_batch, model_forward, pad_batch
from .numerics import derive_seed, make_rng
from .training import subsample_frames


def quantize_checkpoint(ck: Checkpoint) -> Checkpoint:
    """Re-encode every f32 tensor as bf16 codes (round to nearest even)."""
    out = OrderedDict()
    for name, arr in ck.tensors.items():
        out[name] = arr if arr.dtype == np.uint16 else f32_to_bf16_array(arr)
    return Checkpoint(out, ck.step)


def dequantize_checkpoint(ck: Checkpoint) -> Checkpoint:
    out = OrderedDict()
    for name, arr in ck.tensors.items():
        out[name] = bf16_to_f32_array(arr) if arr.dtype == np.uint16 else arr
    return Checkpoint(out, ck.step)


def quantize_model(model: VideoModel) -> VideoModel:
    """Copy of ``model`` whose parameters went through a bf16 round trip."""
    q = model.copy()
    for name, p in q.params.items():
        p[...] = bf16_to_f32_array(f32_to_bf16_array(p))
    return q


@dataclass
class EnsembleModel:
    members: list
    weights: list = field(default_factory=list)

    def __post_init__(self):
        if not self.members:
            raise ValueError("ensemble needs at least one member")
        classes = {m.config.num_classes for m in self.members}
        if len(classes) != 1:
            raise ValueError(f"ensemble members disagree on class count: {sorted(classes)}")
        if not self.weights:
            self.weights = [1.0] * len(self.members)
        if len(self.weights) != len(self.members) or any(w < 0 for w in self.weights) \
                or sum(self.weights) <= 0:
            raise ValueError("ensemble weights must be non-negative, one per member, not all zero")

    @property
    def num_classes(self) -> int:
        return self.members[0].config.num_classes


def run_seed(seed: int, run: int, video_id: str) -> int:
    """Subsampling seed for one (run, video): SplitMix64 fold of (seed, run, crc32(id))."""
    return derive_seed(seed, run, zlib.crc32(video_id.encode("utf-8")))


def _combine(scores: list[np.ndarray], weights) -> np.ndarray:
    w = np.asarray(weights, dtype=np.float64)
    total = np.zeros_like(scores[0], dtype=np.float64)
    for s, wi in zip(scores, w):
        total += wi * s
    return total / w.sum()


def ensemble_predict(e: EnsembleModel, video: LabeledVideo, runs: int = 1, frames: int = 30,
                     seed: int = 0) -> np.ndarray:
    """Mean member probability over ``runs`` independent frame subsamples.

    For a single member, one run and ``frames >= N`` this is exactly
    ``model_forward`` on the whole video.
    """
    if runs < 1:
        raise ValueError("runs must be >= 1")
    total = np.zeros(e.num_classes)
    for r in range(runs):
        sub = subsample_frames(video, frames, make_rng(run_seed(seed, r, video.id)))
        total += _combine([model_forward(m, sub.visual, sub.audio) for m in e.members], e.weights)
    return total / runs


def predict_dataset(e: EnsembleModel, videos: list[LabeledVideo], runs: int = 1, frames: int = 30,
                    seed: int = 0, batch_size: int = 64) -> np.ndarray:
    """Batched ``ensemble_predict`` over many videos; (V, C) float64.

    Uses the same per-run subsamples as ``ensemble_predict``; results agree with
    the per-video path up to float rounding from padding.
    """
    if runs < 1:
        raise ValueError("runs must be >= 1")
    out = np.zeros((len(videos), e.num_classes))
    for r in range(runs):
        subs = [subsample_frames(v, frames, make_rng(run_seed(seed, r, v.id))) for v in videos]
        for start in range(0, len(subs), batch_size):
            chunk = subs[start:start + batch_size]
            vis, aud, mask = pad_batch([(v.visual, v.audio) for v in chunk])
            scores = [forward_batch(m, vis, aud, mask)[0] for m in e.members]
            out[start:start + len(chunk)] += _combine(scores, e.weights)
    return out / runs
