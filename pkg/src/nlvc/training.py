"""Loss, Adam, frame subsampling, the training loop and checkpoint averaging."""
from __future__ import annotations

import logging
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from .bf16 import bf16_to_f32_array
from .checkpoint import Checkpoint, SchemaMismatchError
from .data import LabeledVideo
from .models import VideoModel, backward_batch, forward_batch, pad_batch
from .numerics import ParamStore, derive_seed, f64, make_rng

log = logging.getLogger(__name__)

PROB_CLAMP = 1e-6


class NonFiniteGradientError(FloatingPointError):
    def __init__(self, name: str, step: int):
        super().__init__(f"non-finite gradient in parameter {name!r} at step {step}; update aborted")
        self.name = name
        self.step = step


# --------------------------------------------------------------------------
# loss
# --------------------------------------------------------------------------

def label_vector(labels, num_classes: int) -> np.ndarray:
    y = np.zeros(num_classes)
    y[list(labels)] = 1.0
    return y


def bce_from_targets(probs, targets):
    """Mean-over-classes binary cross-entropy per row, with dL/dprobs.

    Probabilities are clamped to [1e-6, 1 - 1e-6]; the gradient is zero where
    the clamp is active.
    """
    p = f64(probs)
    y = f64(targets)
    pc = np.clip(p, PROB_CLAMP, 1.0 - PROB_CLAMP)
    C = p.shape[-1]
    loss = -(y * np.log(pc) + (1.0 - y) * np.log1p(-pc)).sum(axis=-1) / C
    grad = -(y / pc - (1.0 - y) / (1.0 - pc)) / C
    grad = np.where((p < PROB_CLAMP) | (p > 1.0 - PROB_CLAMP), 0.0, grad)
    return loss, grad


def bce_loss(probs, labels) -> tuple[float, np.ndarray]:
    """Loss and gradient for one video's (C,) probabilities and its label set."""
    probs = np.asarray(probs)
    loss, grad = bce_from_targets(probs, label_vector(labels, probs.shape[-1]))
    return float(loss), grad


# --------------------------------------------------------------------------
# Adam
# --------------------------------------------------------------------------

@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adam_step(store: ParamStore, state: AdamState, lr: float = 2e-4, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> None:
    """One bias-corrected Adam update from ``store.grads``, in place."""
    for name, g in store.grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(name, state.t + 1)
    state.t += 1
    t = state.t
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, p in store.items():
        g = f64(store.grads[name])
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros(p.shape)
            state.v[name] = np.zeros(p.shape)
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        step = lr * (m / c1) / (np.sqrt(v / c2) + eps)
        p[...] = (f64(p) - step).astype(p.dtype)


# --------------------------------------------------------------------------
# subsampling
# --------------------------------------------------------------------------

def subsample_indices(n: int, m: int, rng: np.random.Generator) -> np.ndarray:
    if m < 1:
        raise ValueError("frame count M must be >= 1")
    if n <= m:
        return np.arange(n)
    return np.sort(rng.choice(n, size=m, replace=False))


def subsample_frames(video: LabeledVideo, m: int, rng: np.random.Generator) -> LabeledVideo:
    """Keep ``m`` frames chosen uniformly without replacement, in temporal order."""
    idx = subsample_indices(video.num_frames, m, rng)
    if len(idx) == video.num_frames:
        return video
    return LabeledVideo(video.id, video.visual[idx], video.audio[idx], video.labels)


# --------------------------------------------------------------------------
# training loop
# --------------------------------------------------------------------------

@dataclass
class TrainConfig:
    steps: int = 1000
    batch_size: int = 64
    frames: int = 30
    seed: int = 0
    checkpoint_every: int = 0  # 0: initial and final checkpoints only
    lr: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    log_every: int = 0


@dataclass
class TrainResult:
    checkpoints: list
    losses: list


def batch_loss_and_grads(model: VideoModel, videos: list[LabeledVideo]):
    """Mean BCE over the batch and the matching parameter gradients."""
    vis, aud, mask = pad_batch([(v.visual, v.audio) for v in videos])
    probs, cache = forward_batch(model, vis, aud, mask)
    C = model.config.num_classes
    targets = np.stack([label_vector(v.labels, C) for v in videos])
    losses, dprobs = bce_from_targets(probs, targets)
    B = len(videos)
    grads = backward_batch(model, cache, dprobs / B)
    return float(losses.mean()), grads


def train(model: VideoModel, data: list[LabeledVideo], cfg: TrainConfig) -> TrainResult:
    """Adam on mini-batches of frame-subsampled videos; updates ``model`` in place.

    Batches walk a fresh permutation each epoch; a partial tail batch starts the
    next epoch instead. Checkpoints are taken at step 0, every
    ``checkpoint_every`` steps, and after the final step.
    """
    if not data:
        raise ValueError("training data is empty")
    rng = make_rng(derive_seed(cfg.seed, 0x7452))
    store = model.params
    state = AdamState()
    checkpoints = [Checkpoint.from_store(store, 0)]
    losses: list[float] = []
    B = min(cfg.batch_size, len(data))
    order = rng.permutation(len(data))
    cursor = 0
    for step in range(1, cfg.steps + 1):
        if cursor + B > len(order):
            order = rng.permutation(len(data))
            cursor = 0
        batch = [subsample_frames(data[i], cfg.frames, rng) for i in order[cursor:cursor + B]]
        cursor += B
        loss, grads = batch_loss_and_grads(model, batch)
        store.set_grads(grads)
        adam_step(store, state, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
        losses.append(loss)
        if cfg.log_every and step % cfg.log_every == 0:
            log.info("step %d loss %.5f", step, np.mean(losses[-cfg.log_every:]))
        if (cfg.checkpoint_every and step % cfg.checkpoint_every == 0) or step == cfg.steps:
            if checkpoints[-1].step != step:
                checkpoints.append(Checkpoint.from_store(store, step))
    return TrainResult(checkpoints, losses)


# --------------------------------------------------------------------------
# checkpoint averaging
# --------------------------------------------------------------------------

def _as_f32(arr: np.ndarray) -> np.ndarray:
    return bf16_to_f32_array(arr) if arr.dtype == np.uint16 else arr.astype(np.float32, copy=False)


def average_checkpoints(cks: list[Checkpoint]) -> Checkpoint:
    """Element-wise mean of every tensor (float32 result).

    Values are sorted along the checkpoint axis before a float64 sum, which
    makes the result independent of argument order.
    """
    if not cks:
        raise ValueError("need at least one checkpoint to average")
    schema = cks[0].schema()
    for i, ck in enumerate(cks[1:], start=1):
        if ck.schema() != schema:
            raise SchemaMismatchError(f"checkpoint {i} has a different name/shape schema")
    out = OrderedDict()
    for name, _ in schema:
        stack = np.stack([f64(_as_f32(ck.tensors[name])) for ck in cks])
        stack.sort(axis=0)
        total = np.zeros(stack.shape[1:])
        for row in stack:
            total += row
        out[name] = (total / len(cks)).astype(np.float32)
    return Checkpoint(out, max(ck.step for ck in cks))


def load_into(model: VideoModel, ck: Checkpoint) -> VideoModel:
    """Copy checkpoint tensors (decoding bf16) into ``model``'s parameters."""
    model.params.load_state_dict({n: _as_f32(a) for n, a in ck.tensors.items()})
    return model
