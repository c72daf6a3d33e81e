"""Stacked GRU encoder with hand-written backprop through time.

Gate convention::

    z  = sigmoid(x Wz + h Uz + bz)
    r  = sigmoid(x Wr + h Ur + br)
    hc = tanh(x Wh + (r * h) Uh + bh)
    h' = (1 - z) * h + z * hc
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import f64, out_dtype, outer_sum, sigmoid

GATES = ("z", "r", "h")


@dataclass
class GruLayerParams:
    W: dict  # gate -> (D_in, H)
    U: dict  # gate -> (H, H)
    b: dict  # gate -> (H,)

    @property
    def H(self) -> int:
        return self.U["z"].shape[0]

    @property
    def D_in(self) -> int:
        return self.W["z"].shape[0]


def init_gru_layer(rng: np.random.Generator, D_in: int, H: int, dtype=np.float32) -> GruLayerParams:
    return GruLayerParams(
        W={g: rng.normal(0.0, 1.0 / np.sqrt(D_in), (D_in, H)).astype(dtype) for g in GATES},
        U={g: rng.normal(0.0, 1.0 / np.sqrt(H), (H, H)).astype(dtype) for g in GATES},
        b={g: np.zeros(H, dtype=dtype) for g in GATES},
    )


def _check_layer(x: np.ndarray, h: np.ndarray, p: GruLayerParams) -> None:
    H = p.H
    for g in GATES:
        if p.W[g].shape != (p.D_in, H) or p.U[g].shape != (H, H) or p.b[g].shape != (H,):
            raise ValueError(f"inconsistent GRU gate {g} shapes")
    if x.shape[-1] != p.D_in or h.shape[-1] != H:
        raise ValueError(f"GRU dims mismatch: x {x.shape}, h {h.shape}, D_in={p.D_in}, H={H}")


def _step(x, h, p: GruLayerParams):
    z = sigmoid(x @ f64(p.W["z"]) + h @ f64(p.U["z"]) + f64(p.b["z"]))
    r = sigmoid(x @ f64(p.W["r"]) + h @ f64(p.U["r"]) + f64(p.b["r"]))
    hc = np.tanh(x @ f64(p.W["h"]) + (r * h) @ f64(p.U["h"]) + f64(p.b["h"]))
    return (1.0 - z) * h + z * hc, (x, h, z, r, hc)


def gru_cell_step(x, h, p: GruLayerParams) -> np.ndarray:
    x, h = np.asarray(x), np.asarray(h)
    _check_layer(x, h, p)
    h_new, _ = _step(f64(x), f64(h), p)
    return h_new.astype(out_dtype(x, h, p.W["z"]), copy=False)


def _step_backward(dh_new, cache, p: GruLayerParams, grads):
    x, h, z, r, hc = cache
    dz = dh_new * (hc - h)
    dhc = dh_new * z
    dh = dh_new * (1.0 - z)
    dah = dhc * (1.0 - hc * hc)
    daz = dz * z * (1.0 - z)
    rh = r * h
    drh = dah @ f64(p.U["h"]).T
    dr = drh * h
    dh += drh * r
    dar = dr * r * (1.0 - r)
    dx = 0.0
    for g, da, hin in (("z", daz, h), ("r", dar, h), ("h", dah, rh)):
        grads["W"][g] += outer_sum(x, da)
        grads["U"][g] += outer_sum(hin, da)
        grads["b"][g] += da.reshape(-1, da.shape[-1]).sum(axis=0)
        dx = dx + da @ f64(p.W[g]).T
        if g != "h":
            dh = dh + da @ f64(p.U[g]).T
    return dx, dh


def _zero_layer_grads(p: GruLayerParams):
    return {k: {g: np.zeros(getattr(p, k)[g].shape) for g in GATES} for k in ("W", "U", "b")}


def gru_forward_full(X, stack: list[GruLayerParams], mask=None):
    """Run the stack over X (..., N, D). Returns (final top state, cache).

    Padded steps (mask 0) carry the previous state through unchanged, so with
    trailing padding the result is the state after the last real frame.
    """
    X = np.asarray(X)
    if X.shape[-2] < 1:
        raise ValueError("GRU needs at least one frame")
    if not stack:
        raise ValueError("GRU stack needs at least one layer")
    N = X.shape[-2]
    m = None if mask is None else f64(mask)
    seq = f64(X)
    caches = []
    for p in stack:
        h = np.zeros(seq.shape[:-2] + (p.H,))
        _check_layer(seq[..., 0, :], h, p)
        outs, steps = [], []
        for t in range(N):
            h_new, c = _step(seq[..., t, :], h, p)
            if m is not None:
                mt = m[..., t, None]
                h_new = mt * h_new + (1.0 - mt) * h
            steps.append(c)
            outs.append(h_new)
            h = h_new
        caches.append(steps)
        seq = np.stack(outs, axis=-2)
    return seq[..., -1, :], (caches, m, stack)


def gru_forward(X, stack: list[GruLayerParams], mask=None) -> np.ndarray:
    """Final hidden state of the top layer after feeding frames in order."""
    h, _ = gru_forward_full(X, stack, mask)
    return h.astype(out_dtype(X, stack[0].W["z"]), copy=False)


def gru_backward(dh_top, cache):
    """Backprop through time. Returns (dX, per-layer grad dicts)."""
    caches, m, stack = cache
    layer_grads = [None] * len(stack)
    N = len(caches[0])
    # gradient arriving at each output step of the current layer
    d_seq = [None] * N
    d_seq[N - 1] = f64(dh_top)
    for li in range(len(stack) - 1, -1, -1):
        p = stack[li]
        grads = _zero_layer_grads(p)
        dx_seq = [None] * N
        dh = 0.0
        for t in range(N - 1, -1, -1):
            if d_seq[t] is not None:
                dh = dh + d_seq[t]
            if m is not None:
                mt = m[..., t, None]
                dx, dh_prev = _step_backward(mt * dh, caches[li][t], p, grads)
                dh = dh_prev + (1.0 - mt) * dh
            else:
                dx, dh = _step_backward(dh, caches[li][t], p, grads)
            dx_seq[t] = dx
        layer_grads[li] = grads
        d_seq = dx_seq
    return np.stack(d_seq, axis=-2), layer_grads
