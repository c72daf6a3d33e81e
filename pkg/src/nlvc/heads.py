"""Dense projection, context gating and the mixture-of-experts classifier."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import f64, out_dtype, outer_sum, sigmoid, softmax_vjp


def _sum_batch(x: np.ndarray) -> np.ndarray:
    return x.reshape(-1, x.shape[-1]).sum(axis=0)


_outer_batch = outer_sum


# --------------------------------------------------------------------------
# dense
# --------------------------------------------------------------------------

def dense_forward(x, W, b):
    if np.shape(x)[-1] != np.shape(W)[0]:
        raise ValueError(f"dense dims mismatch: x {np.shape(x)}, W {np.shape(W)}")
    xf = f64(x)
    return xf @ f64(W) + f64(b), (xf, W)


def dense_backward(dy, cache):
    xf, W = cache
    dy = f64(dy)
    return dy @ f64(W).T, {"w": _outer_batch(xf, dy), "b": _sum_batch(dy)}


# --------------------------------------------------------------------------
# context gating
# --------------------------------------------------------------------------

@dataclass
class ContextGateParams:
    W: np.ndarray  # (F, F)
    b: np.ndarray  # (F,)


def context_gate_forward(y, p: ContextGateParams):
    y = np.asarray(y)
    F = y.shape[-1]
    if p.W.shape != (F, F) or p.b.shape != (F,):
        raise ValueError(f"context gate expects ({F},{F}) weights, got {p.W.shape}")
    yf = f64(y)
    s = sigmoid(yf @ f64(p.W) + f64(p.b))
    return s * yf, (yf, s, p)


def context_gate_backward(dz, cache):
    yf, s, p = cache
    dz = f64(dz)
    da = dz * yf * s * (1.0 - s)
    dy = dz * s + da @ f64(p.W).T
    return dy, {"w": _outer_batch(yf, da), "b": _sum_batch(da)}


def context_gate(y, p: ContextGateParams) -> np.ndarray:
    """sigmoid(y W + b) * y."""
    z, _ = context_gate_forward(y, p)
    return z.astype(out_dtype(y, p.W, p.b), copy=False)


# --------------------------------------------------------------------------
# mixture of experts
# --------------------------------------------------------------------------

@dataclass
class MoeParams:
    gate_w: np.ndarray    # (F, C*E), column c*E + e
    gate_b: np.ndarray    # (C*E,)
    expert_w: np.ndarray  # (F, C*E)
    expert_b: np.ndarray  # (C*E,)
    num_experts: int

    @property
    def num_classes(self) -> int:
        return self.gate_w.shape[1] // self.num_experts


def moe_forward(v, p: MoeParams):
    v = np.asarray(v)
    E, C = p.num_experts, p.num_classes
    if v.shape[-1] != p.gate_w.shape[0] or p.expert_w.shape != p.gate_w.shape \
            or p.gate_w.shape[1] != C * E:
        raise ValueError(f"MoE dims mismatch: v {v.shape}, gate_w {p.gate_w.shape}, "
                         f"expert_w {p.expert_w.shape}, E={E}")
    vf = f64(v)
    lead = v.shape[:-1]
    gl = (vf @ f64(p.gate_w) + f64(p.gate_b)).reshape(lead + (C, E))
    gl -= gl.max(axis=-1, keepdims=True)
    g = np.exp(gl)
    g /= g.sum(axis=-1, keepdims=True)
    e = sigmoid((vf @ f64(p.expert_w) + f64(p.expert_b)).reshape(lead + (C, E)))
    probs = (g * e).sum(axis=-1)
    return probs, (vf, g, e, p)


def moe_backward(dprobs, cache):
    vf, g, e, p = cache
    dprobs = f64(dprobs)[..., None]
    de = dprobs * g
    dg = dprobs * e
    dexp = (de * e * (1.0 - e)).reshape(vf.shape[:-1] + (-1,))
    dgate = softmax_vjp(g, dg).reshape(vf.shape[:-1] + (-1,))
    dv = dexp @ f64(p.expert_w).T + dgate @ f64(p.gate_w).T
    return dv, {
        "gate_w": _outer_batch(vf, dgate),
        "gate_b": _sum_batch(dgate),
        "expert_w": _outer_batch(vf, dexp),
        "expert_b": _sum_batch(dexp),
    }


def moe_predict(v, p: MoeParams) -> np.ndarray:
    """Per class: sum_e softmax_e(gate logits) * sigmoid(expert logits)."""
    probs, _ = moe_forward(v, p)
    return probs.astype(out_dtype(v, p.gate_w, p.expert_w), copy=False)
