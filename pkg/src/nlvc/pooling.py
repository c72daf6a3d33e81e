"""Descriptor aggregation: soft assignment, NetVLAD, NetRVLAD, hard VLAD and Soft-BoF.

All pooling functions accept ``X`` of shape ``(..., N, D)`` and an optional
frame mask ``(..., N)`` (1 = real frame, 0 = padding). VLAD-family outputs are
``(..., K, D)``; Soft-BoF outputs ``(..., K)``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import f64, l2_normalize, l2_normalize_vjp, out_dtype, outer_sum, softmax_vjp


@dataclass
class ClusterParams:
    w: np.ndarray  # (K, D)
    b: np.ndarray  # (K,)
    c: np.ndarray | None = None  # (K, D), VLAD only

    @property
    def K(self) -> int:
        return self.w.shape[0]

    @property
    def D(self) -> int:
        return self.w.shape[1]


def init_cluster_params(rng: np.random.Generator, K: int, D: int, alpha: float = 1.0,
                        with_centers: bool = True, dtype=np.float32) -> ClusterParams:
    """NetVLAD-style init: c ~ N(0, 1/sqrt(D)), w = 2*alpha*c, b = -alpha*||c||^2."""
    c = rng.normal(0.0, 1.0 / np.sqrt(D), size=(K, D))
    w = 2.0 * alpha * c
    b = -alpha * (c * c).sum(axis=1)
    return ClusterParams(w.astype(dtype), b.astype(dtype), c.astype(dtype) if with_centers else None)


def _check_dims(X: np.ndarray, p: ClusterParams) -> None:
    if X.ndim < 2 or X.shape[-1] != p.D:
        raise ValueError(f"descriptor dim {X.shape[-1:]} does not match cluster dim {p.D}")
    if p.b.shape != (p.K,):
        raise ValueError(f"bias shape {p.b.shape} != ({p.K},)")
    if p.c is not None and p.c.shape != p.w.shape:
        raise ValueError(f"center shape {p.c.shape} != {p.w.shape}")


def _masked(A: np.ndarray, mask) -> np.ndarray:
    return A if mask is None else A * f64(mask)[..., None]


# --------------------------------------------------------------------------
# soft assignment
# --------------------------------------------------------------------------

def soft_assign_forward(X, p: ClusterParams):
    X = np.asarray(X)
    _check_dims(X, p)
    logits = f64(X) @ f64(p.w).T + f64(p.b)
    logits -= logits.max(axis=-1, keepdims=True)
    e = np.exp(logits)
    A = e / e.sum(axis=-1, keepdims=True)
    return A, (X, p, A)


def soft_assign(X, p: ClusterParams) -> np.ndarray:
    """Row i is softmax_k(w_k . x_i + b_k); shape (..., N, K)."""
    A, _ = soft_assign_forward(X, p)
    return A.astype(out_dtype(X, p.w, p.b), copy=False)


def soft_assign_backward(dA, cache):
    X, p, A = cache
    dL = softmax_vjp(A, f64(dA))
    Xf = f64(X)
    dX = dL @ f64(p.w)
    dw = outer_sum(dL, Xf)
    db = dL.reshape(-1, dL.shape[-1]).sum(axis=0)
    return dX, dw, db


# --------------------------------------------------------------------------
# VLAD family
# --------------------------------------------------------------------------

def netvlad_forward(X, p: ClusterParams, mask=None, residual: bool = True):
    A, sa_cache = soft_assign_forward(X, p)
    Am = _masked(A, mask)
    V = np.swapaxes(Am, -1, -2) @ f64(X)  # (..., K, D)
    if residual:
        if p.c is None:
            raise ValueError("NetVLAD needs cluster centers")
        V = V - Am.sum(axis=-2)[..., None] * f64(p.c)
    return V, (sa_cache, Am, mask, residual)


def netvlad_backward(dV, cache):
    """Returns (dX, {'w', 'b', 'c'})."""
    sa_cache, Am, mask, residual = cache
    X, p, _ = sa_cache
    dV = f64(dV)
    Xf = f64(X)
    # dAm[n,k] = dV_k . x_n  (- dV_k . c_k)
    dAm = Xf @ np.swapaxes(dV, -1, -2)
    grads = {}
    if residual:
        c = f64(p.c)
        dAm = dAm - (dV * c).sum(axis=-1)[..., None, :]
        grads["c"] = -(Am.sum(axis=-2)[..., None] * dV).reshape(-1, *dV.shape[-2:]).sum(axis=0)
    dX = Am @ dV
    dA = _masked(dAm, mask)
    dX_sa, dw, db = soft_assign_backward(dA, sa_cache)
    grads["w"], grads["b"] = dw, db
    return dX + dX_sa, grads


def netvlad_pool(X, p: ClusterParams, mask=None) -> np.ndarray:
    """V[k, j] = sum_i a_k(x_i) (x_i[j] - c_k[j]); shape (..., K, D)."""
    V, _ = netvlad_forward(X, p, mask)
    return V.astype(out_dtype(X, p.w, p.b, p.c), copy=False)


def netrvlad_pool(X, p: ClusterParams, mask=None) -> np.ndarray:
    """V[k, j] = sum_i a_k(x_i) x_i[j]; centers are ignored."""
    V, _ = netvlad_forward(X, p, mask, residual=False)
    return V.astype(out_dtype(X, p.w, p.b), copy=False)


def vlad_pool_hard(X, centers) -> np.ndarray:
    """Classic VLAD with nearest-center assignment; ties go to the lowest index."""
    X = np.asarray(X)
    centers = np.asarray(centers)
    Xf, C = f64(X), f64(centers)
    d2 = ((Xf[:, None, :] - C[None, :, :]) ** 2).sum(axis=-1)
    nearest = np.argmin(d2, axis=1)  # argmin returns the first minimum
    V = np.zeros_like(C)
    for i, k in enumerate(nearest):
        V[k] += Xf[i] - C[k]
    return V.astype(out_dtype(X, centers), copy=False)


def normalize_vlad_forward(V):
    V = f64(V)
    intra = l2_normalize(V)
    flat = intra.reshape(*V.shape[:-2], -1)
    return l2_normalize(flat), (V, flat)


def normalize_vlad_backward(dout, cache):
    V, flat = cache
    dflat = l2_normalize_vjp(flat, f64(dout))
    return l2_normalize_vjp(V, dflat.reshape(V.shape))


def normalize_vlad(V) -> np.ndarray:
    """Intra-normalize each cluster row, flatten, then inter-normalize."""
    out, _ = normalize_vlad_forward(V)
    return out.astype(out_dtype(V), copy=False)


# --------------------------------------------------------------------------
# Soft-BoF
# --------------------------------------------------------------------------

def soft_bof_forward(X, p: ClusterParams, mask=None):
    A, sa_cache = soft_assign_forward(X, p)
    if mask is None:
        n = np.full(A.shape[:-2] + (1,), A.shape[-2], dtype=np.float64)
    else:
        n = f64(mask).sum(axis=-1)[..., None]
    h = _masked(A, mask).sum(axis=-2) / n
    return h, (sa_cache, mask, n)


def soft_bof_backward(dh, cache):
    sa_cache, mask, n = cache
    A = sa_cache[2]
    dA = np.broadcast_to((f64(dh) / n)[..., None, :], A.shape)
    dX, dw, db = soft_assign_backward(_masked(dA, mask), sa_cache)
    return dX, {"w": dw, "b": db}


def soft_bof_pool(X, p: ClusterParams, mask=None) -> np.ndarray:
    """Mean soft-assignment histogram over frames; sums to 1."""
    h, _ = soft_bof_forward(X, p, mask)
    return h.astype(out_dtype(X, p.w, p.b), copy=False)
