"""Embedded-Gaussian non-local block over the K cluster descriptors of a VLAD output."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import f64, out_dtype, outer_sum, softmax_vjp


@dataclass
class NonLocalParams:
    theta: np.ndarray  # (D, D_inner)
    phi: np.ndarray    # (D, D_inner)
    g: np.ndarray      # (D, D_inner)
    out: np.ndarray    # (D_inner, D); zero-initialized so a fresh block is the identity

    @property
    def D(self) -> int:
        return self.theta.shape[0]


def inner_dim(D: int) -> int:
    return max(1, D // 2)


def init_nonlocal_params(rng: np.random.Generator, D: int, d_inner: int | None = None,
                         dtype=np.float32) -> NonLocalParams:
    di = d_inner or inner_dim(D)
    std = 1.0 / np.sqrt(D)
    return NonLocalParams(
        theta=rng.normal(0.0, std, (D, di)).astype(dtype),
        phi=rng.normal(0.0, std, (D, di)).astype(dtype),
        g=rng.normal(0.0, std, (D, di)).astype(dtype),
        out=np.zeros((di, D), dtype=dtype),
    )


def _check(V: np.ndarray, p: NonLocalParams) -> None:
    di = p.theta.shape[1]
    if V.shape[-1] != p.D or p.phi.shape != p.theta.shape or p.g.shape != p.theta.shape \
            or p.out.shape != (di, p.D):
        raise ValueError(f"non-local dims mismatch: V {V.shape}, theta {p.theta.shape}, "
                         f"phi {p.phi.shape}, g {p.g.shape}, out {p.out.shape}")


def nonlocal_forward(V, p: NonLocalParams):
    V = np.asarray(V)
    _check(V, p)
    Vf = f64(V)
    T = Vf @ f64(p.theta)
    P = Vf @ f64(p.phi)
    G = Vf @ f64(p.g)
    S = T @ np.swapaxes(P, -1, -2)
    S = S - S.max(axis=-1, keepdims=True)
    E = np.exp(S)
    A = E / E.sum(axis=-1, keepdims=True)
    Y = A @ G
    out = Y @ f64(p.out) + Vf
    return out, (Vf, p, T, P, G, A, Y)


def nonlocal_backward(dout, cache):
    """Returns (dV, {'theta', 'phi', 'g', 'out'})."""
    Vf, p, T, P, G, A, Y = cache
    dout = f64(dout)
    Wo = f64(p.out)
    d_out = outer_sum(Y, dout)
    dY = dout @ Wo.T
    dA = dY @ np.swapaxes(G, -1, -2)
    dG = np.swapaxes(A, -1, -2) @ dY
    dS = softmax_vjp(A, dA)
    dT = dS @ P
    dP = np.swapaxes(dS, -1, -2) @ T
    grads = {
        "theta": outer_sum(Vf, dT),
        "phi": outer_sum(Vf, dP),
        "g": outer_sum(Vf, dG),
        "out": d_out,
    }
    dV = dout + dT @ f64(p.theta).T + dP @ f64(p.phi).T + dG @ f64(p.g).T
    return dV, grads


def attention_matrix(V, p: NonLocalParams) -> np.ndarray:
    """Row-stochastic K x K relation matrix softmax((V Wtheta)(V Wphi)^T)."""
    _, cache = nonlocal_forward(V, p)
    return cache[5].astype(out_dtype(V, p.theta, p.phi), copy=False)


def nonlocal_block(V, p: NonLocalParams) -> np.ndarray:
    """attention(V) @ (V Wg) @ Wout + V."""
    out, _ = nonlocal_forward(V, p)
    return out.astype(out_dtype(V, p.theta, p.phi, p.g, p.out), copy=False)
