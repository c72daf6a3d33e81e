"""Dense-array kernels, seeded randomness, parameter storage and gradient checking.

Arrays are plain numpy arrays. Parameters are stored as float32; every kernel
accumulates in float64 and narrows the result back to the widest input dtype,
so float32 in gives float32 out and float64 in (gradient-check mode) stays
float64 end to end.
"""
from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Callable, Iterator

import numpy as np

STORAGE_DTYPE = np.float32
NORM_EPS = 1e-12

_MASK64 = (1 << 64) - 1


# --------------------------------------------------------------------------
# dtype handling
# --------------------------------------------------------------------------

def out_dtype(*arrays) -> np.dtype:
    """Floating dtype that results from combining ``arrays`` (float32 minimum)."""
    dt = np.result_type(*[np.asarray(a).dtype for a in arrays if a is not None], np.float32)
    if not np.issubdtype(dt, np.floating):
        dt = np.dtype(np.float64)
    return dt


def f64(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


# --------------------------------------------------------------------------
# randomness
# --------------------------------------------------------------------------

def splitmix64(x: int) -> int:
    """SplitMix64 finalizer on a 64-bit integer."""
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x ^ (x >> 31)


def derive_seed(seed: int, *keys: int) -> int:
    """Fold integer keys into a 64-bit seed: h = splitmix64(h ^ splitmix64(key)) per key."""
    h = splitmix64(seed & _MASK64)
    for k in keys:
        h = splitmix64(h ^ splitmix64(k & _MASK64))
    return h


def make_rng(seed: int) -> np.random.Generator:
    """Philox4x64-10 generator keyed directly by the 64-bit seed (counter starts at 0).

    Keying Philox directly skips numpy's SeedSequence hashing, so the raw
    64-bit stream depends only on ``seed``.
    """
    return np.random.Generator(np.random.Philox(key=seed & _MASK64))


# --------------------------------------------------------------------------
# kernels
# --------------------------------------------------------------------------

def matmul(a, b) -> np.ndarray:
    """Matrix product with float64 accumulation, narrowed to the input dtype."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim < 1 or b.ndim < 1 or a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ValueError(f"matmul dimension mismatch: {a.shape} x {b.shape}")
    return np.matmul(f64(a), f64(b)).astype(out_dtype(a, b), copy=False)


def outer_sum(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """sum over leading (batch/row) axes of outer(a[..., i], b[..., j])."""
    return a.reshape(-1, a.shape[-1]).T @ b.reshape(-1, b.shape[-1])


def softmax_rows(x) -> np.ndarray:
    """Softmax along the last axis, max-subtracted."""
    x = np.asarray(x)
    z = f64(x)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return (e / e.sum(axis=-1, keepdims=True)).astype(out_dtype(x), copy=False)


def softmax_vjp(s: np.ndarray, ds: np.ndarray) -> np.ndarray:
    """Pull ``ds`` back through a softmax whose output was ``s`` (last axis)."""
    return s * (ds - (ds * s).sum(axis=-1, keepdims=True))


def sigmoid(x) -> np.ndarray:
    x = np.asarray(x)
    z = f64(x)
    # split form avoids overflow in exp for large |x|
    e = np.exp(-np.abs(z))
    out = np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return out.astype(out_dtype(x), copy=False)


def l2_normalize(v, eps: float = NORM_EPS) -> np.ndarray:
    """Unit-normalize along the last axis; vectors with norm below ``eps`` pass through."""
    v = np.asarray(v)
    z = f64(v)
    n = np.sqrt((z * z).sum(axis=-1, keepdims=True))
    safe = np.where(n < eps, 1.0, n)
    return (z / safe).astype(out_dtype(v), copy=False)


def l2_normalize_vjp(v: np.ndarray, dy: np.ndarray, eps: float = NORM_EPS) -> np.ndarray:
    z = f64(v)
    n = np.sqrt((z * z).sum(axis=-1, keepdims=True))
    guarded = n < eps
    safe = np.where(guarded, 1.0, n)
    y = z / safe
    dv = (dy - y * (y * dy).sum(axis=-1, keepdims=True)) / safe
    return np.where(guarded, dy, dv)


# --------------------------------------------------------------------------
# parameter store
# --------------------------------------------------------------------------

class ParamStore:
    """Ordered name -> array mapping with matching gradient buffers."""

    def __init__(self, items=None):
        self._params: OrderedDict[str, np.ndarray] = OrderedDict()
        self.grads: dict[str, np.ndarray] = {}
        for name, value in (items or {}).items():
            self.add(name, value)

    def add(self, name: str, value) -> np.ndarray:
        if name in self._params:
            raise KeyError(f"duplicate parameter name {name!r}")
        arr = np.array(value, copy=True)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(STORAGE_DTYPE)
        self._params[name] = arr
        return arr

    def __getitem__(self, name: str) -> np.ndarray:
        return self._params[name]

    def __setitem__(self, name: str, value) -> None:
        if name not in self._params:
            raise KeyError(name)
        cur = self._params[name]
        value = np.asarray(value)
        if value.shape != cur.shape:
            raise ValueError(f"shape mismatch for {name!r}: {value.shape} vs {cur.shape}")
        cur[...] = value

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def names(self) -> list[str]:
        return list(self._params)

    def num_elements(self) -> int:
        return int(sum(p.size for p in self._params.values()))

    def zero_grad(self) -> None:
        self.grads = {n: np.zeros_like(p) for n, p in self._params.items()}

    def set_grads(self, grads: dict[str, np.ndarray]) -> None:
        missing = set(self._params) - set(grads)
        if missing:
            raise KeyError(f"missing gradients for {sorted(missing)}")
        self.grads = {n: np.asarray(grads[n]).astype(p.dtype, copy=False)
                      for n, p in self._params.items()}

    def astype(self, dtype) -> "ParamStore":
        return ParamStore(OrderedDict((n, p.astype(dtype)) for n, p in self._params.items()))

    def copy(self) -> "ParamStore":
        return ParamStore(self._params)

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((n, p.copy()) for n, p in self._params.items())

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        if set(state) != set(self._params):
            extra = sorted(set(state) - set(self._params))
            missing = sorted(set(self._params) - set(state))
            raise KeyError(f"state mismatch: missing={missing} unexpected={extra}")
        for n in self._params:
            self[n] = np.asarray(state[n]).astype(self._params[n].dtype)


# --------------------------------------------------------------------------
# gradient check
# --------------------------------------------------------------------------

@dataclass
class GradCheckReport:
    passed: bool
    max_rel_error: float
    worst: tuple[str, tuple] | None = None
    checked: int = 0
    message: str = ""
    errors: dict[str, float] = field(default_factory=dict)

    def __bool__(self) -> bool:
        return self.passed


def grad_check(f: Callable[[ParamStore], tuple[float, dict[str, np.ndarray]]],
               store: ParamStore, eps: float = 1e-5, tol: float = 1e-3,
               abs_floor: float = 1e-6, names=None) -> GradCheckReport:
    """Compare analytic gradients against central differences, element by element.

    ``f(store)`` returns ``(loss, grads)``. It is evaluated on a float64 copy of
    ``store``. Relative error per element is
    ``|analytic - numeric| / max(|analytic|, |numeric|, abs_floor)``.
    """
    work = store.astype(np.float64)
    loss, grads = f(work)
    if not np.isfinite(loss):
        return GradCheckReport(False, float("inf"), None, 0, "non-finite loss at base point")
    worst_err, worst_at, checked = 0.0, None, 0
    per_name: dict[str, float] = {}
    for name in (names or work.names()):
        p = work[name]
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != p.shape:
            return GradCheckReport(False, float("inf"), (name, ()), checked,
                                   f"gradient shape {g.shape} != parameter shape {p.shape} for {name}")
        name_err = 0.0
        for idx in np.ndindex(p.shape):
            orig = p[idx]
            p[idx] = orig + eps
            fp = f(work)[0]
            p[idx] = orig - eps
            fm = f(work)[0]
            p[idx] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                return GradCheckReport(False, float("inf"), (name, idx), checked,
                                       f"non-finite loss when perturbing {name}{list(idx)}")
            num = (fp - fm) / (2 * eps)
            ana = g[idx]
            err = abs(ana - num) / max(abs(ana), abs(num), abs_floor)
            checked += 1
            name_err = max(name_err, err)
            if err > worst_err:
                worst_err, worst_at = err, (name, idx)
        per_name[name] = name_err
    passed = worst_err < tol
    msg = "ok" if passed else f"max relative error {worst_err:.3e} at {worst_at}"
    return GradCheckReport(passed, worst_err, worst_at, checked, msg, per_name)
