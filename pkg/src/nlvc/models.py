"""The six video-model families and their end-to-end forward/backward passes.

Topologies (F = hidden size, MoE = mixture of experts):

* ``LFNL-NetVLAD``  per modality NetVLAD -> non-local -> intra/inter norm, concat,
  dense F, context gate, MoE
* ``LFNL-NetRVLAD`` same with NetRVLAD (no centers)
* ``EFNL-NetVLAD``  frame-wise concat, frame-level context gate, NetVLAD ->
  non-local -> norm, dense F, context gate, MoE
* ``SoftBoF4K`` / ``SoftBoF8K``  per modality Soft-BoF histogram, concat,
  dense F, context gate, MoE
* ``GRU``  frame-wise concat, stacked GRU, context gate, MoE

``video_gate="output"`` moves the video-level context gate from the MoE
input onto the MoE output probabilities.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from typing import Optional

import numpy as np

from . import heads, nonlocal_block as nl, pooling, sequence
from .heads import ContextGateParams, MoeParams
from .nonlocal_block import NonLocalParams
from .numerics import ParamStore, f64, out_dtype
from .pooling import ClusterParams
from .sequence import GATES, GruLayerParams

FAMILIES = ("LFNL-NetVLAD", "LFNL-NetRVLAD", "EFNL-NetVLAD", "SoftBoF4K", "SoftBoF8K", "GRU")
ALIASES = {f"M{i + 1}": f for i, f in enumerate(FAMILIES)}

_DEFAULTS = {
    # family: (k_visual, hidden, experts)
    "LFNL-NetVLAD": (64, 1024, 8),
    "LFNL-NetRVLAD": (64, 1024, 4),
    "EFNL-NetVLAD": (64, 1024, 2),
    "SoftBoF4K": (4096, 1024, 2),
    "SoftBoF8K": (8192, 1024, 2),
    "GRU": (None, 1200, 2),
}

VLAD_FAMILIES = ("LFNL-NetVLAD", "LFNL-NetRVLAD", "EFNL-NetVLAD")
BOF_FAMILIES = ("SoftBoF4K", "SoftBoF8K")


def canonical_family(name: str) -> str:
    name = ALIASES.get(name, name)
    if name not in FAMILIES:
        raise ValueError(f"unknown model family {name!r}; expected one of {', '.join(FAMILIES)}")
    return name


@dataclass
class ModelConfig:
    family: str = "LFNL-NetVLAD"
    num_classes: int = 3862
    d_visual: int = 1024
    d_audio: int = 128
    k_visual: Optional[int] = None
    k_audio: Optional[int] = None
    hidden: Optional[int] = None
    experts: Optional[int] = None
    gru_layers: int = 2
    video_gate: str = "input"
    alpha: float = 1.0

    def __post_init__(self):
        self.family = canonical_family(self.family)
        k, hidden, experts = _DEFAULTS[self.family]
        if self.k_visual is None:
            self.k_visual = k
        if self.k_audio is None and self.k_visual is not None:
            self.k_audio = max(1, self.k_visual // 2)
        if self.hidden is None:
            self.hidden = hidden
        if self.experts is None:
            self.experts = experts
        if self.video_gate not in ("input", "output"):
            raise ValueError(f"video_gate must be 'input' or 'output', got {self.video_gate!r}")
        for f in ("num_classes", "d_visual", "d_audio", "hidden", "experts", "gru_layers"):
            if getattr(self, f) < 1:
                raise ValueError(f"{f} must be positive, got {getattr(self, f)}")
        if self.family != "GRU" and (self.k_visual < 1 or self.k_audio < 1):
            raise ValueError("cluster counts must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


def param_shapes(cfg: ModelConfig) -> dict[str, tuple]:
    """Ordered name -> shape for every parameter of ``cfg``."""
    fam, F, E, C = cfg.family, cfg.hidden, cfg.experts, cfg.num_classes
    shapes: dict[str, tuple] = {}

    def cluster(prefix, K, D, centers):
        shapes[f"{prefix}/cluster/w"] = (K, D)
        shapes[f"{prefix}/cluster/b"] = (K,)
        if centers:
            shapes[f"{prefix}/cluster/c"] = (K, D)

    def nonlocal_(prefix, D):
        di = nl.inner_dim(D)
        for n in ("theta", "phi", "g"):
            shapes[f"{prefix}/nonlocal/{n}"] = (D, di)
        shapes[f"{prefix}/nonlocal/out"] = (di, D)

    if fam in ("LFNL-NetVLAD", "LFNL-NetRVLAD"):
        centers = fam == "LFNL-NetVLAD"
        for mod, K, D in (("visual", cfg.k_visual, cfg.d_visual), ("audio", cfg.k_audio, cfg.d_audio)):
            cluster(mod, K, D, centers)
            nonlocal_(mod, D)
        feat = cfg.k_visual * cfg.d_visual + cfg.k_audio * cfg.d_audio
    elif fam == "EFNL-NetVLAD":
        D = cfg.d_visual + cfg.d_audio
        shapes["frame_gate/w"] = (D, D)
        shapes["frame_gate/b"] = (D,)
        cluster("fused", cfg.k_visual, D, True)
        nonlocal_("fused", D)
        feat = cfg.k_visual * D
    elif fam in BOF_FAMILIES:
        cluster("visual", cfg.k_visual, cfg.d_visual, False)
        cluster("audio", cfg.k_audio, cfg.d_audio, False)
        feat = cfg.k_visual + cfg.k_audio
    else:
        d_in = cfg.d_visual + cfg.d_audio
        for layer in range(cfg.gru_layers):
            for g in GATES:
                shapes[f"gru/{layer}/W_{g}"] = (d_in, F)
                shapes[f"gru/{layer}/U_{g}"] = (F, F)
                shapes[f"gru/{layer}/b_{g}"] = (F,)
            d_in = F
        feat = None

    if feat is not None:
        shapes["dense/w"] = (feat, F)
        shapes["dense/b"] = (F,)
    G = F if cfg.video_gate == "input" else C
    shapes["gate/w"] = (G, G)
    shapes["gate/b"] = (G,)
    shapes["moe/gate_w"] = (F, C * E)
    shapes["moe/gate_b"] = (C * E,)
    shapes["moe/expert_w"] = (F, C * E)
    shapes["moe/expert_b"] = (C * E,)
    return shapes


def num_params(cfg: ModelConfig) -> int:
    return int(sum(np.prod(s) for s in param_shapes(cfg).values()))


@dataclass
class VideoModel:
    config: ModelConfig
    params: ParamStore

    @property
    def family(self) -> str:
        return self.config.family

    @property
    def topology(self) -> str:
        return f"{self.family}/{self.config.video_gate}-gate"

    def copy(self) -> "VideoModel":
        return VideoModel(ModelConfig.from_dict(self.config.to_dict()), self.params.copy())

    # parameter views -----------------------------------------------------

    def cluster(self, prefix: str) -> ClusterParams:
        s = self.params
        c = s[f"{prefix}/cluster/c"] if f"{prefix}/cluster/c" in s else None
        return ClusterParams(s[f"{prefix}/cluster/w"], s[f"{prefix}/cluster/b"], c)

    def nonlocal_params(self, prefix: str) -> NonLocalParams:
        s = self.params
        return NonLocalParams(*(s[f"{prefix}/nonlocal/{n}"] for n in ("theta", "phi", "g", "out")))

    def gate(self, prefix: str = "gate") -> ContextGateParams:
        return ContextGateParams(self.params[f"{prefix}/w"], self.params[f"{prefix}/b"])

    def moe(self) -> MoeParams:
        s = self.params
        return MoeParams(s["moe/gate_w"], s["moe/gate_b"], s["moe/expert_w"], s["moe/expert_b"],
                         self.config.experts)

    def gru_stack(self) -> list[GruLayerParams]:
        s = self.params
        return [GruLayerParams(W={g: s[f"gru/{i}/W_{g}"] for g in GATES},
                               U={g: s[f"gru/{i}/U_{g}"] for g in GATES},
                               b={g: s[f"gru/{i}/b_{g}"] for g in GATES})
                for i in range(self.config.gru_layers)]


def build_model(cfg: ModelConfig, rng: np.random.Generator, dtype=np.float32) -> VideoModel:
    """Allocate and initialize every parameter of ``cfg`` in ``param_shapes`` order.

    Clusters use the NetVLAD init (w = 2*alpha*c, b = -alpha*||c||^2), non-local
    output maps start at zero, dense/gate/expert weights ~ N(0, 1/sqrt(fan_in)),
    biases zero.
    """
    store = ParamStore()
    shapes = param_shapes(cfg)
    done = set()
    for name, shape in shapes.items():
        if name in done:
            continue
        if name.endswith("/cluster/w"):
            prefix = name[: -len("/cluster/w")]
            K, D = shape
            centers = f"{prefix}/cluster/c" in shapes
            cp = pooling.init_cluster_params(rng, K, D, cfg.alpha, with_centers=True, dtype=dtype)
            store.add(name, cp.w)
            store.add(f"{prefix}/cluster/b", cp.b)
            done.update({name, f"{prefix}/cluster/b"})
            if centers:
                store.add(f"{prefix}/cluster/c", cp.c)
                done.add(f"{prefix}/cluster/c")
            continue
        if name.endswith("/nonlocal/theta"):
            prefix = name[: -len("/nonlocal/theta")]
            p = nl.init_nonlocal_params(rng, shape[0], shape[1], dtype=dtype)
            for n in ("theta", "phi", "g", "out"):
                store.add(f"{prefix}/nonlocal/{n}", getattr(p, n))
                done.add(f"{prefix}/nonlocal/{n}")
            continue
        if len(shape) == 1 or name.endswith("/out"):
            store.add(name, np.zeros(shape, dtype=dtype))
        else:
            store.add(name, rng.normal(0.0, 1.0 / np.sqrt(shape[0]), shape).astype(dtype))
        done.add(name)
    return VideoModel(cfg, store)


# --------------------------------------------------------------------------
# forward / backward
# --------------------------------------------------------------------------

def _vlad_encode(m: VideoModel, prefix: str, X, mask, residual: bool):
    V, c_pool = pooling.netvlad_forward(X, m.cluster(prefix), mask, residual)
    Vn, c_nl = nl.nonlocal_forward(V, m.nonlocal_params(prefix))
    out, c_norm = pooling.normalize_vlad_forward(Vn)
    return out, (prefix, c_pool, c_nl, c_norm)


def _vlad_encode_backward(dout, cache, grads):
    prefix, c_pool, c_nl, c_norm = cache
    dVn = pooling.normalize_vlad_backward(dout, c_norm)
    dV, g_nl = nl.nonlocal_backward(dVn, c_nl)
    for k, v in g_nl.items():
        grads[f"{prefix}/nonlocal/{k}"] = v
    dX, g_pool = pooling.netvlad_backward(dV, c_pool)
    for k, v in g_pool.items():
        grads[f"{prefix}/cluster/{k}"] = v
    return dX


def _check_inputs(cfg: ModelConfig, visual, audio, mask):
    if visual.ndim != 3 or audio.ndim != 3:
        raise ValueError("expected batched inputs of shape (B, N, D)")
    if visual.shape[-1] != cfg.d_visual or audio.shape[-1] != cfg.d_audio:
        raise ValueError(f"feature dims ({visual.shape[-1]}, {audio.shape[-1]}) do not match "
                         f"model dims ({cfg.d_visual}, {cfg.d_audio})")
    if visual.shape[:2] != audio.shape[:2]:
        raise ValueError(f"visual/audio frame counts differ: {visual.shape[:2]} vs {audio.shape[:2]}")
    if visual.shape[1] < 1:
        raise ValueError("video has no frames")
    if mask is not None and np.any(np.asarray(mask).sum(axis=-1) < 1):
        raise ValueError("video has no frames")


def forward_batch(m: VideoModel, visual, audio, mask=None):
    """Batched forward. ``visual`` (B, N, Dv), ``audio`` (B, N, Da), ``mask`` (B, N).

    Returns (probabilities (B, C) in float64, cache for ``backward_batch``).
    """
    cfg = m.config
    visual, audio = np.asarray(visual), np.asarray(audio)
    _check_inputs(cfg, visual, audio, mask)
    fam = cfg.family
    cache: dict = {"family": fam}
    if fam in ("LFNL-NetVLAD", "LFNL-NetRVLAD"):
        residual = fam == "LFNL-NetVLAD"
        fv, cache["visual"] = _vlad_encode(m, "visual", visual, mask, residual)
        fa, cache["audio"] = _vlad_encode(m, "audio", audio, mask, residual)
        cache["split"] = fv.shape[-1]
        feat = np.concatenate([fv, fa], axis=-1)
    elif fam == "EFNL-NetVLAD":
        X = np.concatenate([f64(visual), f64(audio)], axis=-1)
        Xg, cache["frame_gate"] = heads.context_gate_forward(X, m.gate("frame_gate"))
        feat, cache["fused"] = _vlad_encode(m, "fused", Xg, mask, True)
    elif fam in BOF_FAMILIES:
        hv, cache["visual"] = pooling.soft_bof_forward(visual, m.cluster("visual"), mask)
        ha, cache["audio"] = pooling.soft_bof_forward(audio, m.cluster("audio"), mask)
        cache["split"] = hv.shape[-1]
        feat = np.concatenate([hv, ha], axis=-1)
    else:
        X = np.concatenate([f64(visual), f64(audio)], axis=-1)
        feat, cache["gru"] = sequence.gru_forward_full(X, m.gru_stack(), mask)

    if "dense/w" in m.params:
        feat, cache["dense"] = heads.dense_forward(feat, m.params["dense/w"], m.params["dense/b"])
    if cfg.video_gate == "input":
        feat, cache["gate"] = heads.context_gate_forward(feat, m.gate())
    probs, cache["moe"] = heads.moe_forward(feat, m.moe())
    if cfg.video_gate == "output":
        probs, cache["gate"] = heads.context_gate_forward(probs, m.gate())
    return probs, cache


def backward_batch(m: VideoModel, cache, dprobs) -> dict[str, np.ndarray]:
    """Gradients of every parameter given dL/dprobs, summed over the batch."""
    cfg = m.config
    grads: dict[str, np.ndarray] = {}

    def put(prefix, g):
        for k, v in g.items():
            grads[f"{prefix}/{k}"] = v

    d = f64(dprobs)
    if cfg.video_gate == "output":
        d, g = heads.context_gate_backward(d, cache["gate"])
        put("gate", g)
    d, g = heads.moe_backward(d, cache["moe"])
    put("moe", g)
    if cfg.video_gate == "input":
        d, g = heads.context_gate_backward(d, cache["gate"])
        put("gate", g)
    if "dense" in cache:
        d, g = heads.dense_backward(d, cache["dense"])
        put("dense", g)

    fam = cfg.family
    if fam in ("LFNL-NetVLAD", "LFNL-NetRVLAD"):
        s = cache["split"]
        _vlad_encode_backward(d[..., :s], cache["visual"], grads)
        _vlad_encode_backward(d[..., s:], cache["audio"], grads)
    elif fam == "EFNL-NetVLAD":
        dXg = _vlad_encode_backward(d, cache["fused"], grads)
        _, g = heads.context_gate_backward(dXg, cache["frame_gate"])
        put("frame_gate", g)
    elif fam in BOF_FAMILIES:
        s = cache["split"]
        _, g = pooling.soft_bof_backward(d[..., :s], cache["visual"])
        put("visual/cluster", g)
        _, g = pooling.soft_bof_backward(d[..., s:], cache["audio"])
        put("audio/cluster", g)
    else:
        _, layer_grads = sequence.gru_backward(d, cache["gru"])
        for i, lg in enumerate(layer_grads):
            for kind in ("W", "U", "b"):
                for gname in GATES:
                    grads[f"gru/{i}/{kind}_{gname}"] = lg[kind][gname]
    return grads


def model_forward(m: VideoModel, visual, audio) -> np.ndarray:
    """Class probabilities (C,) for one video with frames ``visual`` (N, Dv), ``audio`` (N, Da)."""
    visual, audio = np.asarray(visual), np.asarray(audio)
    if visual.ndim != 2 or audio.ndim != 2:
        raise ValueError("expected per-video inputs of shape (N, D)")
    probs, _ = forward_batch(m, visual[None], audio[None])
    first = next(iter(m.params.items()))[1]
    return probs[0].astype(out_dtype(visual, audio, first), copy=False)


def pad_batch(videos: list[tuple[np.ndarray, np.ndarray]]):
    """Stack variable-length (visual, audio) pairs with trailing zero padding and a mask."""
    n_max = max(v.shape[0] for v, _ in videos)
    B = len(videos)
    dv, da = videos[0][0].shape[1], videos[0][1].shape[1]
    dt = out_dtype(*(x for pair in videos for x in pair))
    vis = np.zeros((B, n_max, dv), dtype=dt)
    aud = np.zeros((B, n_max, da), dtype=dt)
    mask = np.zeros((B, n_max), dtype=dt)
    for i, (v, a) in enumerate(videos):
        n = v.shape[0]
        vis[i, :n] = v
        aud[i, :n] = a
        mask[i, :n] = 1.0
    if np.all(mask == 1.0):
        mask = None
    return vis, aud, mask
