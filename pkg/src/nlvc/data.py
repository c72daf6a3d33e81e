"""Labeled videos, the dataset file format and the synthetic generator.

Binary layout (little-endian)::

    b"Y8MF" | u32 version=1 | u32 records | u32 D_v | u32 D_a | u32 C
    per record: u16 id length | id | u32 N | u16 label count | u32 labels[]
                f32 visual[N*D_v] | f32 audio[N*D_a]

The JSON-lines variant starts with a header object
``{"format": "Y8MF", "version": 1, "d_visual": .., "d_audio": .., "classes": ..}``
followed by one ``{"id", "labels", "visual", "audio"}`` object per line.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .numerics import derive_seed, make_rng

MAGIC = b"Y8MF"
VERSION = 1


class DatasetFormatError(ValueError):
    pass


@dataclass
class LabeledVideo:
    id: str
    visual: np.ndarray  # (N, D_v) float32
    audio: np.ndarray   # (N, D_a) float32
    labels: tuple = ()

    def __post_init__(self):
        self.visual = np.asarray(self.visual, dtype=np.float32)
        self.audio = np.asarray(self.audio, dtype=np.float32)
        self.labels = tuple(int(x) for x in self.labels)
        if self.visual.ndim != 2 or self.audio.ndim != 2:
            raise ValueError(f"video {self.id}: frame matrices must be 2-D")
        if self.visual.shape[0] < 1:
            raise ValueError(f"video {self.id}: no frames")
        if self.visual.shape[0] != self.audio.shape[0]:
            raise ValueError(f"video {self.id}: {self.visual.shape[0]} visual vs "
                             f"{self.audio.shape[0]} audio frames")
        if len(set(self.labels)) != len(self.labels):
            raise ValueError(f"video {self.id}: duplicate labels {self.labels}")

    @property
    def num_frames(self) -> int:
        return self.visual.shape[0]


@dataclass
class Dataset:
    videos: list
    d_visual: int
    d_audio: int
    num_classes: int

    def __post_init__(self):
        for v in self.videos:
            if v.visual.shape[1] != self.d_visual or v.audio.shape[1] != self.d_audio:
                raise DatasetFormatError(f"video {v.id}: dims ({v.visual.shape[1]}, {v.audio.shape[1]}) "
                                         f"!= declared ({self.d_visual}, {self.d_audio})")
            if any(not 0 <= lab < self.num_classes for lab in v.labels):
                raise DatasetFormatError(f"video {v.id}: label out of range [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.videos)

    def split(self, holdout: float = 0.2):
        """Deterministic head/tail split: first (1 - holdout) for training."""
        n_train = int(round(len(self.videos) * (1.0 - holdout)))
        return (Dataset(self.videos[:n_train], self.d_visual, self.d_audio, self.num_classes),
                Dataset(self.videos[n_train:], self.d_visual, self.d_audio, self.num_classes))


# --------------------------------------------------------------------------
# file format
# --------------------------------------------------------------------------

def dataset_to_bytes(ds: Dataset) -> bytes:
    out = [MAGIC, struct.pack("<5I", VERSION, len(ds.videos), ds.d_visual, ds.d_audio, ds.num_classes)]
    for v in ds.videos:
        raw = v.id.encode("utf-8")
        out.append(struct.pack("<H", len(raw)))
        out.append(raw)
        out.append(struct.pack("<IH", v.num_frames, len(v.labels)))
        out.append(struct.pack(f"<{len(v.labels)}I", *v.labels))
        out.append(v.visual.astype("<f4").tobytes())
        out.append(v.audio.astype("<f4").tobytes())
    return b"".join(out)


def dataset_from_bytes(data: bytes) -> Dataset:
    pos = 0

    def take(n, what):
        nonlocal pos
        if pos + n > len(data):
            raise DatasetFormatError(f"truncated dataset while reading {what} at byte offset {pos}")
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    if take(4, "magic") != MAGIC:
        raise DatasetFormatError("not a Y8MF dataset (bad magic)")
    version, count, dv, da, C = struct.unpack("<5I", take(20, "header"))
    if version != VERSION:
        raise DatasetFormatError(f"unsupported dataset version {version}")
    videos = []
    for i in range(count):
        (n_id,) = struct.unpack("<H", take(2, f"record {i} id length"))
        vid = take(n_id, f"record {i} id").decode("utf-8")
        N, n_lab = struct.unpack("<IH", take(6, f"record {vid} frame/label counts"))
        labels = struct.unpack(f"<{n_lab}I", take(4 * n_lab, f"record {vid} labels"))
        vis = np.frombuffer(take(4 * N * dv, f"record {vid} visual"), dtype="<f4").reshape(N, dv)
        aud = np.frombuffer(take(4 * N * da, f"record {vid} audio"), dtype="<f4").reshape(N, da)
        videos.append(LabeledVideo(vid, vis.astype(np.float32), aud.astype(np.float32), labels))
    if pos != len(data):
        raise DatasetFormatError(f"{len(data) - pos} trailing bytes after last record")
    return Dataset(videos, dv, da, C)


def dataset_to_jsonl(ds: Dataset) -> str:
    lines = [json.dumps({"format": "Y8MF", "version": VERSION, "d_visual": ds.d_visual,
                         "d_audio": ds.d_audio, "classes": ds.num_classes})]
    for v in ds.videos:
        lines.append(json.dumps({"id": v.id, "labels": list(v.labels),
                                 "visual": v.visual.tolist(), "audio": v.audio.tolist()}))
    return "\n".join(lines) + "\n"


def dataset_from_jsonl(text: str) -> Dataset:
    rows = [ln for ln in text.splitlines() if ln.strip()]
    if not rows:
        raise DatasetFormatError("empty dataset file")
    try:
        head = json.loads(rows[0])
        if head.get("format") != "Y8MF" or head.get("version") != VERSION:
            raise DatasetFormatError("JSON dataset header must declare format Y8MF version 1")
        dv, da, C = int(head["d_visual"]), int(head["d_audio"]), int(head["classes"])
        videos = []
        for ln in rows[1:]:
            r = json.loads(ln)
            vis = np.asarray(r["visual"], dtype=np.float32).reshape(-1, dv)
            aud = np.asarray(r["audio"], dtype=np.float32).reshape(-1, da)
            videos.append(LabeledVideo(str(r["id"]), vis, aud, r.get("labels", ())))
    except (KeyError, TypeError, json.JSONDecodeError) as exc:
        raise DatasetFormatError(f"malformed JSON dataset: {exc}") from None
    return Dataset(videos, dv, da, C)


def save_dataset(ds: Dataset, path, fmt: str = "binary") -> None:
    path = Path(path)
    if fmt == "binary":
        path.write_bytes(dataset_to_bytes(ds))
    elif fmt == "jsonl":
        path.write_text(dataset_to_jsonl(ds))
    else:
        raise ValueError(f"unknown dataset format {fmt!r}")


def load_dataset(path) -> Dataset:
    data = Path(path).read_bytes()
    if data[:4] == MAGIC:
        return dataset_from_bytes(data)
    try:
        return dataset_from_jsonl(data.decode("utf-8"))
    except UnicodeDecodeError:
        raise DatasetFormatError("file is neither a Y8MF binary nor a JSON-lines dataset") from None


# --------------------------------------------------------------------------
# synthetic data
# --------------------------------------------------------------------------

@dataclass
class SyntheticSpec:
    videos: int = 2000
    classes: int = 20
    frames_min: int = 20
    frames_max: int = 60
    d_visual: int = 64
    d_audio: int = 16
    clusters_per_class: int = 2
    noise: float = 0.5
    seed: int = 0
    max_labels: int = 3

    def __post_init__(self):
        for f in ("videos", "classes", "frames_min", "frames_max", "d_visual", "d_audio",
                  "clusters_per_class", "max_labels"):
            if getattr(self, f) < 1:
                raise ValueError(f"{f} must be positive")
        if self.frames_min > self.frames_max:
            raise ValueError("frames_min must not exceed frames_max")
        if self.noise < 0:
            raise ValueError("noise must be non-negative")


@dataclass
class SyntheticWorld:
    """Latent class prototypes: (classes, clusters_per_class, D) per modality."""
    visual: np.ndarray
    audio: np.ndarray
    meta: dict = field(default_factory=dict)


def synthetic_world(spec: SyntheticSpec) -> SyntheticWorld:
    rng = make_rng(derive_seed(spec.seed, 0))
    shape = (spec.classes, spec.clusters_per_class)
    return SyntheticWorld(rng.normal(size=shape + (spec.d_visual,)),
                          rng.normal(size=shape + (spec.d_audio,)))


def gen_synthetic(spec: SyntheticSpec) -> Dataset:
    """Videos whose frames are drawn from their labels' prototypes plus Gaussian noise.

    Each video gets 1..max_labels distinct labels, uniform over classes. Every
    frame picks one of the video's labels and one of that label's prototypes
    (per modality) and adds N(0, noise^2) to each coordinate.
    """
    world = synthetic_world(spec)
    rng = make_rng(derive_seed(spec.seed, 1))
    max_labels = min(spec.max_labels, spec.classes)
    videos = []
    for i in range(spec.videos):
        n_lab = int(rng.integers(1, max_labels + 1))
        labels = np.sort(rng.choice(spec.classes, size=n_lab, replace=False))
        N = int(rng.integers(spec.frames_min, spec.frames_max + 1))
        lab = labels[rng.integers(0, n_lab, size=N)]
        vis = world.visual[lab, rng.integers(0, spec.clusters_per_class, size=N)]
        aud = world.audio[lab, rng.integers(0, spec.clusters_per_class, size=N)]
        if spec.noise > 0:
            vis = vis + rng.normal(0.0, spec.noise, size=vis.shape)
            aud = aud + rng.normal(0.0, spec.noise, size=aud.shape)
        videos.append(LabeledVideo(f"vid{i:06d}", vis, aud, labels.tolist()))
    return Dataset(videos, spec.d_visual, spec.d_audio, spec.classes)
