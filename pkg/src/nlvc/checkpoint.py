"""Named-tensor checkpoint container and its binary file format.

Layout (little-endian)::

    b"NLVC" | u32 version=1 | u32 entry count
    per entry: u16 name length | name (utf-8) | u8 dtype (0=f32, 1=bf16)
               u8 ndim | u32 dims[ndim] | payload

The training step is stored as a reserved f32 entry ``__step__`` holding
``[step >> 24, step & 0xFFFFFF]`` (both exact in float32).
"""
from __future__ import annotations

import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"NLVC"
VERSION = 1
DTYPE_F32 = 0
DTYPE_BF16 = 1
STEP_KEY = "__step__"

_WIDTH = {DTYPE_F32: 4, DTYPE_BF16: 2}
_NUMPY = {DTYPE_F32: np.dtype("<f4"), DTYPE_BF16: np.dtype("<u2")}


class CheckpointFormatError(ValueError):
    """Malformed checkpoint file; ``offset`` is the byte position of the problem."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class SchemaMismatchError(ValueError):
    pass


def dtype_tag(arr: np.ndarray) -> int:
    if arr.dtype == np.float32:
        return DTYPE_F32
    if arr.dtype == np.uint16:
        return DTYPE_BF16
    raise TypeError(f"unsupported checkpoint dtype {arr.dtype}; use float32 or uint16 (bf16 codes)")


@dataclass
class Checkpoint:
    """Ordered named tensors. float32 arrays are f32 entries, uint16 arrays are bf16 codes."""

    tensors: "OrderedDict[str, np.ndarray]" = field(default_factory=OrderedDict)
    step: int = 0

    def __post_init__(self):
        self.tensors = OrderedDict(self.tensors)
        for name, arr in self.tensors.items():
            if name == STEP_KEY:
                raise ValueError(f"{STEP_KEY!r} is reserved")
            dtype_tag(arr)

    @classmethod
    def from_store(cls, store, step: int = 0) -> "Checkpoint":
        return cls(OrderedDict((n, np.array(p, dtype=np.float32)) for n, p in store.items()), step)

    def schema(self) -> list[tuple[str, tuple]]:
        return [(n, a.shape) for n, a in self.tensors.items()]

    def payload_bytes(self) -> int:
        return int(sum(a.nbytes for a in self.tensors.values()))

    def is_quantized(self) -> bool:
        return any(a.dtype == np.uint16 for a in self.tensors.values())

    def bit_equal(self, other: "Checkpoint") -> bool:
        if self.step != other.step or self.schema() != other.schema():
            return False
        return all(a.dtype == other.tensors[n].dtype and a.tobytes() == other.tensors[n].tobytes()
                   for n, a in self.tensors.items())


def to_bytes(ck: Checkpoint) -> bytes:
    if not 0 <= ck.step < 1 << 48:
        raise ValueError(f"step {ck.step} out of range")
    entries = list(ck.tensors.items())
    entries.append((STEP_KEY, np.array([ck.step >> 24, ck.step & 0xFFFFFF], dtype=np.float32)))
    out = [MAGIC, struct.pack("<II", VERSION, len(entries))]
    for name, arr in entries:
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise ValueError(f"tensor name too long: {name[:40]}...")
        tag = dtype_tag(arr)
        if arr.ndim > 255:
            raise ValueError(f"too many dims for {name}")
        out.append(struct.pack("<H", len(raw)))
        out.append(raw)
        out.append(struct.pack("<BB", tag, arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype=_NUMPY[tag]).tobytes())
    return b"".join(out)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointFormatError(
                f"truncated file while reading {what}: need {n} bytes, {len(self.data) - self.pos} left",
                self.pos)
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def from_bytes(data: bytes) -> Checkpoint:
    r = _Reader(data)
    magic = r.take(4, "magic")
    if magic != MAGIC:
        raise CheckpointFormatError(f"bad magic {magic!r}, expected {MAGIC!r}", 0)
    (version,) = r.unpack("<I", "version")
    if version != VERSION:
        raise CheckpointFormatError(f"unsupported checkpoint version {version} (this reader handles {VERSION})", 4)
    (count,) = r.unpack("<I", "entry count")
    tensors: OrderedDict[str, np.ndarray] = OrderedDict()
    step = 0
    for i in range(count):
        start = r.pos
        (nlen,) = r.unpack("<H", f"entry {i} name length")
        try:
            name = r.take(nlen, f"entry {i} name").decode("utf-8")
        except UnicodeDecodeError:
            raise CheckpointFormatError(f"entry {i} name is not utf-8", start + 2) from None
        tag, ndim = r.unpack("<BB", f"entry {name!r} dtype/ndim")
        if tag not in _WIDTH:
            raise CheckpointFormatError(f"entry {name!r} has unknown dtype tag {tag}", r.pos - 2)
        dims = r.unpack(f"<{ndim}I", f"entry {name!r} dims")
        n = int(np.prod(dims, dtype=np.int64)) if ndim else 1
        raw = r.take(n * _WIDTH[tag], f"entry {name!r} payload")
        arr = np.frombuffer(raw, dtype=_NUMPY[tag]).reshape(dims).copy()
        arr = arr.astype(np.float32 if tag == DTYPE_F32 else np.uint16, copy=False)
        if name == STEP_KEY:
            step = (int(arr[0]) << 24) | int(arr[1])
            continue
        if name in tensors:
            raise CheckpointFormatError(f"duplicate entry name {name!r}", start)
        tensors[name] = arr
    if r.pos != len(data):
        raise CheckpointFormatError(f"{len(data) - r.pos} trailing bytes after last entry", r.pos)
    return Checkpoint(tensors, step)


def save_checkpoint(ck: Checkpoint, path) -> None:
    Path(path).write_bytes(to_bytes(ck))


def load_checkpoint(path) -> Checkpoint:
    return from_bytes(Path(path).read_bytes())
