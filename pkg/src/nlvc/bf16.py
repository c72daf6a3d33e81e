"""bfloat16 codec: the upper 16 bits of an IEEE-754 binary32, rounded to nearest even."""
from __future__ import annotations

import numpy as np

QUIET_BIT = 0x0040


def f32_to_bf16_array(x) -> np.ndarray:
    """Encode float32 values as uint16 bfloat16 codes (round to nearest, ties to even)."""
    bits = np.asarray(x, dtype=np.float32).view(np.uint32).astype(np.uint64)
    lsb = (bits >> 16) & 1
    rounded = ((bits + 0x7FFF + lsb) >> 16).astype(np.uint16)
    is_nan = np.isnan(np.asarray(x, dtype=np.float32))
    if np.any(is_nan):
        # keep sign and top payload bits, force the quiet bit so the mantissa stays nonzero
        quiet = ((bits >> 16).astype(np.uint16)) | QUIET_BIT
        rounded = np.where(is_nan, quiet, rounded)
    return rounded


def bf16_to_f32_array(codes) -> np.ndarray:
    """Widen uint16 bfloat16 codes to float32 by appending 16 zero bits."""
    codes = np.asarray(codes, dtype=np.uint16)
    return (codes.astype(np.uint32) << 16).view(np.float32)


def f32_to_bf16(x: float) -> int:
    return int(f32_to_bf16_array(np.float32(x)))


def bf16_to_f32(code: int) -> float:
    return float(bf16_to_f32_array(np.uint16(code)))


def f32_bits(x: float) -> int:
    return int(np.float32(x).view(np.uint32))


def f32_from_bits(bits: int) -> np.float32:
    return np.uint32(bits).view(np.float32)
