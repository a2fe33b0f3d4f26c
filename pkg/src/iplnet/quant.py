"""Per-tensor affine quantization to byte codes, plus its binary record format."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numba
import numpy as np

from .tensor import ShapeError, Tensor

__all__ = [
    "QuantParams",
    "QuantizedTensor",
    "QuantError",
    "CorruptPayloadError",
    "fit_params",
    "encode",
    "decode",
    "quantize_codes",
    "round_half_away",
    "serialize",
    "deserialize",
    "HEADER_BYTES",
    "fingerprint_codes",
    "dequantize_accumulate",
    "accumulate_scaled",
]


class QuantError(ValueError):
    """Invalid input to the quantizer (non-finite values, bad bounds)."""


class CorruptPayloadError(ValueError):
    """A quantized record whose payload does not match its declared shape."""


@dataclass(frozen=True)
class QuantParams:
    scale: float
    zero_point: int
    q_min: int = 0
    q_max: int = 255
    t_min: float = 0.0
    t_max: float = 1.0

    def __post_init__(self):
        if not (0 <= self.q_min < self.q_max <= 255):
            raise QuantError(f"quantization bounds must satisfy 0 <= q_min < q_max <= 255, got [{self.q_min}, {self.q_max}]")
        if not self.scale > 0:
            raise QuantError(f"scale must be positive, got {self.scale}")
        if not self.q_min <= self.zero_point <= self.q_max:
            raise QuantError(f"zero point {self.zero_point} outside [{self.q_min}, {self.q_max}]")


@dataclass(frozen=True)
class QuantizedTensor:
    payload: bytes
    params: QuantParams
    shape: tuple[int, int, int]

    @property
    def nbytes(self) -> int:
        """Stored size: code bytes plus the fixed record header."""
        return len(self.payload) + HEADER_BYTES


def round_half_away(x: float) -> int:
    """Nearest integer, ties away from zero."""
    r = math.floor(abs(x))
    if abs(x) - r >= 0.5:
        r += 1
    return int(math.copysign(r, x))


def fit_params(t, q_min: int = 0, q_max: int = 255) -> QuantParams:
    """Scale and zero point for ``t`` over a range widened to include zero."""
    if not q_min < q_max:
        raise QuantError(f"need q_min < q_max, got [{q_min}, {q_max}]")
    data = t.data if isinstance(t, Tensor) else np.asarray(t)
    lo, hi = float(data.min()), float(data.max())
    if not (math.isfinite(lo) and math.isfinite(hi)):
        raise QuantError("cannot quantize a tensor with non-finite values")
    t_min = min(0.0, lo)
    t_max = max(0.0, hi)
    if t_max - t_min < 1e-12:
        t_max = t_min + 1.0
    levels = q_max - q_min
    # zero point from -t_min * levels / span: exact for dyadic ranges where -t_min / s is not
    zp = round_half_away(q_min - t_min * levels / (t_max - t_min))
    zp = max(q_min, min(q_max, zp))
    scale = float(np.float32((t_max - t_min) / levels))
    return QuantParams(scale, zp, q_min, q_max, float(np.float32(t_min)), float(np.float32(t_max)))


@numba.njit(cache=True, nogil=True)
def _quantize_kernel(flat, scale, zp, q_min, q_max, out):
    for i in range(flat.size):
        v = min(max(flat[i] / scale + zp, q_min), q_max)
        # v >= q_min >= 0, so half-away-from-zero is floor plus a .5 test
        r = math.floor(v)
        r += 1.0 if v - r >= 0.5 else 0.0
        out[i] = np.uint8(r)


@numba.njit(cache=True, nogil=True)
def _dequantize_kernel(codes, scale, zp, out):
    for i in range(codes.size):
        out[i] = scale * (np.float32(codes[i]) - zp)


def quantize_codes(data: np.ndarray, params: QuantParams) -> np.ndarray:
    """Byte codes ``clamp(round(t / s + zp))`` as a flat uint8 array."""
    flat = np.ascontiguousarray(data).reshape(-1)
    out = np.empty(flat.size, dtype=np.uint8)
    _quantize_kernel(
        flat, float(params.scale), float(params.zero_point),
        float(params.q_min), float(params.q_max), out,
    )
    return out


def _region(a: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Express a rank-3 view as (C-contiguous parent, lo, hi) without copying.

    Kernels that index a C-ordered parent get contiguous rows numba can
    vectorize; a strided view passed directly does not.  Views that are not
    a box inside a C-ordered parent are copied.
    """
    shape = np.array(a.shape, dtype=np.int64)
    if a.flags.c_contiguous:
        return a, np.zeros(3, dtype=np.int64), shape
    base = a.base
    if (
        isinstance(base, np.ndarray) and base.ndim == 3 and base.flags.c_contiguous
        and base.dtype == a.dtype and a.strides == base.strides
    ):
        offset = a.__array_interface__["data"][0] - base.__array_interface__["data"][0]
        lo = []
        for stride in base.strides:
            lo.append(offset // stride)
            offset %= stride
        lo = np.array(lo, dtype=np.int64)
        if offset == 0 and np.all(lo + shape <= np.array(base.shape)):
            return base, lo, lo + shape
    c = np.ascontiguousarray(a)
    return c, np.zeros(3, dtype=np.int64), shape


@numba.njit(cache=True, nogil=True)
def _fingerprint_kernel(x, lo, hi, inv, zp, q_min, q_max, out):
    wb = hi[1] - lo[1]
    hb = hi[2] - lo[2]
    for a in range(lo[0], hi[0]):
        for b in range(lo[1], hi[1]):
            row = x[a, b, lo[2]:hi[2]]
            start = ((a - lo[0]) * wb + b - lo[1]) * hb
            dst = out[start:start + hb]
            for d in range(hb):
                v = min(max(row[d] * inv + zp, q_min), q_max)
                dst[d] = np.uint8(np.int32(v + np.float32(0.5)))


def fingerprint_codes(data: np.ndarray, params: QuantParams) -> np.ndarray:
    """Codes for content keys: ``encode`` arithmetic in float32 with a reciprocal.

    Agrees with :func:`quantize_codes` except where ``t / s + zp`` lies
    within float32 rounding of a half-integer, where the code may differ by
    one.  Still a pure function of the block, which is all a key needs.
    """
    if data.ndim != 3:
        raise ShapeError(f"fingerprint expects a (C, W, H) block, got shape {data.shape}")
    parent, lo, hi = _region(np.asarray(data, dtype=np.float32))
    out = np.empty(data.size, dtype=np.uint8)
    _fingerprint_kernel(
        parent, lo, hi, np.float32(1.0 / params.scale), np.float32(params.zero_point),
        np.float32(params.q_min), np.float32(params.q_max), out,
    )
    return out


@numba.njit(cache=True, nogil=True)
def _accumulate_codes_kernel(acc, lo, hi, codes, scale, zp, factor):
    wb = hi[1] - lo[1]
    hb = hi[2] - lo[2]
    for a in range(lo[0], hi[0]):
        f = factor[a - lo[0]]
        for b in range(lo[1], hi[1]):
            row = acc[a, b, lo[2]:hi[2]]
            start = ((a - lo[0]) * wb + b - lo[1]) * hb
            src = codes[start:start + hb]
            for d in range(hb):
                row[d] += (scale * (np.float32(src[d]) - zp)) * f


@numba.njit(cache=True, nogil=True)
def _accumulate_values_kernel(acc, lo, hi, values, factor):
    for a in range(lo[0], hi[0]):
        f = factor[a - lo[0]]
        for b in range(lo[1], hi[1]):
            row = acc[a, b, lo[2]:hi[2]]
            src = values[a - lo[0], b - lo[1]]
            for d in range(hi[2] - lo[2]):
                row[d] += src[d] * f


def _accumulate_target(target: np.ndarray, factor) -> tuple:
    parent, lo, hi = _region(target)
    if parent is not target.base and parent is not target:
        raise ValueError("accumulation target must be a box view of a C-ordered float32 array")
    factor = np.ascontiguousarray(np.broadcast_to(np.asarray(factor, dtype=np.float32).reshape(-1), (target.shape[0],)))
    return parent, lo, hi, factor


def dequantize_accumulate(q: QuantizedTensor, target: np.ndarray, factor) -> None:
    """``target += decode(q) * factor[:, None, None]`` without materializing the decode."""
    if tuple(target.shape) != tuple(q.shape):
        raise ShapeError(f"target shape {target.shape} does not match payload shape {q.shape}")
    if target.dtype != np.float32:
        raise ShapeError(f"accumulation target must be float32, got {target.dtype}")
    parent, lo, hi, factor = _accumulate_target(target, factor)
    codes = np.frombuffer(q.payload, dtype=np.uint8)
    _accumulate_codes_kernel(parent, lo, hi, codes, np.float32(q.params.scale), np.float32(q.params.zero_point), factor)


def accumulate_scaled(values: np.ndarray, target: np.ndarray, factor) -> None:
    """``target += values * factor[:, None, None]`` in one pass over ``target``."""
    if target.shape != values.shape:
        raise ShapeError(f"target shape {target.shape} does not match values shape {values.shape}")
    parent, lo, hi, factor = _accumulate_target(target, factor)
    _accumulate_values_kernel(parent, lo, hi, np.ascontiguousarray(values, dtype=parent.dtype), factor)


def encode(t, params: QuantParams) -> QuantizedTensor:
    data = t.data if isinstance(t, Tensor) else np.asarray(t)
    if data.ndim != 3:
        raise ShapeError(f"quantizer expects a (C, W, H) tensor, got shape {data.shape}")
    codes = quantize_codes(data, params)
    return QuantizedTensor(codes.tobytes(), params, tuple(int(s) for s in data.shape))


def decode(q: QuantizedTensor) -> Tensor:
    n = math.prod(q.shape)
    if len(q.payload) != n:
        raise CorruptPayloadError(f"payload holds {len(q.payload)} codes but shape {q.shape} needs {n}")
    codes = np.frombuffer(q.payload, dtype=np.uint8)
    out = np.empty(n, dtype=np.float32)
    _dequantize_kernel(codes, np.float32(q.params.scale), np.float32(q.params.zero_point), out)
    return Tensor(out.reshape(q.shape))


# shape (3 x u32), scale/t_min/t_max (3 x f32), zero_point/q_min/q_max (3 x i32)
_HEADER = struct.Struct("<3I3f3i")
HEADER_BYTES = _HEADER.size


def serialize(q: QuantizedTensor) -> bytes:
    p = q.params
    return _HEADER.pack(*q.shape, p.scale, p.t_min, p.t_max, p.zero_point, p.q_min, p.q_max) + q.payload


def deserialize(blob: bytes) -> QuantizedTensor:
    if len(blob) < HEADER_BYTES:
        raise CorruptPayloadError(f"record of {len(blob)} bytes is shorter than the {HEADER_BYTES}-byte header")
    c, w, h, scale, t_min, t_max, zp, q_min, q_max = _HEADER.unpack_from(blob)
    payload = bytes(blob[HEADER_BYTES:])
    if len(payload) != c * w * h:
        raise CorruptPayloadError(f"payload holds {len(payload)} codes but shape {(c, w, h)} needs {c * w * h}")
    params = QuantParams(scale, zp, q_min, q_max, t_min, t_max)
    return QuantizedTensor(payload, params, (c, w, h))
