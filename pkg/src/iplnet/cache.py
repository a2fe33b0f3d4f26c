"""Content-addressed, byte-budgeted store for local-feature-extractor outputs.

Blocks are keyed by a 128-bit fingerprint of their own 8-bit quantized codes,
so a block seen again (anywhere in the image, or in a later frame) is served
from the store instead of being recomputed.  Values are stored as quantized
byte payloads and decoded on read.
"""

from __future__ import annotations

import struct
import threading
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import xxhash

from .quant import (
    HEADER_BYTES,
    QuantizedTensor,
    accumulate_scaled,
    decode,
    dequantize_accumulate,
    encode,
    fingerprint_codes,
    fit_params,
)
from .tensor import Tensor

__all__ = [
    "DIM_TAGS",
    "DEFAULT_CAPACITY",
    "BlockKey",
    "CacheEntry",
    "CacheStats",
    "AttentionCache",
    "key_of",
    "q_range",
]

DIM_TAGS = ("channel", "width", "height")
DEFAULT_CAPACITY = 512 * 1024 * 1024


def q_range(q_bits: int) -> tuple[int, int]:
    if not 1 <= q_bits <= 8:
        raise ValueError(f"q_bits must be in [1, 8], got {q_bits}")
    return 0, (1 << q_bits) - 1


@dataclass(frozen=True)
class BlockKey:
    fingerprint: bytes
    dim_tag: str
    shape: tuple[int, int, int]


def key_of(block: Tensor | np.ndarray, dim_tag: str, namespace: str = "", q_bits: int = 8) -> BlockKey:
    """Fingerprint a block by its quantized codes, shape, tag and weight namespace.

    ``namespace`` identifies the weights the cached value was produced with;
    without it two feature blocks with equal content in different layers
    would alias.
    """
    if dim_tag not in DIM_TAGS:
        raise ValueError(f"dim_tag must be one of {DIM_TAGS}, got {dim_tag!r}")
    data = block.data if isinstance(block, Tensor) else np.asarray(block)
    q_min, q_max = q_range(q_bits)
    codes = fingerprint_codes(data, fit_params(data, q_min, q_max))
    shape = tuple(int(s) for s in data.shape)
    h = xxhash.xxh3_128()
    h.update(namespace.encode())
    h.update(b"\x00" + dim_tag.encode() + b"\x00")
    h.update(struct.pack("<3I", *shape))
    h.update(codes)
    return BlockKey(h.digest(), dim_tag, shape)


@dataclass
class CacheEntry:
    key: BlockKey
    payload: QuantizedTensor | np.ndarray
    last_touch: int
    size: int


@dataclass
class CacheStats:
    hits: int = 0
    misses: int = 0
    evictions: int = 0
    rejected: int = 0
    bytes_used: int = 0
    bytes_capacity: int = 0
    peak_bytes: int = 0
    lfe_evals: int = 0
    lfe_evals_saved: int = 0

    @property
    def lookups(self) -> int:
        return self.hits + self.misses

    @property
    def hit_rate(self) -> float:
        return self.hits / self.lookups if self.lookups else 0.0

    def line(self) -> str:
        return (
            f"hits={self.hits} misses={self.misses} evictions={self.evictions} "
            f"bytes_used={self.bytes_used} lfe_evals_saved={self.lfe_evals_saved}"
        )


@dataclass
class AttentionCache:
    """LRU memo of LFE outputs under a byte budget.

    ``capacity_bytes=0`` disables the cache: :meth:`memoized_lfe` then calls
    the extractor directly and touches no statistics.  ``raw=True`` stores
    unquantized arrays (a testing mode under which cached and uncached runs
    agree bit for bit).  With ``exact_miss=False`` (the default) a miss
    returns the same decoded payload a later hit would return, so outputs
    depend only on block content and never on cache history; with
    ``exact_miss=True`` a miss returns the extractor output untouched.
    """

    capacity_bytes: int = DEFAULT_CAPACITY
    q_bits: int = 8
    raw: bool = False
    exact_miss: bool = False
    stats: CacheStats = field(init=False)

    def __post_init__(self):
        if self.capacity_bytes < 0:
            raise ValueError("cache capacity must be non-negative")
        q_range(self.q_bits)
        self.stats = CacheStats(bytes_capacity=self.capacity_bytes)
        self._entries: OrderedDict[BlockKey, CacheEntry] = OrderedDict()
        self._clock = 0
        self._lock = threading.RLock()

    @property
    def enabled(self) -> bool:
        return self.capacity_bytes > 0

    def __len__(self) -> int:
        return len(self._entries)

    def __contains__(self, key: BlockKey) -> bool:
        return key in self._entries

    def resident_keys(self) -> list[BlockKey]:
        """Keys from least to most recently touched."""
        with self._lock:
            return list(self._entries)

    def clear(self) -> None:
        with self._lock:
            self._entries.clear()
            self.stats = CacheStats(bytes_capacity=self.capacity_bytes)

    def _touch(self) -> int:
        self._clock += 1
        return self._clock

    def key_of(self, block, dim_tag: str, namespace: str = "") -> BlockKey:
        return key_of(block, dim_tag, namespace, self.q_bits)

    def _pack(self, value: Tensor) -> QuantizedTensor | np.ndarray:
        data = value.data if isinstance(value, Tensor) else np.asarray(value)
        if self.raw:
            return np.array(data, copy=True)
        q_min, q_max = q_range(self.q_bits)
        return encode(data, fit_params(data, q_min, q_max))

    @staticmethod
    def _unpack(payload) -> Tensor:
        if isinstance(payload, QuantizedTensor):
            return decode(payload)
        return Tensor(payload.copy())

    @staticmethod
    def _size(payload) -> int:
        if isinstance(payload, QuantizedTensor):
            return payload.nbytes
        return payload.nbytes + HEADER_BYTES

    def lookup(self, key: BlockKey) -> Tensor | None:
        with self._lock:
            entry = self._entries.get(key)
            if entry is None:
                self.stats.misses += 1
                return None
            self.stats.hits += 1
            entry.last_touch = self._touch()
            self._entries.move_to_end(key)
            payload = entry.payload
        return self._unpack(payload)

    def insert(self, key: BlockKey, value: Tensor) -> None:
        self._store(key, self._pack(value))

    def _store(self, key: BlockKey, payload) -> None:
        size = self._size(payload)
        with self._lock:
            old = self._entries.pop(key, None)
            if old is not None:
                self.stats.bytes_used -= old.size
            if size > self.capacity_bytes:
                self.stats.rejected += 1
                return
            while self.stats.bytes_used + size > self.capacity_bytes:
                _, victim = self._entries.popitem(last=False)
                self.stats.bytes_used -= victim.size
                self.stats.evictions += 1
            self._entries[key] = CacheEntry(key, payload, self._touch(), size)
            self.stats.bytes_used += size
            self.stats.peak_bytes = max(self.stats.peak_bytes, self.stats.bytes_used)

    def memoized_lfe(
        self,
        block: Tensor,
        dim_tag: str,
        lfe: Callable[[Tensor], Tensor],
        namespace: str = "",
    ) -> Tensor:
        """Serve ``lfe(block)`` from the store, computing and storing it on a miss."""
        if not self.enabled:
            return lfe(block)
        key = self.key_of(block, dim_tag, namespace)
        hit = self.lookup(key)
        if hit is not None:
            with self._lock:
                self.stats.lfe_evals_saved += 1
            return hit
        out = lfe(block)
        with self._lock:
            self.stats.lfe_evals += 1
        payload = self._pack(out)
        self._store(key, payload)
        if self.exact_miss or self.raw:
            return out
        return self._unpack(payload)

    def memoized_lfe_into(
        self,
        target: np.ndarray,
        block: Tensor,
        dim_tag: str,
        lfe: Callable[[Tensor], Tensor],
        factor: np.ndarray,
        namespace: str = "",
    ) -> None:
        """``target += memoized_lfe(block) * factor[:, None, None]``, decoding in place.

        Same lookups, statistics and values as :meth:`memoized_lfe`; the
        decoded block is never materialized on a hit.
        """
        if not self.enabled:
            accumulate_scaled(lfe(block).data, target, factor)
            return
        key = self.key_of(block, dim_tag, namespace)
        with self._lock:
            entry = self._entries.get(key)
            if entry is None:
                self.stats.misses += 1
            else:
                self.stats.hits += 1
                self.stats.lfe_evals_saved += 1
                entry.last_touch = self._touch()
                self._entries.move_to_end(key)
                payload = entry.payload
        if entry is None:
            out = lfe(block)
            with self._lock:
                self.stats.lfe_evals += 1
            payload = self._pack(out)
            self._store(key, payload)
            if self.exact_miss or self.raw:
                accumulate_scaled(out.data, target, factor)
                return
        if isinstance(payload, QuantizedTensor):
            dequantize_accumulate(payload, target, factor)
        else:
            accumulate_scaled(payload, target, factor)
