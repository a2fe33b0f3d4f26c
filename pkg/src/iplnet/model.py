"""The fusion network: downsampler, stacked feature integration blocks, upsampler.

A feature integration block (FIB) is a dimensional attention stage (three
slice scanners over channel, width and height chunks, each running a shared
local feature extractor, LFE) followed by a residual dimensional rolling
stage (DRTM) that mixes channel, width and height at a fixed internal
resolution.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from functools import cached_property
from typing import Mapping

import numpy as np
import xxhash

from . import tensor as T
from .cache import AttentionCache
from .quant import accumulate_scaled
from .tensor import ConvParams, ShapeError, Tensor

__all__ = [
    "ModelConfig",
    "ModelWeights",
    "ExposureTriplet",
    "weight_manifest",
    "init_weights",
    "lfe_forward",
    "lfe_attention",
    "slice_cyclic_scan",
    "drtm_forward",
    "fib_forward",
    "model_forward",
    "BRANCH_AXES",
]

# scanner branch -> tensor axis it chunks
BRANCH_AXES = {"channel": 0, "width": 1, "height": 2}


@dataclass(frozen=True)
class ModelConfig:
    num_fibs: int = 8
    channels: int = 48
    downsample_factor: int = 2
    chunk_c: int = 16
    chunk_w: int = 64
    chunk_h: int = 64
    drtm_size: tuple[int, int] = (64, 64)
    lfe_reduction: int = 4
    cache_enabled: bool = True
    q_bits: int = 8
    # ablation and test switches
    lfe_mode: str = "pooled"  # "pooled": gap(input) * weights, "text": input * weights
    use_daem: bool = True
    use_drtm: bool = True
    global_residual: bool = True
    activations: bool = True
    workers: int = 1

    def __post_init__(self):
        counts = {
            "num_fibs": self.num_fibs, "channels": self.channels,
            "downsample_factor": self.downsample_factor, "chunk_c": self.chunk_c,
            "chunk_w": self.chunk_w, "chunk_h": self.chunk_h,
            "lfe_reduction": self.lfe_reduction, "workers": self.workers,
            "drtm width": self.drtm_size[0], "drtm height": self.drtm_size[1],
        }
        for name, value in counts.items():
            if int(value) < 1:
                raise ValueError(f"{name} must be >= 1, got {value}")
        object.__setattr__(self, "drtm_size", (int(self.drtm_size[0]), int(self.drtm_size[1])))
        if self.channels % self.lfe_reduction:
            raise ValueError(f"channels {self.channels} not divisible by lfe_reduction {self.lfe_reduction}")
        if self.channels % self.channel_block:
            raise ValueError(f"channel chunk {self.channel_block} must divide channels {self.channels}")
        if self.lfe_mode not in ("pooled", "text"):
            raise ValueError(f"lfe_mode must be 'pooled' or 'text', got {self.lfe_mode!r}")
        if not 1 <= self.q_bits <= 8:
            raise ValueError(f"q_bits must be in [1, 8], got {self.q_bits}")

    @property
    def channel_block(self) -> int:
        return min(self.chunk_c, self.channels)

    def chunk(self, tag: str) -> int:
        return {"channel": self.chunk_c, "width": self.chunk_w, "height": self.chunk_h}[tag]

    def replace(self, **changes) -> ModelConfig:
        values = asdict(self)
        values.update(changes)
        return ModelConfig(**values)


def _lfe_channels(config: ModelConfig, tag: str) -> tuple[int, int]:
    block = config.channel_block if tag == "channel" else config.channels
    return block, max(1, block // config.lfe_reduction)


def weight_manifest(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Ordered parameter names and shapes implied by ``config``."""
    r, c = config.downsample_factor, config.channels
    dw, dh = config.drtm_size
    shapes: dict[str, tuple[int, ...]] = {}

    def conv(name, out_ch, in_ch, k):
        shapes[f"{name}.weight"] = (out_ch, in_ch, k, k)
        shapes[f"{name}.bias"] = (out_ch,)

    conv("down", c, 9 * r * r, 3)
    for i in range(config.num_fibs):
        for tag in BRANCH_AXES:
            block, hidden = _lfe_channels(config, tag)
            conv(f"fib{i}.lfe.{tag}.conv1", hidden, block, 1)
            conv(f"fib{i}.lfe.{tag}.conv2", block, hidden, 1)
        conv(f"fib{i}.drtm.conv_c", c, c, 1)
        conv(f"fib{i}.drtm.conv_w", dw, dw, 1)
        conv(f"fib{i}.drtm.conv_h", dh, dh, 1)
    conv("up", 3 * r * r, c, 3)
    return shapes


@dataclass
class ModelWeights:
    """Named float arrays, ordered as in :func:`weight_manifest`."""

    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors)

    def __len__(self) -> int:
        return len(self.tensors)

    def items(self):
        return self.tensors.items()

    @property
    def parameter_count(self) -> int:
        return sum(a.size for a in self.tensors.values())

    def copy(self) -> ModelWeights:
        return ModelWeights({k: v.copy() for k, v in self.tensors.items()})

    def as_tensors(self, requires_grad: bool = False) -> dict[str, Tensor]:
        return {k: Tensor(v, requires_grad=requires_grad, name=k) for k, v in self.tensors.items()}

    @cached_property
    def digest(self) -> str:
        h = xxhash.xxh3_64()
        for name, arr in self.tensors.items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()

    def check(self, config: ModelConfig) -> None:
        expected = weight_manifest(config)
        for name, shape in expected.items():
            if name not in self.tensors:
                raise ShapeError(f"weights are missing {name!r} required by the model config")
            if self.tensors[name].shape != shape:
                raise ShapeError(f"weight {name!r} has shape {self.tensors[name].shape}, config expects {shape}")
        extra = set(self.tensors) - set(expected)
        if extra:
            raise ShapeError(f"weights contain tensors not used by the config: {sorted(extra)[0]!r}")


def init_weights(config: ModelConfig, seed: int, zero_residual: bool = True, zero_output: bool = False) -> ModelWeights:
    """He-uniform conv weights, zero biases; fully determined by ``seed``.

    With ``zero_residual`` the last DRTM convolution of every block starts at
    zero, so each block begins as its attention stage alone.  Without it the
    multiplicative DRTM path compounds across blocks and an 8-block stack
    overflows float32 on ordinary inputs.  ``zero_output`` zeroes the
    upsampler weights so training starts from a black image instead of one
    half clamped away (clamped pixels pass no gradient).  Random draws are
    made either way, so the other tensors do not depend on these flags.
    """
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in weight_manifest(config).items():
        if name.endswith(".bias"):
            tensors[name] = np.zeros(shape, dtype=np.float32)
            continue
        fan_in = shape[1] * shape[2] * shape[3]
        bound = math.sqrt(6.0 / fan_in)
        tensors[name] = rng.uniform(-bound, bound, size=shape).astype(np.float32)
        if zero_residual and name.endswith("drtm.conv_h.weight"):
            tensors[name][...] = 0.0
        if zero_output and name == "up.weight":
            tensors[name][...] = 0.0
    return ModelWeights(tensors)


@dataclass
class ExposureTriplet:
    """Low, mid (reference) and high exposure frames, each ``(3, W, H)`` in [0, 1]."""

    x1: np.ndarray
    x2: np.ndarray
    x3: np.ndarray

    def __post_init__(self):
        frames = [np.asarray(x, dtype=np.float32) for x in (self.x1, self.x2, self.x3)]
        shapes = [f.shape for f in frames]
        if frames[0].ndim != 3 or frames[0].shape[0] != 3:
            raise ShapeError(f"exposure frames must be (3, W, H), got {shapes[0]}")
        if len(set(shapes)) != 1:
            raise ShapeError(f"exposure frames differ in size: {shapes[0]}, {shapes[1]}, {shapes[2]}")
        self.x1, self.x2, self.x3 = (np.clip(f, 0.0, 1.0) for f in frames)

    @property
    def size(self) -> tuple[int, int]:
        return self.x2.shape[1], self.x2.shape[2]

    def astype(self, dtype) -> ExposureTriplet:
        t = ExposureTriplet.__new__(ExposureTriplet)
        t.x1, t.x2, t.x3 = (x.astype(dtype) for x in (self.x1, self.x2, self.x3))
        return t


# ---------------------------------------------------------------------------
# forward pass

Params = Mapping[str, Tensor]


def _conv_params(params: Params, name: str) -> ConvParams:
    return ConvParams(params[f"{name}.weight"], params[f"{name}.bias"])


def _act(x: Tensor, kind: str, config: ModelConfig) -> Tensor:
    return T.activation(x, kind) if config.activations else x


def _grad_mode(*tensors: Tensor) -> bool:
    return any(t.requires_grad for t in tensors)


def lfe_attention(block: Tensor, conv1: ConvParams, conv2: ConvParams, config: ModelConfig | None = None) -> Tensor:
    """Attention weights ``sigmoid(conv2(relu(conv1(x))))``; the part the cache stores."""
    config = config or ModelConfig()
    if block.shape[0] != conv1.in_channels:
        raise ShapeError(f"LFE block shape {block.shape} does not match branch weights {conv1.weight.shape}")
    hidden = _act(T.conv(block, conv1), "relu", config)
    return _act(T.conv(hidden, conv2), "sigmoid", config)


def lfe_forward(block: Tensor, conv1: ConvParams, conv2: ConvParams, config: ModelConfig | None = None) -> Tensor:
    """Pooled-attention extractor: ``gap(x) * sigmoid(conv2(relu(conv1(x))))``."""
    config = config or ModelConfig()
    weights = lfe_attention(block, conv1, conv2, config)
    if config.lfe_mode == "text":
        return T.mul(block, weights)
    return T.mul(weights, T.gap(block))


def _apply_attention(block: np.ndarray, weights: np.ndarray, pooled: np.ndarray | None, config: ModelConfig) -> np.ndarray:
    # in place on a private weights buffer (fresh from the extractor or a decode)
    if config.lfe_mode == "text":
        weights *= block
    else:
        weights *= pooled.astype(weights.dtype).reshape(-1, 1, 1)
    return weights


def _pooled_means(features: np.ndarray, tag: str, bounds: list[tuple[int, int]]) -> list[np.ndarray]:
    """Per-block channel means for one branch, from a single pass over ``features``."""
    c, w, h = features.shape
    starts = [lo for lo, _ in bounds]
    if tag == "channel":
        means = features.sum(axis=2).sum(axis=1, dtype=np.float64) / (w * h)
        return [means[lo:hi] for lo, hi in bounds]
    if tag == "width":
        partial = features.sum(axis=2)
        extent = h
    else:
        partial = features.sum(axis=1)
        extent = w
    sums = np.add.reduceat(partial.astype(np.float64), starts, axis=1)
    return [sums[:, i] / ((hi - lo) * extent) for i, (lo, hi) in enumerate(bounds)]


def _block_bounds(n: int, chunk: int) -> list[tuple[int, int]]:
    return [(s, min(s + chunk, n)) for s in range(0, n, chunk)]


def _branch_params(params: Params, fib: int, tag: str) -> tuple[ConvParams, ConvParams]:
    prefix = f"fib{fib}.lfe.{tag}"
    return _conv_params(params, f"{prefix}.conv1"), _conv_params(params, f"{prefix}.conv2")


def _box(axis: int, lo: int, hi: int) -> tuple[slice, ...]:
    index = [slice(None)] * 3
    index[axis] = slice(lo, hi)
    return tuple(index)


def slice_cyclic_scan(
    features: Tensor,
    params: Params,
    fib: int,
    config: ModelConfig,
    cache: AttentionCache | None = None,
    namespace: str = "",
) -> Tensor:
    """Sum of the three branch outputs, each a chunk-by-chunk LFE along one axis."""
    T._check_rank3(features, "slice_cyclic_scan")
    if _grad_mode(features, *(params[k] for k in params if k.startswith(f"fib{fib}.lfe."))):
        total = None
        for tag, axis in BRANCH_AXES.items():
            conv1, conv2 = _branch_params(params, fib, tag)
            blocks = [
                lfe_forward(T.take_block(features, axis, lo, hi), conv1, conv2, config)
                for lo, hi in _block_bounds(features.shape[axis], config.chunk(tag))
            ]
            branch = T.concat(blocks, axis)
            total = branch if total is None else T.add(total, branch)
        return total

    use_cache = cache is not None and cache.enabled and config.cache_enabled
    # the fused kernels accumulate float32 only; other dtypes take the plain path
    fused = config.lfe_mode == "pooled" and features.dtype == np.float32
    data = np.ascontiguousarray(features.data)
    acc = np.zeros_like(data)
    pool = ThreadPoolExecutor(config.workers) if config.workers > 1 else None
    try:
        for tag, axis in BRANCH_AXES.items():
            conv1, conv2 = _branch_params(params, fib, tag)
            bounds = _block_bounds(data.shape[axis], config.chunk(tag))
            pooled = _pooled_means(data, tag, bounds) if config.lfe_mode == "pooled" else [None] * len(bounds)

            def attention(b, conv1=conv1, conv2=conv2):
                return lfe_attention(b, conv1, conv2, config)

            # The cache holds the bounded attention weights; the pooled factor
            # is recomputed exactly from the block on every read.  Blocks of
            # one branch are disjoint, so workers write to disjoint regions.
            def run(job, tag=tag, axis=axis, attention=attention):
                (lo, hi), factor = job
                box = _box(axis, lo, hi)
                block = Tensor(data[box])
                if fused:
                    if use_cache:
                        cache.memoized_lfe_into(acc[box], block, tag, attention, factor, f"{namespace}/fib{fib}")
                    else:
                        accumulate_scaled(attention(block).data, acc[box], factor)
                    return
                if use_cache:
                    weights = cache.memoized_lfe(block, tag, attention, f"{namespace}/fib{fib}")
                else:
                    weights = attention(block)
                acc[box] += _apply_attention(block.data, weights.data, factor, config)

            jobs = list(zip(bounds, pooled))
            list(pool.map(run, jobs) if pool else map(run, jobs))
    finally:
        if pool:
            pool.shutdown()
    return Tensor(acc)


def drtm_forward(features: Tensor, params: Params, fib: int, config: ModelConfig) -> Tensor:
    """Resize, three conv-GELU-roll stages, resize back, multiply with the input."""
    T._check_rank3(features, "drtm_forward")
    _, w, h = features.shape
    ft = T.interpolate_bilinear(features, config.drtm_size)
    for stage in ("conv_c", "conv_w", "conv_h"):
        p = _conv_params(params, f"fib{fib}.drtm.{stage}")
        if ft.shape[0] != p.in_channels:
            raise ShapeError(
                f"DRTM {stage} expects axis size {p.in_channels}, got tensor of shape {ft.shape}"
            )
        ft = T.permute_roll(_act(T.conv(ft, p), "gelu", config))
    attention = T.interpolate_bilinear(ft, (w, h))
    if not _grad_mode(attention, features):
        out = attention.data
        out *= features.data
        return Tensor(out)
    return T.mul(attention, features)


def fib_forward(
    features: Tensor,
    params: Params,
    fib: int,
    config: ModelConfig,
    cache: AttentionCache | None = None,
    namespace: str = "",
) -> Tensor:
    daem = slice_cyclic_scan(features, params, fib, config, cache, namespace) if config.use_daem else features
    if not config.use_drtm:
        return daem
    rolled = drtm_forward(daem, params, fib, config)
    if not _grad_mode(rolled, daem):
        out = rolled.data
        out += daem.data
        return Tensor(out)
    return T.add(daem, rolled)


def model_forward(
    triplet: ExposureTriplet,
    weights: ModelWeights | Params,
    config: ModelConfig,
    cache: AttentionCache | None = None,
) -> Tensor:
    """Fuse one exposure triplet into a ``(3, W, H)`` image in [0, 1]."""
    r = config.downsample_factor
    w, h = triplet.size
    if w % r or h % r:
        raise ShapeError(f"frame size {w}x{h} is not divisible by the downsample factor {r}")
    if isinstance(weights, ModelWeights):
        weights.check(config)
        params = weights.as_tensors()
        namespace = weights.digest
    else:
        params = weights
        namespace = ""
        if cache is not None and cache.enabled and config.cache_enabled:
            raise ValueError("the attention cache is inference-only; pass ModelWeights, not trainable tensors")

    stacked = Tensor(np.concatenate([triplet.x1, triplet.x2, triplet.x3], axis=0))
    f0 = T.conv(T.pixel_unshuffle(stacked, r), _conv_params(params, "down"))
    del stacked
    feats = f0
    for i in range(config.num_fibs):
        feats = fib_forward(feats, params, i, config, cache, namespace)
    if config.global_residual:
        if _grad_mode(feats, f0):
            feats = T.add(f0, feats)
        else:
            if feats is f0:
                feats = Tensor(f0.data.copy())
            feats.data += f0.data
    del f0
    up = T.pixel_shuffle(T.conv(feats, _conv_params(params, "up")), r)
    del feats
    fused = T.mul(up, Tensor(triplet.x2))
    # test mode without activations drops the output clamp too, leaving a polynomial map
    return T.clamp(fused, 0.0, 1.0) if config.activations else fused
