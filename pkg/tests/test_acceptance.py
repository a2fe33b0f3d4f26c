"""The nine acceptance criteria, each at its stated tolerance and time budget.

Every test records one ``criterion N PASS/FAIL`` line; the lines are repeated
in the pytest terminal summary.
"""

import gc
import math
import statistics
import time
from collections import OrderedDict
from functools import lru_cache

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from iplnet import tensor as T
from iplnet.bench import bench_run, feature_bytes, memory_bound, traced_forward
from iplnet.cache import DEFAULT_CAPACITY, AttentionCache, BlockKey
from iplnet.data import SceneSpec, synth_triplet
from iplnet.metrics import psnr, ssim
from iplnet.model import (
    ExposureTriplet,
    ModelConfig,
    drtm_forward,
    fib_forward,
    init_weights,
    model_forward,
    slice_cyclic_scan,
)
from iplnet.quant import decode, encode, fit_params
from iplnet.tensor import Tensor
from iplnet.train import TrainConfig, grad_check_model, micro_config, micro_dataset, train_loop

SEEDS = (0, 1, 2)


def holds(prop) -> tuple[bool, str]:
    try:
        prop()
    except AssertionError as e:
        return False, str(e).splitlines()[0] if str(e) else "assertion failed"
    return True, "ok"


# ---------------------------------------------------------------------------
# 1. quantization round trip


def test_criterion_1_quantization_round_trip(acceptance):
    rng = np.random.default_rng(2024)
    start = time.perf_counter()
    worst_excess = -np.inf
    zero_ok = True
    for _ in range(1000):
        shape = tuple(rng.integers(1, 17, size=3))
        t = (rng.standard_normal(shape) * 10 ** rng.uniform(-3, 3)).astype(np.float32)
        t.reshape(-1)[rng.integers(t.size)] = 0.0
        zero = t == 0
        p = fit_params(t)
        d = decode(encode(t, p)).data
        err = float(np.max(np.abs(t.astype(np.float64) - d)))
        worst_excess = max(worst_excess, err - (p.scale / 2 + 1e-6))
        zero_ok &= bool(np.all(d[zero] == 0.0))
    elapsed = time.perf_counter() - start
    ok = worst_excess <= 0 and zero_ok and elapsed < 10
    acceptance(1, "quantization round trip", ok,
               f"1000 tensors, max(err - s/2 - 1e-6)={worst_excess:.3e}, zeros exact={zero_ok}, {elapsed:.2f}s < 10s")
    assert ok


# ---------------------------------------------------------------------------
# 2. cache transparency


def transparency(weights, config, seed):
    rng = np.random.default_rng(seed)
    triplet = ExposureTriplet(*(rng.uniform(0, 1, (3, 64, 64)) for _ in range(3)))
    plain = model_forward(triplet, weights, config).data
    cached = model_forward(triplet, weights, config, AttentionCache(q_bits=8)).data
    raw = model_forward(triplet, weights, config, AttentionCache(raw=True)).data
    return psnr(plain, cached), bool(np.array_equal(raw, plain))


def test_criterion_2_cache_transparency(acceptance):
    start = time.perf_counter()
    config = ModelConfig()
    weights = init_weights(config, 0)
    value, bit_equal = transparency(weights, config, 0)
    elapsed = time.perf_counter() - start
    # not gated: the same check over further triplet seeds, to show the spread
    # (an untrained stack has a pre-clamp output range of about +-150, so the
    # few unclamped pixels see the cache error through a steep slope)
    sweep = [transparency(weights, config, s)[0] for s in range(1, 16)]
    ok = value >= 45 and bit_equal and elapsed < 30
    acceptance(2, "cache transparency", ok,
               f"seed 0: PSNR(cached, uncached)={value:.2f} dB >= 45, raw mode bit-identical={bit_equal}, "
               f"{elapsed:.2f}s < 30s; seeds 1-15 (info): min={min(sweep):.1f} "
               f"median={statistics.median(sweep):.1f} dB, {sum(v >= 45 for v in sweep)}/15 >= 45 dB")
    assert ok


# ---------------------------------------------------------------------------
# 3. cache effectiveness


def test_criterion_3_cache_effectiveness(acceptance):
    start = time.perf_counter()
    config = ModelConfig()
    weights = init_weights(config, 0)
    triplet, _ = synth_triplet(SceneSpec(size=(512, 512), seed=3))
    report = bench_run(weights, config, [triplet], repeats=5, cache_bytes=DEFAULT_CAPACITY)
    off, on = report.summaries["off"], report.summaries["on"]
    reduction = report.warm_reduction
    elapsed = time.perf_counter() - start
    ok = on.lfe_evals_warm == 0 and on.warm_hit_rate == 1.0 and reduction >= 0.30 and elapsed < 300
    acceptance(3, "cache effectiveness", ok,
               f"warm LFE evals={on.lfe_evals_warm}, warm hit rate={on.warm_hit_rate:.0%}, "
               f"median off={off.median_seconds:.3f}s, warm on={on.warm_median_seconds:.3f}s, "
               f"reduction={reduction:.1%} >= 30%, {elapsed:.1f}s < 300s")
    assert ok


# ---------------------------------------------------------------------------
# 4 and 6. micro training


@lru_cache(maxsize=None)
def micro_run(variant: str, seed: int):
    config = micro_config(**{"full": {}, "no_daem": {"use_daem": False}, "no_drtm": {"use_drtm": False}}[variant])
    data = micro_dataset(count=4, seed=0)
    start = time.perf_counter()
    weights, losses = train_loop(data, config, TrainConfig(steps=200, seed=seed))
    return config, weights, losses, time.perf_counter() - start


def test_criterion_4_ablation_direction(acceptance):
    runs = {v: [micro_run(v, s) for s in SEEDS] for v in ("full", "no_daem", "no_drtm")}
    means = {v: float(np.mean([r[2][-1] for r in x])) for v, x in runs.items()}
    elapsed = sum(r[3] for x in runs.values() for r in x)
    ok = means["full"] < means["no_daem"] and means["full"] < means["no_drtm"] and elapsed < 900
    acceptance(4, "DAEM/DRTM ablation direction", ok,
               f"mean final loss over seeds {SEEDS}: full={means['full']:.4f}, "
               f"no DAEM={means['no_daem']:.4f}, no DRTM={means['no_drtm']:.4f}, {elapsed:.1f}s < 900s")
    assert ok


def test_criterion_6_learnability(acceptance):
    start = time.perf_counter()
    config, weights, losses, train_seconds = micro_run("full", 0)
    held_triplet, held_gt = micro_dataset(count=5, seed=0)[4]
    fused = model_forward(held_triplet, weights, config).data
    gain = psnr(fused, held_gt) - psnr(held_triplet.x2, held_gt)
    ratio = losses[-1] / losses[0]
    avg = np.convolve(losses, np.ones(20) / 20, mode="valid")  # avg[k] ends at step k + 19
    trend = avg[-1] < avg[0]
    elapsed = time.perf_counter() - start + train_seconds
    ok = ratio <= 0.5 and gain >= 1.0 and trend and elapsed < 900
    acceptance(6, "learnability", ok,
               f"final/initial loss={ratio:.3f} <= 0.5, held-out PSNR fused={psnr(fused, held_gt):.2f} dB "
               f"vs mid={psnr(held_triplet.x2, held_gt):.2f} dB (gain {gain:.2f} >= 1), "
               f"20-step mean {avg[0]:.4f} -> {avg[-1]:.4f}, {elapsed:.1f}s < 900s")
    assert ok


# ---------------------------------------------------------------------------
# 5. gradient correctness


def test_criterion_5_gradient_correctness(acceptance):
    start = time.perf_counter()
    errors = [grad_check_model(seed=s, probes=64) for s in SEEDS]
    elapsed = time.perf_counter() - start
    ok = max(errors) <= 1e-3 and elapsed < 120
    acceptance(5, "gradient correctness", ok,
               f"max relative error per seed {', '.join(f'{e:.2e}' for e in errors)} <= 1e-3, {elapsed:.1f}s < 120s")
    assert ok


# ---------------------------------------------------------------------------
# 7. full-resolution memory contract


@pytest.mark.slow
def test_criterion_7_full_resolution(acceptance):
    start = time.perf_counter()
    size = (3840, 2160)
    config = ModelConfig()
    triplet, _ = synth_triplet(SceneSpec(size=size, seed=4, motion=(8.0, 4.0)))
    gc.collect()
    cache = AttentionCache(DEFAULT_CAPACITY)
    out, peak = traced_forward(triplet, init_weights(config, 0), config, cache)
    bound = memory_bound(config, size, DEFAULT_CAPACITY)
    dims = out.shape
    elapsed = time.perf_counter() - start
    ok = dims == (3, 3840, 2160) and peak <= bound and elapsed < 1800
    acceptance(7, "full-resolution memory contract", ok,
               f"output {dims[0]}x{dims[1]}x{dims[2]}, peak traced {peak / 2**20:.0f} MiB "
               f"({peak / feature_bytes(config, size):.2f} feature tensors incl. cache) <= bound {bound / 2**20:.0f} MiB, "
               f"{elapsed:.1f}s < 1800s")
    assert ok


# ---------------------------------------------------------------------------
# 8. structural identities


SMALL = ModelConfig(num_fibs=2, channels=8, chunk_c=4, chunk_w=8, chunk_h=8, drtm_size=(8, 8))
small = settings(max_examples=25, deadline=None)
dims = st.tuples(st.integers(1, 6), st.integers(1, 9), st.integers(1, 9))


@small
@given(dims.flatmap(lambda s: arrays(np.float32, s, elements=st.floats(-5, 5, width=32))))
def permute_roll_cycle(x):
    y = T.permute_roll(T.permute_roll(T.permute_roll(Tensor(x)))).data
    assert np.array_equal(y, x), "three rolls are not the identity"


@small
@given(st.integers(1, 3), st.integers(1, 4), st.integers(1, 5), st.integers(1, 5), st.integers(0, 2**31))
def shuffle_inverse(r, c, w, h, seed):
    x = np.random.default_rng(seed).standard_normal((c, w * r, h * r))
    assert np.array_equal(T.pixel_shuffle(T.pixel_unshuffle(Tensor(x), r), r).data, x), "shuffle(unshuffle) != id"
    y = np.random.default_rng(seed).standard_normal((c * r * r, w, h))
    assert np.array_equal(T.pixel_unshuffle(T.pixel_shuffle(Tensor(y), r), r).data, y), "unshuffle(shuffle) != id"


@small
@given(st.integers(2, 14), st.integers(2, 14), st.integers(0, 2**31))
def residual_identity(w, h, seed):
    rng = np.random.default_rng(seed)
    weights = init_weights(SMALL, seed % 97, zero_residual=False)
    params = weights.as_tensors()
    x = Tensor(rng.standard_normal((8, w, h)).astype(np.float32))
    out = fib_forward(x, params, 0, SMALL).data
    daem = slice_cyclic_scan(x, params, 0, SMALL).data
    rolled = drtm_forward(Tensor(daem.copy()), params, 0, SMALL).data
    assert np.array_equal(out, daem + rolled), "fib output != DAEM + DRTM(DAEM)"


@settings(max_examples=8, deadline=None)
@given(st.integers(1, 20), st.integers(1, 20), st.integers(2, 4), st.booleans(), st.integers(0, 2**31))
def scheduling_determinism(w, h, workers, cached, seed):
    rng = np.random.default_rng(seed)
    t = ExposureTriplet(*(rng.uniform(0, 1, (3, 2 * w, 2 * h)) for _ in range(3)))
    weights = init_weights(SMALL, 1)
    seq = model_forward(t, weights, SMALL, AttentionCache(1 << 22) if cached else None).data
    par = model_forward(t, weights, SMALL.replace(workers=workers), AttentionCache(1 << 22) if cached else None).data
    assert np.array_equal(seq, par), "parallel output differs from sequential"


@small
@given(
    st.lists(st.tuples(st.sampled_from(["get", "put"]), st.integers(0, 9), st.integers(1, 50)), max_size=80),
    st.integers(0, 300),
)
def lru_residency(ops, capacity):
    cache = AttentionCache(capacity)
    ref: OrderedDict[int, int] = OrderedDict()
    used = 0

    def key(i):
        return BlockKey(i.to_bytes(16, "little"), "width", (1, 1, 1))

    for op, k, n in ops:
        if op == "get":
            assert (cache.lookup(key(k)) is not None) == (k in ref), "hit/miss differs from reference"
            if k in ref:
                ref.move_to_end(k)
            continue
        value = Tensor(np.linspace(-1, 1, n, dtype=np.float32).reshape(1, 1, n))
        cache.insert(key(k), value)
        size = cache._size(cache._pack(value))
        if k in ref:
            used -= ref.pop(k)
        if size <= capacity:
            while used + size > capacity:
                used -= ref.popitem(last=False)[1]
            ref[k] = size
            used += size
        assert cache.resident_keys() == [key(i) for i in ref], "resident set differs from reference"
        assert cache.stats.bytes_used == used <= capacity, "byte accounting differs"


def test_criterion_8_structural_identities(acceptance):
    start = time.perf_counter()
    results = {
        name: holds(prop)
        for name, prop in (
            ("permute-roll cycle", permute_roll_cycle),
            ("shuffle inverse", shuffle_inverse),
            ("FIB residual", residual_identity),
            ("parallel = sequential", scheduling_determinism),
            ("LRU residency", lru_residency),
        )
    }
    elapsed = time.perf_counter() - start
    ok = all(r[0] for r in results.values()) and elapsed < 60
    detail = ", ".join(f"{name}: {msg}" for name, (_, msg) in results.items())
    acceptance(8, "structural identities", ok, f"{detail}, {elapsed:.1f}s < 60s")
    assert ok


# ---------------------------------------------------------------------------
# 9. metric oracles


def test_criterion_9_metric_oracles(acceptance):
    start = time.perf_counter()
    half = np.full((3, 16, 16), 0.5)
    closed = psnr(half, np.zeros_like(half))
    rng = np.random.default_rng(9)
    a = rng.uniform(0, 1, (3, 16, 14))
    b = np.clip(a + rng.normal(0, 0.05, a.shape), 0, 1)
    self_ssim = ssim(a, a)

    sq = sum((u - v) ** 2 for u, v in zip(a.reshape(-1).tolist(), b.reshape(-1).tolist()))
    psnr_oracle = 10 * math.log10(a.size / sq)

    k = np.arange(11) - 5
    g = np.exp(-(k ** 2) / 4.5)
    win = np.outer(g, g) / np.outer(g, g).sum()
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    planes = []
    for ch in range(3):
        vals = []
        for i in range(a.shape[1] - 10):
            for j in range(a.shape[2] - 10):
                x, y = a[ch, i:i + 11, j:j + 11], b[ch, i:i + 11, j:j + 11]
                mx, my = (win * x).sum(), (win * y).sum()
                vx, vy = (win * (x - mx) ** 2).sum(), (win * (y - my) ** 2).sum()
                cxy = (win * (x - mx) * (y - my)).sum()
                vals.append((2 * mx * my + c1) * (2 * cxy + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2)))
        planes.append(statistics.fmean(vals))
    ssim_oracle = statistics.fmean(planes)

    psnr_err = abs(psnr(a, b) - psnr_oracle)
    ssim_err = abs(ssim(a, b) - ssim_oracle)
    elapsed = time.perf_counter() - start
    ok = (round(closed, 4) == 6.0206 and abs(self_ssim - 1) <= 1e-9 and psnr_err <= 1e-4
          and ssim_err <= 1e-6 and elapsed < 60)
    acceptance(9, "metric oracles", ok,
               f"PSNR(0.5, 0)={closed:.4f} dB, SSIM(a, a)={self_ssim:.12f}, "
               f"|PSNR - loop oracle|={psnr_err:.1e} <= 1e-4, |SSIM - direct oracle|={ssim_err:.1e} <= 1e-6, "
               f"{elapsed:.2f}s < 60s")
    assert ok
