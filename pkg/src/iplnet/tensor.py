"""Dense rank-3 tensors with the handful of operations the fusion network uses.

Every operation records a backward closure when one of its inputs requires a
gradient, so a forward pass doubles as a tape for :func:`vjp_eval`.  When no
input requires a gradient nothing is recorded and intermediates are released
as soon as Python drops them, which is what keeps full-resolution inference
inside its memory bound.

Layout is ``(channels, width, height)``, row-major, height innermost.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
import numba

__all__ = [
    "ShapeError",
    "Tensor",
    "ConvParams",
    "conv",
    "gap",
    "activation",
    "relu",
    "sigmoid",
    "gelu",
    "permute_roll",
    "interpolate_bilinear",
    "bilinear_matrix",
    "pixel_unshuffle",
    "pixel_shuffle",
    "elementwise",
    "add",
    "mul",
    "sub",
    "absolute",
    "clamp",
    "concat",
    "take_block",
    "sum_all",
    "mean_all",
    "vjp_eval",
    "finite_diff_check",
    "relative_error",
]


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class Tensor:
    """An ndarray plus the bookkeeping needed for reverse-mode differentiation."""

    __slots__ = ("data", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], tuple] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag}, requires_grad={self.requires_grad})"


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(out: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    t = Tensor(out)
    if any(p.requires_grad for p in parents):
        t.requires_grad = True
        t._parents = tuple(parents)
        t._backward = backward
    return t


def _check_rank3(x: Tensor, what: str) -> None:
    if x.data.ndim != 3:
        raise ShapeError(f"{what} expects a rank-3 (C, W, H) tensor, got shape {x.shape}")


# ---------------------------------------------------------------------------
# convolution


@dataclass
class ConvParams:
    """Weight ``(out, in, kh, kw)`` and bias ``(out,)`` of a 1x1 or 3x3 convolution."""

    weight: Tensor
    bias: Tensor

    def __post_init__(self):
        w, b = self.weight.shape, self.bias.shape
        if len(w) != 4 or w[2:] not in ((1, 1), (3, 3)):
            raise ShapeError(f"conv weight must be (out, in, 1, 1) or (out, in, 3, 3), got {w}")
        if b != (w[0],):
            raise ShapeError(f"conv bias shape {b} does not match out-channels {w[0]}")

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    @property
    def kernel(self) -> int:
        return self.weight.shape[2]


def _shift_slices(d: int, n: int) -> tuple[slice, slice]:
    # out[i] += y[i + d] for every i with 0 <= i + d < n
    return slice(max(0, -d), n - max(0, d)), slice(max(0, d), n + min(0, d))


def conv(x: Tensor, params: ConvParams) -> Tensor:
    """Cross-correlation plus bias; 3x3 kernels use zero padding 1.

    Kernel axis 2 walks the width axis and kernel axis 3 the height axis.
    """
    _check_rank3(x, "conv")
    weight, bias = params.weight, params.bias
    c, w, h = x.shape
    if c != params.in_channels:
        raise ShapeError(
            f"conv input shape {x.shape} does not match weight shape {weight.shape} "
            f"(expected {params.in_channels} input channels)"
        )
    k = params.kernel
    o = params.out_channels
    xd, wd = x.data, weight.data
    flat = xd.reshape(c, w * h)
    if k == 1:
        out = (np.ascontiguousarray(wd[:, :, 0, 0]) @ flat).reshape(o, w, h)
    else:
        # Zero-pad once; on the padded grid every tap reads a contiguous
        # window of the flattened input, so each tap is one strided GEMM and
        # one contiguous add.  The two spare columns per row are dropped at
        # the end, and one spare row keeps the last window in bounds.
        hp = h + 2
        n = w * hp
        padded = np.zeros((c, w + 3, hp), dtype=xd.dtype)
        padded[:, 1:w + 1, 1:h + 1] = xd
        pflat = padded.reshape(c, -1)
        taps = np.ascontiguousarray(wd.transpose(2, 3, 0, 1))
        acc = np.zeros((o, n), dtype=np.result_type(xd, wd))
        tmp = np.empty_like(acc)
        for a in range(3):
            for b in range(3):
                start = a * hp + b
                np.matmul(taps[a, b], pflat[:, start:start + n], out=tmp)
                acc += tmp
        del padded, pflat, tmp
        out = np.ascontiguousarray(acc.reshape(o, w, hp)[:, :, :h])
        del acc
    out += bias.data.reshape(o, 1, 1)

    def backward(g: np.ndarray):
        gflat = g.reshape(o, w * h)
        if k == 1:
            k2 = np.ascontiguousarray(wd[:, :, 0, 0].T)
            dx = (k2 @ gflat).reshape(c, w, h)
            dw = (gflat @ flat.T).reshape(o, c, 1, 1)
        else:
            taps_t = np.ascontiguousarray(wd.transpose(2, 3, 1, 0))
            dx = np.zeros_like(xd)
            dw = np.zeros_like(wd)
            for a in range(3):
                dst_w, src_w = _shift_slices(a - 1, w)
                for b in range(3):
                    dst_h, src_h = _shift_slices(b - 1, h)
                    gs = g[:, dst_w, dst_h]
                    xs = xd[:, src_w, src_h]
                    dw[:, :, a, b] = gs.reshape(o, -1) @ xs.reshape(c, -1).T
                    z = (taps_t[a, b] @ gflat).reshape(c, w, h)
                    dx[:, src_w, src_h] += z[:, dst_w, dst_h]
        db = gflat.sum(axis=1)
        return dx, dw, db

    return _record(out, (x, weight, bias), backward)


# ---------------------------------------------------------------------------
# pooling and activations


def gap(x: Tensor) -> Tensor:
    """Global average pooling to shape ``(C, 1, 1)``."""
    _check_rank3(x, "gap")
    c, w, h = x.shape
    out = x.data.mean(axis=(1, 2), keepdims=True, dtype=np.float64).astype(x.dtype)

    def backward(g):
        return (np.broadcast_to(g / (w * h), x.shape).astype(x.dtype),)

    return _record(out, (x,), backward)


@numba.vectorize(["float32(float32)", "float64(float64)"], cache=True)
def _normal_cdf(x):
    return 0.5 * (1.0 + math.erf(x * 0.7071067811865476))


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def relu(x: Tensor) -> Tensor:
    xd = x.data
    out = np.maximum(xd, 0)

    def backward(g):
        return (g * (xd > 0),)

    return _record(out, (x,), backward)


def sigmoid(x: Tensor) -> Tensor:
    # 1 / (1 + exp(-x)) in place; exp overflow gives inf and a clean 0
    out = np.negative(x.data)
    with np.errstate(over="ignore"):
        np.exp(out, out=out)
    out += 1
    np.reciprocal(out, out=out)

    def backward(g):
        return (g * out * (1 - out),)

    return _record(out, (x,), backward)


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, ``x * Phi(x)`` with Phi the standard normal CDF."""
    xd = x.data
    cdf = _normal_cdf(xd)
    out = xd * cdf

    def backward(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * xd * xd)
        return (g * (cdf + xd * pdf),)

    return _record(out, (x,), backward)


_ACTIVATIONS = {"relu": relu, "sigmoid": sigmoid, "gelu": gelu}


def activation(x: Tensor, kind: str) -> Tensor:
    try:
        fn = _ACTIVATIONS[kind]
    except KeyError:
        raise ValueError(f"unknown activation {kind!r}; expected one of {sorted(_ACTIVATIONS)}") from None
    return fn(x)


# ---------------------------------------------------------------------------
# layout operations


def permute_roll(x: Tensor) -> Tensor:
    """Roll axes ``(C, W, H) -> (W, H, C)`` with a physical copy."""
    _check_rank3(x, "permute_roll")
    out = np.ascontiguousarray(x.data.transpose(1, 2, 0))

    def backward(g):
        return (np.ascontiguousarray(g.transpose(2, 0, 1)),)

    return _record(out, (x,), backward)


def _bilinear_taps(n_in: int, n_out: int):
    scale = n_in / n_out
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * scale - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, src - lo


def bilinear_matrix(n_in: int, n_out: int, dtype=np.float64) -> np.ndarray:
    """``(n_out, n_in)`` resampling matrix, half-pixel centres, edge clamped."""
    lo, hi, frac = _bilinear_taps(n_in, n_out)
    m = np.zeros((n_out, n_in), dtype=np.float64)
    rows = np.arange(n_out)
    np.add.at(m, (rows, lo), 1.0 - frac)
    np.add.at(m, (rows, hi), frac)
    return m.astype(dtype)


def _shrink_axis(a: np.ndarray, axis: int, n_out: int) -> np.ndarray:
    # two-tap gather; far cheaper than a dense matrix when shrinking
    lo, hi, frac = _bilinear_taps(a.shape[axis], n_out)
    shape = [1] * a.ndim
    shape[axis] = n_out
    frac = frac.astype(a.dtype).reshape(shape)
    out = np.take(a, lo, axis=axis)
    out *= 1 - frac
    out += np.take(a, hi, axis=axis) * frac
    return out


def interpolate_bilinear(x: Tensor, target: tuple[int, int]) -> Tensor:
    """Separable bilinear resize of every channel to ``target = (W', H')``."""
    _check_rank3(x, "interpolate_bilinear")
    c, w, h = x.shape
    tw, th = int(target[0]), int(target[1])
    if tw < 1 or th < 1:
        raise ShapeError(f"interpolation target must be at least 1x1, got {target}")
    if (tw, th) == (w, h):
        out = x.data.copy()
        return _record(out, (x,), lambda g: (g,))
    mw = bilinear_matrix(w, tw, x.dtype)
    mh = bilinear_matrix(h, th, x.dtype)
    if tw <= w and th <= h:
        out = _shrink_axis(_shrink_axis(x.data, 1, tw), 2, th)
    elif tw * w * h + tw * h * th <= w * h * th + tw * w * th:
        out = np.matmul(np.matmul(mw, x.data), mh.T)
    else:
        out = np.matmul(mw, np.matmul(x.data, mh.T))

    def backward(g):
        return (np.matmul(mw.T, np.matmul(g, mh)),)

    return _record(out, (x,), backward)


def pixel_unshuffle(x: Tensor, r: int) -> Tensor:
    """Space-to-depth: ``out[c*r*r + i*r + j, w, h] = x[c, w*r + i, h*r + j]``."""
    _check_rank3(x, "pixel_unshuffle")
    c, w, h = x.shape
    if r < 1 or w % r or h % r:
        raise ShapeError(f"pixel_unshuffle factor {r} must divide width and height of shape {x.shape}")
    out = np.ascontiguousarray(
        x.data.reshape(c, w // r, r, h // r, r).transpose(0, 2, 4, 1, 3)
    ).reshape(c * r * r, w // r, h // r)

    def backward(g):
        return (_depth_to_space(g, r),)

    return _record(out, (x,), backward)


def _depth_to_space(a: np.ndarray, r: int) -> np.ndarray:
    cr, w, h = a.shape
    c = cr // (r * r)
    return np.ascontiguousarray(
        a.reshape(c, r, r, w, h).transpose(0, 3, 1, 4, 2)
    ).reshape(c, w * r, h * r)


def pixel_shuffle(x: Tensor, r: int) -> Tensor:
    """Depth-to-space, the exact inverse of :func:`pixel_unshuffle`."""
    _check_rank3(x, "pixel_shuffle")
    cr = x.shape[0]
    if r < 1 or cr % (r * r):
        raise ShapeError(f"pixel_shuffle factor {r}: r*r must divide channel count of shape {x.shape}")
    out = _depth_to_space(x.data, r)

    def backward(g):
        c, w, h = g.shape
        return (
            np.ascontiguousarray(
                g.reshape(c, w // r, r, h // r, r).transpose(0, 2, 4, 1, 3)
            ).reshape(cr, w // r, h // r),
        )

    return _record(out, (x,), backward)


def concat(parts: Sequence[Tensor], axis: int) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    out = np.concatenate([p.data for p in parts], axis=axis)
    bounds = np.cumsum([0] + [p.shape[axis] for p in parts])

    def backward(g):
        index = [slice(None)] * g.ndim
        grads = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            index[axis] = slice(lo, hi)
            grads.append(g[tuple(index)])
        return tuple(grads)

    return _record(out, parts, backward)


def take_block(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    """Contiguous copy of ``x[start:stop]`` along ``axis``."""
    index = [slice(None)] * x.data.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)
    out = np.ascontiguousarray(x.data[index])

    def backward(g):
        full = np.zeros_like(x.data)
        full[index] = g
        return (full,)

    return _record(out, (x,), backward)


# ---------------------------------------------------------------------------
# elementwise arithmetic


def _broadcast_ok(a: tuple, b: tuple) -> bool:
    if a == b:
        return True
    return len(a) == 3 and len(b) == 3 and b == (a[0], 1, 1)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    return g.sum(axis=(1, 2), keepdims=True)


def elementwise(a: Tensor, b: Tensor, op: str) -> Tensor:
    """``a + b`` or ``a * b``; ``b`` may also be ``(C, 1, 1)`` against ``a`` of ``(C, W, H)``."""
    a, b = _as_tensor(a), _as_tensor(b)
    if not _broadcast_ok(a.shape, b.shape):
        raise ShapeError(f"cannot combine shapes {a.shape} and {b.shape} with {op!r}")
    ad, bd = a.data, b.data
    if op == "add":
        out = ad + bd

        def backward(g):
            return g, _unbroadcast(g, b.shape)

    elif op == "mul":
        out = ad * bd

        def backward(g):
            return g * bd, _unbroadcast(g * ad, b.shape)

    else:
        raise ValueError(f"unknown elementwise op {op!r}")
    return _record(out, (a, b), backward)


def add(a, b) -> Tensor:
    return elementwise(a, b, "add")


def mul(a, b) -> Tensor:
    return elementwise(a, b, "mul")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"cannot subtract shapes {a.shape} and {b.shape}")
    return _record(a.data - b.data, (a, b), lambda g: (g, -g))


def absolute(x: Tensor) -> Tensor:
    xd = x.data
    return _record(np.abs(xd), (x,), lambda g: (g * np.sign(xd),))


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    xd = x.data
    out = np.clip(xd, lo, hi)

    def backward(g):
        return (g * ((xd >= lo) & (xd <= hi)),)

    return _record(out, (x,), backward)


def sum_all(x: Tensor) -> Tensor:
    out = np.asarray(x.data.sum(dtype=np.float64), dtype=x.dtype)
    return _record(out, (x,), lambda g: (np.full(x.shape, g, dtype=x.dtype),))


def mean_all(x: Tensor) -> Tensor:
    n = x.data.size
    out = np.asarray(x.data.mean(dtype=np.float64), dtype=x.dtype)
    return _record(out, (x,), lambda g: (np.full(x.shape, g / n, dtype=x.dtype),))


# ---------------------------------------------------------------------------
# reverse mode


def _topological(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def vjp_eval(
    output: Tensor,
    params: Mapping[str, Tensor],
    seed: np.ndarray | None = None,
) -> dict[str, np.ndarray]:
    """Pull ``seed`` back through the recorded graph of ``output``.

    Returns one gradient per entry of ``params`` (zeros for parameters the
    output does not depend on).  ``seed`` defaults to ones, which for a scalar
    output gives the plain gradient.
    """
    if seed is None:
        seed = np.ones(output.shape, dtype=output.dtype)
    seed = np.asarray(seed, dtype=output.dtype)
    if seed.shape != output.shape:
        raise ShapeError(f"seed shape {seed.shape} does not match output shape {output.shape}")

    grads: dict[int, np.ndarray] = {}
    if output.requires_grad:
        grads[id(output)] = seed
        for node in reversed(_topological(output)):
            g = grads.get(id(node))
            if g is None or node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if not parent.requires_grad or pg is None:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
            if node._parents:
                # intermediate cotangents are not needed once propagated
                del grads[id(node)]

    result = {}
    for name, p in params.items():
        g = grads.get(id(p))
        if g is None:
            g = np.zeros_like(p.data)
        result[name] = np.asarray(g, dtype=p.dtype).reshape(p.shape)
    return result


def relative_error(a, b) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(1e-8, np.abs(a) + np.abs(b))


def finite_diff_check(
    f: Callable[[Mapping[str, Tensor]], Tensor],
    params: Mapping[str, np.ndarray],
    h: float = 1e-3,
    probe: Iterable[tuple[str, int]] | None = None,
) -> float:
    """Worst relative error between ``vjp_eval`` and central differences.

    ``f`` maps a dict of parameter tensors to a scalar tensor.  ``probe``
    restricts the comparison to ``(name, flat_index)`` pairs; by default every
    scalar of every parameter is checked.
    """
    if h <= 0:
        raise ValueError("finite-difference step must be positive")
    values = {k: np.array(v, copy=True) for k, v in params.items()}
    tensors = {k: Tensor(v, requires_grad=True, name=k) for k, v in values.items()}
    analytic = vjp_eval(f(tensors), tensors)

    if probe is None:
        probe = [(k, i) for k, v in values.items() for i in range(v.size)]

    def evaluate() -> float:
        return float(f({k: Tensor(v) for k, v in values.items()}).data)

    worst = 0.0
    for name, idx in probe:
        flat = values[name].reshape(-1)
        orig = flat[idx]
        flat[idx] = orig + h
        up = evaluate()
        flat[idx] = orig - h
        down = evaluate()
        flat[idx] = orig
        numeric = (up - down) / (2 * h)
        err = float(relative_error(analytic[name].reshape(-1)[idx], numeric))
        worst = max(worst, err)
    return worst
