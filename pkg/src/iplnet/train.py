"""Desk-scale training: L1 loss, AdamW/SGD, a seeded loop, and a model gradient check.

Training always runs the network without the attention cache; the cache is
an inference device and the tape needs every block's LFE output.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .data import SceneSpec, scene_seed, synth_triplet
from .model import ExposureTriplet, ModelConfig, ModelWeights, init_weights, model_forward
from .tensor import ShapeError, Tensor

__all__ = [
    "TrainConfig",
    "DivergenceError",
    "AdamW",
    "SGD",
    "make_optimizer",
    "l1_loss",
    "train_step",
    "train_loop",
    "grad_check_model",
    "gradcheck_config",
    "loss_csv",
    "micro_config",
    "micro_dataset",
    "MICRO_EV",
]

Sample = tuple[ExposureTriplet, np.ndarray]


class DivergenceError(RuntimeError):
    def __init__(self, step: int, value: float):
        super().__init__(f"training diverged at step {step}: loss is {value}")
        self.step = step
        self.value = value


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 2e-4
    steps: int = 200
    batch_size: int = 4
    seed: int = 0
    optimizer: str = "adamw"
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 1e-4
    # start from a zero upsampler (see init_weights)
    zero_output_init: bool = True

    def __post_init__(self):
        if not self.learning_rate >= 0 or not math.isfinite(self.learning_rate):
            raise ValueError(f"learning_rate must be finite and non-negative, got {self.learning_rate}")
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.optimizer not in ("adamw", "sgd"):
            raise ValueError(f"optimizer must be 'adamw' or 'sgd', got {self.optimizer!r}")


@dataclass
class AdamW:
    """Adam with decoupled weight decay; state is keyed by parameter name."""

    lr: float
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 1e-4
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def update(self, weights: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for name, p in weights.items():
            g = grads[name]
            m = self.m.setdefault(name, np.zeros_like(p))
            v = self.v.setdefault(name, np.zeros_like(p))
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p *= 1.0 - self.lr * self.weight_decay
            p -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)


@dataclass
class SGD:
    lr: float
    weight_decay: float = 0.0

    def update(self, weights: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        for name, p in weights.items():
            p *= 1.0 - self.lr * self.weight_decay
            p -= (self.lr * grads[name]).astype(p.dtype)


def make_optimizer(config: TrainConfig):
    if config.optimizer == "sgd":
        return SGD(config.learning_rate, config.weight_decay)
    return AdamW(config.learning_rate, config.betas, config.eps, config.weight_decay)


def l1_loss(pred, target) -> Tensor:
    """Mean absolute difference over every pixel and channel."""
    pred = pred if isinstance(pred, Tensor) else Tensor(pred)
    target = target if isinstance(target, Tensor) else Tensor(target)
    if pred.shape != target.shape:
        raise ShapeError(f"loss inputs differ in shape: {pred.shape} vs {target.shape}")
    return T.mean_all(T.absolute(T.sub(pred, target)))


def _training_config(config: ModelConfig) -> ModelConfig:
    return config if not config.cache_enabled else config.replace(cache_enabled=False)


def batch_loss(params: dict[str, Tensor], batch: Sequence[Sample], config: ModelConfig) -> Tensor:
    """Mean of per-sample L1 losses, recorded on one tape."""
    if not batch:
        raise ValueError("batch is empty")
    sizes = {triplet.size for triplet, _ in batch}
    if len(sizes) != 1:
        raise ShapeError(f"batch mixes frame sizes {sorted(sizes)}")
    config = _training_config(config)
    total = None
    for triplet, gt in batch:
        loss = l1_loss(model_forward(triplet, params, config, None), np.asarray(gt, dtype=np.float32))
        total = loss if total is None else T.add(total, loss)
    return T.mul(total, Tensor(np.asarray(1.0 / len(batch), dtype=total.dtype)))


def train_step(
    weights: ModelWeights,
    batch: Sequence[Sample],
    config: ModelConfig,
    train_config: TrainConfig,
    optimizer=None,
    step: int = 0,
) -> tuple[ModelWeights, float]:
    """One optimizer update on ``batch``; returns new weights and the pre-update loss."""
    params = weights.as_tensors(requires_grad=True)
    loss = batch_loss(params, batch, config)
    value = float(loss.data)
    if not math.isfinite(value):
        raise DivergenceError(step, value)
    grads = T.vjp_eval(loss, params)
    updated = weights.copy()
    (optimizer or make_optimizer(train_config)).update(updated.tensors, grads)
    return updated, value


def train_loop(
    dataset: Sequence[Sample],
    config: ModelConfig,
    train_config: TrainConfig,
    weights: ModelWeights | None = None,
) -> tuple[ModelWeights, list[float]]:
    """Seeded mini-batch training; returns final weights and the per-step losses."""
    if not dataset:
        raise ValueError("dataset is empty")
    rng = np.random.default_rng(train_config.seed)
    if weights is None:
        weights = init_weights(config, train_config.seed, zero_output=train_config.zero_output_init)
    optimizer = make_optimizer(train_config)
    batch_size = min(train_config.batch_size, len(dataset))
    order: list[int] = []
    losses = []
    for step in range(train_config.steps):
        if len(order) < batch_size:
            order.extend(rng.permutation(len(dataset)).tolist())
        picks, order = order[:batch_size], order[batch_size:]
        weights, value = train_step(weights, [dataset[i] for i in picks], config, train_config, optimizer, step)
        losses.append(value)
    return weights, losses


def loss_csv(losses: Sequence[float]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["step", "loss"])
    for i, value in enumerate(losses):
        writer.writerow([i, repr(float(value))])
    return buf.getvalue()


# The reference shot sits one stop under the ground-truth exposure; with the
# reference at ev 0 the mid frame would already equal the ground truth.
MICRO_EV = (-3.0, -1.0, 1.0)


def micro_config(**changes) -> ModelConfig:
    """One block, eight channels, chunks and rolling size scaled to 64x64 frames."""
    base = ModelConfig(
        num_fibs=1, channels=8, chunk_c=8, chunk_w=16, chunk_h=16,
        drtm_size=(16, 16), cache_enabled=False,
    )
    return base.replace(**changes) if changes else base


def micro_dataset(count: int = 4, seed: int = 0, size: int = 64, ev=MICRO_EV) -> list[Sample]:
    """``count`` synthetic scenes; scene ``count`` of the same seed serves as a held-out scene."""
    return [
        synth_triplet(SceneSpec(size=(size, size), seed=scene_seed(seed, i), ev_offsets=ev))
        for i in range(count)
    ]


def gradcheck_config(**changes) -> ModelConfig:
    """The small 1-block model used for finite-difference checks (about 3.8k parameters)."""
    base = ModelConfig(
        num_fibs=1, channels=8, chunk_c=4, chunk_w=3, chunk_h=3,
        drtm_size=(6, 6), lfe_reduction=4, cache_enabled=False,
    )
    return base.replace(**changes) if changes else base


def grad_check_model(
    config: ModelConfig | None = None,
    seed: int = 0,
    probes: int = 64,
    size: tuple[int, int] = (8, 8),
    h: float = 1e-5,
) -> float:
    """Worst relative error of the model's reverse-mode gradient on a random probe.

    Runs in float64 on random frames of ``size``.  The checked scalar is the
    inner product of the output with a seeded random cotangent, so the check
    covers a full vector-Jacobian product rather than one loss.
    """
    config = _training_config(config or gradcheck_config())
    rng = np.random.default_rng(seed)
    w, hgt = size
    triplet = ExposureTriplet(*(rng.uniform(0.05, 0.95, size=(3, w, hgt)) for _ in range(3))).astype(np.float64)
    cotangent = Tensor(rng.standard_normal((3, w, hgt)))
    # every path live: a zero final DRTM conv would null the rolling stage's gradients
    weights = init_weights(config, seed, zero_residual=False)
    values = {k: v.astype(np.float64) for k, v in weights.items()}

    names = list(values)
    sizes = np.array([values[k].size for k in names])
    flat = rng.choice(int(sizes.sum()), size=min(probes, int(sizes.sum())), replace=False)
    bounds = np.cumsum(sizes)
    probe = []
    for i in np.sort(flat):
        j = int(np.searchsorted(bounds, i, side="right"))
        probe.append((names[j], int(i - (bounds[j - 1] if j else 0))))

    def objective(params):
        return T.sum_all(T.mul(model_forward(triplet, params, config, None), cotangent))

    return T.finite_diff_check(objective, values, h=h, probe=probe)
