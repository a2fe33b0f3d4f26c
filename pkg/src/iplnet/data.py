"""Procedural dynamic scenes shot at three exposures.

A scene is a linear-radiance image: a smooth background gradient plus random
rectangles and discs, some brighter than the sensor clips.  Foreground shapes
move rigidly between the three shots; the middle shot is the reference
instant.  Each shot is exposed as ``clamp(radiance * 2**ev) ** (1 / gamma)``
and the ground truth is the reference radiance exposed at ev 0.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .model import ExposureTriplet

__all__ = ["SceneSpec", "synth_triplet", "scene_seed", "render_radiance"]


@dataclass(frozen=True)
class SceneSpec:
    size: tuple[int, int] = (64, 64)
    seed: int = 0
    num_shapes: int = 6
    # (dx, dy) displacement of every foreground shape per frame, in pixels
    motion: tuple[float, float] = (2.0, 1.0)
    ev_offsets: tuple[float, float, float] = (-2.0, 0.0, 2.0)
    gamma: float = 2.2

    def __post_init__(self):
        w, h = (int(s) for s in self.size)
        object.__setattr__(self, "size", (w, h))
        object.__setattr__(self, "motion", tuple(float(m) for m in self.motion))
        object.__setattr__(self, "ev_offsets", tuple(float(e) for e in self.ev_offsets))
        if w < 16 or h < 16:
            raise ValueError(f"scene size must be at least 16x16, got {w}x{h}")
        if self.num_shapes < 0:
            raise ValueError("num_shapes must be non-negative")
        if math.hypot(*self.motion) >= min(w, h) / 4:
            raise ValueError(f"motion {self.motion} must be shorter than a quarter of the smaller side")
        evs = self.ev_offsets
        if len(evs) != 3 or not evs[0] < evs[1] < evs[2]:
            raise ValueError(f"ev_offsets must be three strictly increasing values, got {evs}")
        if not self.gamma > 0:
            raise ValueError("gamma must be positive")


@dataclass(frozen=True)
class _Shape:
    kind: str
    cx: float
    cy: float
    a: float  # half width or radius
    b: float  # half height (rectangles)
    radiance: np.ndarray = field(compare=False)


def scene_seed(seed: int, index: int) -> int:
    """Independent per-scene seed for scene ``index`` of a dataset seeded with ``seed``."""
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def _draw_shapes(spec: SceneSpec, rng: np.random.Generator) -> list[_Shape]:
    w, h = spec.size
    shapes = []
    for _ in range(spec.num_shapes):
        kind = "rect" if rng.random() < 0.5 else "disc"
        cx, cy = rng.uniform(0.15, 0.85) * w, rng.uniform(0.15, 0.85) * h
        a = rng.uniform(0.05, 0.2) * min(w, h)
        b = rng.uniform(0.05, 0.2) * min(w, h)
        # log-uniform brightness spanning deep shadow to well past clipping
        level = 2.0 ** rng.uniform(-4.0, 2.5)
        tint = rng.uniform(0.6, 1.0, size=3)
        shapes.append(_Shape(kind, cx, cy, a, b, (level * tint).astype(np.float64)))
    return shapes


def render_radiance(spec: SceneSpec, background: np.ndarray, shapes: list[_Shape], shift: float) -> np.ndarray:
    """Radiance ``(3, W, H)`` with shapes displaced by ``shift`` times the motion vector."""
    w, h = spec.size
    img = background.copy()
    x = np.arange(w, dtype=np.float64)[:, None] + 0.5
    y = np.arange(h, dtype=np.float64)[None, :] + 0.5
    dx, dy = (shift * m for m in spec.motion)
    for s in shapes:
        cx, cy = s.cx + dx, s.cy + dy
        if s.kind == "rect":
            mask = (np.abs(x - cx) <= s.a) & (np.abs(y - cy) <= s.b)
        else:
            mask = (x - cx) ** 2 + (y - cy) ** 2 <= s.a ** 2
        img[:, mask] = s.radiance[:, None]
    return img


def _background(spec: SceneSpec, rng: np.random.Generator) -> np.ndarray:
    w, h = spec.size
    u = np.linspace(0.0, 1.0, w)[:, None]
    v = np.linspace(0.0, 1.0, h)[None, :]
    corners = rng.uniform(0.05, 0.9, size=(3, 4))
    c00, c10, c01, c11 = (corners[:, i, None, None] for i in range(4))
    return c00 * (1 - u) * (1 - v) + c10 * u * (1 - v) + c01 * (1 - u) * v + c11 * u * v


def _expose(radiance: np.ndarray, ev: float, gamma: float) -> np.ndarray:
    return (np.clip(radiance * 2.0 ** ev, 0.0, 1.0) ** (1.0 / gamma)).astype(np.float32)


def synth_triplet(spec: SceneSpec) -> tuple[ExposureTriplet, np.ndarray]:
    """Low/mid/high exposures of one moving scene, plus the ground truth."""
    rng = np.random.default_rng(spec.seed)
    background = _background(spec, rng)
    shapes = _draw_shapes(spec, rng)
    frames = [
        _expose(render_radiance(spec, background, shapes, shift), ev, spec.gamma)
        for shift, ev in zip((-1.0, 0.0, 1.0), spec.ev_offsets)
    ]
    gt = _expose(render_radiance(spec, background, shapes, 0.0), 0.0, spec.gamma)
    return ExposureTriplet(*frames), gt
