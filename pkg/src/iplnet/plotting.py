"""Report figures written to image files (headless matplotlib)."""

from __future__ import annotations

import io
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .bench import BenchReport  # noqa: E402
from .fileio import atomic_write  # noqa: E402

__all__ = ["plot_loss_curve", "plot_bench", "render_figure"]


def render_figure(fig, path) -> None:
    """Save ``fig`` atomically; the format follows the file extension."""
    path = Path(path)
    fmt = path.suffix.lstrip(".").lower() or "png"
    # drop the version stamp so figures are byte-stable; each backend names it differently
    stamp = {"png": {"Software": None}, "svg": {"Creator": None, "Date": None}, "pdf": {"Creator": None, "Producer": None, "CreationDate": None}}
    buf = io.BytesIO()
    try:
        fig.savefig(buf, format=fmt, dpi=120, metadata=stamp.get(fmt))
    finally:
        plt.close(fig)
    atomic_write(path, buf.getvalue())


def plot_loss_curve(losses: Sequence[float], path, window: int = 20) -> None:
    steps = np.arange(len(losses))
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.plot(steps, losses, lw=0.8, alpha=0.5, label="loss")
    if len(losses) >= window:
        avg = np.convolve(losses, np.ones(window) / window, mode="valid")
        ax.plot(steps[window - 1:], avg, lw=1.6, label=f"{window}-step mean")
    ax.set_xlabel("step")
    ax.set_ylabel("L1 loss")
    ax.set_yscale("log")
    ax.grid(alpha=0.3)
    ax.legend()
    fig.tight_layout()
    render_figure(fig, path)


def plot_bench(report: BenchReport, path) -> None:
    """Per-iteration time for each cache mode; iteration 0 is the cold pass."""
    fig, ax = plt.subplots(figsize=(6, 3.5))
    for mode, label in (("off", "cache off"), ("on", "cache on")):
        rows = [r for r in report.rows if r.mode == mode]
        if rows:
            ax.plot([r.iteration for r in rows], [r.seconds_per_image for r in rows], marker="o", label=label)
    ax.set_xlabel("iteration")
    ax.set_ylabel("seconds per image")
    ax.set_ylim(bottom=0)
    ax.grid(alpha=0.3)
    ax.legend()
    fig.tight_layout()
    render_figure(fig, path)
