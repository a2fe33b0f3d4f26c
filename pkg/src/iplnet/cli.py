"""Command line: fuse, synth, train, metrics, bench, gradcheck.

Exit status is 0 on success, 1 on a usage error and 2 on a runtime or I/O
error.  Outputs are written atomically, so failures leave no files behind.
"""

from __future__ import annotations

import argparse
import re
import sys
import time
from pathlib import Path
from typing import Sequence

from .cache import DEFAULT_CAPACITY, AttentionCache
from .data import SceneSpec, scene_seed, synth_triplet
from .fileio import atomic_write, encode_image, load_image, load_weights, save_image, save_weights
from .metrics import evaluate
from .model import ExposureTriplet, ModelConfig, model_forward

__all__ = ["main", "build_parser"]

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2
GRADCHECK_TOLERANCE = 1e-3
_SCENE = re.compile(r"scene_(\d+)_low\.(ppm|png)$")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _size(text: str) -> tuple[int, int]:
    m = re.fullmatch(r"(\d+)[xX](\d+)", text)
    if not m:
        raise argparse.ArgumentTypeError(f"expected WxH, got {text!r}")
    return int(m.group(1)), int(m.group(2))


def _evs(text: str) -> tuple[float, float, float]:
    try:
        values = tuple(float(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected three comma-separated numbers, got {text!r}") from None
    if len(values) != 3:
        raise argparse.ArgumentTypeError(f"expected three comma-separated numbers, got {text!r}")
    return values


def _nonneg(text: str) -> int:
    value = int(text)
    if value < 0:
        raise argparse.ArgumentTypeError(f"expected a non-negative integer, got {text!r}")
    return value


def _positive(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text!r}")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="iplnet", description="Chunked, cached multi-exposure fusion.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("fuse", help="fuse a low/mid/high exposure triplet")
    p.add_argument("--low", required=True, type=Path)
    p.add_argument("--mid", required=True, type=Path)
    p.add_argument("--high", required=True, type=Path)
    p.add_argument("--weights", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--no-cache", action="store_true", help="disable the attention cache")
    p.add_argument("--cache-bytes", type=_nonneg, default=DEFAULT_CAPACITY)
    p.add_argument("--q-bits", type=int, default=8, choices=range(1, 9), metavar="N")
    p.add_argument("--chunk-w", type=_positive)
    p.add_argument("--chunk-h", type=_positive)
    p.add_argument("--chunk-c", type=_positive)
    p.add_argument("--workers", type=_positive, default=1, help="threads per scanner branch")
    p.add_argument("--repeats", type=_positive, default=1, help="fuse N times sharing one cache")
    p.add_argument("--stats", action="store_true", help="print cache statistics")

    p = sub.add_parser("synth", help="write synthetic exposure triplets with ground truth")
    p.add_argument("--out-dir", required=True, type=Path)
    p.add_argument("--count", required=True, type=_positive)
    p.add_argument("--size", required=True, type=_size, help="WxH")
    p.add_argument("--seed", required=True, type=int)
    p.add_argument("--ev", type=_evs, default=(-2.0, 0.0, 2.0), help="three EV offsets, e.g. -2,0,2")
    p.add_argument("--format", choices=("ppm", "png"), default="ppm")

    p = sub.add_parser("train", help="train a model on a synthetic dataset")
    p.add_argument("--data-dir", required=True, type=Path)
    p.add_argument("--out-weights", required=True, type=Path)
    p.add_argument("--steps", type=_positive, default=200)
    p.add_argument("--lr", type=float, default=2e-4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--fibs", type=_positive, default=ModelConfig.num_fibs)
    p.add_argument("--channels", type=_positive, default=ModelConfig.channels)
    p.add_argument("--batch-size", type=_positive, default=4)
    p.add_argument("--loss-csv", type=Path)
    p.add_argument("--plot", type=Path, help="loss-curve figure (.png, .svg or .pdf)")

    p = sub.add_parser("metrics", help="PSNR and SSIM of a test image against a reference")
    p.add_argument("--ref", required=True, type=Path)
    p.add_argument("--test", required=True, type=Path)

    p = sub.add_parser("bench", help="time fusion with the cache off and on")
    p.add_argument("--data-dir", required=True, type=Path)
    p.add_argument("--weights", required=True, type=Path)
    p.add_argument("--repeats", type=_positive, default=5)
    p.add_argument("--cache-bytes", type=_nonneg, default=DEFAULT_CAPACITY)
    p.add_argument("--csv", type=Path)
    p.add_argument("--plot", type=Path, help="per-iteration timing figure")

    p = sub.add_parser("gradcheck", help="finite-difference check of the model gradient")
    p.add_argument("--seed", type=int, default=0)
    return parser


# ---------------------------------------------------------------------------
# commands


def _load_triplet(low: Path, mid: Path, high: Path) -> ExposureTriplet:
    frames = {"low": load_image(low), "mid": load_image(mid), "high": load_image(high)}
    ref = frames["mid"].shape[1:]
    for name in ("low", "high"):
        size = frames[name].shape[1:]
        if size != ref:
            raise ValueError(f"{name} frame is {size[0]}x{size[1]} but mid frame is {ref[0]}x{ref[1]}")
    return ExposureTriplet(frames["low"], frames["mid"], frames["high"])


def _scene_paths(data_dir: Path) -> list[dict[str, Path]]:
    if not data_dir.is_dir():
        raise FileNotFoundError(f"data directory {data_dir} does not exist")
    scenes = []
    for path in sorted(data_dir.iterdir()):
        m = _SCENE.match(path.name)
        if m:
            stem, ext = f"scene_{m.group(1)}", m.group(2)
            scenes.append((int(m.group(1)), {k: data_dir / f"{stem}_{k}.{ext}" for k in ("low", "mid", "high", "gt")}))
    if not scenes:
        raise FileNotFoundError(f"no scene_<n>_low.ppm/png files in {data_dir}")
    return [paths for _, paths in sorted(scenes, key=lambda s: s[0])]


def cmd_fuse(args) -> int:
    weights, config = load_weights(args.weights)
    changes = {"q_bits": args.q_bits, "workers": args.workers, "cache_enabled": not args.no_cache}
    for key in ("chunk_w", "chunk_h", "chunk_c"):
        if getattr(args, key) is not None:
            changes[key] = getattr(args, key)
    config = config.replace(**changes)
    triplet = _load_triplet(args.low, args.mid, args.high)
    cache = None
    if config.cache_enabled and args.cache_bytes > 0:
        cache = AttentionCache(args.cache_bytes, q_bits=config.q_bits)
    out = None
    for i in range(args.repeats):
        start = time.perf_counter()
        out = model_forward(triplet, weights, config, cache)
        if args.stats:
            print(f"run={i} seconds={time.perf_counter() - start:.6f}")
    save_image(args.out, out.data)
    if args.stats:
        print(cache.stats.line() if cache else "hits=0 misses=0 evictions=0 bytes_used=0 lfe_evals_saved=0")
    return EXIT_OK


def cmd_synth(args) -> int:
    # validate every scene before touching the file system
    specs = [
        SceneSpec(size=args.size, seed=scene_seed(args.seed, n), ev_offsets=args.ev)
        for n in range(args.count)
    ]
    args.out_dir.mkdir(parents=True, exist_ok=True)
    for n, spec in enumerate(specs):
        triplet, gt = synth_triplet(spec)
        images = {"low": triplet.x1, "mid": triplet.x2, "high": triplet.x3, "gt": gt}
        for name, img in images.items():
            atomic_write(args.out_dir / f"scene_{n}_{name}.{args.format}", encode_image(img, args.format))
    print(f"scenes={args.count} size={args.size[0]}x{args.size[1]} dir={args.out_dir}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .train import TrainConfig, loss_csv, train_loop

    dataset = []
    for paths in _scene_paths(args.data_dir):
        triplet = _load_triplet(paths["low"], paths["mid"], paths["high"])
        dataset.append((triplet, load_image(paths["gt"])))
    config = ModelConfig(num_fibs=args.fibs, channels=args.channels, chunk_c=min(ModelConfig.chunk_c, args.channels))
    train_config = TrainConfig(
        learning_rate=args.lr, steps=args.steps, batch_size=args.batch_size, seed=args.seed
    )
    weights, losses = train_loop(dataset, config, train_config)
    save_weights(args.out_weights, weights, config)
    if args.loss_csv:
        atomic_write(args.loss_csv, loss_csv(losses))
    if args.plot:
        from .plotting import plot_loss_curve

        plot_loss_curve(losses, args.plot)
    print(f"steps={len(losses)} initial_loss={losses[0]:.6f} final_loss={losses[-1]:.6f}")
    return EXIT_OK


def cmd_metrics(args) -> int:
    print(evaluate(load_image(args.ref), load_image(args.test)).line())
    return EXIT_OK


def cmd_bench(args) -> int:
    from .bench import bench_run

    weights, config = load_weights(args.weights)
    triplets = [_load_triplet(p["low"], p["mid"], p["high"]) for p in _scene_paths(args.data_dir)]
    report = bench_run(weights, config, triplets, repeats=args.repeats, cache_bytes=args.cache_bytes)
    if args.csv:
        atomic_write(args.csv, report.csv())
    if args.plot:
        from .plotting import plot_bench

        plot_bench(report, args.plot)
    sys.stdout.write(report.text())
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .train import grad_check_model

    err = grad_check_model(seed=args.seed)
    print(f"max_rel_error={err:.3e} tolerance={GRADCHECK_TOLERANCE:.0e}")
    if err > GRADCHECK_TOLERANCE:
        print("error: gradient check failed", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


COMMANDS = {
    "fuse": cmd_fuse,
    "synth": cmd_synth,
    "train": cmd_train,
    "metrics": cmd_metrics,
    "bench": cmd_bench,
    "gradcheck": cmd_gradcheck,
}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (OSError, ValueError, RuntimeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
