"""Image and weights files.

Images are 8-bit RGB (binary PPM or PNG) held in memory as ``(3, W, H)``
floats in [0, 1].  Weights files carry the model config so a file always
loads into the network it was saved from.  Every writer goes through
:func:`atomic_write`, so a failed command never leaves a partial file.
"""

from __future__ import annotations

import io
import os
import re
import struct
import tempfile
from pathlib import Path

import numpy as np
from PIL import Image

from .model import ModelConfig, ModelWeights, weight_manifest

__all__ = [
    "ImageFormatError",
    "ImageReadError",
    "WeightsFormatError",
    "WeightsMismatchError",
    "atomic_write",
    "load_image",
    "save_image",
    "encode_image",
    "decode_ppm",
    "encode_ppm",
    "save_weights",
    "load_weights",
    "weights_bytes",
    "parse_weights",
    "WEIGHTS_MAGIC",
    "WEIGHTS_VERSION",
]


class ImageFormatError(ValueError):
    """Unsupported or malformed image data."""


class ImageReadError(OSError):
    """An image path that cannot be read."""


class WeightsFormatError(ValueError):
    """Bad magic, version or framing in a weights file."""


class WeightsMismatchError(ValueError):
    """A weights file whose records do not match its own embedded config."""


def atomic_write(path, data: bytes | str) -> None:
    """Write ``data`` to a sibling temp file, then rename it over ``path``."""
    path = Path(path)
    if isinstance(data, str):
        data = data.encode()
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except FileNotFoundError:
            pass
        raise


# ---------------------------------------------------------------------------
# images

_PPM_TOKEN = re.compile(rb"(?:\s|#[^\n]*\n?)*(\S+)")


def _to_bytes(image: np.ndarray) -> np.ndarray:
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 3 or img.shape[0] != 3:
        raise ImageFormatError(f"images must be (3, W, H), got shape {img.shape}")
    codes = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    # (3, W, H) -> rows of pixels, (H, W, 3)
    return np.ascontiguousarray(codes.transpose(2, 1, 0))


def _from_bytes(raster: np.ndarray) -> np.ndarray:
    return (raster.transpose(2, 1, 0).astype(np.float32) / 255.0)


def encode_ppm(image: np.ndarray) -> bytes:
    raster = _to_bytes(image)
    h, w, _ = raster.shape
    return f"P6\n{w} {h}\n255\n".encode() + raster.tobytes()


def decode_ppm(blob: bytes) -> np.ndarray:
    """Parse binary PPM (P6, maxval up to 255)."""
    pos = 0
    fields = []
    for _ in range(4):
        m = _PPM_TOKEN.match(blob, pos)
        if m is None:
            raise ImageFormatError("truncated PPM header")
        fields.append(m.group(1))
        pos = m.end()
    if fields[0] != b"P6":
        raise ImageFormatError(f"not a binary PPM (magic {fields[0][:8]!r})")
    try:
        w, h, maxval = (int(f) for f in fields[1:])
    except ValueError:
        raise ImageFormatError("non-numeric PPM header field") from None
    if w < 1 or h < 1 or not 1 <= maxval <= 255:
        raise ImageFormatError(f"unsupported PPM header: {w}x{h}, maxval {maxval}")
    if pos >= len(blob) or not blob[pos:pos + 1].isspace():
        raise ImageFormatError("truncated PPM header")
    pos += 1
    need = w * h * 3
    if len(blob) - pos < need:
        raise ImageFormatError(f"PPM payload holds {len(blob) - pos} bytes, {w}x{h} needs {need}")
    raster = np.frombuffer(blob, dtype=np.uint8, count=need, offset=pos).reshape(h, w, 3)
    img = raster.transpose(2, 1, 0).astype(np.float32) / np.float32(maxval)
    return img


def _format_of(path: Path) -> str:
    ext = path.suffix.lower()
    if ext in (".ppm", ".pnm"):
        return "ppm"
    if ext == ".png":
        return "png"
    raise ImageFormatError(f"unsupported image format {ext or '(none)'!r} for {path}; use .ppm or .png")


def encode_image(image: np.ndarray, fmt: str) -> bytes:
    if fmt == "ppm":
        return encode_ppm(image)
    if fmt == "png":
        buf = io.BytesIO()
        Image.fromarray(_to_bytes(image), mode="RGB").save(buf, format="PNG")
        return buf.getvalue()
    raise ImageFormatError(f"unsupported image format {fmt!r}")


def load_image(path) -> np.ndarray:
    """Read an 8-bit RGB image as ``(3, W, H)`` float32 in [0, 1]."""
    path = Path(path)
    fmt = _format_of(path)
    try:
        blob = path.read_bytes()
    except OSError as e:
        raise ImageReadError(f"cannot read image {path}: {e.strerror or e}") from e
    if fmt == "ppm":
        try:
            return decode_ppm(blob)
        except ImageFormatError as e:
            raise ImageFormatError(f"{path}: {e}") from None
    try:
        with Image.open(io.BytesIO(blob)) as im:
            raster = np.asarray(im.convert("RGB"))
    except Exception as e:
        raise ImageFormatError(f"{path}: cannot decode PNG ({e})") from None
    return _from_bytes(raster)


def save_image(path, image: np.ndarray) -> None:
    path = Path(path)
    atomic_write(path, encode_image(image, _format_of(path)))


# ---------------------------------------------------------------------------
# weights

WEIGHTS_MAGIC = b"IPLW"
WEIGHTS_VERSION = 1
# num_fibs, channels, r, chunk_c, chunk_w, chunk_h, lfe_reduction, drtm width, drtm height
_CONFIG = struct.Struct("<9I")
_PREFIX = struct.Struct("<4sI")


def _config_fields(config: ModelConfig) -> tuple[int, ...]:
    return (
        config.num_fibs, config.channels, config.downsample_factor,
        config.chunk_c, config.chunk_w, config.chunk_h,
        config.lfe_reduction, *config.drtm_size,
    )


def weights_bytes(weights: ModelWeights, config: ModelConfig) -> bytes:
    weights.check(config)
    parts = [_PREFIX.pack(WEIGHTS_MAGIC, WEIGHTS_VERSION), _CONFIG.pack(*_config_fields(config))]
    for name, arr in weights.items():
        raw = name.encode()
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def save_weights(path, weights: ModelWeights, config: ModelConfig) -> None:
    atomic_write(path, weights_bytes(weights, config))


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.blob):
            raise WeightsFormatError(f"weights file truncated while reading {what}")
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]


def parse_weights(blob: bytes) -> tuple[ModelWeights, ModelConfig]:
    if len(blob) < _PREFIX.size:
        raise WeightsFormatError("file is too short to be a weights file")
    magic, version = _PREFIX.unpack_from(blob)
    if magic != WEIGHTS_MAGIC:
        raise WeightsFormatError(f"bad magic {magic!r}, expected {WEIGHTS_MAGIC!r}")
    if version != WEIGHTS_VERSION:
        raise WeightsFormatError(f"unsupported weights version {version}, expected {WEIGHTS_VERSION}")
    r = _Reader(blob)
    r.pos = _PREFIX.size
    fibs, channels, factor, cc, cw, ch, red, dw, dh = _CONFIG.unpack(r.take(_CONFIG.size, "config block"))
    try:
        config = ModelConfig(
            num_fibs=fibs, channels=channels, downsample_factor=factor,
            chunk_c=cc, chunk_w=cw, chunk_h=ch, lfe_reduction=red, drtm_size=(dw, dh),
        )
    except ValueError as e:
        raise WeightsFormatError(f"invalid embedded config: {e}") from None

    expected = weight_manifest(config)
    order = list(expected)
    tensors: dict[str, np.ndarray] = {}
    while r.pos < len(blob):
        index = len(tensors)
        try:
            name = r.take(r.u32("record name length"), "record name").decode()
        except UnicodeDecodeError:
            raise WeightsMismatchError(f"record {index} has an undecodable name") from None
        rank = r.u32(f"rank of {name!r}")
        if rank > 8:
            raise WeightsMismatchError(f"record {name!r} declares rank {rank}")
        shape = tuple(r.u32(f"dims of {name!r}") for _ in range(rank))
        n = int(np.prod(shape, dtype=np.int64))
        payload = r.take(4 * n, f"payload of {name!r}")
        if name in tensors:
            raise WeightsMismatchError(f"record {name!r} appears twice")
        if index >= len(order) or name != order[index]:
            want = order[index] if index < len(order) else "end of file"
            raise WeightsMismatchError(f"record {name!r} does not match the config; expected {want!r}")
        if shape != expected[name]:
            raise WeightsMismatchError(f"record {name!r} has shape {shape}, config expects {expected[name]}")
        tensors[name] = np.frombuffer(payload, dtype="<f4").astype(np.float32).reshape(shape)
    if len(tensors) != len(order):
        raise WeightsMismatchError(f"weights file ends before record {order[len(tensors)]!r}")
    for name, arr in tensors.items():
        if not np.all(np.isfinite(arr)):
            raise WeightsMismatchError(f"record {name!r} holds non-finite values")
    return ModelWeights(tensors), config


def load_weights(path) -> tuple[ModelWeights, ModelConfig]:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as e:
        raise WeightsFormatError(f"cannot read weights {path}: {e.strerror or e}") from e
    try:
        return parse_weights(blob)
    except (WeightsFormatError, WeightsMismatchError) as e:
        raise type(e)(f"{path}: {e}") from None
