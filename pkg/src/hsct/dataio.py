"""Array containers, the HSCT tensor file format, seeded RNG and PGM export.

HSCT layout (little-endian)::

    0-3   magic b"HSCT"
    4     version (1)
    5     dtype (0 = float32)
    6     ndim (1-4)
    7     reserved (0)
    8..   ndim x uint32 dims
    ...   row-major float32 payload

A ``<name>.json`` sidecar may carry free-form metadata (pixel size, angles,
seed). It is never needed to load the tensor.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Sequence

import numpy as np

MAGIC = b"HSCT"
VERSION = 1
DTYPE_F32 = 0
DEFAULT_PIXEL_SIZE = 0.65  # micrometers


class FormatError(ValueError):
    """Raised when an HSCT file cannot be decoded."""


class BadMagicError(FormatError):
    pass


class UnsupportedError(FormatError):
    pass


class TruncatedError(FormatError):
    pass


@dataclass(frozen=True)
class Image:
    """A 2-D real slice with its physical pixel size in micrometers.

    ``np.asarray(img)`` yields the underlying float64 array, so images can be
    handed straight to numpy code.
    """

    data: np.ndarray
    pixel_size: float = DEFAULT_PIXEL_SIZE

    def __post_init__(self):
        arr = np.array(self.data, dtype=np.float64)
        if arr.ndim != 2:
            raise ValueError(f"Image needs a 2-D array, got shape {arr.shape}")
        if min(arr.shape) < 8:
            raise ValueError(f"Image sides must be >= 8, got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("Image data contains NaN or infinity")
        if not self.pixel_size > 0:
            raise ValueError("pixel_size must be positive")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    def __array__(self, dtype=None, copy=None):
        if dtype is None:
            return self.data
        return self.data.astype(dtype)

    def with_data(self, data: np.ndarray) -> "Image":
        return Image(data, self.pixel_size)


def as_array(x) -> np.ndarray:
    """Float64 view of an Image or array-like."""
    if isinstance(x, Image):
        return x.data
    return np.asarray(x, dtype=np.float64)


def make_rng(seed: int) -> np.random.Generator:
    """Seeded generator backed by PCG64 (numpy's default bit generator).

    PCG64 output for a given seed is fixed across numpy versions and
    platforms, which is what the reproducibility contract relies on.
    """
    if seed < 0 or seed >= 2**64:
        raise ValueError("seed must be a 64-bit unsigned integer")
    return np.random.Generator(np.random.PCG64(seed))


def derive_seed(seed: int, *tags: int) -> int:
    """Deterministic child seed for sub-streams (per slice, per network...)."""
    ss = np.random.SeedSequence([seed, *tags])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def save_tensor(path, dims: Sequence[int], data, meta: dict[str, Any] | None = None) -> None:
    dims = [int(d) for d in dims]
    if not 1 <= len(dims) <= 4:
        raise ValueError(f"ndim must be 1-4, got {len(dims)}")
    if any(d <= 0 for d in dims):
        raise ValueError(f"dims must be positive, got {dims}")
    flat = np.asarray(data, dtype="<f4").reshape(-1)
    if flat.size != int(np.prod(dims)):
        raise ValueError(f"dims {dims} hold {int(np.prod(dims))} values, data has {flat.size}")
    header = MAGIC + struct.pack("<BBBB", VERSION, DTYPE_F32, len(dims), 0)
    header += struct.pack(f"<{len(dims)}I", *dims)
    path = Path(path)
    try:
        with open(path, "wb") as fh:
            fh.write(header)
            fh.write(flat.tobytes())
    except OSError as exc:
        raise OSError(f"cannot write tensor to {path}: {exc}") from exc
    if meta is not None:
        sidecar(path).write_text(json.dumps(meta, indent=1, sort_keys=True))


def load_tensor(path) -> tuple[list[int], np.ndarray]:
    """Inverse of :func:`save_tensor`; returns ``(dims, flat float32 data)``."""
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < 8 or raw[:4] != MAGIC:
        raise BadMagicError(f"{path}: not an HSCT file")
    version, dtype, ndim, _ = struct.unpack("<BBBB", raw[4:8])
    if version != VERSION:
        raise UnsupportedError(f"{path}: unsupported version {version}")
    if dtype != DTYPE_F32:
        raise UnsupportedError(f"{path}: unsupported dtype code {dtype}")
    if not 1 <= ndim <= 4:
        raise UnsupportedError(f"{path}: bad ndim {ndim}")
    end = 8 + 4 * ndim
    if len(raw) < end:
        raise TruncatedError(f"{path}: header truncated")
    dims = list(struct.unpack(f"<{ndim}I", raw[8:end]))
    n = int(np.prod(dims))
    if len(raw) - end < 4 * n:
        raise TruncatedError(f"{path}: payload truncated ({len(raw) - end} of {4 * n} bytes)")
    data = np.frombuffer(raw, dtype="<f4", count=n, offset=end).astype(np.float32)
    return dims, data


def sidecar(path) -> Path:
    path = Path(path)
    return path.with_name(path.stem + ".json")


def read_meta(path) -> dict[str, Any]:
    sc = sidecar(path)
    if sc.exists():
        return json.loads(sc.read_text())
    return {}


def save_array(path, arr, meta: dict[str, Any] | None = None) -> None:
    arr = np.asarray(arr)
    save_tensor(path, arr.shape, arr, meta)


def load_array(path) -> np.ndarray:
    dims, data = load_tensor(path)
    return data.reshape(dims)


def save_image(path, img: Image, **meta) -> None:
    save_array(path, img.data, {"pixel_size": img.pixel_size, **meta})


def load_image(path) -> Image:
    arr = load_array(path)
    if arr.ndim != 2:
        raise FormatError(f"{path}: expected a 2-D tensor, got {arr.shape}")
    meta = read_meta(path)
    return Image(arr.astype(np.float64), meta.get("pixel_size", DEFAULT_PIXEL_SIZE))


def export_pgm(img, path, lo: float, hi: float) -> None:
    """Write a 16-bit binary PGM, mapping [lo, hi] linearly onto [0, 65535]."""
    if not lo < hi:
        raise ValueError("export_pgm needs lo < hi")
    arr = as_array(img)
    scaled = np.clip((arr - lo) / (hi - lo), 0.0, 1.0) * 65535.0
    pix = np.floor(scaled + 0.5).astype(">u2")  # round half up
    h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n65535\n".encode("ascii"))
        fh.write(pix.tobytes())
