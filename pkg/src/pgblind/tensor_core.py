"""Image container, deterministic RNG streams, and image file formats.

The image formats are binary PGM (P5) for single-channel and binary PPM (P6)
for three-channel 8-bit data, plus a raw float32 tensor format ("PGT1") that
round-trips values bit-exactly:

    magic "PGT1" | u32le height | u32le width | u32le channels | f32le payload

Payload order is row-major, channel-last.
"""

from __future__ import annotations

import os
from collections.abc import Sequence

import numpy as np
import torch

RAW_MAGIC = b"PGT1"

# Sanity cap on total elements when parsing untrusted headers.
_MAX_ELEMENTS = 1 << 28


class ImageFormatError(ValueError):
    """Raised for malformed, oversized, or truncated image files."""


class ImageTensor:
    """Dense (height, width, channels) float32 image.

    Values live in a nominal [0, 1] range but are not clamped: synthetic
    corruption and variance-stabilizing transforms intentionally leave it.
    Instances are immutable after construction and safe to share across
    threads; the backing array is marked read-only.
    """

    __slots__ = ("_data",)

    def __init__(self, data) -> None:
        arr = np.array(data, dtype=np.float32, copy=True, order="C")
        if arr.ndim == 2:
            arr = arr[:, :, None]
        if arr.ndim != 3:
            raise ValueError(f"expected 2-d or 3-d data, got {arr.ndim}-d")
        h, w, c = arr.shape
        if h < 1 or w < 1:
            raise ValueError(f"empty image shape {arr.shape}")
        if c not in (1, 3):
            raise ValueError(f"channels must be 1 or 3, got {c}")
        arr.setflags(write=False)
        self._data = arr

    @classmethod
    def from_flat(cls, height: int, width: int, channels: int,
                  values: Sequence[float]) -> "ImageTensor":
        vals = np.asarray(values, dtype=np.float32)
        if vals.size != height * width * channels:
            raise ValueError(
                f"data length {vals.size} != height*width*channels "
                f"{height * width * channels}")
        return cls(vals.reshape(height, width, channels))

    @classmethod
    def full(cls, height: int, width: int, channels: int = 1,
             value: float = 0.0) -> "ImageTensor":
        return cls(np.full((height, width, channels), value, dtype=np.float32))

    @property
    def data(self) -> np.ndarray:
        """Read-only (H, W, C) float32 view."""
        return self._data

    @property
    def height(self) -> int:
        return self._data.shape[0]

    @property
    def width(self) -> int:
        return self._data.shape[1]

    @property
    def channels(self) -> int:
        return self._data.shape[2]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self._data.shape

    def to_torch(self) -> torch.Tensor:
        """Return a (C, H, W) float32 torch copy."""
        return torch.from_numpy(self._data.copy()).permute(2, 0, 1).contiguous()

    @classmethod
    def from_torch(cls, t: torch.Tensor) -> "ImageTensor":
        """Build from a (C, H, W) or (H, W) torch tensor."""
        arr = t.detach().cpu().numpy()
        if arr.ndim == 3:
            arr = np.transpose(arr, (1, 2, 0))
        return cls(arr)

    def __repr__(self) -> str:
        h, w, c = self.shape
        return f"ImageTensor({h}x{w}x{c})"


class SeededRng:
    """Forkable deterministic random stream over a counter-based generator.

    Child streams from :meth:`fork` are statistically independent of the
    parent and of each other, and depend only on (seed, fork path), so a
    parallel schedule reproduces exactly.
    """

    def __init__(self, seed: int, _spawn_key: tuple[int, ...] = ()) -> None:
        self.seed = int(seed)
        self._spawn_key = tuple(int(k) for k in _spawn_key)
        ss = np.random.SeedSequence(self.seed, spawn_key=self._spawn_key)
        self._gen = np.random.Generator(np.random.Philox(ss))

    def fork(self, stream: int) -> "SeededRng":
        return SeededRng(self.seed, (*self._spawn_key, stream))

    def normal(self, shape=(), mean: float = 0.0, std: float = 1.0) -> np.ndarray:
        if std < 0:
            raise ValueError(f"negative std {std}")
        return self._gen.normal(mean, std, shape)

    def poisson(self, rate) -> np.ndarray:
        rate = np.asarray(rate, dtype=np.float64)
        if np.any(rate < 0):
            raise ValueError("negative Poisson rate")
        return self._gen.poisson(rate)

    def uniform(self, shape=(), low: float = 0.0, high: float = 1.0) -> np.ndarray:
        return self._gen.uniform(low, high, shape)

    def integers(self, low: int, high: int, shape=()) -> np.ndarray:
        return self._gen.integers(low, high, shape)


def sample_gaussian(rng: SeededRng, n: int, mean: float, std: float) -> np.ndarray:
    """Draw n i.i.d. normal samples; std = 0 gives the constant mean."""
    if n < 0:
        raise ValueError(f"negative sample count {n}")
    return rng.normal((n,), mean, std)


def sample_poisson(rng: SeededRng, rate: float) -> int:
    """Draw one exact Poisson sample; rate 0 gives 0."""
    if rate < 0:
        raise ValueError(f"negative Poisson rate {rate}")
    return int(rng.poisson(rate))


def _next_token(buf: bytes, pos: int) -> tuple[bytes, int]:
    n = len(buf)
    while pos < n:
        c = buf[pos]
        if c in b" \t\r\n":
            pos += 1
        elif c == ord("#"):
            while pos < n and buf[pos] != ord("\n"):
                pos += 1
        else:
            break
    start = pos
    while pos < n and buf[pos] not in b" \t\r\n":
        pos += 1
    if start == pos:
        raise ImageFormatError("malformed header: missing token")
    return buf[start:pos], pos


def _parse_header_int(tok: bytes, what: str) -> int:
    try:
        val = int(tok)
    except ValueError:
        raise ImageFormatError(f"malformed header: bad {what} {tok!r}") from None
    return val


def _load_netpbm(buf: bytes, channels: int) -> ImageTensor:
    pos = 2
    dims = []
    for what in ("width", "height", "maxval"):
        tok, pos = _next_token(buf, pos)
        dims.append(_parse_header_int(tok, what))
    w, h, maxval = dims
    if w <= 0 or h <= 0:
        raise ImageFormatError(f"malformed header: bad dimensions {w}x{h}")
    if maxval > 255:
        raise ImageFormatError(f"maxval {maxval} unsupported (8-bit only)")
    if maxval <= 0:
        raise ImageFormatError(f"malformed header: bad maxval {maxval}")
    if h * w * channels > _MAX_ELEMENTS:
        raise ImageFormatError(f"dimension overflow: {w}x{h}x{channels}")
    if pos >= len(buf) or buf[pos] not in b" \t\r\n":
        raise ImageFormatError("malformed header: missing payload separator")
    pos += 1
    need = h * w * channels
    payload = buf[pos:pos + need]
    if len(payload) < need:
        raise ImageFormatError(
            f"truncated payload: expected {need} bytes, got {len(payload)}")
    arr = np.frombuffer(payload, dtype=np.uint8).astype(np.float32) / maxval
    return ImageTensor(arr.reshape(h, w, channels))


def _load_raw(buf: bytes) -> np.ndarray:
    if len(buf) < 16:
        raise ImageFormatError("truncated payload: raw header incomplete")
    h, w, c = np.frombuffer(buf[4:16], dtype="<u4")
    h, w, c = int(h), int(w), int(c)
    if h <= 0 or w <= 0 or c <= 0:
        raise ImageFormatError(f"malformed header: bad dimensions {h}x{w}x{c}")
    if h * w * c > _MAX_ELEMENTS:
        raise ImageFormatError(f"dimension overflow: {h}x{w}x{c}")
    need = h * w * c * 4
    payload = buf[16:16 + need]
    if len(payload) < need:
        raise ImageFormatError(
            f"truncated payload: expected {need} bytes, got {len(payload)}")
    arr = np.frombuffer(payload, dtype="<f4").reshape(h, w, c)
    return arr.copy()


def load_raw_tensor(path: str | os.PathLike) -> np.ndarray:
    """Load a raw PGT1 file as an (h, w, c) float32 array of any c."""
    with open(path, "rb") as f:
        buf = f.read()
    if not buf.startswith(RAW_MAGIC):
        raise ImageFormatError(f"unrecognized format magic {buf[:4]!r}")
    return _load_raw(buf)


def save_raw_tensor(path: str | os.PathLike, arr: np.ndarray) -> None:
    """Write an (h, w, c) float32 array in the raw PGT1 format, bit-exact."""
    arr = np.ascontiguousarray(arr, dtype=np.float32)
    if arr.ndim != 3:
        raise ValueError(f"expected 3-d array, got {arr.ndim}-d")
    h, w, c = arr.shape
    with open(path, "wb") as f:
        f.write(RAW_MAGIC)
        f.write(np.array([h, w, c], dtype="<u4").tobytes())
        f.write(arr.astype("<f4").tobytes())


def load_image(path: str | os.PathLike) -> ImageTensor:
    """Load a PGM/PPM/PGT1 file, dispatching on the magic bytes."""
    with open(path, "rb") as f:
        buf = f.read()
    if len(buf) == 0:
        raise ImageFormatError("malformed header: empty file")
    if buf.startswith(b"P5"):
        return _load_netpbm(buf, 1)
    if buf.startswith(b"P6"):
        return _load_netpbm(buf, 3)
    if buf.startswith(RAW_MAGIC):
        return ImageTensor(_load_raw(buf))
    raise ImageFormatError(f"unrecognized format magic {buf[:2]!r}")


def save_image(img: ImageTensor, path: str | os.PathLike,
               clamp: bool = True) -> None:
    """Save to .pgm (P5, 1 channel), .ppm (P6, 3 channels) or .pgt (raw).

    The 8-bit writers quantize with round(v * 255); with clamp the values
    are clipped to [0, 1] first, without it out-of-range values are an
    error. The raw format never quantizes and ignores clamp.
    """
    suffix = os.path.splitext(os.fspath(path))[1].lower()
    if suffix == ".pgt":
        save_raw_tensor(path, img.data)
        return
    if suffix == ".pgm":
        magic, channels = b"P5", 1
    elif suffix == ".ppm":
        magic, channels = b"P6", 3
    else:
        raise ValueError(f"unsupported image suffix {suffix!r}")
    if img.channels != channels:
        raise ValueError(
            f"{suffix} requires {channels} channel(s), image has {img.channels}")
    vals = img.data.astype(np.float64)
    if clamp:
        vals = vals.clip(0.0, 1.0)
    elif vals.min() < 0.0 or vals.max() > 1.0:
        raise ValueError(
            f"values outside [0, 1] (range [{vals.min():.4g}, {vals.max():.4g}]) "
            "and clamp is off")
    quant = np.rint(vals * 255.0).astype(np.uint8)
    h, w, _ = img.shape
    with open(path, "wb") as f:
        f.write(magic + b"\n%d %d\n255\n" % (w, h))
        f.write(quant.tobytes())
