"""Grayscale frames, quality metrics and frame file formats."""
from __future__ import annotations

import enum
import math
import re
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

FRAME_MAGIC = b"DNF1"
PSNR_INF = math.inf


class FrameFormatError(ValueError):
    pass


class Domain(enum.Enum):
    RAW255 = "raw255"
    UNIT = "unit"


@dataclass(frozen=True, eq=False)
class Image:
    """Immutable 2-D float64 raster tagged with its intensity domain."""

    pixels: np.ndarray
    domain: Domain = Domain.RAW255

    def __post_init__(self):
        px = np.array(self.pixels, dtype=np.float64, copy=True)
        if px.ndim != 2 or px.size == 0:
            raise ValueError(f"image must be a non-empty 2-D array, got shape {px.shape}")
        if not np.all(np.isfinite(px)):
            raise ValueError("image contains non-finite pixels")
        px.flags.writeable = False
        object.__setattr__(self, "pixels", px)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixels.shape


@dataclass(frozen=True, eq=False)
class FrameSequence:
    frames: tuple[Image, ...]
    times: np.ndarray

    def __post_init__(self):
        frames = tuple(self.frames)
        times = np.array(self.times, dtype=np.float64)
        if not frames:
            raise ValueError("a frame sequence needs at least one frame")
        if times.shape != (len(frames),):
            raise ValueError("one time value per frame required")
        first = frames[0]
        for f in frames[1:]:
            if f.shape != first.shape or f.domain != first.domain:
                raise ValueError("all frames must share shape and domain")
        if times[0] != 0 or np.any(np.diff(times) <= 0):
            raise ValueError("times must start at 0 and strictly increase")
        times.flags.writeable = False
        object.__setattr__(self, "frames", frames)
        object.__setattr__(self, "times", times)

    def __len__(self):
        return len(self.frames)

    def __getitem__(self, i) -> Image:
        return self.frames[i]

    @property
    def shape(self):
        return self.frames[0].shape

    @property
    def domain(self) -> Domain:
        return self.frames[0].domain

    def stack(self) -> np.ndarray:
        return np.stack([f.pixels for f in self.frames])

    @classmethod
    def from_stack(cls, stack, domain=Domain.RAW255, time_step=0.1) -> "FrameSequence":
        return cls(tuple(Image(s, domain) for s in stack), np.arange(len(stack)) * time_step)


def normalize(im: Image) -> Image:
    if im.domain is not Domain.RAW255:
        raise ValueError(f"normalize expects a Raw255 image, got {im.domain.value}")
    return Image(im.pixels / 255.0, Domain.UNIT)


def denormalize(im: Image, clamp: bool = False) -> Image:
    if im.domain is not Domain.UNIT:
        raise ValueError(f"denormalize expects a Unit image, got {im.domain.value}")
    px = im.pixels * 255.0
    if clamp:
        px = np.clip(px, 0.0, 255.0)
    return Image(px, Domain.RAW255)


def _pair(reference, test):
    a = reference.pixels if isinstance(reference, Image) else np.asarray(reference, dtype=np.float64)
    b = test.pixels if isinstance(test, Image) else np.asarray(test, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise ValueError("non-finite pixels")
    return a, b


def psnr(reference, test, data_range: float) -> float:
    """Peak signal-to-noise ratio in dB; ``PSNR_INF`` for identical inputs."""
    if data_range <= 0:
        raise ValueError("data_range must be positive")
    a, b = _pair(reference, test)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_INF
    return 10.0 * math.log10(data_range ** 2 / mse)


def _window_means(x: np.ndarray, win: int) -> np.ndarray:
    """Mean over every fully-contained ``win x win`` window (integral image)."""
    c = np.zeros((x.shape[0] + 1, x.shape[1] + 1))
    np.cumsum(np.cumsum(x, axis=0), axis=1, out=c[1:, 1:])
    s = c[win:, win:] - c[:-win, win:] - c[win:, :-win] + c[:-win, :-win]
    return s / (win * win)


def ssim(reference, test, data_range: float, window: int = 7, k1: float = 0.01, k2: float = 0.03) -> float:
    """Mean SSIM over valid windows, uniform window, sample covariances."""
    if data_range <= 0:
        raise ValueError("data_range must be positive")
    if window < 1 or window % 2 == 0:
        raise ValueError("window must be odd")
    a, b = _pair(reference, test)
    if window > min(a.shape):
        raise ValueError(f"window {window} larger than image {a.shape}")
    npix = window * window
    cov_norm = npix / (npix - 1) if npix > 1 else 1.0
    ux, uy = _window_means(a, window), _window_means(b, window)
    uxx, uyy, uxy = _window_means(a * a, window), _window_means(b * b, window), _window_means(a * b, window)
    vx = cov_norm * (uxx - ux * ux)
    vy = cov_norm * (uyy - uy * uy)
    vxy = cov_norm * (uxy - ux * uy)
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    s = ((2 * ux * uy + c1) * (2 * vxy + c2)) / ((ux ** 2 + uy ** 2 + c1) * (vx + vy + c2))
    return float(np.clip(s.mean(), -1.0, 1.0))


# ---------------------------------------------------------------------------
# file formats


def write_frame(path, im: Image) -> None:
    """Raw float frame: ``DNF1``, u32 height, u32 width, float64 LE pixels."""
    h, w = im.shape
    Path(path).write_bytes(FRAME_MAGIC + struct.pack("<II", h, w) + im.pixels.astype("<f8").tobytes())


def read_frame(path, domain: Domain = Domain.RAW255) -> Image:
    data = Path(path).read_bytes()
    if len(data) < 12 or data[:4] != FRAME_MAGIC:
        raise FrameFormatError(f"{path}: not a DNF1 frame")
    h, w = struct.unpack_from("<II", data, 4)
    if h == 0 or w == 0:
        raise FrameFormatError(f"{path}: bad dimensions {h}x{w}")
    if len(data) != 12 + 8 * h * w:
        raise FrameFormatError(f"{path}: payload is {len(data) - 12} bytes, expected {8 * h * w}")
    px = np.frombuffer(data, dtype="<f8", offset=12).reshape(h, w)
    return Image(px, domain)


def to_uint8(im: Image) -> np.ndarray:
    """Clamp to [0, 255] and round half to even."""
    raw = denormalize(im, clamp=True) if im.domain is Domain.UNIT else Image(np.clip(im.pixels, 0, 255))
    return np.rint(raw.pixels).astype(np.uint8)


def write_pgm(path, im: Image) -> None:
    px = to_uint8(im)
    h, w = px.shape
    Path(path).write_bytes(b"P5\n%d %d\n255\n" % (w, h) + px.tobytes())


_PGM_TOKEN = re.compile(rb"(?:\s|#[^\n]*\n?)*([^\s#]+)")


def read_pgm(path) -> Image:
    """Binary PGM (P5, maxval <= 255) as a Raw255 image."""
    data = Path(path).read_bytes()
    pos = 0
    fields = []
    for _ in range(4):
        m = _PGM_TOKEN.match(data, pos)
        if not m:
            raise FrameFormatError(f"{path}: truncated PGM header")
        fields.append(m.group(1))
        pos = m.end()
    if fields[0] != b"P5":
        raise FrameFormatError(f"{path}: not a binary PGM")
    w, h, maxval = (int(f) for f in fields[1:])
    if not 0 < maxval < 256:
        raise FrameFormatError(f"{path}: unsupported maxval {maxval}")
    pos += 1
    payload = data[pos:pos + w * h]
    if len(payload) != w * h:
        raise FrameFormatError(f"{path}: truncated PGM payload")
    px = np.frombuffer(payload, dtype=np.uint8).reshape(h, w).astype(np.float64)
    if maxval != 255:
        px *= 255.0 / maxval
    return Image(px, Domain.RAW255)


def read_any(path, domain: Domain = Domain.RAW255) -> Image:
    path = Path(path)
    if path.suffix.lower() == ".pgm":
        return read_pgm(path)
    return read_frame(path, domain)
