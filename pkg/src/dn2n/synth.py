"""Synthetic denaturing datasets and the Poisson-Gaussian noise channel.

The toy clean image is a bright disc (175) on a dark background (75). Over
the time index the disc is squeezed horizontally into an ellipse whose
horizontal semi-axis is ``q_i`` times the radius; the slow and fast
schedules differ only in how ``q_i`` decays.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import manifest
from .imaging import Domain, FrameSequence, Image, read_any, write_frame
from .rng import stream


class Mode(enum.Enum):
    SLOW = "slow"
    FAST = "fast"


@dataclass(frozen=True)
class ToySpec:
    side: int = 192
    n: int = 24
    inside: float = 175.0
    outside: float = 75.0
    center: tuple[int, int] | None = None

    def __post_init__(self):
        if self.side < 2 or self.n < 1:
            raise ValueError("side must be >= 2 and n >= 1")
        if self.inside == self.outside:
            raise ValueError("inside and outside values must differ")
        if self.center is None:
            object.__setattr__(self, "center", (self.side // 2 + 1, self.side // 2 + 1))
        a, b = self.center
        if not (1 <= a <= self.side and 1 <= b <= self.side):
            raise ValueError(f"center {self.center} outside a {self.side}x{self.side} image")

    @property
    def radius(self) -> float:
        return 0.75 * (self.side / 2)


@dataclass(frozen=True)
class NoiseSpec:
    lam: float
    sigma: float
    seed: int = 0

    def __post_init__(self):
        if not self.lam > 0:
            raise ValueError(f"lambda must be positive, got {self.lam}")
        if not self.sigma >= 0:
            raise ValueError(f"sigma must be non-negative, got {self.sigma}")


@dataclass(frozen=True)
class TauSampler:
    """Relabels frames ``1..n`` as times ``perm(i) * scale``."""

    n: int
    scale: float = 0.1
    permutation: tuple[int, ...] | None = None

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("n must be >= 1")
        if self.permutation is not None and sorted(self.permutation) != list(range(1, self.n + 1)):
            raise ValueError("permutation must be a bijection of 1..n")


def q_schedule(mode: Mode | str, i: int, n: int) -> float:
    """Horizontal squeeze factor of frame ``i``; ``q_0 = 1`` for both modes."""
    mode = Mode(mode)
    if not 0 <= i <= n:
        raise ValueError(f"frame index {i} outside 0..{n}")
    if mode is Mode.SLOW:
        e = math.e
        return math.log(math.sqrt(i) * (math.sqrt(e) - e) / n + e)
    return math.exp(-(i ** 1.1) * math.log(2) / n)


def region_mask(spec: ToySpec, q: float) -> np.ndarray:
    """Boolean mask of the ellipse. Row index is ``b - 1``, column ``a - 1``."""
    if not q > 0:
        raise ValueError("q must be positive")
    a = np.arange(1, spec.side + 1, dtype=np.float64)[None, :]
    b = np.arange(1, spec.side + 1, dtype=np.float64)[:, None]
    ca, cb = spec.center
    return (a - ca) ** 2 / q ** 2 + (b - cb) ** 2 <= spec.radius ** 2


def render_clean_frame(spec: ToySpec, q: float) -> Image:
    return Image(np.where(region_mask(spec, q), spec.inside, spec.outside), Domain.RAW255)


def add_poisson_gaussian(clean: Image, noise: NoiseSpec, rng: np.random.Generator) -> Image:
    """``y = z / lam + delta`` with ``z ~ Poisson(lam * x)``, ``delta ~ N(0, sigma^2)``; not clamped."""
    x = clean.pixels
    if np.any(x < 0):
        raise ValueError("Poisson rates require non-negative clean pixels")
    z = rng.poisson(noise.lam * x)
    delta = rng.normal(0.0, noise.sigma, size=x.shape) if noise.sigma > 0 else 0.0
    return Image(z / noise.lam + delta, Domain.RAW255)


def make_toy_dataset(mode: Mode | str, toy: ToySpec, noise: NoiseSpec, seed: int | None = None,
                     time_step: float = 0.1):
    """Returns ``(clean, noisy)`` sequences of ``toy.n + 1`` frames."""
    seed = noise.seed if seed is None else seed
    mode = Mode(mode)
    clean, noisy = [], []
    for i in range(toy.n + 1):
        c = render_clean_frame(toy, q_schedule(mode, i, toy.n))
        clean.append(c)
        noisy.append(add_poisson_gaussian(c, noise, stream(seed, "noise", i)))
    times = np.arange(toy.n + 1) * time_step
    return FrameSequence(tuple(clean), times), FrameSequence(tuple(noisy), times)


def sample_tau(sampler: TauSampler, rng: np.random.Generator | None = None) -> list[tuple[float, int]]:
    """Pairs ``(tau_i, frame index)`` for ``i = 1..n``, each frame used once."""
    if sampler.permutation is not None:
        perm = list(sampler.permutation)
    else:
        if rng is None:
            raise ValueError("rng required when no fixed permutation is given")
        perm = [int(p) + 1 for p in rng.permutation(sampler.n)]
    return [(p * sampler.scale, p) for p in perm]


# ---------------------------------------------------------------------------
# dataset directories

FRAME_SUFFIXES = (".dnf", ".pgm")


def load_frame_directory(path, ordering: str = "lexicographic", time_step: float = 0.1,
                         domain: Domain = Domain.RAW255) -> FrameSequence:
    """Read a directory of same-shape frames into a sequence.

    ``ordering`` is ``"lexicographic"`` or the path of a text file listing
    frame file names (relative to ``path``) one per line, in time order.
    """
    path = Path(path)
    if not path.is_dir():
        raise FileNotFoundError(f"{path}: not a directory")
    if ordering == "lexicographic":
        files = sorted(p for p in path.iterdir() if p.suffix.lower() in FRAME_SUFFIXES)
    else:
        names = [ln.strip() for ln in Path(ordering).read_text().splitlines()
                 if ln.strip() and not ln.startswith("#")]
        files = [path / n for n in names]
    if not files:
        raise ValueError(f"{path}: no frames found")
    frames = [read_any(f, domain) for f in files]
    shapes = {f.shape for f in frames}
    if len(shapes) != 1:
        raise ValueError(f"{path}: mixed frame shapes {sorted(shapes)}")
    return FrameSequence(tuple(frames), np.arange(len(frames)) * time_step)


def write_dataset(out, clean: FrameSequence | None, noisy: FrameSequence, meta: dict) -> None:
    """Layout: ``clean/frame_%03d.dnf``, ``noisy/frame_%03d.dnf``, ``manifest.txt``."""
    out = Path(out)
    for name, seq in (("clean", clean), ("noisy", noisy)):
        if seq is None:
            continue
        d = out / name
        d.mkdir(parents=True, exist_ok=True)
        for i, frame in enumerate(seq.frames):
            write_frame(d / f"frame_{i:03d}.dnf", frame)
    info = dict(meta)
    info["N"] = len(noisy) - 1
    info["times"] = [float(t) for t in noisy.times]
    manifest.write(out / "manifest.txt", info)


def read_dataset(path):
    """Returns ``(clean or None, noisy, manifest dict)``."""
    path = Path(path)
    if not (path / "noisy").is_dir():
        raise FileNotFoundError(f"{path}: missing noisy/ frame directory")
    meta = manifest.read(path / "manifest.txt") if (path / "manifest.txt").exists() else {}
    step = 0.1
    if "times" in meta:
        times = [float(t) for t in meta["times"].split(",")]
        if len(times) > 1:
            step = times[1] - times[0]
    noisy = load_frame_directory(path / "noisy", time_step=step)
    clean = load_frame_directory(path / "clean", time_step=step) if (path / "clean").is_dir() else None
    return clean, noisy, meta
