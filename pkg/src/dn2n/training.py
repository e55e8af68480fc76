"""Time-conditioned Noise2Noise objective, training loop and prediction.

Notation follows the training setup: ``L`` auxiliary-noise transforms
``m_k(y) = y + eps_k`` / ``m'_k(y) = y + eps'_k``, ``M`` reference sequences
and ``N`` relabelled frames ``(tau_i, frame index)``. A training item is a
triple ``(k, j, i)``: input ``m_k(y_{0,j})`` with time plane ``tau_i``,
target ``m'_k(y_{tau_i,j})``. Noise is added in Raw255 units, then images are
divided by 255. Losses are per-pixel means, averaged over items.
"""
from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import manifest, nn
from .imaging import Domain, FrameSequence, Image
from .nn import AdamState, ModelSpec
from .rng import stream

log = logging.getLogger(__name__)

TAPE_BUDGET_BYTES = 1 << 30


class NumericFailure(RuntimeError):
    """A loss became NaN/Inf. ``items`` lists the offending batch."""

    def __init__(self, message, epoch, items):
        super().__init__(message)
        self.epoch = epoch
        self.items = items


@dataclass(frozen=True)
class TrainConfig:
    sigma_tilde: float = 100.0
    mu: float = 100.0
    l_transforms: int = 2
    k_pred: int = 100
    epochs: int = 1000
    lr: float = 1e-4
    batch: int = 4
    seed: int = 0
    model: ModelSpec = field(default_factory=ModelSpec)
    static_transforms: bool = False

    def __post_init__(self):
        if self.sigma_tilde < 0 or self.mu < 0:
            raise ValueError("sigma_tilde and mu must be non-negative")
        if min(self.l_transforms, self.k_pred, self.batch) < 1 or self.epochs < 0:
            raise ValueError("l_transforms, k_pred and batch must be >= 1, epochs >= 0")
        if self.lr <= 0:
            raise ValueError("lr must be positive")

    def as_dict(self) -> dict:
        d = asdict(self)
        del d["model"]
        d["levels"] = self.model.levels
        return d

    def digest(self) -> str:
        text = manifest.dumps(self.as_dict()) + self.model.digest()
        return hashlib.sha256(text.encode()).hexdigest()[:16]


@dataclass
class EpochLog:
    epoch: int
    loss_d: float
    loss_a: float | None
    loss_t: float


@dataclass
class TrainedModel:
    spec: ModelSpec
    params: dict
    config: TrainConfig
    method: str = "dn2n"
    history: list = field(default_factory=list)

    def save(self, path, extra: dict | None = None) -> Path:
        """Write the model file and ``<path>.manifest.txt``; returns the manifest path."""
        path = Path(path)
        nn.save_model(path, self.spec, self.params)
        info = {"method": self.method, "config_hash": self.config.digest(), "model_hash": self.spec.digest()}
        info.update(self.config.as_dict())
        info.update(extra or {})
        for h in self.history:
            la = "na" if h.loss_a is None else repr(h.loss_a)
            info[f"epoch.{h.epoch:04d}"] = f"{h.loss_d!r},{la},{h.loss_t!r}"
        mpath = manifest_path(path)
        manifest.write(mpath, info)
        return mpath

    @classmethod
    def load(cls, path) -> "TrainedModel":
        """Model file plus its manifest; the manifest's config must match the stored spec."""
        spec, params = nn.load_model(path)
        info = manifest.read(manifest_path(path))
        config = config_from_manifest(info, spec)
        if info.get("config_hash") not in (None, config.digest()):
            raise nn.ModelFormatError(f"{path}: manifest config does not match its hash")
        history = []
        for key in sorted(k for k in info if k.startswith("epoch.")):
            ld, la, lt = info[key].split(",")
            history.append(EpochLog(int(key[6:]), float(ld), None if la == "na" else float(la), float(lt)))
        return cls(spec, params, config, info.get("method", "dn2n"), history)


def manifest_path(model_path) -> Path:
    model_path = Path(model_path)
    return model_path.with_name(model_path.name + ".manifest.txt")


CONFIG_KEYS = {"sigma_tilde": float, "mu": float, "l_transforms": int, "k_pred": int, "epochs": int,
               "lr": float, "batch": int, "seed": int, "static_transforms": manifest.parse_bool}


def config_from_manifest(info: dict, spec: ModelSpec | None = None) -> TrainConfig:
    """Build a config from flat ``key=value`` strings; unknown keys are ignored."""
    kw = {k: conv(info[k]) for k, conv in CONFIG_KEYS.items() if k in info}
    if spec is None and "levels" in info:
        spec = ModelSpec(levels=manifest.parse_ints(info["levels"]))
    if spec is not None:
        kw["model"] = spec
    return TrainConfig(**kw)


def time_plane_concat(im: Image | np.ndarray, t: float) -> np.ndarray:
    """``(C+1, H, W)`` array: image channel(s) then a constant plane of ``t``."""
    if t < 0:
        raise ValueError("time must be non-negative")
    px = im.pixels if isinstance(im, Image) else np.asarray(im, dtype=np.float64)
    if px.ndim == 2:
        px = px[None]
    plane = np.full((1,) + px.shape[1:], float(t))
    return np.concatenate([px, plane], axis=0)


def transform_input(im: Image, sigma_tilde: float, rng: np.random.Generator) -> Image:
    """``m(y) = y + eps``, ``eps ~ N(0, sigma_tilde^2)`` per pixel (Raw255 units)."""
    if sigma_tilde < 0:
        raise ValueError("sigma_tilde must be non-negative")
    if sigma_tilde == 0:
        return im
    return Image(im.pixels + rng.normal(0.0, sigma_tilde, size=im.shape), im.domain)


def _raw(im: Image) -> np.ndarray:
    if im.domain is Domain.UNIT:
        return im.pixels * 255.0
    return im.pixels


class TrainingData:
    """Noisy sequences plus the tau relabelling and the current transforms."""

    def __init__(self, sequences, tau_plan, sigma_tilde: float, seed: int, l_transforms: int):
        if isinstance(sequences, FrameSequence):
            sequences = [sequences]
        if not sequences:
            raise ValueError("no training sequences")
        if not tau_plan:
            raise ValueError("empty tau plan")
        self.y0 = [_raw(s[0]) for s in sequences]
        self.frames = [[_raw(f) for f in s.frames] for s in sequences]
        self.taus = [float(t) for t, _ in tau_plan]
        self.index = [int(i) for _, i in tau_plan]
        shape = self.y0[0].shape
        for s in self.frames:
            if any(f.shape != shape for f in s):
                raise ValueError("all frames must share one shape")
            if max(self.index) >= len(s):
                raise ValueError("tau plan references a frame that does not exist")
        self.shape = shape
        self.sigma_tilde = sigma_tilde
        self.seed = seed
        self.L = l_transforms
        self.eps_in = [np.zeros(shape)] * self.L
        self.eps_out = [np.zeros(shape)] * self.L

    @property
    def M(self) -> int:
        return len(self.y0)

    @property
    def N(self) -> int:
        return len(self.taus)

    def draw_transforms(self, epoch: int) -> None:
        if self.sigma_tilde == 0:
            return
        s = self.sigma_tilde
        self.eps_in = [stream(self.seed, "transform-in", epoch, k).normal(0.0, s, self.shape) for k in range(self.L)]
        self.eps_out = [stream(self.seed, "transform-out", epoch, k).normal(0.0, s, self.shape) for k in range(self.L)]

    def items(self):
        return [(k, j, i) for k in range(self.L) for j in range(self.M) for i in range(self.N)]

    def input(self, k, j, i) -> np.ndarray:
        return time_plane_concat((self.y0[j] + self.eps_in[k]) / 255.0, self.taus[i])

    def target(self, k, j, i) -> np.ndarray:
        return ((self.frames[j][self.index[i]] + self.eps_out[k]) / 255.0)[None]


def regression_loss(spec: ModelSpec, params, inputs: np.ndarray, targets: np.ndarray, threads: int = 1):
    """Mean over items of per-pixel squared error, with exact gradients."""
    out, tape = nn.forward(spec, params, inputs, threads)
    if out.shape != targets.shape:
        raise ValueError(f"target shape {targets.shape} does not match output {out.shape}")
    diff = out - targets
    b = diff.shape[0]
    per_pixel = diff[0].size
    value = float(np.mean(np.sum(diff.reshape(b, -1) ** 2, axis=1) / per_pixel))
    grads = nn.backward(spec, params, tape, diff * (2.0 / (per_pixel * b)), threads)
    return value, grads


def loss_d(spec: ModelSpec, params, items, data: TrainingData, threads: int = 1):
    """Transformed-input loss over the given ``(k, j, i)`` items."""
    x = np.stack([data.input(*it) for it in items])
    y = np.stack([data.target(*it) for it in items])
    return regression_loss(spec, params, x, y, threads)


def _tape_nbytes(tape: nn.Tape) -> int:
    return sum(a.nbytes for cache in tape.caches for entry in cache for a in entry[2:] if a is not None)


def loss_a(spec: ModelSpec, params, k: int, j: int, data: TrainingData, chunk: int = 4, threads: int = 1):
    """Averaging loss for transform ``k`` and sequence ``j``.

    ``|| mean_i f(m_k(y_0j), tau_i) - mean_i m'_k(y_{tau_i, j}) ||^2`` per pixel.
    Each ``f(., tau_i)`` receives ``1/N`` of the output gradient. Forward
    tapes are kept when they fit in ``TAPE_BUDGET_BYTES``, otherwise
    recomputed chunk by chunk; both give identical bits.
    """
    n = data.N
    if n == 0:
        raise ValueError("averaging loss needs at least one frame")
    chunks = [list(range(s, min(s + chunk, n))) for s in range(0, n, chunk)]
    tapes = []
    out_sum = None
    keep = True
    for c in chunks:
        x = np.stack([data.input(k, j, i) for i in c])
        out, tape = nn.forward(spec, params, x, threads)
        if keep and _tape_nbytes(tape) * n / len(c) > TAPE_BUDGET_BYTES:
            keep = False
            tapes = []
        if keep:
            tapes.append(tape)
        for o in out:
            out_sum = o.copy() if out_sum is None else out_sum + o
    tgt_sum = None
    for i in range(n):
        t = data.target(k, j, i)
        tgt_sum = t if tgt_sum is None else tgt_sum + t
    diff = out_sum / n - tgt_sum / n
    per_pixel = diff.size
    value = float(np.sum(diff ** 2) / per_pixel)
    g_item = diff * (2.0 / (per_pixel * n))
    parts = []
    for ci, c in enumerate(chunks):
        if keep:
            tape = tapes[ci]
        else:
            _, tape = nn.forward(spec, params, np.stack([data.input(k, j, i) for i in c]), threads)
        parts.append(nn.backward(spec, params, tape, np.broadcast_to(g_item, (len(c),) + g_item.shape).copy(),
                                 threads))
    return value, nn.sum_grads(parts, params)


def averaging_coefficient(mu: float, data: TrainingData) -> float:
    return mu / (data.L * data.M * data.N)


def total_loss(spec: ModelSpec, params, data: TrainingData, mu: float, chunk: int = 4, threads: int = 1):
    """Full-batch ``L_D + mu / (L M N) * L_A``. Returns ``(L_T, L_D, L_A, grads)``."""
    vd, gd = loss_d(spec, params, data.items(), data, threads)
    if mu == 0:
        return vd, vd, None, gd
    va, ga = _averaging_all(spec, params, data, chunk, threads)
    c = averaging_coefficient(mu, data)
    grads = {name: gd[name] + c * ga[name] for name in gd}
    return vd + c * va, vd, va, grads


def _averaging_all(spec, params, data: TrainingData, chunk: int, threads: int):
    """``L_A`` averaged over all ``(k, j)`` with its gradient."""
    vals, parts = [], []
    for k in range(data.L):
        for j in range(data.M):
            v, g = loss_a(spec, params, k, j, data, chunk, threads)
            vals.append(v)
            parts.append(g)
    scale = 1.0 / len(vals)
    grads = nn.sum_grads(parts, params)
    for g in grads.values():
        g *= scale
    return float(sum(vals) * scale), grads


def _check_finite(value, grads, epoch, items):
    if not math.isfinite(value) or any(not np.all(np.isfinite(g)) for g in grads.values()):
        raise NumericFailure(f"non-finite loss at epoch {epoch} for items {items}", epoch, items)


def train(config: TrainConfig, sequences, tau_plan, threads: int = 1, progress=None) -> TrainedModel:
    """Minimise ``L_D + mu/(LMN) L_A`` with Adam.

    Each epoch draws fresh transforms (unless ``static_transforms``), runs
    shuffled minibatches over all ``(k, j, i)`` items for ``L_D`` with one
    Adam step each, then, if ``mu > 0``, one Adam step on the scaled ``L_A``
    gradient averaged over all ``(k, j)``.
    """
    spec = config.model
    params = nn.init_params(spec, config.seed)
    state = AdamState.for_params(params, lr=config.lr)
    data = TrainingData(sequences, tau_plan, config.sigma_tilde, config.seed, config.l_transforms)
    items = data.items()
    coef = averaging_coefficient(config.mu, data)
    history = []
    for epoch in range(config.epochs):
        data.draw_transforms(0 if config.static_transforms else epoch)
        order = stream(config.seed, "shuffle", epoch).permutation(len(items))
        total, count = 0.0, 0
        for start in range(0, len(order), config.batch):
            batch = [items[o] for o in order[start:start + config.batch]]
            value, grads = loss_d(spec, params, batch, data, threads)
            _check_finite(value, grads, epoch, batch)
            nn.adam_step(params, grads, state)
            total += value * len(batch)
            count += len(batch)
        ld = total / count
        la = None
        if config.mu > 0:
            la, ga = _averaging_all(spec, params, data, config.batch, threads)
            for g in ga.values():
                g *= coef
            _check_finite(la, ga, epoch, [("averaging", k, j) for k in range(data.L) for j in range(data.M)])
            nn.adam_step(params, ga, state)
        entry = EpochLog(epoch, ld, la, ld + (coef * la if la is not None else 0.0))
        history.append(entry)
        if progress is not None:
            progress(entry)
    return TrainedModel(spec, params, config, "dn2n", history)


def loss_grad_check(spec: ModelSpec, params, data: TrainingData, which: str = "T", mu: float = 100.0,
                    n_samples: int = 50, h: float = 1e-5, tolerance: float = 1e-6, seed: int = 0):
    """Finite-difference check of ``L_D``, ``L_A`` (summed over (k, j)) or ``L_T``."""
    if which not in ("D", "A", "T"):
        raise ValueError("which must be 'D', 'A' or 'T'")
    x_all = np.stack([data.input(*it) for it in data.items()])

    def value_and_grads():
        if which == "D":
            return loss_d(spec, params, data.items(), data)
        if which == "A":
            return _averaging_all(spec, params, data, 4, 1)
        lt, _, _, g = total_loss(spec, params, data, mu)
        return lt, g

    _, grads = value_and_grads()

    def evaluate():
        return value_and_grads()[0], nn.kink_pattern(spec, params, x_all)

    return nn.compare_gradients(params, grads, evaluate, tolerance, n_samples, h, np.random.default_rng(seed))


def prediction_noise(seed: int, i: int, shape, sigma_tilde: float) -> np.ndarray:
    return stream(seed, "predict", i).normal(0.0, sigma_tilde, shape)


def predict(spec: ModelSpec, params, y0_frames, sigma_tilde: float, k: int, seed: int = 0,
            batch: int = 8, threads: int = 1) -> Image:
    """Ensemble estimate ``mean_{i<K, j<M} f(y_{0,j} + eps_i, 0)`` in Unit domain.

    With ``sigma_tilde == 0`` all members coincide, so a single pass is made.
    """
    if k < 1:
        raise ValueError("K must be >= 1")
    if isinstance(y0_frames, Image):
        y0_frames = [y0_frames]
    raws = [_raw(f) for f in y0_frames]
    shape = raws[0].shape
    members = 1 if sigma_tilde == 0 else k
    inputs = []
    for i in range(members):
        eps = prediction_noise(seed, i, shape, sigma_tilde) if sigma_tilde > 0 else 0.0
        for y in raws:
            inputs.append(time_plane_concat((y + eps) / 255.0, 0.0))
    acc = None
    for start in range(0, len(inputs), batch):
        out = nn.predict_only(spec, params, np.stack(inputs[start:start + batch]), threads)
        for o in out:
            acc = o[0].copy() if acc is None else acc + o[0]
    return Image(acc / len(inputs), Domain.UNIT)


def predict_model(model: TrainedModel, y0_frames, sigma_tilde: float | None = None, k: int | None = None,
                  seed: int | None = None, threads: int = 1) -> Image:
    cfg = model.config
    return predict(model.spec, model.params, y0_frames,
                   cfg.sigma_tilde if sigma_tilde is None else sigma_tilde,
                   cfg.k_pred if k is None else k,
                   cfg.seed if seed is None else seed, threads=threads)


def with_overrides(config: TrainConfig, **kw) -> TrainConfig:
    return replace(config, **{k: v for k, v in kw.items() if v is not None})
