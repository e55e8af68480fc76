"""Small numpy encoder-decoder network with exact reverse-mode gradients.

Activations are processed one batch item at a time in channels-last layout
``(H, W, C)``; the public ``forward``/``backward`` accept and return
``(batch, channels, height, width)`` arrays. Everything is float64.

Parameter layout for a spec with levels ``(w0, ..., wn)``::

    enc{l}.conv{1,2}.{w,b}    two 3x3 convs per encoder level
    up{l}.{w,b}               3x3 conv after nearest x2 upsampling (l < n)
    dec{l}.conv{1,2}.{w,b}    two 3x3 convs after skip concatenation
    out.{w,b}                 final 1x1 conv, no activation

Conv weights are stored as ``(k, k, c_in, c_out)``.
"""
from __future__ import annotations

import hashlib
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MODEL_MAGIC = b"DNM1"
MODEL_VERSION = 1


class ModelFormatError(ValueError):
    pass


@dataclass(frozen=True)
class ModelSpec:
    in_channels: int = 2
    levels: tuple[int, ...] = (16, 32, 64)
    out_channels: int = 1
    kernel: int = 3
    slope: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "levels", tuple(int(w) for w in self.levels))
        if len(self.levels) < 1 or any(w <= 0 for w in self.levels):
            raise ValueError(f"levels must be non-empty positive widths, got {self.levels}")
        if self.in_channels < 1 or self.out_channels < 1:
            raise ValueError("channel counts must be positive")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ValueError("kernel must be a positive odd integer")

    @property
    def divisor(self) -> int:
        """Spatial dims must be multiples of this."""
        return 2 ** (len(self.levels) - 1)

    def encode(self) -> bytes:
        head = struct.pack("<IIIId", self.in_channels, self.out_channels, self.kernel,
                           len(self.levels), self.slope)
        return head + struct.pack(f"<{len(self.levels)}I", *self.levels)

    def digest(self) -> str:
        return hashlib.sha256(self.encode()).hexdigest()[:16]


def param_shapes(spec: ModelSpec) -> dict[str, tuple[int, ...]]:
    """Ordered mapping of parameter names to shapes."""
    k = spec.kernel
    shapes: dict[str, tuple[int, ...]] = {}
    c = spec.in_channels
    for lvl, width in enumerate(spec.levels):
        shapes[f"enc{lvl}.conv1.w"] = (k, k, c, width)
        shapes[f"enc{lvl}.conv1.b"] = (width,)
        shapes[f"enc{lvl}.conv2.w"] = (k, k, width, width)
        shapes[f"enc{lvl}.conv2.b"] = (width,)
        c = width
    for lvl in range(len(spec.levels) - 2, -1, -1):
        width = spec.levels[lvl]
        shapes[f"up{lvl}.w"] = (k, k, c, width)
        shapes[f"up{lvl}.b"] = (width,)
        shapes[f"dec{lvl}.conv1.w"] = (k, k, 2 * width, width)
        shapes[f"dec{lvl}.conv1.b"] = (width,)
        shapes[f"dec{lvl}.conv2.w"] = (k, k, width, width)
        shapes[f"dec{lvl}.conv2.b"] = (width,)
        c = width
    shapes["out.w"] = (1, 1, c, spec.out_channels)
    shapes["out.b"] = (spec.out_channels,)
    return shapes


def init_params(spec: ModelSpec, seed: int) -> dict[str, np.ndarray]:
    """Glorot-uniform weights, zero biases."""
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, 0x6E6E])))
    params = {}
    for name, shape in param_shapes(spec).items():
        if name.endswith(".b"):
            params[name] = np.zeros(shape)
        else:
            kh, kw, cin, cout = shape
            limit = np.sqrt(6.0 / (kh * kw * cin + kh * kw * cout))
            params[name] = rng.uniform(-limit, limit, size=shape)
    return params


def n_params(params: dict[str, np.ndarray]) -> int:
    return sum(p.size for p in params.values())


# ---------------------------------------------------------------------------
# layer primitives, single item, channels-last


def _pad_flat(x: np.ndarray, p: int) -> np.ndarray:
    """Zero-pad ``(H, W, C)`` by ``p`` and flatten rows, plus one spare row.

    In this layout the input window of every kernel tap is one contiguous
    row range, so a convolution is k*k plain GEMMs with no im2col copy.
    """
    h, w, c = x.shape
    wp = w + 2 * p
    buf = np.zeros(((h + 2 * p + 1) * wp, c))
    buf.reshape(h + 2 * p + 1, wp, c)[p:p + h, p:p + w] = x
    return buf


def conv_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray):
    """Stride-1 'same' convolution of ``(H, W, Cin)``. Returns ``(y, saved)``."""
    k = w.shape[0]
    h, wd, cin = x.shape
    cout = w.shape[3]
    if k == 1:
        xf = x.reshape(h * wd, cin)
        y = xf @ w[0, 0]
        y += b
        return y.reshape(h, wd, cout), xf
    p = k // 2
    wp = wd + 2 * p
    m = h * wp
    xf = _pad_flat(x, p)
    y = xf[0:m] @ w[0, 0]
    tmp = np.empty_like(y)
    for i in range(k):
        for j in range(k):
            if i or j:
                o = i * wp + j
                np.matmul(xf[o:o + m], w[i, j], out=tmp)
                y += tmp
    y += b
    return y.reshape(h, wp, cout)[:, :wd], xf


def conv_backward(dy: np.ndarray, saved: np.ndarray, w: np.ndarray, x_shape, need_dx: bool = True):
    """Returns ``(dx, dw, db)``; ``dx`` is None when not requested."""
    k = w.shape[0]
    h, wd, cin = x_shape
    cout = w.shape[3]
    db = dy.reshape(-1, cout).sum(axis=0) if dy.flags.c_contiguous else dy.sum(axis=(0, 1))
    if k == 1:
        dy2 = np.ascontiguousarray(dy).reshape(h * wd, cout)
        dw = (saved.T @ dy2).reshape(w.shape)
        dx = (dy2 @ w[0, 0].T).reshape(h, wd, cin) if need_dx else None
        return dx, dw, db
    p = k // 2
    wp = wd + 2 * p
    m = h * wp
    dyf = np.zeros((h, wp, cout))
    dyf[:, :wd] = dy
    dyf = dyf.reshape(m, cout)
    dw = np.empty_like(w)
    dxf = np.zeros_like(saved) if need_dx else None
    for i in range(k):
        for j in range(k):
            o = i * wp + j
            dw[i, j] = saved[o:o + m].T @ dyf
            if need_dx:
                dxf[o:o + m] += dyf @ w[i, j].T
    dx = None
    if need_dx:
        dx = dxf.reshape(h + 2 * p + 1, wp, cin)[p:p + h, p:p + wd]
    return dx, dw, db


def lrelu_forward(z: np.ndarray, slope: float) -> np.ndarray:
    # valid for 0 <= slope <= 1
    return np.maximum(z, slope * z)


def lrelu_backward(dy: np.ndarray, z: np.ndarray, slope: float) -> np.ndarray:
    return np.where(z > 0, dy, slope * dy)


def avgpool_forward(x: np.ndarray) -> np.ndarray:
    h, w, c = x.shape
    return x.reshape(h // 2, 2, w // 2, 2, c).mean(axis=(1, 3))


def avgpool_backward(dy: np.ndarray) -> np.ndarray:
    return np.repeat(np.repeat(dy * 0.25, 2, axis=0), 2, axis=1)


def upsample_forward(x: np.ndarray) -> np.ndarray:
    return np.repeat(np.repeat(x, 2, axis=0), 2, axis=1)


def upsample_backward(dy: np.ndarray) -> np.ndarray:
    h, w, c = dy.shape
    return dy.reshape(h // 2, 2, w // 2, 2, c).sum(axis=(1, 3))


# ---------------------------------------------------------------------------
# network, single item


def _conv_act(params, name, x, slope, cache):
    y, cols = conv_forward(x, params[name + ".w"], params[name + ".b"])
    cache.append((name, x.shape, cols, y))
    return lrelu_forward(y, slope)


def _forward_item(spec: ModelSpec, params, x: np.ndarray):
    s = spec.slope
    cache: list = []
    skips = []
    h = x
    for lvl in range(len(spec.levels)):
        if lvl > 0:
            h = avgpool_forward(h)
        h = _conv_act(params, f"enc{lvl}.conv1", h, s, cache)
        h = _conv_act(params, f"enc{lvl}.conv2", h, s, cache)
        skips.append(h)
    for lvl in range(len(spec.levels) - 2, -1, -1):
        u = _conv_act(params, f"up{lvl}", upsample_forward(h), s, cache)
        h = np.concatenate([u, skips[lvl]], axis=2)
        h = _conv_act(params, f"dec{lvl}.conv1", h, s, cache)
        h = _conv_act(params, f"dec{lvl}.conv2", h, s, cache)
    out, cols = conv_forward(h, params["out.w"], params["out.b"])
    cache.append(("out", h.shape, cols, None))
    return out, cache


def _backward_item(spec: ModelSpec, params, cache: list, dout: np.ndarray):
    s = spec.slope
    grads: dict[str, np.ndarray] = {}
    entries = {e[0]: e for e in cache}

    def back(name, dy, activated=True, need_dx=True):
        _, x_shape, cols, z = entries[name]
        if activated:
            dy = lrelu_backward(dy, z, s)
        dx, dw, db = conv_backward(dy, cols, params[name + ".w"], x_shape, need_dx)
        grads[name + ".w"] = dw
        grads[name + ".b"] = db
        return dx

    n = len(spec.levels)
    dh = back("out", dout, activated=False)
    dskips: list = [None] * n
    for lvl in range(0, n - 1):
        dh = back(f"dec{lvl}.conv2", dh)
        dh = back(f"dec{lvl}.conv1", dh)
        width = spec.levels[lvl]
        du, dskips[lvl] = dh[:, :, :width], dh[:, :, width:]
        dh = upsample_backward(back(f"up{lvl}", du))
    for lvl in range(n - 1, -1, -1):
        if dskips[lvl] is not None:
            dh = dh + dskips[lvl]
        dh = back(f"enc{lvl}.conv2", dh)
        dh = back(f"enc{lvl}.conv1", dh, need_dx=lvl > 0)
        if lvl > 0:
            dh = avgpool_backward(dh)
    return {name: grads[name] for name in params}


# ---------------------------------------------------------------------------
# batched public API


@dataclass
class Tape:
    caches: list
    out_shape: tuple[int, ...]


def _check_input(spec: ModelSpec, x: np.ndarray):
    if x.ndim != 4:
        raise ValueError(f"expected (batch, channels, height, width), got shape {x.shape}")
    if x.shape[1] != spec.in_channels:
        raise ValueError(f"input has {x.shape[1]} channels, model expects {spec.in_channels}")
    d = spec.divisor
    if x.shape[2] % d or x.shape[3] % d:
        raise ValueError(f"spatial dims {x.shape[2:]} not divisible by {d}")


def _map(fn, items, threads: int):
    if threads <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def forward(spec: ModelSpec, params, x: np.ndarray, threads: int = 1):
    """Run the network on a ``(B, C+1, H, W)`` batch. Returns ``(out, tape)``."""
    _check_input(spec, x)
    results = _map(lambda xi: _forward_item(spec, params, np.ascontiguousarray(xi.transpose(1, 2, 0))),
                   list(x), threads)
    out = np.stack([r[0].transpose(2, 0, 1) for r in results])
    return out, Tape([r[1] for r in results], out.shape)


def predict_only(spec: ModelSpec, params, x: np.ndarray, threads: int = 1) -> np.ndarray:
    return forward(spec, params, x, threads)[0]


def backward(spec: ModelSpec, params, tape: Tape, grad_out: np.ndarray, threads: int = 1):
    """Parameter gradients for upstream gradient ``grad_out``.

    Per-item gradients are reduced in item order, so the result does not
    depend on ``threads``.
    """
    if grad_out.shape != tape.out_shape:
        raise ValueError(f"grad shape {grad_out.shape} does not match output {tape.out_shape}")
    items = list(zip(tape.caches, grad_out))
    per_item = _map(lambda it: _backward_item(spec, params, it[0],
                                              np.ascontiguousarray(it[1].transpose(1, 2, 0))),
                    items, threads)
    return sum_grads(per_item, params)


def sum_grads(grad_list, params) -> dict[str, np.ndarray]:
    total = {name: np.zeros_like(p) for name, p in params.items()}
    for g in grad_list:
        for name in total:
            total[name] += g[name]
    return total


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    @classmethod
    def for_params(cls, params, lr: float = 1e-4, **kw) -> "AdamState":
        return cls(lr=lr, m={k: np.zeros_like(p) for k, p in params.items()},
                   v={k: np.zeros_like(p) for k, p in params.items()}, **kw)


def adam_step(params, grads, state: AdamState):
    """Bias-corrected Adam update, in place. Returns ``(params, state)``."""
    for name, g in grads.items():
        if g.shape != params[name].shape:
            raise ValueError(f"gradient shape mismatch for {name}: {g.shape} vs {params[name].shape}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = grads[name]
        m = state.m.setdefault(name, np.zeros_like(p))
        v = state.v.setdefault(name, np.zeros_like(p))
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


# ---------------------------------------------------------------------------
# gradient verification


@dataclass
class GradCheckReport:
    max_rel_error: float
    tolerance: float
    checked: int
    skipped: int
    worst: tuple[str, tuple[int, ...]] | None

    @property
    def ok(self) -> bool:
        return self.max_rel_error < self.tolerance


def rel_error(a: float, b: float, floor: float = 1e-12) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


def _grad_scale(grads) -> float:
    return max(float(np.max(np.abs(g))) for g in grads.values())


def _kink_pattern(tape: Tape) -> np.ndarray:
    return np.concatenate([(z > 0).ravel() for cache in tape.caches
                           for (_, _, _, z) in cache if z is not None])


def grad_check(spec: ModelSpec, params, x: np.ndarray, tolerance: float = 1e-6, n_samples: int = 50,
               h: float = 1e-5, seed: int = 0, backward_fn=None) -> GradCheckReport:
    """Compare analytic and central-difference gradients of ``sum(r * f(x))``.

    ``r`` is a fixed random projection. ``backward_fn`` replaces
    :func:`backward` (negative controls). See :func:`compare_gradients`.
    """
    rng = np.random.default_rng(seed)
    out, tape = forward(spec, params, x)
    r = rng.standard_normal(out.shape)
    grads = (backward_fn or backward)(spec, params, tape, r)

    def evaluate():
        o, t = forward(spec, params, x)
        return float(np.sum(r * o)), _kink_pattern(t)

    return compare_gradients(params, grads, evaluate, tolerance, n_samples, h, rng)


def compare_gradients(params, grads, evaluate, tolerance: float = 1e-6, n_samples: int = 50,
                      h: float = 1e-5, rng=None) -> GradCheckReport:
    """Central differences of ``evaluate() -> (value, kink pattern)`` at random entries.

    Relative errors use ``max(|a|, |n|, 1e-4 * max|grad|)`` as denominator so
    that round-off on vanishing entries is not divided by ~0. A draw whose
    +-h stencil changes the kink pattern (signs of all pre-activations)
    straddles a rectifier kink, where the difference quotient is not a
    derivative; such draws are counted in ``skipped`` and redrawn.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    names = list(params)
    sizes = np.array([params[n].size for n in names], dtype=float)
    floor = max(1e-4 * _grad_scale(grads), 1e-300)
    worst, worst_err = None, 0.0
    checked = skipped = 0
    while checked < n_samples:
        if skipped > 10 * n_samples:
            raise RuntimeError("too many samples straddle rectifier kinks; reduce h")
        name = names[rng.choice(len(names), p=sizes / sizes.sum())]
        idx = tuple(int(i) for i in np.unravel_index(rng.integers(params[name].size), params[name].shape))
        p = params[name]
        orig = p[idx]
        p[idx] = orig + h
        lp, kp = evaluate()
        p[idx] = orig - h
        lm, km = evaluate()
        p[idx] = orig
        if not np.array_equal(kp, km):
            skipped += 1
            continue
        checked += 1
        numeric = (lp - lm) / (2 * h)
        err = rel_error(float(grads[name][idx]), numeric, floor)
        if err >= worst_err:
            worst, worst_err = (name, idx), err
    return GradCheckReport(worst_err, tolerance, checked, skipped, worst)


def kink_pattern(spec: ModelSpec, params, x: np.ndarray) -> np.ndarray:
    """Signs of every pre-activation for input batch ``x``."""
    return _kink_pattern(forward(spec, params, x)[1])


# ---------------------------------------------------------------------------
# model files


def save_model(path, spec: ModelSpec, params) -> None:
    desc = spec.encode()
    chunks = [MODEL_MAGIC, struct.pack("<II", MODEL_VERSION, len(desc)), desc,
              bytes.fromhex(spec.digest())]
    for name, shape in param_shapes(spec).items():
        arr = np.asarray(params[name], dtype="<f8")
        if arr.shape != shape:
            raise ValueError(f"{name}: shape {arr.shape} does not match spec {shape}")
        chunks.append(arr.tobytes(order="C"))
    Path(path).write_bytes(b"".join(chunks))


def load_model(path):
    """Returns ``(spec, params)``."""
    data = Path(path).read_bytes()
    if data[:4] != MODEL_MAGIC:
        raise ModelFormatError(f"{path}: bad magic {data[:4]!r}")
    if len(data) < 12:
        raise ModelFormatError(f"{path}: truncated header")
    version, dlen = struct.unpack_from("<II", data, 4)
    if version != MODEL_VERSION:
        raise ModelFormatError(f"{path}: unsupported version {version}")
    pos = 12
    desc = data[pos:pos + dlen]
    pos += dlen
    if len(desc) != dlen or len(desc) < 24:
        raise ModelFormatError(f"{path}: truncated spec descriptor")
    cin, cout, k, nlev, slope = struct.unpack_from("<IIIId", desc, 0)
    if len(desc) != 24 + 4 * nlev:
        raise ModelFormatError(f"{path}: malformed spec descriptor")
    levels = struct.unpack_from(f"<{nlev}I", desc, 24)
    spec = ModelSpec(in_channels=cin, levels=levels, out_channels=cout, kernel=k, slope=slope)
    stored = data[pos:pos + 8].hex()
    pos += 8
    if stored != spec.digest():
        raise ModelFormatError(f"{path}: spec hash mismatch")
    params = {}
    for name, shape in param_shapes(spec).items():
        nbytes = 8 * int(np.prod(shape))
        if pos + nbytes > len(data):
            raise ModelFormatError(f"{path}: truncated parameters at {name}")
        params[name] = np.frombuffer(data, dtype="<f8", count=nbytes // 8, offset=pos).astype(np.float64).reshape(shape)
        pos += nbytes
    if pos != len(data):
        raise ModelFormatError(f"{path}: {len(data) - pos} trailing bytes")
    return spec, params
