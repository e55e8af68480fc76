"""Exact checks of the population-risk guarantee and the observable bound terms.

``prop1_oracle`` enumerates the joint law of ``(y_0, tau, y_tau)`` for a
scalar pixel with finite noise and time alphabets, minimises the quadratic
risk cell by cell, and compares the minimiser against ``phi_tau(x_0)``.
The bound report collects the measurable terms of the empirical-risk
bound: the denaturation gap, ``E[tau^2]`` and a trained-model proxy for the
approximation error. The Lipschitz constant and the constants of the bound
are not estimated.
"""
from __future__ import annotations

from collections import namedtuple
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .imaging import Domain, FrameSequence, Image, normalize
from .training import TrainedModel, TrainingData, predict_model
from . import nn

MAX_OUTCOMES = 10_000
PROB_TOL = 1e-12


@dataclass(frozen=True)
class DiscreteInstance:
    x0: float
    noise_values: tuple[float, ...]
    noise_probs: tuple[float, ...]
    tau_values: tuple[float, ...]
    tau_probs: tuple[float, ...]
    phi: Callable[[float, float], float]

    def __post_init__(self):
        for vals, probs, what in ((self.noise_values, self.noise_probs, "noise"),
                                  (self.tau_values, self.tau_probs, "tau")):
            p = np.asarray(probs, dtype=float)
            if len(vals) != len(probs) or len(vals) == 0:
                raise ValueError(f"{what}: values and probabilities must be non-empty and aligned")
            if np.any(p < 0) or abs(p.sum() - 1.0) > PROB_TOL:
                raise ValueError(f"{what}: probabilities must be non-negative and sum to 1")
        mean = float(np.dot(self.noise_values, self.noise_probs))
        if abs(mean) > PROB_TOL:
            raise ValueError(f"noise must be zero-mean, got mean {mean}")

    @property
    def n_outcomes(self) -> int:
        return len(self.noise_values) ** 2 * len(self.tau_values)


@dataclass
class Prop1Result:
    minimizer: dict            # (y0, tau) -> f*
    expected: dict             # (y0, tau) -> phi_tau(x0)
    limit_at_zero: dict        # y0 -> value of f*(y0, .) continued to tau = 0
    max_error: float
    limit_error: float
    tol: float = 1e-12

    @property
    def verdict(self) -> bool:
        return self.max_error <= self.tol and self.limit_error <= self.tol


def _lagrange_at_zero(xs, ys) -> float:
    total = 0.0
    for a, (xa, ya) in enumerate(zip(xs, ys)):
        w = 1.0
        for b, xb in enumerate(xs):
            if b != a:
                w *= (0.0 - xb) / (xa - xb)
        total += w * ya
    return total


def prop1_oracle(inst: DiscreteInstance, tol: float = 1e-12) -> Prop1Result:
    """Per-cell minimiser of ``E[(f(y_0, tau) - y_tau)^2]`` by enumeration."""
    if inst.n_outcomes > MAX_OUTCOMES:
        raise ValueError(f"{inst.n_outcomes} joint outcomes exceed the enumeration limit {MAX_OUTCOMES}")
    # cell -> coefficients of the quadratic  a f^2 - 2 b f + c
    coef: dict = {}
    y0_value = {}
    for e0, pe0 in zip(inst.noise_values, inst.noise_probs):
        y0 = inst.phi(0.0, inst.x0) + e0
        for t, pt in zip(inst.tau_values, inst.tau_probs):
            for e1, pe1 in zip(inst.noise_values, inst.noise_probs):
                yt = inst.phi(t, inst.x0) + e1
                p = pe0 * pt * pe1
                key = (e0, t)
                a, b, c = coef.get(key, (0.0, 0.0, 0.0))
                coef[key] = (a + p, b + p * yt, c + p * yt * yt)
                y0_value[key] = y0
    minimizer, expected = {}, {}
    max_err = 0.0
    for key, (a, b, c) in coef.items():
        if a == 0:
            continue
        f_star = b / a
        cell = (y0_value[key], key[1])
        minimizer[cell] = f_star
        expected[cell] = inst.phi(key[1], inst.x0)
        max_err = max(max_err, abs(f_star - expected[cell]))
    limits = {}
    lim_err = 0.0
    for y0 in sorted({k[0] for k in minimizer}):
        pts = sorted((t, v) for (yy, t), v in minimizer.items() if yy == y0)
        ts = [t for t, _ in pts]
        vs = [v for _, v in pts]
        limits[y0] = vs[ts.index(0.0)] if 0.0 in ts else _lagrange_at_zero(ts, vs)
        lim_err = max(lim_err, abs(limits[y0] - inst.x0))
    return Prop1Result(minimizer, expected, limits, max_err, lim_err, tol)


def population_risk(inst: DiscreteInstance, f: Callable[[float, float], float]) -> float:
    """``E[(f(y_0, tau) - y_tau)^2]`` under the instance's joint law."""
    total = 0.0
    for e0, pe0 in zip(inst.noise_values, inst.noise_probs):
        y0 = inst.phi(0.0, inst.x0) + e0
        for t, pt in zip(inst.tau_values, inst.tau_probs):
            for e1, pe1 in zip(inst.noise_values, inst.noise_probs):
                total += pe0 * pt * pe1 * (f(y0, t) - (inst.phi(t, inst.x0) + e1)) ** 2
    return total


# ---------------------------------------------------------------------------
# bound terms

GapTerm = namedtuple("GapTerm", "total per_pixel")


def _unit(im: Image) -> np.ndarray:
    return normalize(im).pixels if im.domain is Domain.RAW255 else im.pixels


def g_phi(clean: FrameSequence, tau_weights=None) -> GapTerm:
    """Squared distance between the weighted mean of frames ``1..N`` and frame 0, Unit domain."""
    n = len(clean) - 1
    if n < 1:
        raise ValueError("need frame 0 and at least one later frame")
    w = np.full(n, 1.0 / n) if tau_weights is None else np.asarray(tau_weights, dtype=float)
    if w.shape != (n,):
        raise ValueError(f"expected {n} weights, got {w.shape}")
    if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
        raise ValueError("weights must be non-negative and sum to 1")
    mean = np.zeros(clean.shape)
    for wi, frame in zip(w, clean.frames[1:]):
        mean += wi * _unit(frame)
    total = float(np.sum((mean - _unit(clean[0])) ** 2))
    return GapTerm(total, total / mean.size)


def expected_tau_sq(taus, weights=None) -> float:
    t = np.asarray(taus, dtype=float)
    w = np.full(t.shape, 1.0 / t.size) if weights is None else np.asarray(weights, dtype=float)
    if w.shape != t.shape or np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
        raise ValueError("weights must match taus, be non-negative and sum to 1")
    return float(np.sum(w * t * t))


@dataclass
class BoundReport:
    g_phi: float
    g_phi_per_pixel: float
    e_tau_sq: float
    e_f_proxy: float
    pred_gap: float
    metadata: dict = field(default_factory=dict)

    KEYS = ("g_phi", "g_phi_per_pixel", "e_tau_sq", "e_f_proxy", "pred_gap")

    def __post_init__(self):
        for k in self.KEYS:
            v = getattr(self, k)
            if not (np.isfinite(v) and v >= 0):
                raise ValueError(f"{k} must be finite and non-negative, got {v}")

    def as_dict(self) -> dict:
        d = {f"bound.{k}": getattr(self, k) for k in self.KEYS}
        d.update({f"bound.meta.{k}": v for k, v in self.metadata.items()})
        return d


def empirical_loss(model: TrainedModel, noisy: FrameSequence, tau_plan) -> float:
    """Plain time-aware empirical risk (no auxiliary noise), per-pixel, full batch."""
    data = TrainingData([noisy], tau_plan, 0.0, 0, 1)
    items = data.items()
    total = 0.0
    for start in range(0, len(items), 8):
        chunk = items[start:start + 8]
        out = nn.predict_only(model.spec, model.params, np.stack([data.input(*it) for it in chunk]))
        tgt = np.stack([data.target(*it) for it in chunk])
        total += float(np.sum((out - tgt) ** 2)) / out[0].size
    return total / len(items)


def bound_report(model: TrainedModel, clean: FrameSequence, noisy: FrameSequence, tau_plan,
                 metadata: dict | None = None, threads: int = 1) -> BoundReport:
    gap = g_phi(clean)
    e_tau = expected_tau_sq([t for t, _ in tau_plan])
    e_f = empirical_loss(model, noisy, tau_plan)
    pred = predict_model(model, noisy[0], threads=threads)
    gap_pred = float(np.mean((pred.pixels - _unit(clean[0])) ** 2))
    meta = {"config_hash": model.config.digest()}
    meta.update(metadata or {})
    return BoundReport(gap.total, gap.per_pixel, e_tau, e_f, gap_pred, meta)
