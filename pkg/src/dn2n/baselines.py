"""Comparison methods: adjacent-frame Noise2Noise and plain frame averaging."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from .imaging import FrameSequence, Image
from .rng import stream
from .training import (EpochLog, TrainConfig, TrainedModel, _check_finite, _raw, predict,
                       regression_loss, time_plane_concat)


@dataclass(frozen=True)
class PairingPlan:
    pairs: tuple[tuple[int, int], ...]

    def __post_init__(self):
        for s, t in self.pairs:
            if abs(t - s) != 1:
                raise ValueError(f"pair ({s}, {t}) is not one frame step apart")

    def __len__(self):
        return len(self.pairs)


def build_td_pairs(seq: FrameSequence) -> PairingPlan:
    """Source frame ``i`` paired with target ``i + 1``."""
    if len(seq) < 2:
        raise ValueError("adjacent pairing needs at least two frames")
    return PairingPlan(tuple((i, i + 1) for i in range(len(seq) - 1)))


def train_td(plan: PairingPlan, seq: FrameSequence, config: TrainConfig, threads: int = 1) -> TrainedModel:
    """Noise2Noise on adjacent pairs, same network with the time plane fixed at 0.

    ``sigma_tilde``, ``mu``, ``l_transforms`` and ``k_pred`` are not used.
    """
    spec = config.model
    params = nn.init_params(spec, config.seed)
    state = nn.AdamState.for_params(params, lr=config.lr)
    raws = [_raw(f) for f in seq.frames]
    if max(t for _, t in plan.pairs) >= len(raws):
        raise ValueError("pairing plan references a missing frame")
    history = []
    for epoch in range(config.epochs):
        order = stream(config.seed, "td-shuffle", epoch).permutation(len(plan))
        total = 0.0
        for start in range(0, len(order), config.batch):
            batch = [plan.pairs[o] for o in order[start:start + config.batch]]
            x = np.stack([time_plane_concat(raws[s] / 255.0, 0.0) for s, _ in batch])
            y = np.stack([(raws[t] / 255.0)[None] for _, t in batch])
            value, grads = regression_loss(spec, params, x, y, threads)
            _check_finite(value, grads, epoch, batch)
            nn.adam_step(params, grads, state)
            total += value * len(batch)
        ld = total / len(plan)
        history.append(EpochLog(epoch, ld, None, ld))
    return TrainedModel(spec, params, config, "td", history)


def predict_td(model: TrainedModel, y0: Image, threads: int = 1) -> Image:
    """Single pass ``f(y_0, 0)``: the DN2N predictor with no auxiliary noise and K = 1."""
    return predict(model.spec, model.params, [y0], sigma_tilde=0.0, k=1, threads=threads)


def frame_average(seq) -> Image:
    frames = seq.frames if isinstance(seq, FrameSequence) else tuple(seq)
    if not frames:
        raise ValueError("cannot average an empty sequence")
    acc = np.zeros(frames[0].shape)
    for f in frames:
        acc += f.pixels
    return Image(acc / len(frames), frames[0].domain)
