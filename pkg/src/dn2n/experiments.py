"""End-to-end toy runs: synthesize, train, predict and score one grid cell at a time."""
from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from pathlib import Path

from . import manifest
from .baselines import build_td_pairs, frame_average, predict_td, train_td
from .imaging import Image, normalize, psnr, ssim, write_pgm
from .rng import stream
from .synth import Mode, NoiseSpec, TauSampler, ToySpec, make_toy_dataset, sample_tau
from .theory import bound_report
from .training import TrainConfig, predict_model, train

log = logging.getLogger(__name__)

NOISE_GRID = ((25.0, 10.0), (10.0, 10.0), (25.0, 25.0), (10.0, 25.0))
ABLATION_GRID = tuple((mu, st) for mu in (0.0, 100.0) for st in (0.0, 75.0))
METHODS = ("dn2n", "td", "average")


@dataclass(frozen=True)
class ToyCell:
    mode: str
    lam: float
    sigma: float
    seed: int
    side: int = 96
    n: int = 24

    @property
    def name(self) -> str:
        return f"{self.mode}_l{self.lam:g}_s{self.sigma:g}_seed{self.seed}"


def toy_data(cell: ToyCell):
    """``(clean, noisy, tau_plan)`` for a cell; the plan is fixed per seed."""
    toy = ToySpec(side=cell.side, n=cell.n)
    clean, noisy = make_toy_dataset(Mode(cell.mode), toy, NoiseSpec(cell.lam, cell.sigma, cell.seed))
    plan = sample_tau(TauSampler(cell.n), stream(cell.seed, "tau"))
    return clean, noisy, plan


def score(pred: Image, clean0: Image) -> dict:
    ref = normalize(clean0)
    return {"psnr": psnr(ref, pred, 1.0), "ssim": ssim(ref, pred, 1.0)}


def run_cell(cell: ToyCell, config: TrainConfig, method: str = "dn2n", threads: int = 1,
             out_dir=None, bounds: bool = False) -> dict:
    """Train and score one method on one cell; returns a flat metrics row.

    When ``out_dir`` is given, the row is written to ``<out_dir>/metrics.txt``
    next to a PGM preview of the estimate.
    """
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}")
    config = replace(config, seed=cell.seed)
    clean, noisy, plan = toy_data(cell)
    row = {"method": method, "mode": cell.mode, "lambda": float(cell.lam), "sigma": float(cell.sigma),
           "seed": cell.seed, "size": cell.side}
    model = None
    if method == "dn2n":
        model = train(config, noisy, plan, threads)
        pred = predict_model(model, noisy[0], threads=threads)
    elif method == "td":
        model = train_td(build_td_pairs(noisy), noisy, config, threads)
        pred = predict_td(model, noisy[0], threads)
    else:
        pred = normalize(frame_average(noisy))
    if model is not None:
        row.update({"mu": config.mu, "sigma_tilde": config.sigma_tilde, "epochs": config.epochs,
                    "levels": config.model.levels, "config_hash": config.digest()})
        last = model.history[-1] if model.history else None
        if last is not None:
            row["final_loss_d"] = last.loss_d
            row["final_loss_t"] = last.loss_t
    row.update(score(pred, clean[0]))
    if bounds and method == "dn2n":
        row.update(bound_report(model, clean, noisy, plan, threads=threads).as_dict())
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_pgm(out / "estimate.pgm", pred)
        manifest.write(out / "metrics.txt", row)
    log.info("%s %s: psnr %.3f ssim %.4f", method, cell.name, row["psnr"], row["ssim"])
    return row


def run_grid(cells, config: TrainConfig, methods=("dn2n",), threads: int = 1, out_root=None,
             bounds: bool = False, progress=None) -> list[dict]:
    rows = []
    for cell in cells:
        for method in methods:
            out = None if out_root is None else Path(out_root) / f"{method}_{cell.name}"
            rows.append(run_cell(cell, config, method, threads, out, bounds))
            if progress is not None:
                progress(rows[-1])
    return rows


def table1_cells(seeds, side: int = 96, noise=NOISE_GRID) -> list[ToyCell]:
    return [ToyCell(mode, lam, sig, s, side) for lam, sig in noise for mode in ("slow", "fast") for s in seeds]


def ablation(config: TrainConfig, seeds, side: int = 96, lam: float = 25.0, sigma: float = 25.0,
             mode: str = "slow", grid=ABLATION_GRID, threads: int = 1, out_root=None) -> list[dict]:
    """DN2N over the ``(mu, sigma_tilde)`` grid on one noise level."""
    rows = []
    for mu, st in grid:
        cfg = replace(config, mu=mu, sigma_tilde=st)
        for s in seeds:
            cell = ToyCell(mode, lam, sigma, s, side)
            out = None if out_root is None else Path(out_root) / f"dn2n_mu{mu:g}_st{st:g}_{cell.name}"
            rows.append(run_cell(cell, cfg, "dn2n", threads, out))
    return rows
