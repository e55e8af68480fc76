"""Command-line interface: synth, train, denoise, eval, report, diagnose, experiment.

Exit codes: 0 success, 2 usage error, 3 data error, 4 numeric failure.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
import time
from pathlib import Path

from . import manifest
from .baselines import build_td_pairs, predict_td, train_td
from .imaging import (Domain, FrameFormatError, Image, denormalize, normalize, psnr, read_any, ssim, write_frame,
                      write_pgm)
from .nn import ModelFormatError, ModelSpec
from .rng import stream
from .synth import (Mode, NoiseSpec, TauSampler, ToySpec, load_frame_directory, make_toy_dataset, read_dataset,
                    sample_tau, write_dataset)
from .theory import bound_report
from .training import (CONFIG_KEYS, NumericFailure, TrainConfig, TrainedModel, config_from_manifest, manifest_path,
                       predict_model, train)

log = logging.getLogger("dn2n")

EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 2, 3, 4


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


def resolve_threads(args) -> int:
    n = args.threads
    if n is None:
        env = os.environ.get("DN2N_THREADS")
        try:
            n = int(env) if env else 1
        except ValueError:
            raise UsageError(f"DN2N_THREADS must be an integer, got {env!r}") from None
    if n < 1:
        raise UsageError("--threads must be >= 1")
    return n


def stamp(args, info: dict) -> dict:
    if args.stamp:
        info["created"] = time.strftime("%Y-%m-%dT%H:%M:%S%z")
    return info


def _check_shape(spec: ModelSpec, shape) -> None:
    d = spec.divisor
    if shape[0] % d or shape[1] % d:
        raise DataError(f"frame shape {shape} is not divisible by {d} as the model's {len(spec.levels)} levels require")


def _load_noisy(path):
    try:
        return read_dataset(path)
    except (FileNotFoundError, FrameFormatError, ValueError) as e:
        raise DataError(str(e)) from e


def _load_model(path) -> TrainedModel:
    try:
        return TrainedModel.load(path)
    except (FileNotFoundError, ModelFormatError, ValueError, KeyError) as e:
        raise DataError(f"cannot load model {path}: {e}") from e


def _tau_plan(model: TrainedModel, info: dict):
    if "tau_frames" not in info:
        raise DataError("model manifest has no tau plan")
    frames = manifest.parse_ints(info["tau_frames"])
    taus = [float(t) for t in info["tau"].split(",")]
    return list(zip(taus, frames))


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    try:
        noise = NoiseSpec(args.lam, args.sigma, args.seed)
        toy = ToySpec(side=args.size, n=args.frames)
    except ValueError as e:
        raise UsageError(str(e)) from e
    clean, noisy = make_toy_dataset(Mode(args.mode), toy, noise)
    meta = {"mode": args.mode, "lambda": float(args.lam), "sigma": float(args.sigma), "seed": args.seed,
            "size": args.size}
    write_dataset(args.out, clean, noisy, stamp(args, meta))
    print(f"wrote {len(noisy)} clean and {len(noisy)} noisy frames to {args.out}")
    return 0


def _train_config(args) -> TrainConfig:
    info = {}
    if args.config:
        try:
            info = manifest.read(args.config)
        except (OSError, ValueError) as e:
            raise UsageError(f"config {args.config}: {e}") from e
    overrides = {"sigma_tilde": args.sigma_tilde, "mu": args.mu, "l_transforms": args.l_transforms,
                 "k_pred": args.k_pred, "epochs": args.epochs, "lr": args.lr, "batch": args.batch,
                 "seed": args.seed, "levels": args.levels}
    for k, v in overrides.items():
        if v is not None:
            info[k] = manifest.format_value(v)
    if args.static_transforms:
        info["static_transforms"] = "true"
    unknown = sorted(set(info) - set(CONFIG_KEYS) - {"levels"})
    if unknown:
        raise UsageError(f"unknown config keys: {', '.join(unknown)}")
    try:
        return config_from_manifest(info)
    except (TypeError, ValueError) as e:
        raise UsageError(f"invalid training config: {e}") from e


def cmd_train(args) -> int:
    config = _train_config(args)
    threads = resolve_threads(args)
    _, noisy, data_meta = _load_noisy(args.data)
    _check_shape(config.model, noisy.shape)
    extra = {f"data.{k}": v for k, v in data_meta.items() if k != "times"}
    progress = lambda e: log.info("epoch %d  L_D %.6g  L_T %.6g", e.epoch, e.loss_d, e.loss_t)  # noqa: E731
    try:
        if args.method == "td":
            log.warning("method td ignores sigma_tilde, mu, l_transforms and k_pred")
            model = train_td(build_td_pairs(noisy), noisy, config, threads)
        else:
            plan = sample_tau(TauSampler(len(noisy) - 1), stream(config.seed, "tau"))
            model = train(config, noisy, plan, threads, progress)
            extra["tau"] = [t for t, _ in plan]
            extra["tau_frames"] = [i for _, i in plan]
    except ValueError as e:
        raise DataError(str(e)) from e
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    mpath = model.save(args.out, stamp(args, extra))
    last = model.history[-1] if model.history else None
    summary = f"final L_T {last.loss_t:.6g}" if last else "no epochs run"
    print(f"wrote {args.out} and {mpath.name} ({summary})")
    return 0


def _frame_stem(out) -> Path:
    out = Path(out)
    return out.with_suffix("") if out.suffix.lower() in (".dnf", ".pgm") else out


def cmd_denoise(args) -> int:
    threads = resolve_threads(args)
    model = _load_model(args.model)
    _, noisy, data_meta = _load_noisy(args.data)
    _check_shape(model.spec, noisy.shape)
    if args.k is not None and args.k < 1:
        raise UsageError("--k must be >= 1")
    if args.sigma_tilde is not None and args.sigma_tilde < 0:
        raise UsageError("--sigma-tilde must be non-negative")
    if model.method == "td":
        pred = predict_td(model, noisy[0], threads)
    else:
        pred = predict_model(model, noisy[0], args.sigma_tilde, args.k, args.seed, threads)
    stem = _frame_stem(args.out)
    stem.parent.mkdir(parents=True, exist_ok=True)
    write_frame(stem.with_suffix(".dnf"), pred)
    write_pgm(stem.with_suffix(".pgm"), pred)
    info = manifest.read(manifest_path(args.model))
    echo = {k: info[k] for k in ("method", "config_hash", "mu", "sigma_tilde", "seed", "epochs", "levels") if k in info}
    echo.update({k: v for k, v in data_meta.items() if k in ("mode", "lambda", "sigma", "size")})
    echo["domain"] = pred.domain.value
    echo["predict.k"] = args.k if args.k is not None else model.config.k_pred
    echo["predict.sigma_tilde"] = args.sigma_tilde if args.sigma_tilde is not None else model.config.sigma_tilde
    echo["predict.seed"] = args.seed if args.seed is not None else model.config.seed
    manifest.write(stem.with_suffix(".manifest.txt"), stamp(args, echo))
    print(f"wrote {stem.with_suffix('.dnf')} and {stem.with_suffix('.pgm')}")
    return 0


def _read_image(path, domain: str) -> Image:
    try:
        return read_any(path, Domain(domain))
    except (FileNotFoundError, FrameFormatError, ValueError) as e:
        raise DataError(str(e)) from e


def cmd_eval(args) -> int:
    pred = _read_image(args.pred, args.pred_domain)
    ref = _read_image(args.ref, args.ref_domain)
    if pred.domain is not ref.domain:
        pred = normalize(pred) if ref.domain is Domain.UNIT else denormalize(pred)
    data_range = args.data_range or (1.0 if ref.domain is Domain.UNIT else 255.0)
    try:
        metrics = {"psnr": psnr(ref, pred, data_range), "ssim": ssim(ref, pred, data_range)}
    except ValueError as e:
        raise DataError(str(e)) from e
    print(f"psnr={metrics['psnr']:.4f}\nssim={metrics['ssim']:.6f}")
    if args.out:
        row = {}
        side = _frame_stem(args.pred).with_suffix(".manifest.txt")
        if side.exists():
            row.update(manifest.read(side))
        row.update(metrics)
        row["data_range"] = float(data_range)
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        manifest.write(args.out, row)
    return 0


def cmd_report(args) -> int:
    from .plotting import report_figure
    from .report import collect_runs, format_table, write_tsv

    try:
        rows = collect_runs(args.runs)
    except (FileNotFoundError, ValueError) as e:
        raise DataError(str(e)) from e
    missing = [r["run"] for r in rows if "psnr" not in r or "ssim" not in r]
    if missing:
        raise DataError(f"runs without psnr/ssim: {', '.join(missing)}")
    if not rows:
        raise DataError("no metrics.txt found under the given run directories")
    table = format_table(rows)
    print(table, end="")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        write_tsv(rows, out / "report.tsv")
        (out / "report.txt").write_text(table)
        report_figure(rows, out / "report.png")
    return 0


def cmd_diagnose(args) -> int:
    threads = resolve_threads(args)
    model = _load_model(args.model)
    if model.method != "dn2n":
        raise UsageError("diagnose needs a dn2n model")
    clean_dir = args.clean or (Path(args.data) / "clean" if args.data else None)
    noisy_dir = args.noisy or (Path(args.data) / "noisy" if args.data else None)
    if noisy_dir is None:
        raise UsageError("give --noisy or --data")
    if clean_dir is None or not Path(clean_dir).is_dir():
        raise DataError(f"clean frames unavailable ({clean_dir}); diagnosis needs the synthetic ground truth")
    try:
        clean = load_frame_directory(clean_dir)
        noisy = load_frame_directory(noisy_dir)
    except (FileNotFoundError, FrameFormatError, ValueError) as e:
        raise DataError(str(e)) from e
    if len(clean) != len(noisy) or clean.shape != noisy.shape:
        raise DataError("clean and noisy sequences differ in length or shape")
    _check_shape(model.spec, noisy.shape)
    info = manifest.read(manifest_path(args.model))
    plan = _tau_plan(model, info)
    meta = {k: info[f"data.{k}"] for k in ("mode", "lambda", "sigma") if f"data.{k}" in info}
    meta["tau_max"] = max(t for t, _ in plan)
    rep = bound_report(model, clean, noisy, plan, meta, threads)
    text = manifest.dumps(rep.as_dict())
    print(text, end="")
    if args.out:
        Path(args.out).write_text(text)
    return 0


def cmd_experiment(args) -> int:
    from .experiments import ABLATION_GRID, NOISE_GRID, ablation, run_grid, table1_cells
    from .plotting import report_figure
    from .report import format_table, write_tsv

    config = _train_config(args)
    threads = resolve_threads(args)
    seeds = manifest.parse_ints(args.seeds)
    if not seeds:
        raise UsageError("--seeds is empty")
    out = Path(args.out)
    try:
        if args.grid == "ablation":
            rows = ablation(config, seeds, args.size, threads=threads, out_root=out / "runs", grid=ABLATION_GRID)
        else:
            noise = NOISE_GRID if args.grid == "table1" else ((25.0, 25.0),)
            cells = table1_cells(seeds, args.size, noise)
            methods = tuple(m for m in args.methods.split(",") if m)
            rows = run_grid(cells, config, methods, threads, out / "runs", bounds=args.bounds)
    except ValueError as e:
        raise UsageError(str(e)) from e
    table = format_table(rows)
    print(table, end="")
    write_tsv(rows, out / "report.tsv")
    (out / "report.txt").write_text(table)
    report_figure(rows, out / "report.png")
    return 0


# ---------------------------------------------------------------------------
# parser


def _add_train_options(p):
    p.add_argument("--config", help="flat key=value training config")
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--sigma-tilde", type=float, help="auxiliary noise std, Raw255 units")
    p.add_argument("--mu", type=float, help="averaging-loss weight")
    p.add_argument("--l-transforms", type=int)
    p.add_argument("--k-pred", type=int, help="prediction ensemble size")
    p.add_argument("--lr", type=float)
    p.add_argument("--batch", type=int)
    p.add_argument("--levels", type=manifest.parse_ints, help="encoder widths, e.g. 16,32,64")
    p.add_argument("--static-transforms", action="store_true",
                   help="draw the auxiliary-noise transforms once instead of every epoch")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--threads", type=int, help="worker threads (default: DN2N_THREADS or 1)")
    common.add_argument("--stamp", action="store_true", help="embed a timestamp in written manifests")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="dn2n", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="generate a toy time-lapse dataset")
    p.add_argument("--mode", choices=[m.value for m in Mode], required=True)
    p.add_argument("--lambda", dest="lam", type=float, required=True)
    p.add_argument("--sigma", type=float, required=True)
    p.add_argument("--size", type=int, default=192)
    p.add_argument("--frames", type=int, default=24, help="index of the last frame (N)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", parents=[common], help="train a denoiser on a dataset directory")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="model file to write")
    p.add_argument("--method", choices=("dn2n", "td"), default="dn2n")
    _add_train_options(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("denoise", parents=[common], help="estimate the clean frame 0")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="output stem; .dnf, .pgm and .manifest.txt are written")
    p.add_argument("--k", type=int)
    p.add_argument("--sigma-tilde", type=float)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_denoise)

    p = sub.add_parser("eval", parents=[common], help="PSNR and SSIM of a prediction")
    p.add_argument("--pred", required=True)
    p.add_argument("--ref", required=True)
    p.add_argument("--pred-domain", choices=[d.value for d in Domain], default="unit")
    p.add_argument("--ref-domain", choices=[d.value for d in Domain], default="raw255")
    p.add_argument("--data-range", type=float, help="default: 1 for unit references, 255 for raw255")
    p.add_argument("--out", help="write metrics as key=value")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", parents=[common], help="tabulate metrics.txt files")
    p.add_argument("--runs", nargs="+", required=True)
    p.add_argument("--out", help="directory for report.tsv, report.txt and report.png")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("diagnose", parents=[common], help="bound terms for a trained model")
    p.add_argument("--model", required=True)
    p.add_argument("--data", help="dataset directory holding clean/ and noisy/")
    p.add_argument("--clean")
    p.add_argument("--noisy")
    p.add_argument("--out")
    p.set_defaults(func=cmd_diagnose)

    p = sub.add_parser("experiment", parents=[common], help="run a toy grid end to end")
    p.add_argument("--grid", choices=("table1", "trend", "ablation"), required=True)
    p.add_argument("--seeds", default="1,2,3")
    p.add_argument("--size", type=int, default=96)
    p.add_argument("--methods", default="dn2n,td,average")
    p.add_argument("--bounds", action="store_true", help="add bound terms to dn2n rows")
    p.add_argument("--out", required=True)
    _add_train_options(p)
    p.set_defaults(func=cmd_experiment)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as e:
        print(f"dn2n {args.command}: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as e:
        print(f"dn2n {args.command}: data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except NumericFailure as e:
        print(f"dn2n {args.command}: numeric failure: {e}", file=sys.stderr)
        print(f"offending batch: {e.items}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
