"""Command-line entry point: ``pwshortcut <subcommand> [options]``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .. import io
from ..acoustics import RfFrame, bmode
from ..metrics import CNR_CONVENTION
from . import pipeline as pl
from .config import ConfigError, ExperimentConfig, load_config, to_ini

log = logging.getLogger("pwshortcut")


# -- output helpers -----------------------------------------------------------


def _outdir(cfg: ExperimentConfig) -> Path:
    out = Path(cfg.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise SystemExit(f"error: cannot create output directory {out}: {exc}")
    if not out.is_dir():
        raise SystemExit(f"error: output path {out} is not a directory")
    (out / "config.ini").write_text(to_ini(cfg))
    return out


def _write_rows(path: Path, fields, rows, append: bool = False):
    new = not (append and path.exists())
    with open(path, "a" if append and not new else "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(fields))
        if new:
            writer.writeheader()
        for row in rows:
            writer.writerow({k: pl.format_value(row[k]) for k in fields})


def _write_meta(out: Path, cfg: ExperimentConfig):
    meta = {
        "cnr_convention": CNR_CONVENTION,
        "gcnr_bins": cfg.metrics.gcnr_bins,
        "metric_domain": f"log-compressed envelope, {cfg.metrics.dynamic_range_db:g} dB",
        "seed": cfg.seed,
        "diffusion_normalization_percentile": cfg.sampler.percentile,
    }
    (out / "run_meta.json").write_text(json.dumps(meta, indent=2) + "\n")


def _export(out: Path, stem: str, img: np.ndarray, cfg: ExperimentConfig, png: bool):
    io.write_image(out / f"{stem}.pwimg", img)
    db = bmode(img, cfg.metrics.dynamic_range_db)
    io.write_pgm(out / f"{stem}.pgm", db, cfg.metrics.dynamic_range_db)
    if png:
        io.write_png(out / f"{stem}.png", db, cfg.metrics.dynamic_range_db)


def _read_frames(out: Path) -> list[RfFrame]:
    paths = sorted((out / "rf").glob("angle_*.pwrf"))
    if not paths:
        raise SystemExit(f"error: no RF frames in {out / 'rf'}; run 'simulate' first")
    return [io.read_rf(p) for p in paths]


def _denoiser_path(out: Path, cfg: ExperimentConfig) -> Path:
    p = Path(cfg.denoiser.path)
    return p if p.is_absolute() else out / p


def _read_denoiser(out: Path, cfg: ExperimentConfig):
    path = _denoiser_path(out, cfg)
    if not path.exists():
        raise SystemExit(f"error: denoiser file {path} not found; run 'train' first")
    return io.read_denoiser(path)


# -- subcommands --------------------------------------------------------------


def cmd_simulate(cfg: ExperimentConfig, args) -> int:
    out = _outdir(cfg)
    acq = pl.simulate(cfg, args.frame)
    rf_dir = out / "rf"
    rf_dir.mkdir(exist_ok=True)
    for old in rf_dir.glob("angle_*.pwrf"):
        old.unlink()
    for i, frame in enumerate(acq.frames):
        io.write_rf(rf_dir / f"angle_{i:03d}.pwrf", frame)
    io.write_image(out / "truth.pwimg", acq.truth)
    log.info("wrote %d RF frames and the scatterer map to %s", len(acq.frames), out)
    return 0


def cmd_beamform(cfg: ExperimentConfig, args) -> int:
    out = _outdir(cfg)
    frames = _read_frames(out)
    if args.mode == "single":
        img = pl.beamform_single(cfg, frames)
    else:
        img = pl.beamform_compound(cfg, frames)
    _export(out, f"das_{args.mode}", img, cfg, args.png)
    log.info("wrote das_%s image (%d x %d)", args.mode, *img.shape)
    return 0


def cmd_train(cfg: ExperimentConfig, args) -> int:
    out = _outdir(cfg)
    model, mse = pl.train(cfg)
    io.write_denoiser(_denoiser_path(out, cfg), model)
    rows = [{"sigma": s, "model_mse": m, "identity_mse": i} for s, (m, i) in zip(model.sigmas, mse)]
    _write_rows(out / "train_mse.csv", ("sigma", "model_mse", "identity_mse"), rows)
    print("sigma,model_mse,identity_mse")
    for r in rows:
        print(f"{r['sigma']:.6g},{r['model_mse']:.6g},{r['identity_mse']:.6g}")
    return 0


def cmd_reconstruct(cfg: ExperimentConfig, args) -> int:
    out = _outdir(cfg)
    frames = _read_frames(out)
    method = args.method
    if method == "edm-shortcut" and not any(abs(f.steering_angle) < 1e-6 for f in frames):
        log.warning("no broadside frame; using the transmit closest to 0 degrees")
    denoiser = _read_denoiser(out, cfg) if method.startswith("edm") else None
    rec = pl.reconstruct(cfg, frames, method, denoiser, frame_id=args.frame)
    stem = f"recon_{method}"
    _export(out, stem, rec.image, cfg, args.png)
    if rec.log is not None:
        rec.log.write_csv(out / f"{stem}_steps.csv")
    row = pl.metric_row(cfg, rec, args.frame)
    _write_rows(out / "metrics.csv", pl.METRIC_FIELDS, [row], append=True)
    _write_rows(out / "timings.csv", TIMING_FIELDS, [pl._timing_row(row, rec)], append=True)
    _write_meta(out, cfg)
    print(f"{method}: gcnr={row['gcnr']:.4f} cnr_db={row['cnr_db']:.3f} denoiser_calls={row['denoiser_calls']}")
    return 0


TIMING_FIELDS = ("frame_id", "method", "steps", "sigma_max", "schedule_mode", "wall_ms")


def cmd_sweep(cfg: ExperimentConfig, args) -> int:
    out = _outdir(cfg)
    denoiser = _read_denoiser(out, cfg)
    rows, timings = pl.sweep(cfg, denoiser)
    _write_rows(out / "metrics.csv", pl.METRIC_FIELDS, rows)
    _write_rows(out / "timings.csv", TIMING_FIELDS, timings)
    _write_meta(out, cfg)
    log.info("wrote %d sweep rows to %s", len(rows), out / "metrics.csv")
    return 0


def cmd_metrics(cfg: ExperimentConfig, args) -> int:
    out = _outdir(cfg)
    path = Path(args.image)
    if not path.exists():
        raise SystemExit(f"error: image {path} not found")
    img = io.read_image(path)
    if img.shape != cfg.grid.shape:
        raise SystemExit(f"error: image shape {img.shape} does not match grid {cfg.grid.shape}")
    cnr, g = pl.score(cfg, img)
    row = {k: "" for k in pl.METRIC_FIELDS}
    row.update(frame_id=args.frame, method=args.label or path.stem, seed=cfg.seed, cnr_db=cnr, gcnr=g, denoiser_calls=0)
    _write_rows(out / "metrics.csv", pl.METRIC_FIELDS, [row], append=True)
    _write_meta(out, cfg)
    print(f"{row['method']}: gcnr={g:.4f} cnr_db={cnr:.3f}")
    return 0


# -- argument parsing ---------------------------------------------------------


def _overrides(args) -> dict:
    o = {}
    for item in getattr(args, "set", None) or ():
        key, sep, value = item.partition("=")
        if not sep or "." not in key:
            raise SystemExit(f"error: --set expects section.key=value, got {item!r}")
        o[key.strip()] = value.strip()
    for flag, key in (("seed", "seed"), ("out", "out"), ("threads", "threads")):
        if getattr(args, flag, None) is not None:
            o[key] = getattr(args, flag)
    mapping = {
        "method_steps": "sampler.steps",
        "sigma_k": "sampler.sigma_k",
        "schedule_mode": "sampler.schedule_mode",
        "lam": "sampler.lam",
        "n_full": "sampler.n_full",
        "sigma_max": "sampler.sigma_max",
        "sigma_max_list": "sweep.sigma_max_list",
        "steps_list": "sweep.steps_list",
        "frames": "sweep.frames",
        "modes": "sweep.modes",
        "phantoms": "denoiser.train_phantoms",
        "angles": "acquisition.angle_count",
        "gamma": "acquisition.channel_noise",
    }
    for attr, key in mapping.items():
        value = getattr(args, attr, None)
        if value is not None:
            o[key] = value
    return o


def build_parser() -> argparse.ArgumentParser:
    # SUPPRESS keeps a subcommand from resetting flags given before it
    common = argparse.ArgumentParser(add_help=False, argument_default=argparse.SUPPRESS)
    common.add_argument("--config", metavar="PATH", help="INI config file")
    common.add_argument("--seed", type=int, help="master seed")
    common.add_argument("--out", metavar="DIR", help="output directory")
    common.add_argument("--threads", type=int, help="worker threads for sweeps")
    common.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override any config key")
    common.add_argument("--angles", type=int, help="number of steering angles")
    common.add_argument("--gamma", type=float, help="channel noise std")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="pwshortcut", description=__doc__, parents=[common])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", parents=[common], help="render a phantom and simulate RF frames")
    s.add_argument("--frame", type=int, default=0, help="phantom realization index")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("beamform", parents=[common], help="DAS image from simulated frames")
    s.add_argument("--mode", choices=("single", "compound"), default="single")
    s.add_argument("--png", action="store_true", help="also write a PNG export")
    s.set_defaults(func=cmd_beamform)

    s = sub.add_parser("train", parents=[common], help="fit the patch denoiser")
    s.add_argument("--phantoms", type=int, help="number of training phantom realizations")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("reconstruct", parents=[common], help="reconstruct one frame")
    s.add_argument("--method", choices=("das", "edm-full", "edm-shortcut"), default="edm-shortcut")
    s.add_argument("--steps", dest="method_steps", type=int, help="shortcut reverse steps")
    s.add_argument("--sigma-k", type=float)
    s.add_argument("--schedule-mode", choices=("rebuild", "truncate"))
    s.add_argument("--lam", type=float, help="data-consistency step size")
    s.add_argument("--n-full", type=int)
    s.add_argument("--sigma-max", type=float)
    s.add_argument("--frame", type=int, default=0)
    s.add_argument("--png", action="store_true")
    s.set_defaults(func=cmd_reconstruct)

    s = sub.add_parser("sweep", parents=[common], help="shortcut grid over sigma_max and steps")
    s.add_argument("--sigma-max-list", help="comma-separated sigma_max values")
    s.add_argument("--steps-list", help="comma-separated step counts")
    s.add_argument("--modes", help="comma-separated schedule modes")
    s.add_argument("--frames", type=int, help="phantom realizations per cell")
    s.add_argument("--sigma-k", type=float)
    s.add_argument("--lam", type=float)
    s.set_defaults(func=cmd_sweep)

    s = sub.add_parser("metrics", parents=[common], help="CNR and gCNR of an image file")
    s.add_argument("image", help="PWIMG file")
    s.add_argument("--label", help="method label for the CSV row")
    s.add_argument("--frame", type=int, default=0)
    s.set_defaults(func=cmd_metrics)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = load_config(getattr(args, "config", None), _overrides(args))
    except (ConfigError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    try:
        return args.func(cfg, args)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
