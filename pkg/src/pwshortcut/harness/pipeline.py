"""End-to-end stages: simulate, beamform, train, reconstruct, score and sweep.

Operators for all steering angles do not fit in memory at once, so every
multi-angle stage builds them one at a time and streams over the angle set.
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from ..acoustics import (
    MeasurementOperator,
    RfFrame,
    add_channel_noise,
    adjoint,
    adjoint_batch,
    bmode,
    build_operator,
    forward,
    forward_batch,
)
from ..denoiser import LinearPatchDenoiser, default_sigma_grid, train_linear_denoiser, training_mse
from ..diffusion import (
    DataConsistencyConfig,
    RunLog,
    ShortcutConfig,
    count_denoiser_calls,
    karras_schedule,
    sample_full,
    sample_shortcut,
)
from ..metrics import RoiSamples, cnr_db, gcnr
from ..phantom import render, roi_masks
from .config import (
    STREAM_CHANNEL_NOISE,
    STREAM_DIFFUSION,
    STREAM_PHANTOM,
    STREAM_TRAINING,
    STREAM_TRAINING_PHANTOM,
    ExperimentConfig,
    stream,
    stream_seed,
)

METHODS = ("das", "das-compound", "edm-full", "edm-shortcut")

METRIC_FIELDS = (
    "frame_id",
    "method",
    "steps",
    "sigma_k",
    "sigma_max",
    "schedule_mode",
    "seed",
    "lam",
    "cnr_db",
    "gcnr",
    "denoiser_calls",
    "injected_sigma",
)


@dataclass
class Acquisition:
    """One simulated frame: ground truth plus channel data for every angle."""

    frame_id: int
    truth: np.ndarray
    frames: list[RfFrame]
    compound: np.ndarray | None = None

    @property
    def single_index(self) -> int:
        return single_angle_index([f.steering_angle for f in self.frames])

    @property
    def single(self) -> RfFrame:
        return self.frames[self.single_index]


@dataclass
class Reconstruction:
    image: np.ndarray
    method: str
    log: RunLog | None = None
    wall_ms: float = 0.0
    steps: int = 0
    sigma_k: float = float("nan")
    sigma_max: float = float("nan")
    schedule_mode: str = ""
    lam: float = float("nan")

    @property
    def denoiser_calls(self) -> int:
        return count_denoiser_calls(self.log) if self.log is not None else 0

    @property
    def injected_sigma(self) -> float:
        if self.log is None or self.log.injected_sigma is None:
            return float("nan")
        return self.log.injected_sigma


@dataclass
class SingleAngleContext:
    """Operator for the unsteered transmit, shared read-only across samplers."""

    operator: MeasurementOperator
    gain: float = field(init=False)

    def __post_init__(self):
        self.gain = operator_gain(self.operator)


def single_angle_index(angles) -> int:
    """Index of the transmit closest to broadside (ties go to the lower index)."""
    angles = np.asarray(angles, dtype=np.float64)
    if angles.size == 0:
        raise ValueError("no steering angles")
    return int(np.argmin(np.abs(angles)))


def operator_gain(op: MeasurementOperator) -> float:
    """Mean diagonal of ``H^T H``: the point-target amplitude of ``H^T H x``."""
    sq = op.matrix.multiply(op.matrix)
    return float(np.asarray(sq.sum(axis=1)).mean())


def build_single_context(cfg: ExperimentConfig) -> SingleAngleContext:
    theta = cfg.angles[single_angle_index(cfg.angles)]
    return SingleAngleContext(build_operator(cfg.geometry, cfg.grid, theta, cfg.apodization))


def frame_phantom(cfg: ExperimentConfig, frame_id: int):
    return cfg.phantom.with_seed(stream_seed(cfg.seed, STREAM_PHANTOM, frame_id))


def _each_operator(cfg: ExperimentConfig, angles=None):
    for i, theta in enumerate(cfg.angles if angles is None else angles):
        yield i, build_operator(cfg.geometry, cfg.grid, float(theta), cfg.apodization)


def simulate(cfg: ExperimentConfig, frame_id: int = 0) -> Acquisition:
    """Render a phantom realization and simulate channel data for every angle."""
    return simulate_many(cfg, [frame_id])[0]


def simulate_many(cfg: ExperimentConfig, frame_ids, with_compound: bool = False) -> list[Acquisition]:
    """Simulate several frames while building each angle's operator once.

    With ``with_compound`` the compounded DAS image is accumulated on the way.
    """
    frame_ids = list(frame_ids)
    truths = [render(frame_phantom(cfg, f), cfg.grid) for f in frame_ids]
    gamma = cfg.acquisition.channel_noise
    frames = [[] for _ in frame_ids]
    acc = [np.zeros(cfg.grid.shape) for _ in frame_ids] if with_compound else None
    for i, op in _each_operator(cfg):
        for j, f in enumerate(frame_ids):
            y = add_channel_noise(forward(op, truths[j]), gamma, stream(cfg.seed, STREAM_CHANNEL_NOISE, f, i))
            frames[j].append(y)
            if with_compound:
                acc[j] += adjoint(op, y)
    n = len(cfg.angles)
    return [
        Acquisition(f, truths[j], frames[j], acc[j] / n if with_compound else None)
        for j, f in enumerate(frame_ids)
    ]


def beamform_single(cfg: ExperimentConfig, frames, ctx: SingleAngleContext | None = None) -> np.ndarray:
    frame = frames[single_angle_index([f.steering_angle for f in frames])]
    if ctx is not None and np.isclose(ctx.operator.steering_angle, frame.steering_angle, atol=1e-6):
        op = ctx.operator
    else:
        op = build_operator(cfg.geometry, cfg.grid, frame.steering_angle, cfg.apodization)
    return adjoint(op, frame)


def beamform_compound(cfg: ExperimentConfig, frames) -> np.ndarray:
    """Mean of the per-angle adjoint images, accumulated one operator at a time."""
    if not frames:
        raise ValueError("no RF frames to beamform")
    acc = np.zeros(cfg.grid.shape)
    for f in frames:
        op = build_operator(cfg.geometry, cfg.grid, f.steering_angle, cfg.apodization)
        acc += adjoint(op, f)
    return acc / len(frames)


def compound_batch(cfg: ExperimentConfig, maps: np.ndarray, label: int, frame_ids) -> tuple[np.ndarray, np.ndarray]:
    """Simulate and beamform a stack of scatterer maps.

    Returns ``(single, compound)`` image stacks. Channel noise for map ``j`` on
    angle ``i`` is drawn from stream ``(seed, label, frame_ids[j], i)``.
    """
    gamma = cfg.acquisition.channel_noise
    single_idx = single_angle_index(cfg.angles)
    acc = np.zeros_like(maps, dtype=np.float64)
    single = None
    for i, op in _each_operator(cfg):
        y = forward_batch(op, maps)
        if gamma > 0:
            for j, fid in enumerate(frame_ids):
                y[j] += gamma * stream(cfg.seed, label, fid, i).standard_normal(y.shape[1:])
        img = adjoint_batch(op, y)
        acc += img
        if i == single_idx:
            single = img
    return single, acc / len(cfg.angles)


def normalize(img: np.ndarray, percentile: float = 99.9) -> tuple[np.ndarray, float]:
    """Scale so the given percentile of ``|img|`` maps to 1."""
    c = float(np.percentile(np.abs(img), percentile))
    if not c > 0:
        raise ValueError("cannot normalize an all-zero image")
    return img / c, c


def training_images(cfg: ExperimentConfig) -> list[np.ndarray]:
    """Normalized compounded images of independent phantom realizations."""
    n = cfg.denoiser.train_phantoms
    ids = list(range(n))
    maps = np.stack(
        [render(cfg.phantom.with_seed(stream_seed(cfg.seed, STREAM_TRAINING_PHANTOM, k)), cfg.grid) for k in ids]
    )
    _, comp = compound_batch(cfg, maps, STREAM_TRAINING_PHANTOM, ids)
    return [normalize(im, cfg.sampler.percentile)[0] for im in comp]


def train(cfg: ExperimentConfig, images=None) -> tuple[LinearPatchDenoiser, list]:
    """Fit the patch denoiser; returns it with per-sigma (model MSE, no-op MSE)."""
    d = cfg.denoiser
    images = training_images(cfg) if images is None else images
    grid = default_sigma_grid(d.sigma_count, d.sigma_lo, d.sigma_hi)
    train_seed = stream_seed(cfg.seed, STREAM_TRAINING)
    model = train_linear_denoiser(images, grid, d.patch_size, d.alpha, train_seed, d.patches_per_sigma)
    mse = training_mse(model, images, seed=train_seed, patches=min(d.patches_per_sigma, 50_000))
    return model, mse


def _dc_config(cfg, ctx: SingleAngleContext, acq_frames, c: float, operators=None) -> DataConsistencyConfig:
    scale = c / ctx.gain
    if cfg.sampler.dc_angles == "single":
        frame = acq_frames[single_angle_index([f.steering_angle for f in acq_frames])]
        return DataConsistencyConfig(cfg.sampler.lam, [ctx.operator], [frame], scale)
    ops = operators if operators is not None else [op for _, op in _each_operator(cfg)]
    return DataConsistencyConfig(cfg.sampler.lam, ops, list(acq_frames), scale)


def reconstruct(
    cfg: ExperimentConfig,
    data,
    method: str,
    denoiser=None,
    ctx: SingleAngleContext | None = None,
    frame_id: int = 0,
    shortcut: ShortcutConfig | None = None,
    with_log: bool = True,
) -> Reconstruction:
    """Run one reconstruction method on a frame's channel data.

    ``data`` is an :class:`Acquisition` or a list of RF frames. Diffusion
    methods work on the single-transmit DAS image normalized by its
    99.9th percentile magnitude and return an image in that normalized domain.
    """
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")
    frames = data.frames if isinstance(data, Acquisition) else list(data)
    if not frames:
        raise ValueError("no RF frames to reconstruct from")
    ctx = ctx or build_single_context(cfg)
    s = cfg.sampler
    start = time.perf_counter()
    if method == "das":
        return Reconstruction(beamform_single(cfg, frames, ctx), method, wall_ms=_ms(start))
    if method == "das-compound":
        if isinstance(data, Acquisition) and data.compound is not None:
            return Reconstruction(data.compound, method, wall_ms=_ms(start))
        return Reconstruction(beamform_compound(cfg, frames), method, wall_ms=_ms(start))
    if denoiser is None:
        raise ValueError(f"method {method!r} needs a trained denoiser")
    if not any(np.isclose(f.steering_angle, ctx.operator.steering_angle, atol=1e-6) for f in frames):
        raise ValueError(f"method {method!r} needs the single-transmit frame")

    x_s, c = normalize(beamform_single(cfg, frames, ctx), s.percentile)
    dc = _dc_config(cfg, ctx, frames, c)
    log = RunLog() if with_log else None
    rng = stream(cfg.seed, STREAM_DIFFUSION, frame_id)
    if method == "edm-full":
        sched = karras_schedule(s.n_full, s.sigma_min, s.sigma_max, s.rho)
        out = sample_full(denoiser, sched, cfg.grid.shape, dc, rng, log)
        return Reconstruction(out, method, log, _ms(start), s.n_full, float("nan"), s.sigma_max, "", s.lam)
    sc = shortcut or ShortcutConfig(s.sigma_k, s.steps, s.schedule_mode, s.sigma_max, s.sigma_min, s.rho, s.n_full)
    out = sample_shortcut(denoiser, x_s, sc, dc, rng, log)
    return Reconstruction(out, method, log, _ms(start), sc.steps, sc.sigma_k, sc.sigma_max, sc.schedule_mode, s.lam)


def _ms(start: float) -> float:
    return 1e3 * (time.perf_counter() - start)


def score(cfg: ExperimentConfig, image: np.ndarray, frame_id: int = 0) -> tuple[float, float]:
    """(CNR dB, gCNR) on the B-mode image over the phantom's cyst ROIs."""
    inside, outside = roi_masks(cfg.phantom, cfg.grid, cfg.metrics.roi_margin)
    r = RoiSamples.from_masks(bmode(image, cfg.metrics.dynamic_range_db), inside, outside)
    return cnr_db(r), gcnr(r, cfg.metrics.gcnr_bins)


def metric_row(cfg: ExperimentConfig, rec: Reconstruction, frame_id: int) -> dict:
    cnr, g = score(cfg, rec.image, frame_id)
    return {
        "frame_id": frame_id,
        "method": rec.method,
        "steps": rec.steps,
        "sigma_k": rec.sigma_k,
        "sigma_max": rec.sigma_max,
        "schedule_mode": rec.schedule_mode,
        "seed": cfg.seed,
        "lam": rec.lam,
        "cnr_db": cnr,
        "gcnr": g,
        "denoiser_calls": rec.denoiser_calls,
        "injected_sigma": rec.injected_sigma,
    }


def format_value(v) -> str:
    if isinstance(v, float):
        if np.isnan(v):
            return ""
        return repr(v)
    return str(v)


@dataclass(frozen=True)
class SweepCell:
    frame_id: int
    schedule_mode: str
    sigma_max: float
    steps: int


def sweep_cells(cfg: ExperimentConfig) -> list[SweepCell]:
    sw = cfg.sweep
    if not sw.sigma_max_list or not sw.steps_list:
        raise ValueError("sweep needs non-empty sigma_max and steps lists")
    if not sw.modes:
        raise ValueError("sweep needs at least one schedule mode")
    return [
        SweepCell(f, mode, float(sm), int(st))
        for f in range(sw.frames)
        for mode in sw.modes
        for sm in sw.sigma_max_list
        for st in sw.steps_list
    ]


def sweep(cfg: ExperimentConfig, denoiser, threads: int | None = None, acquisitions=None) -> tuple[list, list]:
    """Shortcut reconstructions over (mode, sigma_max, steps) plus DAS baselines.

    Returns ``(metric_rows, timing_rows)`` in a fixed order independent of the
    thread count.
    """
    threads = threads or cfg.threads
    ctx = build_single_context(cfg)
    cells = sweep_cells(cfg)
    if acquisitions is None:
        acqs = simulate_many(cfg, range(cfg.sweep.frames), with_compound=True)
        acquisitions = {a.frame_id: a for a in acqs}

    rows, timings = [], []
    for f in range(cfg.sweep.frames):
        for method in ("das", "das-compound"):
            rec = reconstruct(cfg, acquisitions[f], method, ctx=ctx, frame_id=f)
            rows.append(metric_row(cfg, rec, f))
            timings.append(_timing_row(rows[-1], rec))

    s = cfg.sampler

    def run(cell: SweepCell):
        sc = ShortcutConfig(s.sigma_k, cell.steps, cell.schedule_mode, cell.sigma_max, s.sigma_min, s.rho, s.n_full)
        rec = reconstruct(cfg, acquisitions[cell.frame_id], "edm-shortcut", denoiser, ctx, cell.frame_id, sc)
        return metric_row(cfg, rec, cell.frame_id), rec

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run, cells))
    else:
        results = [run(cell) for cell in cells]
    for row, rec in results:
        rows.append(row)
        timings.append(_timing_row(row, rec))
    return rows, timings


def _timing_row(row: dict, rec: Reconstruction) -> dict:
    keys = ("frame_id", "method", "steps", "sigma_max", "schedule_mode")
    return {**{k: row[k] for k in keys}, "wall_ms": rec.wall_ms}
