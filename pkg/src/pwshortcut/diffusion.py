"""EDM-style noise schedule, Heun reverse sampler and data-consistency steps.

The denoiser contract is a callable ``D(x, sigma)`` returning the posterior
mean of the clean image. Samplers integrate the probability-flow ODE
``dx/dsigma = (x - D(x; sigma)) / sigma`` from a starting noise level down to
zero, interleaving a gradient step on ``||H x - y||_2`` after every step.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .acoustics import MeasurementOperator, RfFrame

Denoiser = Callable[[np.ndarray, float], np.ndarray]

SCHEDULE_MODES = ("rebuild", "truncate")


@dataclass(frozen=True)
class NoiseSchedule:
    """Decreasing noise levels ``sigma_0..sigma_{N-1}`` followed by a terminal 0."""

    sigmas: np.ndarray
    sigma_min: float
    sigma_max: float
    rho: float

    @property
    def n(self) -> int:
        return len(self.sigmas) - 1

    @property
    def steps(self) -> int:
        return len(self.sigmas) - 1

    def pairs(self):
        return list(zip(self.sigmas[:-1], self.sigmas[1:]))


def karras_schedule(n: int, sigma_min: float, sigma_max: float, rho: float = 7.0) -> NoiseSchedule:
    """Karras et al. schedule: uniform spacing in ``sigma**(1/rho)``."""
    if int(n) != n or n < 1:
        raise ValueError(f"schedule length must be an integer >= 1, got {n}")
    if not (sigma_max > sigma_min > 0):
        raise ValueError(f"need sigma_max > sigma_min > 0, got {sigma_max}, {sigma_min}")
    if not rho > 0:
        raise ValueError(f"rho must be > 0, got {rho}")
    if n == 1:
        sigmas = np.array([sigma_max, 0.0])
    else:
        ramp = np.arange(n) / (n - 1)
        hi, lo = sigma_max ** (1.0 / rho), sigma_min ** (1.0 / rho)
        sigmas = (hi + ramp * (lo - hi)) ** rho
        # pin the endpoints against round-off in the power
        sigmas[0], sigmas[-1] = sigma_max, sigma_min
        sigmas = np.append(sigmas, 0.0)
    return NoiseSchedule(sigmas, float(sigma_min), float(sigma_max), float(rho))


def forward_diffuse(x: np.ndarray, sigma: float, rng) -> np.ndarray:
    """Return ``x + sigma * z`` with ``z`` standard Gaussian."""
    if sigma < 0:
        raise ValueError(f"noise level must be >= 0, got {sigma}")
    x = np.asarray(x, dtype=np.float64)
    if sigma == 0:
        return x.copy()
    rng = np.random.default_rng(rng)
    return x + sigma * rng.standard_normal(x.shape)


def heun_step(denoiser: Denoiser, x: np.ndarray, sigma_cur: float, sigma_next: float) -> np.ndarray:
    """One deterministic Heun step from ``sigma_cur`` to ``sigma_next``.

    Falls back to a plain Euler step when ``sigma_next == 0``.
    """
    if not sigma_cur > sigma_next >= 0:
        raise ValueError(f"Heun step needs sigma_cur > sigma_next >= 0, got {sigma_cur}, {sigma_next}")
    denoised = denoiser(x, sigma_cur)
    if sigma_next == 0:
        # Euler to zero: x - sigma * (x - D) / sigma is exactly D
        return np.asarray(denoised, dtype=np.float64).copy()
    h = sigma_next - sigma_cur
    d = (x - denoised) / sigma_cur
    x_euler = x + h * d
    d_next = (x_euler - denoiser(x_euler, sigma_next)) / sigma_next
    return x + h * 0.5 * (d + d_next)


@dataclass
class DataConsistencyConfig:
    """Measurements and step size for the ``||H x - y||_2`` gradient step.

    ``scale`` converts the sampler's normalized image into scatterer amplitude
    before ``H`` is applied; ``eps`` floors the residual norm.
    """

    lam: float = 0.1
    operators: Sequence[MeasurementOperator] = ()
    measurements: Sequence[RfFrame] = ()
    scale: float = 1.0
    eps: float = 1e-12

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError(f"lambda must be >= 0, got {self.lam}")
        if not self.eps > 0:
            raise ValueError(f"eps must be > 0, got {self.eps}")
        if len(self.operators) != len(self.measurements):
            raise ValueError("need exactly one measurement per operator")
        for op, y in zip(self.operators, self.measurements):
            samples = y.samples if isinstance(y, RfFrame) else np.asarray(y)
            if samples.shape != op.rf_shape:
                raise ValueError(f"measurement shape {samples.shape} does not match operator {op.rf_shape}")

    @property
    def active(self) -> bool:
        return self.lam > 0 and len(self.operators) > 0


def _samples(y) -> np.ndarray:
    return y.samples if isinstance(y, RfFrame) else np.asarray(y)


def residuals(x: np.ndarray, dc: DataConsistencyConfig) -> list[np.ndarray]:
    """Per-angle ``H_a (scale * x) - y_a``, flattened."""
    flat = dc.scale * np.asarray(x, dtype=np.float64).reshape(-1)
    return [op.matrix.T @ flat - _samples(y).reshape(-1) for op, y in zip(dc.operators, dc.measurements)]


def residual_norm(x: np.ndarray, dc: DataConsistencyConfig) -> float:
    if not dc.operators:
        return 0.0
    return float(np.sqrt(sum(np.dot(r, r) for r in residuals(x, dc))))


def _gradient_and_norm(x, dc):
    res = residuals(x, dc)
    norm = float(np.sqrt(sum(np.dot(r, r) for r in res)))
    grad = np.zeros(x.size)
    for op, r in zip(dc.operators, res):
        grad += op.matrix @ r
    return grad.reshape(x.shape) / max(norm, dc.eps), norm


def consistency_gradient(x: np.ndarray, dc: DataConsistencyConfig) -> np.ndarray:
    """``sum_a H_a^T r_a / max(||r||_2, eps)`` with the residuals stacked over angles."""
    return _gradient_and_norm(np.asarray(x, dtype=np.float64), dc)[0]


def _check_shape(x, dc):
    for op in dc.operators:
        if x.shape != op.grid.shape:
            raise ValueError(f"image shape {x.shape} does not match operator grid {op.grid.shape}")


def data_consistency(x: np.ndarray, dc: DataConsistencyConfig) -> np.ndarray:
    """One gradient-descent step on ``||H (scale*x) - y||_2``."""
    x = np.asarray(x, dtype=np.float64)
    if not dc.active:
        return x
    _check_shape(x, dc)
    return x - dc.lam * consistency_gradient(x, dc)


def _consistency_step(x, dc):
    """Like :func:`data_consistency` but also returns the pre-step residual norm."""
    if not dc.operators:
        return x, 0.0
    _check_shape(x, dc)
    grad, norm = _gradient_and_norm(x, dc)
    if dc.lam == 0:
        return x, norm
    return x - dc.lam * grad, norm


@dataclass
class RunLog:
    """Per-step record of a sampler run."""

    rows: list = field(default_factory=list)
    injected_sigma: float | None = None
    requested_sigma: float | None = None
    schedule_length: int | None = None

    FIELDS = ("step", "sigma_cur", "sigma_next", "residual_pre", "residual_post", "denoiser_calls")

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(self.FIELDS)
            for row in self.rows:
                writer.writerow([row[k] for k in self.FIELDS])


class _CountingDenoiser:
    def __init__(self, denoiser: Denoiser):
        self.denoiser = denoiser
        self.calls = 0

    def __call__(self, x, sigma):
        self.calls += 1
        return self.denoiser(x, sigma)


def count_denoiser_calls(log: RunLog) -> int:
    return int(sum(row["denoiser_calls"] for row in log.rows))


def _reverse(denoiser, x, sigmas, dc, log):
    counter = _CountingDenoiser(denoiser)
    dc = dc if dc is not None else DataConsistencyConfig(lam=0.0)
    for step, (s_cur, s_next) in enumerate(zip(sigmas[:-1], sigmas[1:])):
        before = counter.calls
        x = heun_step(counter, x, float(s_cur), float(s_next))
        if log is None:
            if dc.active:
                x = _consistency_step(x, dc)[0]
            continue
        x_new, pre = _consistency_step(x, dc)
        post = residual_norm(x_new, dc) if dc.active else pre
        x = x_new
        log.rows.append(
            {
                "step": step,
                "sigma_cur": float(s_cur),
                "sigma_next": float(s_next),
                "residual_pre": pre,
                "residual_post": post,
                "denoiser_calls": counter.calls - before,
            }
        )
    return x


def sample_full(
    denoiser: Denoiser,
    schedule: NoiseSchedule,
    shape,
    dc: DataConsistencyConfig | None = None,
    rng=None,
    log: RunLog | None = None,
) -> np.ndarray:
    """Reverse diffusion from pure Gaussian noise at ``schedule.sigmas[0]``."""
    rng = np.random.default_rng(rng)
    x = schedule.sigmas[0] * rng.standard_normal(shape)
    if log is not None:
        log.injected_sigma = float(schedule.sigmas[0])
        log.schedule_length = schedule.n
    return _reverse(denoiser, x, schedule.sigmas, dc, log)


@dataclass(frozen=True)
class ShortcutConfig:
    """Warm-start settings.

    ``rebuild`` builds a fresh Karras schedule of ``steps`` steps from
    ``sigma_k``; ``truncate`` walks the tail of a ``sigma_max`` schedule from
    its first level at or below ``sigma_k``, with the full length chosen so
    that exactly ``steps`` steps remain.
    """

    sigma_k: float = 5.0
    steps: int = 20
    schedule_mode: str = "rebuild"
    sigma_max: float = 80.0
    sigma_min: float = 0.002
    rho: float = 7.0
    n_full: int = 50

    def __post_init__(self):
        if self.schedule_mode not in SCHEDULE_MODES:
            raise ValueError(f"schedule_mode must be one of {SCHEDULE_MODES}, got {self.schedule_mode!r}")
        if not self.sigma_k > self.sigma_min:
            raise ValueError(f"sigma_k must exceed sigma_min, got {self.sigma_k} <= {self.sigma_min}")
        if int(self.steps) != self.steps or self.steps < 1:
            raise ValueError(f"steps must be an integer >= 1, got {self.steps}")
        if self.schedule_mode == "truncate":
            if self.sigma_k > self.sigma_max:
                raise ValueError(f"truncate mode needs sigma_k <= sigma_max, got {self.sigma_k} > {self.sigma_max}")


def truncated_schedule(sigma_k, steps, sigma_max, sigma_min, rho, max_length=100_000):
    """Tail of a ``sigma_max`` Karras schedule starting at its first level <= ``sigma_k``.

    The full schedule length is the smallest one leaving exactly ``steps``
    steps in the tail. Returns ``(tail_sigmas, full_length)``.
    """
    if sigma_k > sigma_max:
        raise ValueError(f"truncate mode needs sigma_k <= sigma_max, got {sigma_k} > {sigma_max}")
    for n in range(steps, max_length):
        sigmas = karras_schedule(n, sigma_min, sigma_max, rho).sigmas
        start = int(np.argmax(sigmas <= sigma_k))
        remaining = len(sigmas) - 1 - start
        if remaining == steps:
            return sigmas[start:], n
        if remaining > steps:
            break
    raise ValueError(f"no schedule from sigma_max={sigma_max} leaves exactly {steps} steps below sigma_k={sigma_k}")


def shortcut_sigmas(cfg: ShortcutConfig) -> tuple[np.ndarray, int]:
    """Reverse sub-schedule (terminal 0 included) and the full schedule length it came from."""
    if cfg.schedule_mode == "rebuild":
        # `steps` levels from sigma_k down to sigma_min, then the terminal 0
        sched = karras_schedule(cfg.steps, cfg.sigma_min, cfg.sigma_k, cfg.rho)
        return sched.sigmas, cfg.steps
    return truncated_schedule(cfg.sigma_k, cfg.steps, cfg.sigma_max, cfg.sigma_min, cfg.rho)


def sample_shortcut(
    denoiser: Denoiser,
    x_s: np.ndarray,
    cfg: ShortcutConfig,
    dc: DataConsistencyConfig | None = None,
    rng=None,
    log: RunLog | None = None,
) -> np.ndarray:
    """Warm-started reverse diffusion from a noise-injected single-PW image."""
    sigmas, full_length = shortcut_sigmas(cfg)
    if len(sigmas) < 2:
        raise ValueError("empty reverse sub-schedule")
    x = forward_diffuse(x_s, float(sigmas[0]), rng)
    if log is not None:
        log.injected_sigma = float(sigmas[0])
        log.requested_sigma = float(cfg.sigma_k)
        log.schedule_length = full_length
    return _reverse(denoiser, x, sigmas, dc, log)
