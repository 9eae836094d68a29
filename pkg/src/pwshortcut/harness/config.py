"""Experiment configuration: INI-style file with one section per stage."""

from __future__ import annotations

import configparser
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from ..acoustics import ImagingGrid, TransducerGeometry
from ..diffusion import SCHEDULE_MODES
from ..phantom import Cyst, PhantomSpec, PointTarget, default_cyst_phantom

# labeled offsets for per-stage random streams
STREAM_PHANTOM = 1
STREAM_CHANNEL_NOISE = 2
STREAM_DIFFUSION = 3
STREAM_TRAINING = 4
STREAM_TRAINING_PHANTOM = 5


def stream(seed: int, label: int, *extra: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), label, *map(int, extra)])


def stream_seed(seed: int, label: int, *extra: int) -> int:
    """A derived 63-bit integer seed, for APIs that take an int."""
    return int(stream(seed, label, *extra).integers(0, 2**63 - 1))


class ConfigError(ValueError):
    pass


@dataclass
class AcquisitionConfig:
    angle_count: int = 75
    angle_span_deg: float = 16.0
    channel_noise: float = 0.0
    apodization: str = "none"


@dataclass
class DenoiserConfig:
    kind: str = "linear"
    patch_size: int = 9
    sigma_count: int = 12
    sigma_lo: float = 0.01
    sigma_hi: float = 80.0
    alpha: float = 1e-3
    patches_per_sigma: int = 200_000
    train_phantoms: int = 20
    path: str = "denoiser.pwdn"


@dataclass
class SamplerConfig:
    n_full: int = 50
    sigma_max: float = 80.0
    sigma_min: float = 0.002
    rho: float = 7.0
    sigma_k: float = 5.0
    steps: int = 20
    schedule_mode: str = "rebuild"
    lam: float = 0.1
    percentile: float = 99.9
    dc_angles: str = "single"


@dataclass
class MetricConfig:
    dynamic_range_db: float = 60.0
    gcnr_bins: int = 256
    roi_margin: float = 0.0


@dataclass
class SweepConfig:
    sigma_max_list: tuple[float, ...] = (40.0, 60.0, 80.0)
    steps_list: tuple[int, ...] = (5, 10, 15, 20, 30, 40, 50)
    modes: tuple[str, ...] = ("rebuild", "truncate")
    frames: int = 1


@dataclass
class ExperimentConfig:
    seed: int = 0
    out: str = "run"
    threads: int = 1
    geometry: TransducerGeometry = field(default_factory=TransducerGeometry)
    grid: ImagingGrid = field(default_factory=ImagingGrid)
    phantom: PhantomSpec | None = None
    acquisition: AcquisitionConfig = field(default_factory=AcquisitionConfig)
    denoiser: DenoiserConfig = field(default_factory=DenoiserConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    metrics: MetricConfig = field(default_factory=MetricConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)

    def __post_init__(self):
        if self.phantom is None:
            self.phantom = default_cyst_phantom(self.grid)
        self.validate()

    def validate(self):
        s = self.sampler
        if s.schedule_mode not in SCHEDULE_MODES:
            raise ConfigError(f"sampler.schedule_mode: expected one of {SCHEDULE_MODES}, got {s.schedule_mode!r}")
        if s.dc_angles not in ("single", "all"):
            raise ConfigError(f"sampler.dc_angles: expected 'single' or 'all', got {s.dc_angles!r}")
        if not s.sigma_max > s.sigma_min > 0:
            raise ConfigError("sampler: need sigma_max > sigma_min > 0")
        if s.lam < 0:
            raise ConfigError("sampler.lam: must be >= 0")
        if s.steps < 1 or s.n_full < 1:
            raise ConfigError("sampler.steps and sampler.n_full must be >= 1")
        if not 0 < s.percentile <= 100:
            raise ConfigError("sampler.percentile: must be in (0, 100]")
        if self.acquisition.angle_count < 1:
            raise ConfigError("acquisition.angle_count: must be >= 1")
        if self.acquisition.channel_noise < 0:
            raise ConfigError("acquisition.channel_noise: must be >= 0")
        if self.acquisition.apodization not in ("none", "hann"):
            raise ConfigError("acquisition.apodization: expected 'none' or 'hann'")
        if self.denoiser.kind != "linear":
            raise ConfigError(f"denoiser.kind: only 'linear' can be trained, got {self.denoiser.kind!r}")
        if self.denoiser.train_phantoms < 1:
            raise ConfigError("denoiser.train_phantoms: must be >= 1")
        if self.metrics.gcnr_bins < 2:
            raise ConfigError("metrics.gcnr_bins: must be >= 2")
        for mode in self.sweep.modes:
            if mode not in SCHEDULE_MODES:
                raise ConfigError(f"sweep.modes: unknown mode {mode!r}")
        if self.threads < 1:
            raise ConfigError("threads: must be >= 1")

    @property
    def angles(self) -> np.ndarray:
        from ..acoustics import steering_angles

        return steering_angles(self.acquisition.angle_count, self.acquisition.angle_span_deg)

    @property
    def apodization(self):
        return None if self.acquisition.apodization == "none" else self.acquisition.apodization

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return replace(self, seed=int(seed))


_SECTIONS = {
    "geometry": TransducerGeometry,
    "grid": ImagingGrid,
    "acquisition": AcquisitionConfig,
    "denoiser": DenoiserConfig,
    "sampler": SamplerConfig,
    "metrics": MetricConfig,
    "sweep": SweepConfig,
}


def _format(value) -> str:
    if isinstance(value, tuple):
        return ", ".join(_format(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse(raw: str, current, where: str):
    try:
        if isinstance(current, tuple):
            kind = type(current[0]) if current else str
            return tuple(kind(v.strip()) for v in raw.split(",") if v.strip())
        if isinstance(current, bool):
            return raw.strip().lower() in ("1", "true", "yes", "on")
        if isinstance(current, int):
            return int(float(raw)) if float(raw).is_integer() else int(raw)
        if isinstance(current, float):
            return float(raw)
        return raw.strip()
    except ValueError as exc:
        raise ConfigError(f"{where}: cannot parse {raw!r} ({exc})") from None


def _phantom_to_dict(p: PhantomSpec) -> dict:
    cysts = "; ".join(f"{c.center[0]!r} {c.center[1]!r} {c.radius!r} {c.amplitude_scale!r}" for c in p.cysts)
    points = "; ".join(f"{q.position[0]!r} {q.position[1]!r} {q.amplitude!r}" for q in p.points)
    return {"background_std": repr(p.background_std), "cysts": cysts, "points": points}


def _phantom_from_section(section, grid) -> PhantomSpec:
    try:
        std = float(section.get("background_std", "1.0"))
        cysts = []
        for item in filter(None, (s.strip() for s in section.get("cysts", "").split(";"))):
            z, x, r, a = (float(v) for v in item.split())
            cysts.append(Cyst((z, x), r, a))
        points = []
        for item in filter(None, (s.strip() for s in section.get("points", "").split(";"))):
            z, x, a = (float(v) for v in item.split())
            points.append(PointTarget((z, x), a))
    except ValueError as exc:
        raise ConfigError(f"phantom: {exc}") from None
    if "cysts" not in section and "points" not in section:
        return replace(default_cyst_phantom(grid), background_std=std)
    return PhantomSpec(std, tuple(cysts), tuple(points))


def to_ini(cfg: ExperimentConfig) -> str:
    parser = configparser.ConfigParser()
    parser["run"] = {"seed": str(cfg.seed), "out": cfg.out, "threads": str(cfg.threads)}
    for name in _SECTIONS:
        obj = getattr(cfg, name)
        parser[name] = {f.name: _format(getattr(obj, f.name)) for f in fields(obj)}
    parser["phantom"] = _phantom_to_dict(cfg.phantom)
    lines = []
    for section in parser.sections():
        lines.append(f"[{section}]")
        lines.extend(f"{k} = {v}" for k, v in parser[section].items())
        lines.append("")
    return "\n".join(lines)


def from_ini(text: str, overrides: dict | None = None) -> ExperimentConfig:
    """Parse config text; ``overrides`` maps "section.key" (or "seed"/"out"/"threads") to strings."""
    parser = configparser.ConfigParser()
    parser.read_string(text)
    for key, value in (overrides or {}).items():
        section, _, name = key.rpartition(".")
        section = section or "run"
        if not parser.has_section(section):
            parser.add_section(section)
        parser[section][name] = str(value)

    known = set(_SECTIONS) | {"run", "phantom"}
    for section in parser.sections():
        if section not in known:
            raise ConfigError(f"unknown config section [{section}]")

    parts = {}
    for name, cls in _SECTIONS.items():
        default = cls()
        values = {}
        if parser.has_section(name):
            valid = {f.name for f in fields(cls)}
            for key, raw in parser[name].items():
                if key not in valid:
                    raise ConfigError(f"{name}.{key}: unknown key")
                values[key] = _parse(raw, getattr(default, key), f"{name}.{key}")
        try:
            parts[name] = cls(**{**asdict(default), **values}) if values else default
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"[{name}]: {exc}") from None

    run = parser["run"] if parser.has_section("run") else {}
    phantom = _phantom_from_section(parser["phantom"], parts["grid"]) if parser.has_section("phantom") else None
    try:
        return ExperimentConfig(
            seed=_parse(run.get("seed", "0"), 0, "run.seed"),
            out=run.get("out", "run"),
            threads=_parse(run.get("threads", "1"), 1, "run.threads"),
            phantom=phantom,
            **parts,
        )
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def load_config(path=None, overrides: dict | None = None) -> ExperimentConfig:
    text = Path(path).read_text() if path else ""
    return from_ini(text, overrides)
