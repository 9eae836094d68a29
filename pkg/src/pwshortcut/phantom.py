"""Synthetic scatterer maps: pixel speckle, anechoic cysts and point targets."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .acoustics import ImagingGrid


@dataclass(frozen=True)
class Cyst:
    center: tuple[float, float]  # (z, x) in meters
    radius: float
    amplitude_scale: float = 0.0

    def __post_init__(self):
        if not self.radius > 0:
            raise ValueError(f"cyst radius must be > 0, got {self.radius}")
        if not 0.0 <= self.amplitude_scale <= 1.0:
            raise ValueError(f"cyst amplitude_scale must be in [0, 1], got {self.amplitude_scale}")


@dataclass(frozen=True)
class PointTarget:
    position: tuple[float, float]  # (z, x) in meters
    amplitude: float = 1.0


@dataclass(frozen=True)
class PhantomSpec:
    background_std: float = 1.0
    cysts: tuple[Cyst, ...] = ()
    points: tuple[PointTarget, ...] = ()
    seed: int = 0

    def __post_init__(self):
        if self.background_std < 0:
            raise ValueError(f"background_std must be >= 0, got {self.background_std}")
        object.__setattr__(self, "cysts", tuple(self.cysts))
        object.__setattr__(self, "points", tuple(self.points))

    def with_seed(self, seed: int) -> "PhantomSpec":
        return PhantomSpec(self.background_std, self.cysts, self.points, int(seed))


def default_cyst_phantom(grid: ImagingGrid, seed: int = 0, radius_pixels: float = 12.0) -> PhantomSpec:
    """Unit-std speckle with one anechoic cyst centered in the grid."""
    center = ((grid.z_min + grid.z_max) / 2, (grid.x_min + grid.x_max) / 2)
    radius = radius_pixels * max(grid.dz, grid.dx)
    return PhantomSpec(background_std=1.0, cysts=(Cyst(center, radius, 0.0),), seed=seed)


def _check_inside(grid: ImagingGrid, pos, what: str):
    z, x = pos
    if not (grid.z_min <= z <= grid.z_max and grid.x_min <= x <= grid.x_max):
        raise ValueError(
            f"{what} at (z={z:.4g} m, x={x:.4g} m) lies outside the grid extent "
            f"z=[{grid.z_min:.4g}, {grid.z_max:.4g}], x=[{grid.x_min:.4g}, {grid.x_max:.4g}]"
        )


def _distance(grid: ImagingGrid, center) -> np.ndarray:
    zz, xx = grid.mesh()
    return np.hypot(zz - center[0], xx - center[1])


def render(spec: PhantomSpec, grid: ImagingGrid) -> np.ndarray:
    """Scatterer map of shape ``grid.shape``; deterministic in ``spec.seed``."""
    for cyst in spec.cysts:
        _check_inside(grid, cyst.center, "cyst center")
    for pt in spec.points:
        _check_inside(grid, pt.position, "point target")

    rng = np.random.default_rng(spec.seed)
    img = spec.background_std * rng.standard_normal(grid.shape)
    for cyst in spec.cysts:
        img[_distance(grid, cyst.center) < cyst.radius] *= cyst.amplitude_scale
    for pt in spec.points:
        iz = int(np.argmin(np.abs(grid.z - pt.position[0])))
        ix = int(np.argmin(np.abs(grid.x - pt.position[1])))
        img[iz, ix] += pt.amplitude
    return img


def roi_masks(spec: PhantomSpec, grid: ImagingGrid, margin: float = 0.0):
    """Boolean (inside, outside) masks for contrast measurement.

    ``inside`` covers pixels strictly within ``radius - margin`` of a cyst
    center; ``outside`` is the annulus beyond ``radius + margin`` whose area
    equals the inner disk's.
    """
    if not spec.cysts:
        raise ValueError("roi_masks needs at least one cyst")
    if margin < 0:
        raise ValueError("margin must be >= 0")
    inside = np.zeros(grid.shape, dtype=bool)
    outside = np.zeros(grid.shape, dtype=bool)
    exclusion = np.zeros(grid.shape, dtype=bool)
    for cyst in spec.cysts:
        d = _distance(grid, cyst.center)
        r_in = cyst.radius - margin
        r_gap = cyst.radius + margin
        r_out = np.sqrt(r_gap**2 + max(r_in, 0.0) ** 2)
        inside |= d < r_in
        outside |= (d > r_gap) & (d <= r_out)
        exclusion |= d <= r_gap
    outside &= ~exclusion
    if not inside.any() or not outside.any():
        raise ValueError(f"margin {margin} leaves an empty ROI mask")
    return inside, outside
