"""Discretized plane-wave measurement model and DAS display chain.

A :class:`MeasurementOperator` maps a scatterer map on an :class:`ImagingGrid`
to per-element channel samples for one steering angle. The transmit waveform
is a unit pulse, so the same sparse matrix serves as the beamforming matrix and
delay-and-sum beamforming is simply the adjoint.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.signal
import scipy.sparse as sp


@dataclass(frozen=True)
class TransducerGeometry:
    """Linear array centered on the lateral origin."""

    element_count: int = 64
    pitch: float = 0.3e-3
    wave_speed: float = 1540.0
    sample_rate: float = 31.25e6
    sample_count: int = 1024

    def __post_init__(self):
        if int(self.element_count) != self.element_count or self.element_count < 2:
            raise ValueError(f"element_count must be an integer >= 2, got {self.element_count}")
        if int(self.sample_count) != self.sample_count or self.sample_count < 1:
            raise ValueError(f"sample_count must be a positive integer, got {self.sample_count}")
        for name in ("pitch", "wave_speed", "sample_rate"):
            value = getattr(self, name)
            if not np.isfinite(value) or value <= 0:
                raise ValueError(f"{name} must be finite and positive, got {value}")

    @property
    def element_positions(self) -> np.ndarray:
        idx = np.arange(self.element_count, dtype=np.float64)
        return (idx - (self.element_count - 1) / 2.0) * self.pitch

    @property
    def aperture(self) -> float:
        return (self.element_count - 1) * self.pitch


@dataclass(frozen=True)
class ImagingGrid:
    """Regular pixel grid; axis 0 is depth (z), axis 1 is lateral (x)."""

    axial_count: int = 128
    lateral_count: int = 128
    z_min: float = 4e-3
    z_max: float = 20e-3
    x_min: float = -8e-3
    x_max: float = 8e-3

    def __post_init__(self):
        if self.axial_count < 1 or self.lateral_count < 1:
            raise ValueError("grid counts must be positive")
        extents = (self.z_min, self.z_max, self.x_min, self.x_max)
        if not all(np.isfinite(v) for v in extents):
            raise ValueError(f"grid extents must be finite, got {extents}")
        if self.z_min <= 0:
            raise ValueError(f"z_min must be > 0 (grid must lie in front of the array), got {self.z_min}")
        if self.z_max < self.z_min or self.x_max < self.x_min:
            raise ValueError("grid extents must be ordered (min <= max)")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.axial_count, self.lateral_count)

    @property
    def pixel_count(self) -> int:
        return self.axial_count * self.lateral_count

    @property
    def z(self) -> np.ndarray:
        return np.linspace(self.z_min, self.z_max, self.axial_count)

    @property
    def x(self) -> np.ndarray:
        return np.linspace(self.x_min, self.x_max, self.lateral_count)

    @property
    def dz(self) -> float:
        return (self.z_max - self.z_min) / max(self.axial_count - 1, 1)

    @property
    def dx(self) -> float:
        return (self.x_max - self.x_min) / max(self.lateral_count - 1, 1)

    def mesh(self) -> tuple[np.ndarray, np.ndarray]:
        """Return (z, x) coordinate arrays of shape ``self.shape``."""
        return np.meshgrid(self.z, self.x, indexing="ij")


@dataclass(frozen=True)
class RfFrame:
    """Channel data for one transmit: ``samples`` has shape (r, L)."""

    samples: np.ndarray
    steering_angle: float

    def __post_init__(self):
        if self.samples.ndim != 2:
            raise ValueError(f"RF samples must be 2-D (r, L), got shape {self.samples.shape}")


def round_trip_delay(geometry: TransducerGeometry, z, x, x_element, theta: float):
    """Plane-wave transmit delay plus receive path back to one element, in seconds."""
    c = geometry.wave_speed
    transmit = (z * np.cos(theta) + x * np.sin(theta)) / c
    receive = np.sqrt(z**2 + (x - x_element) ** 2) / c
    return transmit + receive


@dataclass(frozen=True, eq=False)
class MeasurementOperator:
    """Sparse plane-wave operator for one steering angle.

    ``matrix`` is stored pixel-major: shape (l, r*L), i.e. it holds H transposed
    in compressed-row form. Column ``s*L + e`` addresses time sample ``s`` of
    element ``e``.
    """

    geometry: TransducerGeometry
    grid: ImagingGrid
    steering_angle: float
    matrix: sp.csr_matrix = field(repr=False)

    @property
    def rf_shape(self) -> tuple[int, int]:
        return (self.geometry.sample_count, self.geometry.element_count)

    @property
    def shape(self) -> tuple[int, int]:
        """Shape of H itself: (r*L, l)."""
        return (self.matrix.shape[1], self.matrix.shape[0])

    def entries(self, pixel: int) -> tuple[np.ndarray, np.ndarray]:
        """(flat channel index, weight) pairs stored for one flat pixel index."""
        start, stop = self.matrix.indptr[pixel], self.matrix.indptr[pixel + 1]
        return self.matrix.indices[start:stop], self.matrix.data[start:stop]

    def to_dense(self) -> np.ndarray:
        """Dense H with shape (r*L, l). Only sensible for small instances."""
        return self.matrix.T.toarray()


def build_operator(
    geometry: TransducerGeometry,
    grid: ImagingGrid,
    theta: float,
    apodization: str | None = None,
) -> MeasurementOperator:
    """Assemble the sparse measurement matrix for steering angle ``theta`` (radians).

    Each (pixel, element) pair contributes two linearly interpolated taps around
    the fractional sample ``tau * fs``; pairs whose taps fall outside ``[0, r)``
    are dropped. ``apodization="hann"`` weights elements with a receive Hann
    window across the aperture.
    """
    if not np.isfinite(theta) or abs(theta) >= np.pi / 2:
        raise ValueError(f"steering angle must satisfy |theta| < pi/2, got {theta}")
    L, r = geometry.element_count, geometry.sample_count
    zz, xx = grid.mesh()
    z = zz.reshape(-1, 1)
    x = xx.reshape(-1, 1)
    xe = geometry.element_positions.reshape(1, -1)

    position = round_trip_delay(geometry, z, x, xe, theta) * geometry.sample_rate
    lower = np.floor(position)
    frac = position - lower
    lower = lower.astype(np.int64)
    valid = (lower >= 0) & (lower + 1 < r)

    if apodization is None:
        element_weight = np.ones(L)
    elif apodization == "hann":
        element_weight = np.hanning(L + 2)[1:-1]
    else:
        raise ValueError(f"unknown apodization {apodization!r}")

    pixel_idx, elem_idx = np.nonzero(valid)
    lo = lower[pixel_idx, elem_idx]
    fr = frac[pixel_idx, elem_idx]
    w = element_weight[elem_idx]
    # two taps per (pixel, element): samples lo and lo+1
    rows = np.repeat(pixel_idx, 2)
    cols = np.empty(2 * lo.size, dtype=np.int64)
    cols[0::2] = lo * L + elem_idx
    cols[1::2] = (lo + 1) * L + elem_idx
    vals = np.empty(2 * lo.size)
    vals[0::2] = (1.0 - fr) * w
    vals[1::2] = fr * w

    counts = np.bincount(rows, minlength=grid.pixel_count)
    indptr = np.concatenate(([0], np.cumsum(counts)))
    matrix = sp.csr_matrix((vals, cols, indptr), shape=(grid.pixel_count, r * L))
    return MeasurementOperator(geometry, grid, float(theta), matrix)


def forward(op: MeasurementOperator, x: np.ndarray) -> RfFrame:
    """Channel data ``H x`` for a scatterer map ``x`` of shape ``grid.shape``."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != op.grid.shape:
        raise ValueError(f"scatterer map shape {x.shape} does not match grid {op.grid.shape}")
    y = op.matrix.T @ x.reshape(-1)
    return RfFrame(y.reshape(op.rf_shape), op.steering_angle)


def adjoint(op: MeasurementOperator, y: RfFrame | np.ndarray) -> np.ndarray:
    """DAS image ``H^T y`` (the beamforming matrix equals H under a unit pulse)."""
    samples = y.samples if isinstance(y, RfFrame) else np.asarray(y)
    if samples.shape != op.rf_shape:
        raise ValueError(f"RF frame shape {samples.shape} does not match operator {op.rf_shape}")
    img = op.matrix @ samples.reshape(-1).astype(np.float64, copy=False)
    return img.reshape(op.grid.shape)


def forward_batch(op: MeasurementOperator, maps: np.ndarray) -> np.ndarray:
    """Apply H to a stack of scatterer maps (n, n_z, n_x) -> (n, r, L)."""
    n = maps.shape[0]
    y = op.matrix.T @ maps.reshape(n, -1).T
    return np.ascontiguousarray(y.T).reshape((n,) + op.rf_shape)


def adjoint_batch(op: MeasurementOperator, frames: np.ndarray) -> np.ndarray:
    """Apply H^T to a stack of channel frames (n, r, L) -> (n, n_z, n_x)."""
    n = frames.shape[0]
    img = op.matrix @ frames.reshape(n, -1).T
    return np.ascontiguousarray(img.T).reshape((n,) + op.grid.shape)


def compound(images) -> np.ndarray:
    """Pixelwise mean of per-angle beamformed images."""
    images = list(images)
    if not images:
        raise ValueError("compound needs at least one image")
    shape = np.shape(images[0])
    for img in images[1:]:
        if np.shape(img) != shape:
            raise ValueError(f"cannot compound images of shapes {shape} and {np.shape(img)}")
    return np.mean(np.stack(images), axis=0)


def add_channel_noise(y: RfFrame, gamma: float, rng) -> RfFrame:
    """Add white Gaussian channel noise with standard deviation ``gamma``.

    ``rng`` is a seed or a :class:`numpy.random.Generator`.
    """
    if gamma < 0:
        raise ValueError(f"noise std must be non-negative, got {gamma}")
    if gamma == 0:
        return RfFrame(y.samples.copy(), y.steering_angle)
    rng = np.random.default_rng(rng)
    noisy = y.samples + gamma * rng.standard_normal(y.samples.shape)
    return RfFrame(noisy, y.steering_angle)


def steering_angles(count: int, span_deg: float) -> np.ndarray:
    """``count`` angles (radians) uniformly spanning [-span, +span] degrees."""
    if count < 1:
        raise ValueError("angle count must be positive")
    if count == 1:
        return np.zeros(1)
    return np.deg2rad(np.linspace(-span_deg, span_deg, count))


def envelope(img: np.ndarray) -> np.ndarray:
    """Analytic-signal magnitude along the axial axis of each column."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2 or img.shape[0] < 2:
        raise ValueError(f"envelope needs a 2-D image with at least 2 rows, got {img.shape}")
    return np.abs(scipy.signal.hilbert(img, axis=0))


def log_compress(env: np.ndarray, dynamic_range_db: float = 60.0) -> np.ndarray:
    """Convert an envelope to dB relative to its maximum, clamped to [-DR, 0]."""
    if dynamic_range_db <= 0:
        raise ValueError("dynamic range must be positive")
    env = np.asarray(env, dtype=np.float64)
    peak = env.max() if env.size else 0.0
    if peak <= 0:
        return np.full(env.shape, -float(dynamic_range_db))
    with np.errstate(divide="ignore"):
        db = 20.0 * np.log10(env / peak)
    return np.clip(db, -dynamic_range_db, 0.0)


def bmode(img: np.ndarray, dynamic_range_db: float = 60.0) -> np.ndarray:
    """Envelope detection followed by log compression."""
    return log_compress(envelope(img), dynamic_range_db)
