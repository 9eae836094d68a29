"""Contrast metrics over ROI samples."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

CNR_CONVENTION = "20*log10(|mu_in-mu_out|/sqrt(var_in+var_out)), population variances"


@dataclass(frozen=True)
class RoiSamples:
    inside: np.ndarray
    outside: np.ndarray

    def __post_init__(self):
        inside = np.asarray(self.inside, dtype=np.float64).ravel()
        outside = np.asarray(self.outside, dtype=np.float64).ravel()
        if inside.size == 0 or outside.size == 0:
            raise ValueError("ROI sample sets must be nonempty")
        if not (np.all(np.isfinite(inside)) and np.all(np.isfinite(outside))):
            raise ValueError("ROI samples must be finite")
        object.__setattr__(self, "inside", inside)
        object.__setattr__(self, "outside", outside)

    @classmethod
    def from_masks(cls, img, inside_mask, outside_mask) -> "RoiSamples":
        img = np.asarray(img)
        return cls(img[inside_mask], img[outside_mask])


def cnr_db(r: RoiSamples) -> float:
    """Contrast-to-noise ratio in dB; ``-inf`` when the means coincide."""
    if r.inside.size < 2 or r.outside.size < 2:
        raise ValueError("cnr_db needs at least 2 samples per ROI")
    mu_in, mu_out = r.inside.mean(), r.outside.mean()
    if mu_in == mu_out:
        return float("-inf")
    spread = np.sqrt(r.inside.var() + r.outside.var())
    if spread == 0:
        return float("inf")
    return float(20.0 * np.log10(abs(mu_in - mu_out) / spread))


def gcnr(r: RoiSamples, bins: int = 256) -> float:
    """Generalized CNR: one minus the overlap of the two ROI histograms."""
    if bins < 2:
        raise ValueError("gcnr needs at least 2 bins")
    lo = min(r.inside.min(), r.outside.min())
    hi = max(r.inside.max(), r.outside.max())
    if lo == hi:
        return 0.0
    edges = np.linspace(lo, hi, bins + 1)
    p_in = np.histogram(r.inside, bins=edges)[0] / r.inside.size
    p_out = np.histogram(r.outside, bins=edges)[0] / r.outside.size
    overlap = np.minimum(p_in, p_out).sum()
    return float(np.clip(1.0 - overlap, 0.0, 1.0))
