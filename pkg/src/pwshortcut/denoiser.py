"""Posterior-mean denoisers ``D(x; sigma)``.

Two closed-form oracles (Gaussian and per-pixel Gaussian-mixture priors) and a
per-noise-level linear patch denoiser fit by ridge regression on clean images.
All of them are plain callables ``denoiser(x, sigma)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.ndimage import correlate
from scipy.special import logsumexp


@dataclass(frozen=True)
class GaussianPriorDenoiser:
    mean: float | np.ndarray = 0.0
    std: float = 1.0

    def __post_init__(self):
        if not self.std > 0:
            raise ValueError(f"prior std must be > 0, got {self.std}")

    def __call__(self, x, sigma):
        return gaussian_denoise(self, x, sigma)


def gaussian_denoise(d: GaussianPriorDenoiser, x, sigma):
    if sigma < 0:
        raise ValueError(f"noise level must be >= 0, got {sigma}")
    s2, v = d.std**2, sigma**2
    return (s2 * np.asarray(x, dtype=np.float64) + v * np.asarray(d.mean)) / (s2 + v)


@dataclass(frozen=True)
class GmmPixelDenoiser:
    """Mixture prior shared by every pixel (pixels independent)."""

    weights: tuple[float, ...]
    means: tuple[float, ...]
    stds: tuple[float, ...]

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if not (len(self.weights) == len(self.means) == len(self.stds) >= 1):
            raise ValueError("weights, means and stds must have the same nonzero length")
        if np.any(w <= 0) or not np.isclose(w.sum(), 1.0):
            raise ValueError(f"mixture weights must be positive and sum to 1, got {self.weights}")
        if np.any(np.asarray(self.stds) <= 0):
            raise ValueError(f"component stds must be > 0, got {self.stds}")

    def __call__(self, x, sigma):
        return gmm_denoise(self, x, sigma)

    def sample(self, shape, rng) -> np.ndarray:
        rng = np.random.default_rng(rng)
        comp = rng.choice(len(self.weights), size=shape, p=np.asarray(self.weights))
        return np.asarray(self.means)[comp] + np.asarray(self.stds)[comp] * rng.standard_normal(shape)


def gmm_responsibilities(d: GmmPixelDenoiser, x, sigma) -> np.ndarray:
    """Component posteriors, shape ``(K,) + x.shape``, normalized in the log domain."""
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(d.weights).reshape((-1,) + (1,) * x.ndim)
    m = np.asarray(d.means).reshape(w.shape)
    var = np.asarray(d.stds).reshape(w.shape) ** 2 + sigma**2
    logp = np.log(w) - 0.5 * np.log(2 * np.pi * var) - 0.5 * (x - m) ** 2 / var
    return np.exp(logp - logsumexp(logp, axis=0, keepdims=True))


def gmm_denoise(d: GmmPixelDenoiser, x, sigma):
    x = np.asarray(x, dtype=np.float64)
    if sigma < 0:
        raise ValueError(f"noise level must be >= 0, got {sigma}")
    if sigma == 0:
        return x.copy()
    resp = gmm_responsibilities(d, x, sigma)
    m = np.asarray(d.means).reshape((-1,) + (1,) * x.ndim)
    s2 = np.asarray(d.stds).reshape(m.shape) ** 2
    v = sigma**2
    return np.sum(resp * (s2 * x + v * m) / (s2 + v), axis=0)


@dataclass(frozen=True)
class LinearPatchDenoiser:
    """Affine map from a ``P x P`` noisy patch to the clean center pixel, one per sigma node."""

    patch_size: int
    sigmas: np.ndarray  # (n,) strictly increasing
    weights: np.ndarray  # (n, P, P)
    biases: np.ndarray  # (n,)

    def __post_init__(self):
        P = self.patch_size
        if P < 1 or P % 2 == 0:
            raise ValueError(f"patch size must be odd and positive, got {P}")
        sig = np.asarray(self.sigmas, dtype=np.float64)
        if sig.ndim != 1 or sig.size == 0 or np.any(np.diff(sig) <= 0) or sig[0] <= 0:
            raise ValueError("sigma grid must be positive and strictly increasing")
        if np.shape(self.weights) != (sig.size, P, P) or np.shape(self.biases) != (sig.size,):
            raise ValueError("coefficient arrays do not match the sigma grid / patch size")
        if not (np.all(np.isfinite(self.weights)) and np.all(np.isfinite(self.biases))):
            raise ValueError("denoiser coefficients must be finite")

    def coefficients(self, sigma: float) -> tuple[np.ndarray, float]:
        """Patch weights and bias at ``sigma``, interpolated linearly between grid nodes."""
        sig = self.sigmas
        if sigma < 0:
            raise ValueError(f"noise level must be >= 0, got {sigma}")
        if sigma > sig[-1] * (1 + 1e-12):
            raise ValueError(f"sigma={sigma} is above the trained grid maximum {sig[-1]}")
        if sigma <= sig[0]:
            t = sigma / sig[0]
            identity = np.zeros_like(self.weights[0])
            identity[self.patch_size // 2, self.patch_size // 2] = 1.0
            return t * self.weights[0] + (1 - t) * identity, t * float(self.biases[0])
        hi = min(int(np.searchsorted(sig, sigma)), sig.size - 1)
        if sig[hi] == sigma:
            return self.weights[hi], float(self.biases[hi])
        lo = hi - 1
        t = (sigma - sig[lo]) / (sig[hi] - sig[lo])
        w = (1 - t) * self.weights[lo] + t * self.weights[hi]
        return w, float((1 - t) * self.biases[lo] + t * self.biases[hi])

    def __call__(self, x, sigma):
        return linear_denoise(self, x, sigma)


def linear_denoise(d: LinearPatchDenoiser, x, sigma):
    x = np.asarray(x, dtype=np.float64)
    if sigma == 0:
        d.coefficients(0.0)
        return x.copy()
    w, b = d.coefficients(sigma)
    # mode="mirror" matches np.pad(mode="reflect") used during training
    return correlate(x, w, mode="mirror") + b


def default_sigma_grid(n: int = 12, lo: float = 0.01, hi: float = 80.0) -> np.ndarray:
    return np.geomspace(lo, hi, n)


def _extract_patches(padded, P, count, rng):
    windows = sliding_window_view(padded, (P, P), axis=(1, 2))
    n_img, n_z, n_x = windows.shape[:3]
    img = rng.integers(0, n_img, count)
    iz = rng.integers(0, n_z, count)
    ix = rng.integers(0, n_x, count)
    return windows[img, iz, ix].reshape(count, P * P)


def ridge_fit(features: np.ndarray, targets: np.ndarray, alpha: float) -> tuple[np.ndarray, float]:
    """Ridge regression with an unpenalized intercept via the normal equations."""
    mu_x = features.mean(axis=0)
    mu_t = targets.mean()
    xc = features - mu_x
    gram = xc.T @ xc + alpha * np.eye(features.shape[1])
    cond = np.linalg.cond(gram)
    if not np.isfinite(cond) or cond > 1e14:
        raise np.linalg.LinAlgError(f"ridge normal equations are singular (condition number {cond:.3g})")
    w = np.linalg.solve(gram, xc.T @ (targets - mu_t))
    return w, float(mu_t - mu_x @ w)


def train_linear_denoiser(
    clean_images,
    sigma_grid=None,
    patch_size: int = 9,
    alpha: float = 1e-3,
    seed: int = 0,
    patches_per_sigma: int = 200_000,
) -> LinearPatchDenoiser:
    """Fit one ridge-regressed patch map per noise level on clean images."""
    images = [np.asarray(im, dtype=np.float64) for im in clean_images]
    if not images:
        raise ValueError("need at least one clean training image")
    P = patch_size
    if P < 1 or P % 2 == 0:
        raise ValueError(f"patch size must be odd and positive, got {P}")
    sigma_grid = default_sigma_grid() if sigma_grid is None else np.asarray(sigma_grid, dtype=np.float64)
    min_samples = 50 * P * P
    total_pixels = sum(im.size for im in images)
    if patches_per_sigma < min_samples or total_pixels < min_samples:
        raise ValueError(
            f"need at least {min_samples} samples per sigma for a {P}x{P} patch, "
            f"got {patches_per_sigma} patches from {total_pixels} pixels"
        )
    stack = np.stack(images)
    half = P // 2
    padded = np.pad(stack, ((0, 0), (half, half), (half, half)), mode="reflect")

    weights, biases = [], []
    for i, sigma in enumerate(sigma_grid):
        rng = np.random.default_rng([seed, i])
        clean = _extract_patches(padded, P, patches_per_sigma, rng)
        noisy = clean + sigma * rng.standard_normal(clean.shape)
        w, b = ridge_fit(noisy, clean[:, (P * P) // 2], alpha)
        weights.append(w.reshape(P, P))
        biases.append(b)
    return LinearPatchDenoiser(P, sigma_grid, np.stack(weights), np.asarray(biases))


def training_mse(d: LinearPatchDenoiser, clean_images, seed: int = 0, patches: int = 50_000):
    """Per-sigma (denoiser MSE, identity MSE) on freshly drawn training patches."""
    P = d.patch_size
    stack = np.stack([np.asarray(im, dtype=np.float64) for im in clean_images])
    half = P // 2
    padded = np.pad(stack, ((0, 0), (half, half), (half, half)), mode="reflect")
    out = []
    for i, sigma in enumerate(d.sigmas):
        rng = np.random.default_rng([seed, 10_000 + i])
        clean = _extract_patches(padded, P, patches, rng)
        noisy = clean + sigma * rng.standard_normal(clean.shape)
        pred = noisy @ d.weights[i].reshape(-1) + d.biases[i]
        target = clean[:, (P * P) // 2]
        out.append((float(np.mean((pred - target) ** 2)), float(np.mean((noisy[:, (P * P) // 2] - target) ** 2))))
    return out
