"""Seeded synthetic feature generators for benchmarks and tests."""

from __future__ import annotations

import numpy as np

from .errors import ConfigError


def gauss_iid(rows: int, dim: int, seed: int) -> np.ndarray:
    """I.i.d. standard normal features."""
    rng = np.random.default_rng(seed)
    return rng.standard_normal((rows, dim)).astype(np.float32)


def gauss_corr(rows: int, dim: int, rho: float, seed: int) -> np.ndarray:
    """Unit-variance Gaussian with covariance rho^|i-j| between coordinates."""
    if not -1.0 < rho < 1.0:
        raise ConfigError(f"rho must lie in (-1, 1), got {rho}")
    rng = np.random.default_rng(seed)
    cov = rho ** np.abs(np.subtract.outer(np.arange(dim), np.arange(dim)))
    chol = np.linalg.cholesky(cov)
    return (rng.standard_normal((rows, dim)) @ chol.T).astype(np.float32)


def gmm(rows: int, dim: int, components: int, seed: int) -> np.ndarray:
    """Mixture of axis-aligned Gaussian blobs with varied per-coordinate scales."""
    if components < 1:
        raise ConfigError(f"components must be >= 1, got {components}")
    rng = np.random.default_rng(seed)
    means = rng.normal(0.0, 2.0, size=(components, dim))
    scales = rng.uniform(0.3, 1.5, size=(components, dim))
    labels = rng.integers(components, size=rows)
    noise = rng.standard_normal((rows, dim))
    return (means[labels] + noise * scales[labels]).astype(np.float32)


def generate(dist: str, rows: int, dim: int, seed: int,
             rho: float = 0.9, components: int = 4) -> np.ndarray:
    if rows < 1 or dim < 1:
        raise ConfigError(f"rows and dim must be positive, got rows={rows}, dim={dim}")
    if dist == "gauss-iid":
        return gauss_iid(rows, dim, seed)
    if dist == "gauss-corr":
        return gauss_corr(rows, dim, rho, seed)
    if dist == "gmm":
        return gmm(rows, dim, components, seed)
    raise ConfigError(f"unknown distribution {dist!r}; "
                      f"expected gauss-iid, gauss-corr, or gmm")
