"""Seeded synthetic data: planted factor panels and structural series.

Used by the test suite, the benchmark and the ``simulate`` subcommand.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError
from .structural import StructuralParams, StructuralSpec, assemble
from .ssm import simulate


@dataclass(frozen=True)
class PlantedPanel:
    """Observed panel ``data = signal + noise`` with ``signal = factors @ loadings.T``."""

    data: np.ndarray
    signal: np.ndarray
    factors: np.ndarray
    loadings: np.ndarray
    noise_sd: float


def planted_factor_panel(n_series: int = 252, length: int = 564, n_factors: int = 4,
                         noise_sd: float = 0.3, scales=(4.0, 2.0, 1.0, 0.5),
                         seed: int = 0) -> PlantedPanel:
    """Trend-like factors loaded onto a panel plus iid noise.

    Factors start as random walks and are then orthogonalized in-sample
    (raw cross-products, no centring) and given root-mean-square size
    ``scales`` (cycled if shorter than ``n_factors``). Distinct scales keep
    the factors identifiable as individual states rather than only as a
    subspace. Loadings are Gaussian with orthonormal columns times
    ``sqrt(n_series / n_factors)``.
    """
    if not 1 <= n_factors <= min(n_series, length):
        raise ContractError(
            f"need 1 <= n_factors <= min(n_series, length), got {n_factors} factors for "
            f"{n_series} series of length {length}")
    rng = np.random.default_rng(seed)
    walks = np.cumsum(rng.standard_normal((length, n_factors)), axis=0)
    q, _ = np.linalg.qr(walks)
    scales = np.resize(np.asarray(scales, dtype=float), n_factors)
    factors = q * np.sqrt(length) * scales
    factors *= np.where(np.sum(factors * walks, axis=0) < 0, -1.0, 1.0)
    q, _ = np.linalg.qr(rng.standard_normal((n_series, n_factors)))
    loadings = q * np.sqrt(n_series / n_factors)
    signal = factors @ loadings.T
    data = signal + noise_sd * rng.standard_normal((length, n_series))
    return PlantedPanel(data, signal, factors, loadings, float(noise_sd))


def innovation_system(A, C, K, innov_cov, length: int, seed: int = 0):
    """Simulate ``x[t+1] = A x[t] + K e[t]``, ``y[t] = C x[t] + e[t]`` from ``x = 0``.

    Returns ``(y, x)`` shaped ``(length, N)`` and ``(length, n)``.
    """
    A, C, K = (np.atleast_2d(np.asarray(v, dtype=float)) for v in (A, C, K))
    rng = np.random.default_rng(seed)
    L = np.linalg.cholesky(np.atleast_2d(innov_cov))
    e = rng.standard_normal((length, C.shape[0])) @ L.T
    x = np.zeros((length, A.shape[0]))
    y = np.empty((length, C.shape[0]))
    state = np.zeros(A.shape[0])
    for t in range(length):
        x[t] = state
        y[t] = C @ state + e[t]
        state = A @ state + K @ e[t]
    return y, x


def reversal_trend(length: int = 564, break_at: int = 336, slope: float = 0.01,
                   level: float = 15.0) -> np.ndarray:
    """Piecewise-linear trend falling at ``slope`` per step, then rising."""
    t = np.arange(length, dtype=float)
    return level - slope * np.minimum(t, break_at) + slope * np.maximum(t - break_at, 0.0)


def seasonal_pattern(length: int, amplitude: float = 2.0, period: int = 12) -> np.ndarray:
    return amplitude * np.cos(2 * np.pi * np.arange(length) / period)


def structural_series(length: int, params: StructuralParams,
                      spec: StructuralSpec = StructuralSpec(), seed: int = 0,
                      level: float = 0.0):
    """Simulate a structural model from a fixed initial state.

    Diffuse components start at ``level`` (trend) and zero (seasonal);
    the cycle starts at zero. Returns ``(ObservationSeries, states)``.
    """
    model = assemble(spec, params)
    x0 = np.zeros(model.m)
    x0[0] = level
    return simulate(model, length, seed, initial_state=x0)
