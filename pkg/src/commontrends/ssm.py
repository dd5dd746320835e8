"""Linear-Gaussian state-space engine for univariate series.

Filtering, smoothing, likelihood evaluation and simulation for the model

    x[t+1] = T x[t] + eta[t],   eta[t] ~ N(0, Q)
    y[t]   = Z . x[t] + eps[t], eps[t] ~ N(0, H)

with ``x[0] ~ N(a1, P1)`` except for states flagged diffuse, which receive a
flat prior handled by the exact-diffuse recursion. Missing observations skip
the update step. Every function here is pure.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .errors import ContractError, DataError, DegeneracyError


@dataclass(frozen=True)
class ObservationSeries:
    """A regularly sampled scalar series with a missing-value mask.

    ``values`` may hold NaN at masked steps. When ``missing_mask`` is omitted
    it is derived from the NaN pattern of ``values``. ``time_origin`` is the
    ``(year, month)`` of the first step and ``period`` the number of steps
    per year.
    """

    values: np.ndarray
    missing_mask: np.ndarray | None = None
    time_origin: tuple[int, int] = (1, 1)
    period: int = 12

    def __post_init__(self):
        values = np.array(self.values, dtype=float, copy=True).reshape(-1)
        if self.missing_mask is None:
            mask = np.isnan(values)
        else:
            mask = np.array(self.missing_mask, dtype=bool, copy=True).reshape(-1)
        if mask.shape != values.shape:
            raise ContractError(
                f"missing_mask has length {mask.size}, values has length {values.size}")
        if values.size < 2:
            raise DataError(f"a series needs at least 2 steps, got {values.size}")
        bad = ~mask & ~np.isfinite(values)
        if bad.any():
            raise DataError(f"non-finite observation at step {int(np.flatnonzero(bad)[0])}")
        if self.period < 1:
            raise ContractError("period must be positive")
        values[mask] = np.nan
        values.flags.writeable = False
        mask.flags.writeable = False
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "missing_mask", mask)
        object.__setattr__(self, "time_origin", (int(self.time_origin[0]), int(self.time_origin[1])))

    def __len__(self):
        return self.values.size

    @property
    def n_observed(self) -> int:
        return int((~self.missing_mask).sum())

    def calendar(self) -> tuple[np.ndarray, np.ndarray]:
        """Return ``(year, month)`` arrays for every step (monthly series)."""
        year0, month0 = self.time_origin
        k = (month0 - 1) + np.arange(len(self))
        return year0 + k // 12, k % 12 + 1

    def with_values(self, values, missing_mask=None) -> ObservationSeries:
        mask = self.missing_mask if missing_mask is None else missing_mask
        return ObservationSeries(values, mask, self.time_origin, self.period)


@dataclass(frozen=True)
class GaussianStateSpace:
    """Time-invariant linear-Gaussian model with a scalar observation.

    Diffuse states must have zero rows and columns in ``init_cov``; their
    initial uncertainty comes only from the diffuse mechanism.
    """

    transition: np.ndarray
    obs_row: np.ndarray
    state_cov: np.ndarray
    obs_var: float
    init_mean: np.ndarray
    init_cov: np.ndarray
    diffuse_mask: np.ndarray = None

    def __post_init__(self):
        T = np.array(self.transition, dtype=float, ndmin=2)
        m = T.shape[0]
        Z = np.array(self.obs_row, dtype=float).reshape(-1)
        Q = np.array(self.state_cov, dtype=float, ndmin=2)
        a1 = np.array(self.init_mean, dtype=float).reshape(-1)
        P1 = np.array(self.init_cov, dtype=float, ndmin=2)
        if self.diffuse_mask is None:
            mask = np.zeros(m, dtype=bool)
        else:
            mask = np.array(self.diffuse_mask, dtype=bool).reshape(-1)
        if T.shape != (m, m) or Z.shape != (m,) or Q.shape != (m, m) or a1.shape != (m,) \
                or P1.shape != (m, m) or mask.shape != (m,):
            raise ContractError(
                f"inconsistent dimensions: transition {T.shape}, obs_row {Z.shape}, "
                f"state_cov {Q.shape}, init_mean {a1.shape}, init_cov {P1.shape}, "
                f"diffuse_mask {mask.shape}")
        obs_var = float(self.obs_var)
        if not np.isfinite(obs_var) or obs_var < 0:
            raise ContractError(f"obs_var must be finite and >= 0, got {obs_var}")
        for name, S in (("state_cov", Q), ("init_cov", P1)):
            if not np.all(np.isfinite(S)):
                raise ContractError(f"{name} has non-finite entries")
            if not np.allclose(S, S.T, rtol=1e-10, atol=1e-12):
                raise ContractError(f"{name} is not symmetric")
            if m and np.linalg.eigvalsh(0.5 * (S + S.T)).min() < -1e-10 * max(1.0, np.abs(S).max()):
                raise ContractError(f"{name} is not positive semidefinite")
        if np.any(P1[mask, :] != 0) or np.any(P1[:, mask] != 0):
            raise ContractError("diffuse states must have zero rows/columns in init_cov")
        if not (np.all(np.isfinite(T)) and np.all(np.isfinite(Z)) and np.all(np.isfinite(a1))):
            raise ContractError("transition, obs_row and init_mean must be finite")
        for name, arr in (("transition", T), ("obs_row", Z), ("state_cov", 0.5 * (Q + Q.T)),
                          ("init_mean", a1), ("init_cov", 0.5 * (P1 + P1.T)),
                          ("diffuse_mask", mask)):
            arr = np.ascontiguousarray(arr)
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "obs_var", obs_var)

    @property
    def m(self) -> int:
        return self.transition.shape[0]

    def diffuse_cov(self) -> np.ndarray:
        return np.diag(self.diffuse_mask.astype(float))

    def _csr(self):
        T = self.transition
        rows, cols = np.nonzero(T)
        indptr = np.zeros(self.m + 1, dtype=np.int64)
        np.add.at(indptr, rows + 1, 1)
        return np.cumsum(indptr), cols.astype(np.int64), np.ascontiguousarray(T[rows, cols])


@dataclass(frozen=True)
class FilterOutput:
    """Per-step output of the Kalman filter.

    ``pred_mean[t]``/``pred_cov[t]`` condition on ``y[0..t-1]`` and
    ``filt_mean[t]``/``filt_cov[t]`` on ``y[0..t]``. ``pred_cov_diffuse`` is
    the coefficient of the diffuse scale in the predicted covariance; it is
    zero after the first ``n_diffuse`` steps. At missing steps ``innovation``
    is NaN and the log-likelihood contribution is zero; inside the diffuse
    period informative steps also contribute zero.
    """

    pred_mean: np.ndarray
    pred_cov: np.ndarray
    pred_cov_diffuse: np.ndarray
    filt_mean: np.ndarray
    filt_cov: np.ndarray
    innovation: np.ndarray
    innovation_var: np.ndarray
    innovation_var_diffuse: np.ndarray
    step_kind: np.ndarray
    loglik_contrib: np.ndarray
    missing_mask: np.ndarray
    n_diffuse: int

    @property
    def loglik(self) -> float:
        return float(self.loglik_contrib.sum())

    def __len__(self):
        return self.innovation.size


@dataclass(frozen=True)
class SmootherOutput:
    mean: np.ndarray
    cov: np.ndarray

    @property
    def var(self) -> np.ndarray:
        """Pointwise variances, shape ``(n, m)``."""
        return np.diagonal(self.cov, axis1=1, axis2=2).copy()


def _prepare(model: GaussianStateSpace, obs: ObservationSeries):
    if not isinstance(obs, ObservationSeries):
        obs = ObservationSeries(obs)
    y = np.where(obs.missing_mask, 0.0, obs.values)
    return np.ascontiguousarray(y), np.ascontiguousarray(obs.missing_mask), obs


def _raise_degenerate(status):
    raise DegeneracyError(
        f"innovation variance is negative at step {status}; the model is numerically degenerate",
        step=int(status))


def filter(model: GaussianStateSpace, obs: ObservationSeries) -> FilterOutput:
    """Run the Kalman filter over ``obs`` and keep every per-step moment."""
    y, missing, obs = _prepare(model, obs)
    n, m = y.size, model.m
    indptr, indices, data = model._csr()
    a_pred = np.empty((n, m))
    P_pred = np.empty((n, m, m))
    Pinf_pred = np.empty((n, m, m))
    a_filt = np.empty((n, m))
    P_filt = np.empty((n, m, m))
    v = np.empty(n)
    F = np.empty(n)
    Finf = np.empty(n)
    kind = np.empty(n, dtype=np.int64)
    ll = np.empty(n)
    status, d = _kernels.filter_kernel(
        y, missing, indptr, indices, data, model.obs_row, model.state_cov, model.obs_var,
        model.init_mean, model.init_cov, model.diffuse_cov(), True,
        a_pred, P_pred, Pinf_pred, a_filt, P_filt, v, F, Finf, kind, ll)
    if status >= 0:
        _raise_degenerate(status)
    v[missing] = np.nan
    F[missing] = np.nan
    return FilterOutput(a_pred, P_pred, Pinf_pred, a_filt, P_filt, v, F, Finf, kind, ll,
                        missing.copy(), int(d))


def loglik(model: GaussianStateSpace, obs: ObservationSeries) -> float:
    """Log-likelihood by the prediction error decomposition.

    Steps where the diffuse part of the innovation variance is non-zero
    are excluded, which makes the value the likelihood of the data given the
    observations that identify the diffuse states.
    """
    y, missing, obs = _prepare(model, obs)
    n, m = y.size, model.m
    indptr, indices, data = model._csr()
    scratch_v = np.empty((1, m))
    scratch_M = np.empty((1, m, m))
    v = np.empty(n)
    F = np.empty(n)
    Finf = np.empty(n)
    kind = np.empty(n, dtype=np.int64)
    ll = np.empty(n)
    status, _ = _kernels.filter_kernel(
        y, missing, indptr, indices, data, model.obs_row, model.state_cov, model.obs_var,
        model.init_mean, model.init_cov, model.diffuse_cov(), False,
        scratch_v, scratch_M, scratch_M, scratch_v, scratch_M, v, F, Finf, kind, ll)
    if status >= 0:
        _raise_degenerate(status)
    return float(ll.sum())


def smooth(model: GaussianStateSpace, f: FilterOutput) -> SmootherOutput:
    """Fixed-interval smoother from a filter pass over the same model."""
    n = len(f)
    if f.pred_mean.shape != (n, model.m):
        raise ContractError(
            f"filter output has state dimension {f.pred_mean.shape[1]}, model has {model.m}")
    mean = np.empty((n, model.m))
    cov = np.empty((n, model.m, model.m))
    v = np.where(f.missing_mask, 0.0, f.innovation)
    F = np.where(f.missing_mask, 1.0, f.innovation_var)
    _kernels.smoother_kernel(
        np.ascontiguousarray(model.transition), model.obs_row, f.missing_mask, f.n_diffuse,
        f.pred_mean, f.pred_cov, f.pred_cov_diffuse, v, F, f.innovation_var_diffuse,
        f.step_kind, mean, cov)
    # the boundary step is the filtered posterior by definition
    mean[-1] = f.filt_mean[-1]
    cov[-1] = f.filt_cov[-1]
    return SmootherOutput(mean, cov)


def simulate(model: GaussianStateSpace, length: int, seed: int, initial_state=None):
    """Draw ``(observations, states)`` from the model.

    ``initial_state`` fixes the first state; it is required when any state is
    diffuse. Otherwise the first state is drawn from ``N(init_mean, init_cov)``.
    States have shape ``(length, m)``.
    """
    if length < 2:
        raise ContractError(f"length must be at least 2, got {length}")
    m = model.m
    if initial_state is None and model.diffuse_mask.any():
        raise ContractError("diffuse states need a caller-supplied initial_state")
    rng = np.random.default_rng(seed)
    if initial_state is None:
        x = model.init_mean + _draw(rng, model.init_cov)
    else:
        x = np.array(initial_state, dtype=float).reshape(-1)
        if x.shape != (m,):
            raise ContractError(f"initial_state must have length {m}")
    states = np.empty((length, m))
    eta = _draw(rng, model.state_cov, size=length)
    eps = rng.standard_normal(length) * np.sqrt(model.obs_var)
    T = model.transition
    for t in range(length):
        states[t] = x
        x = T @ x + eta[t]
    y = states @ model.obs_row + eps
    return ObservationSeries(y), states


def _draw(rng, cov, size=None):
    """Gaussian draws with a PSD (possibly singular) covariance."""
    w, U = np.linalg.eigh(cov)
    root = U * np.sqrt(np.clip(w, 0.0, None))
    shape = (cov.shape[0],) if size is None else (size, cov.shape[0])
    z = rng.standard_normal(shape)
    return z @ root.T
