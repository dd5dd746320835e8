"""Trend + seasonal + cycle + noise decomposition of a single series.

The structural model is

    y(t) = T(t) + S(t) + I(t) + e(t)

with a ``k``-times integrated random-walk trend, a dummy seasonal whose
``s``-step running sum is white noise, a damped stochastic cycle in rotation
form, and white observation noise. ``assemble`` builds the state-space form,
``fit`` estimates the variances (and cycle damping/frequency) by maximum
likelihood, ``decompose`` returns smoothed components at fixed parameters.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
from scipy import optimize
from scipy.special import comb, expit

from . import _kernels, ssm
from .errors import ContractError, DataError

TWO_PI = 2.0 * math.pi


@dataclass(frozen=True)
class StructuralSpec:
    """Which components are present and how the cycle is bounded.

    ``rho_bounds`` and ``lambda_bounds`` (radians per step) bound the search
    during ``fit``; ``fixed_rho``/``fixed_lambda`` pin those parameters
    instead of estimating them.
    """

    trend_order: int = 1
    season_length: int = 12
    seasonal_enabled: bool = True
    cycle_enabled: bool = True
    rho_bounds: tuple[float, float] = (0.05, 0.995)
    lambda_bounds: tuple[float, float] = (TWO_PI / 120, TWO_PI / 18)
    fixed_rho: float | None = None
    fixed_lambda: float | None = None

    def __post_init__(self):
        if int(self.trend_order) != self.trend_order or self.trend_order < 1:
            raise ContractError(f"trend_order must be a positive integer, got {self.trend_order}")
        if self.seasonal_enabled and (int(self.season_length) != self.season_length
                                      or self.season_length < 2):
            raise ContractError(f"season_length must be an integer >= 2, got {self.season_length}")
        lo, hi = self.rho_bounds
        if not 0.0 < lo < hi < 1.0:
            raise ContractError(f"rho_bounds must satisfy 0 < lo < hi < 1, got {self.rho_bounds}")
        lo, hi = self.lambda_bounds
        if not 0.0 < lo < hi <= math.pi:
            raise ContractError(
                f"lambda_bounds must satisfy 0 < lo < hi <= pi, got {self.lambda_bounds}")
        if self.fixed_rho is not None and not 0.0 < self.fixed_rho < 1.0:
            raise ContractError("fixed_rho must lie in (0, 1)")
        if self.fixed_lambda is not None and not 0.0 < self.fixed_lambda <= math.pi:
            raise ContractError("fixed_lambda must lie in (0, pi]")

    @property
    def state_dim(self) -> int:
        m = self.trend_order
        if self.seasonal_enabled:
            m += self.season_length - 1
        if self.cycle_enabled:
            m += 2
        return m


@dataclass(frozen=True)
class StructuralParams:
    trend_var: float
    seasonal_var: float = 0.0
    cycle_var: float = 0.0
    obs_var: float = 1.0
    rho: float = 0.9
    frequency: float = TWO_PI / 60

    def __post_init__(self):
        for name in ("trend_var", "seasonal_var", "cycle_var", "obs_var"):
            value = getattr(self, name)
            if not (np.isfinite(value) and value >= 0):
                raise ContractError(f"{name} must be finite and >= 0, got {value}")
        if not 0.0 < self.rho < 1.0:
            raise ContractError(f"rho must lie in (0, 1), got {self.rho}")
        if not 0.0 < self.frequency <= math.pi:
            raise ContractError(f"frequency must lie in (0, pi], got {self.frequency}")

    def scaled(self, c: float) -> StructuralParams:
        """Parameters for the series multiplied by ``c``."""
        c2 = c * c
        return replace(self, trend_var=self.trend_var * c2, seasonal_var=self.seasonal_var * c2,
                       cycle_var=self.cycle_var * c2, obs_var=self.obs_var * c2)


@dataclass(frozen=True)
class OptimizerSettings:
    """Nelder-Mead settings for ``fit``.

    ``start_ratios`` are the multi-start values of every disturbance to
    observation variance ratio. Each start runs to ``start_xatol``; the best
    is then re-run to ``xatol`` until a run improves the log-likelihood by at
    most ``restart_gain`` (at most ``1 + max_restarts`` runs), otherwise the
    result is flagged non-converged. ``max_evals`` caps every run.
    """

    max_evals: int = 2000
    xatol: float = 1e-6
    start_xatol: float = 1e-3
    start_ratios: tuple[float, ...] = (0.1, 1.0, 10.0)
    max_restarts: int = 3
    restart_gain: float = 1e-6
    log_ratio_bounds: tuple[float, float] = (-20.0, 12.0)


@dataclass(frozen=True)
class DecompositionResult:
    """Smoothed components with pointwise posterior variances.

    ``error`` is defined residually, ``y - trend - seasonal - cycle``, and is
    NaN at missing steps, as is ``error_var``.
    """

    trend: np.ndarray
    trend_var: np.ndarray
    seasonal: np.ndarray
    seasonal_var: np.ndarray
    cycle: np.ndarray
    cycle_var: np.ndarray
    error: np.ndarray
    error_var: np.ndarray
    params: StructuralParams
    spec: StructuralSpec
    loglik: float
    iterations: int = 0
    converged: bool = True

    def __len__(self):
        return self.trend.size


def _round_trig(x):
    return 0.0 if abs(x) < 1e-15 else x


def assemble(spec: StructuralSpec, params: StructuralParams) -> ssm.GaussianStateSpace:
    """Block-diagonal state-space form of the structural model."""
    if not isinstance(params, StructuralParams):
        raise ContractError("params must be StructuralParams")
    k = spec.trend_order
    m = spec.state_dim
    T = np.zeros((m, m))
    Z = np.zeros(m)
    Q = np.zeros((m, m))
    P1 = np.zeros((m, m))
    diffuse = np.zeros(m, dtype=bool)

    # trend: k-th difference is white noise
    T[0, :k] = [(-1.0) ** (j + 1) * comb(k, j, exact=True) for j in range(1, k + 1)]
    for i in range(1, k):
        T[i, i - 1] = 1.0
    Z[0] = 1.0
    Q[0, 0] = params.trend_var
    diffuse[:k] = True
    pos = k

    if spec.seasonal_enabled:
        ns = spec.season_length - 1
        T[pos, pos:pos + ns] = -1.0
        for i in range(1, ns):
            T[pos + i, pos + i - 1] = 1.0
        Z[pos] = 1.0
        Q[pos, pos] = params.seasonal_var
        diffuse[pos:pos + ns] = True
        pos += ns

    if spec.cycle_enabled:
        c = _round_trig(math.cos(params.frequency))
        s = _round_trig(math.sin(params.frequency))
        T[pos:pos + 2, pos:pos + 2] = params.rho * np.array([[c, s], [-s, c]])
        Z[pos] = 1.0
        Q[pos:pos + 2, pos:pos + 2] = params.cycle_var * np.eye(2)
        P1[pos:pos + 2, pos:pos + 2] = params.cycle_var / (1.0 - params.rho ** 2) * np.eye(2)

    return ssm.GaussianStateSpace(T, Z, Q, params.obs_var, np.zeros(m), P1, diffuse)


def _component_slices(spec: StructuralSpec):
    k = spec.trend_order
    seasonal = k if spec.seasonal_enabled else None
    cycle = None
    if spec.cycle_enabled:
        cycle = k + (spec.season_length - 1 if spec.seasonal_enabled else 0)
    return 0, seasonal, cycle


def decompose(obs: ssm.ObservationSeries, spec: StructuralSpec,
              params: StructuralParams) -> DecompositionResult:
    """Smoothed trend, seasonal, cycle and residual error at fixed parameters."""
    model = assemble(spec, params)
    f = ssm.filter(model, obs)
    sm = ssm.smooth(model, f)
    var = sm.var
    n = len(f)
    it, isea, icyc = _component_slices(spec)

    def pick(i):
        if i is None:
            return np.zeros(n), np.zeros(n)
        return sm.mean[:, i].copy(), var[:, i].copy()

    trend, trend_var = pick(it)
    seasonal, seasonal_var = pick(isea)
    cycle, cycle_var = pick(icyc)
    y = obs.values
    error = y - trend - seasonal - cycle
    Z = model.obs_row
    error_var = np.einsum("i,tij,j->t", Z, sm.cov, Z)
    error_var[obs.missing_mask] = np.nan
    return DecompositionResult(trend, trend_var, seasonal, seasonal_var, cycle, cycle_var,
                               error, error_var, params, spec, f.loglik)


class _Transform:
    """Map between unconstrained search vectors and StructuralParams.

    The observation variance is concentrated out of the likelihood, so the
    search runs over log variance ratios (disturbance variance divided by the
    observation variance) plus logistic-scaled damping and frequency.
    """

    def __init__(self, spec: StructuralSpec):
        self.spec = spec
        names = ["trend_var"]
        if spec.seasonal_enabled:
            names.append("seasonal_var")
        if spec.cycle_enabled:
            names.append("cycle_var")
        self.ratio_names = names
        self.names = list(names)
        if spec.cycle_enabled and spec.fixed_rho is None:
            self.names.append("rho")
        if spec.cycle_enabled and spec.fixed_lambda is None:
            self.names.append("frequency")

    def to_params(self, u, obs_var=1.0) -> StructuralParams:
        kw = {"obs_var": obs_var}
        for name, value in zip(self.names, u):
            if name == "rho":
                lo, hi = self.spec.rho_bounds
                kw[name] = float(lo + (hi - lo) * expit(value))
            elif name == "frequency":
                lo, hi = self.spec.lambda_bounds
                kw[name] = float(lo + (hi - lo) * expit(value))
            else:
                kw[name] = math.exp(value) * obs_var
        if self.spec.cycle_enabled:
            if self.spec.fixed_rho is not None:
                kw["rho"] = self.spec.fixed_rho
            if self.spec.fixed_lambda is not None:
                kw["frequency"] = self.spec.fixed_lambda
        return StructuralParams(**kw)

    def starts(self, ratio: float) -> np.ndarray:
        return np.array([math.log(ratio) if name in self.ratio_names else 0.0
                         for name in self.names])

    def bounds(self, settings: OptimizerSettings):
        lo, hi = settings.log_ratio_bounds
        return [(lo, hi) if name in self.ratio_names else (-12.0, 12.0) for name in self.names]


class _Objective:
    """Negative concentrated log-likelihood over the search vector.

    Runs the filter with unit observation variance, then profiles the scale
    out in closed form. Skips model validation and reuses preallocated arrays
    and a fixed sparsity pattern for the transition.
    """

    def __init__(self, spec, tr, obs, lo, hi):
        self.spec, self.tr, self.lo, self.hi = spec, tr, lo, hi
        generic = assemble(spec, StructuralParams(1.0, 1.0, 1.0, 1.0, 0.5, 1.0))
        self.T = generic.transition.copy()
        self.Q = np.zeros_like(self.T)
        self.P1 = np.zeros_like(self.T)
        self.Pinf = generic.diffuse_cov()
        self.Z = generic.obs_row.copy()
        self.a1 = np.zeros(generic.m)
        rows, cols = np.nonzero(self.T)
        self.rows, self.cols = rows, cols
        indptr = np.zeros(generic.m + 1, dtype=np.int64)
        np.add.at(indptr, rows + 1, 1)
        self.indptr = np.cumsum(indptr)
        self.indices = cols.astype(np.int64)
        self.slices = _component_slices(spec)
        self.y = np.ascontiguousarray(np.where(obs.missing_mask, 0.0, obs.values))
        self.missing = np.ascontiguousarray(obs.missing_mask)
        n, m = self.y.size, generic.m
        self.sv, self.sM = np.empty((1, m)), np.empty((1, m, m))
        self.v, self.F, self.Finf, self.ll = np.empty(n), np.empty(n), np.empty(n), np.empty(n)
        self.kind = np.empty(n, dtype=np.int64)

    def profile(self, u):
        """Return ``(concentrated loglik, observation variance)`` at ``u``."""
        p = self.tr.to_params(np.clip(u, self.lo, self.hi))
        it, isea, icyc = self.slices
        self.Q[it, it] = p.trend_var
        if isea is not None:
            self.Q[isea, isea] = p.seasonal_var
        if icyc is not None:
            c, s = math.cos(p.frequency), math.sin(p.frequency)
            j = slice(icyc, icyc + 2)
            self.T[j, j] = p.rho * np.array([[c, s], [-s, c]])
            self.Q[j, j] = p.cycle_var * np.eye(2)
            self.P1[j, j] = p.cycle_var / (1.0 - p.rho ** 2) * np.eye(2)
        data = np.ascontiguousarray(self.T[self.rows, self.cols])
        status, _ = _kernels.filter_kernel(
            self.y, self.missing, self.indptr, self.indices, data, self.Z, self.Q, 1.0,
            self.a1, self.P1, self.Pinf, False, self.sv, self.sM, self.sM, self.sv, self.sM,
            self.v, self.F, self.Finf, self.kind, self.ll)
        if status >= 0:
            return -np.inf, 1.0
        used = ~self.missing & (self.kind != _kernels.DIFFUSE_INFORMATIVE)
        n_eff = int(used.sum())
        F = self.F[used]
        sigma2 = max(float(np.sum(self.v[used] ** 2 / F)) / n_eff, 1e-300)
        value = -0.5 * (n_eff * (_kernels.LOG2PI + math.log(sigma2) + 1.0) + np.log(F).sum())
        return (value if np.isfinite(value) else -np.inf), sigma2

    def __call__(self, u):
        value, _ = self.profile(u)
        return -value if np.isfinite(value) else 1e300


def _series_scale(obs: ssm.ObservationSeries) -> float:
    y = obs.values
    ok = ~obs.missing_mask
    both = ok[1:] & ok[:-1]
    diffs = (y[1:] - y[:-1])[both]
    for sample in (diffs, y[ok]):
        if sample.size >= 2:
            sd = float(np.std(sample))
            if sd > 0 and np.isfinite(sd):
                return sd
    return 1.0


def fit(obs: ssm.ObservationSeries, spec: StructuralSpec = StructuralSpec(),
        optim: OptimizerSettings = OptimizerSettings()) -> DecompositionResult:
    """Maximum-likelihood fit followed by smoothing at the optimum.

    Nelder-Mead searches log variance ratios and logistic-scaled cycle
    parameters, with the observation variance profiled out, from a fixed grid
    of starting points. The series is divided by the standard deviation of
    its first differences during the search; variances are mapped back to
    the original units before the final smoothing pass, whose log-likelihood
    is the one reported.
    """
    if not isinstance(obs, ssm.ObservationSeries):
        obs = ssm.ObservationSeries(obs)
    tr = _Transform(spec)
    if obs.n_observed == 0:
        raise DataError("series has no observed values")
    n_diffuse = spec.state_dim - (2 if spec.cycle_enabled else 0)
    if obs.n_observed < len(tr.names) + 1 + n_diffuse:
        raise DataError(
            f"{obs.n_observed} observed values are too few to estimate {len(tr.names) + 1} "
            f"parameters with {n_diffuse} diffuse states")
    scale = _series_scale(obs)
    z = obs.with_values(obs.values / scale)
    bounds = tr.bounds(optim)
    lo_b = np.array([b[0] for b in bounds])
    hi_b = np.array([b[1] for b in bounds])
    objective = _Objective(spec, tr, z, lo_b, hi_b)

    def run(x0, xatol):
        return optimize.minimize(
            objective, x0, method="Nelder-Mead", bounds=bounds,
            options={"maxfev": optim.max_evals, "xatol": xatol, "fatol": np.inf,
                     "adaptive": len(x0) > 4})

    best = None
    nfev = 0
    for ratio in optim.start_ratios:
        res = run(np.clip(tr.starts(ratio), lo_b, hi_b), max(optim.start_xatol, optim.xatol))
        nfev += res.nfev
        if best is None or res.fun < best.fun:
            best = res
    # a collapsed simplex is not proof of an optimum: restart from the best
    # point until a full-tolerance run stops improving
    converged = False
    for _ in range(optim.max_restarts + 1):
        res = run(best.x, optim.xatol)
        nfev += res.nfev
        gain = best.fun - res.fun
        if res.fun <= best.fun:
            best = res
        if res.success and gain <= optim.restart_gain:
            converged = True
            break
    _, sigma2 = objective.profile(best.x)
    params = tr.to_params(np.clip(best.x, lo_b, hi_b), sigma2).scaled(scale)
    result = decompose(obs, spec, params)
    return replace(result, iterations=int(nfev), converged=converged)


def partial_residual(obs: ssm.ObservationSeries, d: DecompositionResult) -> ssm.ObservationSeries:
    """Observed series minus smoothed seasonal and cycle: trend plus error."""
    if len(obs) != len(d):
        raise ContractError(f"series has length {len(obs)}, decomposition has {len(d)}")
    return obs.with_values(obs.values - d.seasonal - d.cycle)
