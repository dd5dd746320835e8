"""Covariance-based stochastic subspace identification of common trends.

A panel of ``N`` aligned series is summarized by the block Hankel matrix of
its past/future cross-covariances. The SVD of that matrix gives the state
dimension and a balanced realization ``(A, C, M)``; the innovation gain
``K`` follows from the forward Riccati equation. Running the innovation
recursion over the panel yields the common-trend state trajectories, and the
columns of ``C`` are their loading maps.

Only invariants of the realization (eigenvalues of ``A``, the covariance
sequence ``C A^(k-1) M``, reconstructions) are meaningful; the state basis is
the one picked by the SVD.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy import linalg

from .errors import ContractError, DataError, DegeneracyError, NumericalError
from .ssm import ObservationSeries

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SeriesPanel:
    """Aligned series over boxes (and depths), one column per series.

    ``data`` is ``(length, N)`` with NaN marking missing values. ``trends``
    optionally holds each series' univariate smoothed trend, used by
    ``correlation_map``. ``depths`` (metres) and ``corners`` (south-west
    corner lat/lon in degrees) are per-series metadata.
    """

    series_ids: tuple[str, ...]
    data: np.ndarray
    time_origin: tuple[int, int] = (1, 1)
    depths: np.ndarray | None = None
    corners: np.ndarray | None = None
    trends: np.ndarray | None = None

    def __post_init__(self):
        data = np.array(self.data, dtype=float, ndmin=2)
        ids = tuple(str(s) for s in self.series_ids)
        if data.ndim != 2 or data.shape[1] != len(ids) or len(ids) < 1:
            raise ContractError(
                f"data must be (length, N) with N = {len(ids)} series ids, got {data.shape}")
        if len(set(ids)) != len(ids):
            raise ContractError("series ids must be unique")
        object.__setattr__(self, "series_ids", ids)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "time_origin", tuple(int(v) for v in self.time_origin))
        if self.trends is not None:
            trends = np.array(self.trends, dtype=float, ndmin=2)
            if trends.shape != data.shape:
                raise ContractError(f"trends shape {trends.shape} != data shape {data.shape}")
            object.__setattr__(self, "trends", trends)
        for name in ("depths", "corners"):
            value = getattr(self, name)
            if value is not None:
                value = np.asarray(value, dtype=float)
                if value.shape[0] != len(ids):
                    raise ContractError(f"{name} must have one entry per series")
                object.__setattr__(self, name, value)

    @property
    def length(self) -> int:
        return self.data.shape[0]

    @property
    def n_series(self) -> int:
        return self.data.shape[1]

    @property
    def missing(self) -> np.ndarray:
        return np.isnan(self.data)

    def index(self, series_id: str) -> int:
        try:
            return self.series_ids.index(series_id)
        except ValueError:
            raise ContractError(f"unknown series id {series_id!r}") from None

    def column(self, series_id: str) -> ObservationSeries:
        return ObservationSeries(self.data[:, self.index(series_id)], time_origin=self.time_origin)


@dataclass(frozen=True)
class HankelSpec:
    """Past/future block horizons and whether to centre the series first."""

    past: int = 1
    future: int = 1
    demean: bool = False

    def __post_init__(self):
        if self.past < 1 or self.future < 1:
            raise ContractError(f"horizons must be >= 1, got past={self.past}, future={self.future}")


@dataclass(frozen=True)
class RealizationModel:
    """Innovation-form realization ``x[t+1] = A x[t] + K e[t]``, ``y[t] = C x[t] + e[t]``.

    ``M`` is the reachability block (covariance of the next state with the
    current output), ``state_cov`` the Riccati solution and ``innov_cov``
    the innovation covariance ``lag0_cov - C state_cov C'``. ``mean`` is the
    panel mean removed before identification (zeros when not demeaned).
    ``n_projected`` counts eigenvalues of ``A`` pulled back inside the unit
    circle and ``riccati_ridge`` is the ridge the Riccati step had to add
    to ``lag0`` (0 when none).
    """

    A: np.ndarray
    C: np.ndarray
    K: np.ndarray
    M: np.ndarray
    lag0_cov: np.ndarray
    singular_values: np.ndarray
    state_cov: np.ndarray
    innov_cov: np.ndarray
    mean: np.ndarray
    n_projected: int = 0
    riccati_ridge: float = 0.0

    @property
    def n(self) -> int:
        return self.A.shape[0]

    def covariance_sequence(self, lags) -> list[np.ndarray]:
        """Implied ``Lambda_k = C A^(k-1) M`` for each ``k >= 1`` in ``lags``."""
        out = []
        for k in lags:
            out.append(self.C @ np.linalg.matrix_power(self.A, k - 1) @ self.M)
        return out


@dataclass(frozen=True)
class CommonTrendsResult:
    """State trajectories (``length x n``), loadings (``N x n``) and their ids.

    ``offsets`` holds the minimum of each trajectory, the reference point of
    the relative scale.
    """

    states: np.ndarray
    loadings: np.ndarray
    series_ids: tuple[str, ...]
    offsets: np.ndarray
    time_origin: tuple[int, int] = (1, 1)

    @property
    def n(self) -> int:
        return self.states.shape[1]


def sample_covariances(Y: np.ndarray, max_lag: int) -> list[np.ndarray]:
    """``[Lambda_0, ..., Lambda_max_lag]`` with ``Lambda_k = sum_t y[t+k] y[t]' / length``.

    The divisor is the full length for every lag, which keeps the implied
    block Toeplitz covariance positive semidefinite.
    """
    n = Y.shape[0]
    return [Y[k:].T @ Y[:n - k] / n for k in range(max_lag + 1)]


def _panel_matrix(panel: SeriesPanel, spec: HankelSpec):
    if panel.missing.any():
        col = int(np.flatnonzero(panel.missing.any(axis=0))[0])
        raise ContractError(
            f"series {panel.series_ids[col]!r} has missing values; fill them before "
            "identification (for example with the univariate smoothed trend)")
    if panel.length <= spec.past + spec.future + 2:
        raise DataError(
            f"length {panel.length} is too short for past={spec.past}, future={spec.future}")
    Y = panel.data
    mean = Y.mean(axis=0) if spec.demean else np.zeros(panel.n_series)
    return Y - mean, mean


def build_hankel(panel: SeriesPanel, spec: HankelSpec = HankelSpec(), shift: int = 0):
    """Block Hankel matrix of lagged covariances and the lag-0 covariance.

    Block ``(i, j)`` (1-based, ``i <= future``, ``j <= past``) is
    ``Lambda_{i+j-1+shift}``. ``shift=1`` gives the shifted matrix used to
    estimate the transition. Returns ``(H, lag0)``.
    """
    Y, _ = _panel_matrix(panel, spec)
    N = panel.n_series
    lags = sample_covariances(Y, spec.past + spec.future - 1 + shift)
    H = np.empty((spec.future * N, spec.past * N))
    for i in range(spec.future):
        for j in range(spec.past):
            H[i * N:(i + 1) * N, j * N:(j + 1) * N] = lags[i + j + 1 + shift]
    return H, lags[0]


def select_rank(singular_values, *, fixed: int | None = None, energy: float | None = None) -> int:
    """State dimension from a descending singular-value spectrum.

    Exactly one policy: ``fixed`` keeps ``min(fixed, numerically nonzero
    count)``; ``energy`` keeps the smallest count whose cumulative share of
    the total reaches the threshold.
    """
    sv = np.asarray(singular_values, dtype=float).reshape(-1)
    if sv.size == 0:
        raise ContractError("empty singular-value spectrum")
    if np.any(sv < 0) or np.any(np.diff(sv) > 0):
        raise ContractError("singular values must be non-negative and descending")
    if (fixed is None) == (energy is None):
        raise ContractError("give exactly one of fixed= or energy=")
    nonzero = int(np.sum(sv > 1e-12 * sv[0])) if sv[0] > 0 else 0
    if fixed is not None:
        if fixed < 1:
            raise ContractError("fixed rank must be >= 1")
        return min(int(fixed), nonzero)
    if not 0.0 < energy <= 1.0:
        raise ContractError("energy threshold must lie in (0, 1]")
    share = np.cumsum(sv[:nonzero]) / sv[:nonzero].sum()
    return int(np.argmax(share >= energy - 1e-12)) + 1


def _project_unit_disk(A):
    w, V = np.linalg.eig(A)
    bad = np.abs(w) > 1.0
    if not bad.any():
        return A, 0
    w = np.where(bad, w / np.abs(w) * (1.0 - 1e-8), w)
    A_new = (V * w) @ np.linalg.inv(V)
    return np.real_if_close(A_new, tol=1e6).real, int(bad.sum())


def realize(H, lag0, H_shift, n: int, *, riccati_tol: float = 1e-10,
            riccati_max_iter: int = 10_000, mean=None) -> RealizationModel:
    """Balanced realization of order ``n`` from the Hankel SVD.

    ``H_shift`` is the one-step shifted Hankel built with the same horizons.
    Transition eigenvalues outside the unit circle are projected radially to
    modulus ``1 - 1e-8`` (logged and counted in ``n_projected``).
    """
    H = np.asarray(H, dtype=float)
    H_shift = np.asarray(H_shift, dtype=float)
    lag0 = np.asarray(lag0, dtype=float)
    N = lag0.shape[0]
    if H.shape != H_shift.shape or H.shape[0] % N or H.shape[1] % N:
        raise ContractError(
            f"Hankel shapes {H.shape}, {H_shift.shape} do not match block size {N}")
    U, s, Vt = np.linalg.svd(H)
    if not 1 <= n <= s.size or not s[n - 1] > 0:
        raise ContractError(f"requested order {n} exceeds the rank of H")
    if s[0] / s[n - 1] > 1e12:
        raise DegeneracyError(
            f"singular values span a ratio of {s[0] / s[n - 1]:.3g} at order {n}; "
            "choose a smaller state dimension")
    root = np.sqrt(s[:n])
    O = U[:, :n] * root
    R = root[:, None] * Vt[:n]
    C = O[:N]
    M = R[:, :N]
    A = (U[:, :n].T @ H_shift @ Vt[:n].T) / np.outer(root, root)
    A, n_projected = _project_unit_disk(A)
    if n_projected:
        log.warning("projected %d transition eigenvalue(s) onto the unit disk", n_projected)
    K, Pi, ridge = _riccati(A, C, M, lag0, riccati_tol, riccati_max_iter)
    innov = lag0 + ridge * np.eye(N) - C @ Pi @ C.T
    return RealizationModel(A, C, K, M, 0.5 * (lag0 + lag0.T), s, Pi, 0.5 * (innov + innov.T),
                            np.zeros(N) if mean is None else np.asarray(mean, dtype=float),
                            n_projected, ridge)


def identify(panel: SeriesPanel, spec: HankelSpec = HankelSpec(), *, n: int | None = None,
             energy: float | None = None) -> RealizationModel:
    """``build_hankel`` + ``select_rank`` + ``realize`` in one call (default ``n=4``)."""
    if n is None and energy is None:
        n = 4
    _, mean = _panel_matrix(panel, spec)
    H, lag0 = build_hankel(panel, spec)
    H_shift, _ = build_hankel(panel, spec, shift=1)
    s = np.linalg.svd(H, compute_uv=False)
    order = select_rank(s, fixed=n, energy=energy)
    return realize(H, lag0, H_shift, order, mean=mean)


def solve_riccati(A, C, M, lag0, *, tol: float = 1e-10, max_iter: int = 10_000):
    """Forward Riccati fixed point for the innovation gain.

    Iterates ``Pi <- A Pi A' + (M - A Pi C') D^-1 (M - A Pi C')'`` with
    ``D = lag0 - C Pi C'`` from ``Pi = 0`` until the largest entry change,
    extrapolated over the observed contraction rate, drops below ``tol``. Returns ``(K, Pi)`` with ``K = (M - A Pi C') D^-1``.

    If ``D`` loses definiteness the iteration restarts with ``lag0 + r I``,
    ``r = 1e-10`` first and then ten times larger per retry. Sample
    covariances of wide panels are often not positive real, so a visible
    ridge is common there; ``realize`` records the value used. When the
    iteration hits ``max_iter`` (slow contraction near unit roots) the
    equation is solved directly and the result is checked before use.
    """
    K, Pi, _ = _riccati(np.atleast_2d(A), np.atleast_2d(C), np.atleast_2d(M),
                        np.atleast_2d(lag0), tol, max_iter)
    return K, Pi


class _Indefinite(Exception):
    pass


def _riccati_pass(A, C, M, lag0, tol, max_iter):
    n = A.shape[0]
    Pi = np.zeros((n, n))
    changes = []
    for it in range(max_iter):
        G = M - A @ Pi @ C.T
        D = lag0 - C @ Pi @ C.T
        try:
            GDinv = linalg.cho_solve(linalg.cho_factor(0.5 * (D + D.T)), G.T).T
        except linalg.LinAlgError:
            raise _Indefinite(it) from None
        new = A @ Pi @ A.T + GDinv @ G.T
        new = 0.5 * (new + new.T)
        change = float(np.max(np.abs(new - Pi))) if n else 0.0
        Pi = new
        changes.append(change)
        if not np.isfinite(change):
            raise NumericalError(f"Riccati iteration diverged at iteration {it}")
        # linear convergence: the distance to the fixed point is about
        # change * r / (1 - r), with r the ratio of successive changes
        r = change / changes[-2] if len(changes) > 1 and changes[-2] > 0 else 0.0
        if change < tol and (r < 0.5 or change * r / (1.0 - r) < tol):
            break
    else:
        Pi = _dare(A, C, M, lag0)
        if Pi is None:
            raise NumericalError(
                f"Riccati iteration did not converge in {max_iter} iterations and the "
                f"direct solver found no admissible solution; last changes {changes[-5:]}")
    G = M - A @ Pi @ C.T
    D = lag0 - C @ Pi @ C.T
    try:
        K = linalg.cho_solve(linalg.cho_factor(0.5 * (D + D.T)), G.T).T
    except linalg.LinAlgError:
        raise _Indefinite(len(changes)) from None
    return K, Pi


def _dare(A, C, M, lag0):
    """Direct (Schur-based) solve of the same equation, or None.

    With ``X = -Pi`` the equation is the standard discrete algebraic Riccati
    form with ``a = A'``, ``b = C'``, ``q = 0``, ``r = lag0``, ``s = M``; its
    stabilizing solution is the minimal ``Pi`` the fixed point converges to.
    Used when the fixed point is too slow, typically near unit roots.
    """
    try:
        Pi = -linalg.solve_discrete_are(A.T, C.T, np.zeros_like(A), lag0, s=M)
    except (linalg.LinAlgError, ValueError):
        return None
    Pi = 0.5 * (Pi + Pi.T)
    if not np.all(np.isfinite(Pi)):
        return None
    G = M - A @ Pi @ C.T
    D = lag0 - C @ Pi @ C.T
    try:
        resid = A @ Pi @ A.T + G @ linalg.cho_solve(linalg.cho_factor(0.5 * (D + D.T)), G.T) - Pi
    except linalg.LinAlgError:
        return None
    if np.max(np.abs(resid)) > 1e-8 * max(1.0, float(np.max(np.abs(Pi)))):
        return None
    return Pi


def _riccati(A, C, M, lag0, tol, max_iter):
    """Returns ``(K, Pi, ridge)``; ``ridge`` is 0 when no regularization was needed."""
    n = A.shape[0]
    if C.shape[1] != n or M.shape[0] != n or M.shape[1] != C.shape[0] \
            or lag0.shape != (C.shape[0], C.shape[0]):
        raise ContractError(
            f"inconsistent shapes A {A.shape}, C {C.shape}, M {M.shape}, lag0 {lag0.shape}")
    top = max(float(np.max(np.abs(np.diag(lag0)))), 1e-300)
    ridge = 0.0
    trace = []
    eye = np.eye(lag0.shape[0])
    while True:
        try:
            K, Pi = _riccati_pass(A, C, M, lag0 + ridge * eye, tol, max_iter)
            break
        except _Indefinite as exc:
            trace.append((ridge, exc.args[0]))
            ridge = 1e-10 if ridge == 0.0 else 10.0 * ridge
            if ridge > top:
                raise NumericalError(
                    "innovation covariance stays indefinite even with a ridge as large as "
                    f"the lag-0 variances; (ridge, failing iteration) trace {trace}") from None
    if ridge:
        log.warning("Riccati iteration needed a ridge of %.3g on the lag-0 covariance", ridge)
    return K, Pi, ridge


def extract_trends(model: RealizationModel, panel: SeriesPanel) -> CommonTrendsResult:
    """Run the innovation recursion from a zero state over the panel."""
    Y = panel.data
    if Y.shape[1] != model.C.shape[0]:
        raise ContractError(
            f"panel has {Y.shape[1]} series, realization has {model.C.shape[0]} outputs")
    if panel.missing.any():
        raise ContractError("panel has missing values; fill them before extracting trends")
    Y = Y - model.mean
    A, C, K = model.A, model.C, model.K
    x = np.zeros(model.n)
    states = np.empty((Y.shape[0], model.n))
    for t in range(Y.shape[0]):
        states[t] = x
        x = A @ x + K @ (Y[t] - C @ x)
    return CommonTrendsResult(states, model.C.copy(), panel.series_ids, states.min(axis=0),
                              panel.time_origin)


def _check_trend(result, j):
    if not 1 <= j <= result.n:
        raise ContractError(f"trend index {j} out of range 1..{result.n}")


def loading_map(result: CommonTrendsResult, j: int) -> dict[str, float]:
    """Loading of trend ``j`` (1-based) for every series, keyed by series id."""
    _check_trend(result, j)
    return {sid: float(v) for sid, v in zip(result.series_ids, result.loadings[:, j - 1])}


def _pearson(a, b):
    a = a - a.mean()
    b = b - b.mean()
    den = np.sqrt((a @ a) * (b @ b))
    if not den > 0 or not np.isfinite(den):
        return float("nan")
    return float(np.clip((a @ b) / den, -1.0, 1.0))


def correlation_map(panel: SeriesPanel, result: CommonTrendsResult, j: int) -> dict[str, float]:
    """Correlation of each series' univariate trend with trend ``j``.

    Uses ``panel.trends`` when present, else the panel data itself. A
    constant series has no defined correlation and maps to NaN.
    """
    _check_trend(result, j)
    source = panel.trends if panel.trends is not None else panel.data
    if source.shape[0] != result.states.shape[0]:
        raise ContractError("panel and trend result have different lengths")
    x = result.states[:, j - 1]
    return {sid: _pearson(source[:, i], x) for i, sid in enumerate(panel.series_ids)}


def reconstruct(result: CommonTrendsResult, series_id: str, trends) -> ObservationSeries:
    """Sum of loading times trajectory over ``trends`` (1-based), centred to mean zero."""
    try:
        i = result.series_ids.index(series_id)
    except ValueError:
        raise ContractError(f"unknown series id {series_id!r}") from None
    trends = sorted(set(int(j) for j in trends))
    for j in trends:
        _check_trend(result, j)
    cols = [j - 1 for j in trends]
    signal = result.states[:, cols] @ result.loadings[i, cols] if cols \
        else np.zeros(result.states.shape[0])
    return ObservationSeries(signal - signal.mean(), time_origin=result.time_origin)
