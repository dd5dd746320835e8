"""Post-processing of trends: change points, rescalings and stratification."""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, DataError
from .ssm import ObservationSeries

SIGN_CHANGE = "sign-change"
INFLECTION = "inflection"
CHANGE_POINT_HEADER = ("series_id", "depth_m", "index", "year", "month", "type",
                       "slope_before", "slope_after")


@dataclass(frozen=True)
class ChangePoint:
    """A persistent change in trend slope.

    Slopes are per step (per month for monthly data). ``persistence`` is the
    number of steps until the next reported point, or to the end of the
    series.
    """

    index: int
    year: int
    month: int
    kind: str
    slope_before: float
    slope_after: float
    persistence: int


def local_slopes(x: np.ndarray, window: int) -> np.ndarray:
    """Least-squares slope over a centred window; NaN where it does not fit.

    The window for step ``t`` covers ``t - window // 2`` up to
    ``t + window - window // 2 - 1``.
    """
    x = np.asarray(x, dtype=float)
    if window < 2:
        raise ContractError("slope window must be at least 2 steps")
    k = np.arange(window) - (window - 1) / 2.0
    kernel = k / np.sum(k * k)
    core = np.correlate(x, kernel, mode="valid")
    out = np.full(x.size, np.nan)
    lo = window // 2
    out[lo:lo + core.size] = core
    return out


def _values(series):
    if isinstance(series, ObservationSeries):
        return series.values
    return np.asarray(series, dtype=float).reshape(-1)


def _like(series, values):
    if isinstance(series, ObservationSeries):
        return ObservationSeries(values, series.missing_mask, series.time_origin, series.period)
    return values


def detect_change_points(trend, min_persist: int = 24, slope_window: int = 12,
                         inflection_factor: float = 3.0) -> list[ChangePoint]:
    """Sign changes and strong inflections of a smooth trend's slope.

    For each step the mean centred-window slope over the preceding and the
    following ``min_persist`` steps is compared. Opposite signs make a
    sign-change candidate; same sign with magnitudes differing by at least
    ``inflection_factor`` (one of them possibly zero) makes an inflection
    candidate. Candidates closer than ``min_persist`` form one group. A
    group with sign changes reports the trend extremum among them; otherwise
    the strongest inflection is reported.
    """
    if isinstance(trend, ObservationSeries):
        origin = trend.time_origin
        if trend.missing_mask.any():
            raise DataError("trend has missing values; pass a smoothed, complete trend")
    else:
        origin = (1, 1)
    x = _values(trend)
    if np.isnan(x).any():
        raise DataError("trend has missing values; pass a smoothed, complete trend")
    if min_persist < 1 or inflection_factor <= 1.0:
        raise ContractError("need min_persist >= 1 and inflection_factor > 1")
    n = x.size
    if n < 2 * min_persist + slope_window:
        raise DataError(
            f"series of length {n} is shorter than 2 * min_persist + slope_window = "
            f"{2 * min_persist + slope_window}")

    s = local_slopes(x, slope_window)
    valid = np.flatnonzero(~np.isnan(s))
    first, last = valid[0], valid[-1] + 1
    csum = np.concatenate(([0.0], np.cumsum(np.nan_to_num(s))))
    t = np.arange(first + min_persist, last - min_persist + 1)
    before = (csum[t] - csum[t - min_persist]) / min_persist
    after = (csum[t + min_persist] - csum[t]) / min_persist
    span = np.ptp(x)
    tol = 1e-9 * span / n if span > 0 else 0.0
    big = np.maximum(np.abs(before), np.abs(after))
    small = np.minimum(np.abs(before), np.abs(after))
    sign = (before * after < 0) & (small > tol)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(small > tol, big / small, np.inf)
    infl = ~sign & (big > tol) & (ratio >= inflection_factor)
    cand = np.flatnonzero(sign | infl)

    picked = []
    if cand.size:
        groups = np.split(cand, np.flatnonzero(np.diff(cand) > min_persist) + 1)
        for g in groups:
            gs = g[sign[g]]
            if gs.size:
                falling_then_rising = before[gs[0]] < 0
                vals = x[t[gs]]
                j = gs[np.argmin(vals) if falling_then_rising else np.argmax(vals)]
                picked.append((int(t[j]), SIGN_CHANGE, before[j], after[j]))
            else:
                score = np.abs(np.log(np.where(np.isfinite(ratio[g]), ratio[g], 1e300)))
                j = g[int(np.argmax(score))]
                picked.append((int(t[j]), INFLECTION, before[j], after[j]))

    out = []
    k0 = origin[1] - 1
    for i, (idx, kind, b, a) in enumerate(picked):
        nxt = picked[i + 1][0] if i + 1 < len(picked) else n
        m = k0 + idx
        out.append(ChangePoint(idx, origin[0] + m // 12, m % 12 + 1, kind,
                               float(b), float(a), nxt - idx))
    return out


def relative_scale(series):
    """Shift so the minimum (over observed steps) is exactly zero."""
    x = _values(series)
    return _like(series, x - np.nanmin(x))


def standardize(series):
    """Remove the mean over observed steps."""
    x = _values(series)
    y = x - np.nanmean(x)
    # a second pass cancels the rounding left by the first
    return _like(series, y - np.nanmean(y))


def stratification(shallow, deep):
    """Pointwise ``shallow - deep``; both series must be aligned."""
    a, b = _values(shallow), _values(deep)
    if a.shape != b.shape:
        raise ContractError(f"series lengths differ: {a.size} vs {b.size}")
    if isinstance(shallow, ObservationSeries) and isinstance(deep, ObservationSeries) \
            and shallow.time_origin != deep.time_origin:
        raise ContractError("series have different time origins")
    out = a - b
    if isinstance(shallow, ObservationSeries):
        return ObservationSeries(out, time_origin=shallow.time_origin, period=shallow.period)
    return out


def write_change_points(path, rows) -> None:
    """Write ``(series_id, depth_m, ChangePoint)`` rows as the change-point CSV."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CHANGE_POINT_HEADER)
        for sid, depth, cp in rows:
            w.writerow((sid, repr(float(depth)), cp.index, cp.year, cp.month, cp.kind,
                        repr(cp.slope_before), repr(cp.slope_after)))
