"""Gridded monthly fields: CSV ingest, box averaging and product export.

Grid CSV rows are ``lat,lon,depth_m,year,month,value`` with an empty
``value`` for missing data. Panel CSV rows are
``box_id,depth_m,year,month,value``; the line-JSON variant carries the same
keys, one object per line. Floats are written in shortest round-trip form,
so export followed by ingest reproduces every value exactly.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import sparse

from .errors import ContractError, DataError
from .subspace import SeriesPanel

GRID_HEADER = ("lat", "lon", "depth_m", "year", "month", "value")
PANEL_HEADER = ("box_id", "depth_m", "year", "month", "value")


def normalize_lon(lon):
    """Map longitudes to ``[0, 360)``."""
    return np.mod(np.asarray(lon, dtype=float), 360.0)


def month_index(year, month, origin) -> np.ndarray:
    return (np.asarray(year) - origin[0]) * 12 + (np.asarray(month) - origin[1])


def month_label(origin, k: int) -> str:
    m = origin[1] - 1 + k
    return f"{origin[0] + m // 12:04d}-{m % 12 + 1:02d}"


def fmt_float(x) -> str:
    x = float(x)
    return "" if math.isnan(x) else repr(x)


@dataclass(frozen=True)
class GriddedDataset:
    """Regular lat/lon grid of monthly values at a set of depths.

    ``values`` is ``(length, n_depths, n_lat, n_lon)`` with NaN for missing
    data; ``lat``/``lon`` are increasing cell-centre coordinates with a
    regular step (longitudes in ``[0, 360)``).
    """

    lat: np.ndarray
    lon: np.ndarray
    depths: np.ndarray
    values: np.ndarray
    time_origin: tuple[int, int] = (1, 1)

    def __post_init__(self):
        lat = np.asarray(self.lat, dtype=float).reshape(-1)
        lon = normalize_lon(self.lon).reshape(-1)
        depths = np.asarray(self.depths, dtype=float).reshape(-1)
        values = np.asarray(self.values, dtype=float)
        for name, axis in (("lat", lat), ("lon", lon), ("depth", depths)):
            if axis.size == 0 or np.any(np.diff(axis) <= 0):
                raise DataError(f"{name} axis must be non-empty and strictly increasing")
        if values.shape[1:] != (depths.size, lat.size, lon.size) or values.ndim != 4:
            raise DataError(
                f"values shape {values.shape} does not match (time, {depths.size}, "
                f"{lat.size}, {lon.size})")
        object.__setattr__(self, "lat", lat)
        object.__setattr__(self, "lon", lon)
        object.__setattr__(self, "depths", depths)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "time_origin", (int(self.time_origin[0]), int(self.time_origin[1])))

    @property
    def length(self) -> int:
        return self.values.shape[0]

    @property
    def n_cells(self) -> int:
        """Number of cells carrying data at some depth and month."""
        return int(np.any(~np.isnan(self.values), axis=(0, 1)).sum())

    def depth_index(self, depth: float) -> int:
        hit = np.flatnonzero(np.isclose(self.depths, depth, rtol=0, atol=1e-9))
        if hit.size == 0:
            raise DataError(f"unknown depth {depth} m; available {self.depths.tolist()}")
        return int(hit[0])


@dataclass(frozen=True)
class BoxDefinition:
    """Square box named by its south-west corner."""

    south: float
    west: float
    size: float = 5.0

    @property
    def box_id(self) -> str:
        return box_id(self.south, self.west)

    def contains(self, lat, lon):
        lon = normalize_lon(lon)
        dlon = np.mod(lon - self.west, 360.0)
        return (lat >= self.south) & (lat < self.south + self.size) & (dlon < self.size)


def box_id(south: float, west: float) -> str:
    hemi = "N" if south >= 0 else "S"
    return f"{abs(south):g}{hemi}_{float(normalize_lon(west)):g}E"


def _regular_axis(values, name):
    u = np.unique(values)
    if u.size == 1:
        return u
    step = np.min(np.diff(u))
    k = (u - u[0]) / step
    if np.max(np.abs(k - np.round(k))) > 1e-6:
        raise DataError(f"{name} coordinates are not on a regular grid")
    return u[0] + step * np.arange(int(round(k[-1])) + 1)


def ingest(path, fmt: str = "grid-csv", depths=None) -> GriddedDataset:
    """Read a grid CSV into a validated dataset.

    ``depths`` optionally restricts the accepted depth levels; a row at any
    other depth is an error. Errors cite the offending line number.
    """
    if fmt != "grid-csv":
        raise ContractError(f"unsupported grid format {fmt!r}; expected 'grid-csv'")
    allowed = None if depths is None else np.asarray(depths, dtype=float)
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != GRID_HEADER:
            raise DataError(f"{path}: line 1: header must be {','.join(GRID_HEADER)}")
        for lineno, rec in enumerate(reader, start=2):
            if not rec:
                continue
            if len(rec) != 6:
                raise DataError(f"{path}: line {lineno}: expected 6 fields, got {len(rec)}")
            try:
                lat, lon, depth = float(rec[0]), float(rec[1]), float(rec[2])
                year, month = int(rec[3]), int(rec[4])
                value = float(rec[5]) if rec[5].strip() else math.nan
            except ValueError as exc:
                raise DataError(f"{path}: line {lineno}: {exc}") from None
            if not (-90 <= lat <= 90) or not 1 <= month <= 12:
                raise DataError(f"{path}: line {lineno}: latitude or month out of range")
            if math.isinf(value) or not math.isfinite(lon) or not math.isfinite(depth):
                raise DataError(f"{path}: line {lineno}: non-finite field")
            if allowed is not None and not np.any(np.isclose(allowed, depth, rtol=0, atol=1e-9)):
                raise DataError(f"{path}: line {lineno}: unknown depth {depth} m")
            rows.append((lat, lon % 360.0, depth, year, month, value, lineno))
    if not rows:
        raise DataError(f"{path}: no data rows")
    arr = np.array([r[:6] for r in rows], dtype=float)
    lines = np.array([r[6] for r in rows])

    ym = arr[:, 3].astype(int) * 12 + arr[:, 4].astype(int) - 1
    months = np.unique(ym)
    origin = (int(months[0] // 12), int(months[0] % 12 + 1))
    present = np.zeros(months[-1] - months[0] + 1, dtype=bool)
    present[months - months[0]] = True
    if not present.all():
        gap = int(np.flatnonzero(~present)[0])
        raise DataError(f"{path}: time axis has a gap; month {month_label(origin, gap)} is absent")

    lat_ax = _regular_axis(arr[:, 0], "latitude")
    lon_ax = _regular_axis(arr[:, 1], "longitude")
    dep_ax = np.unique(arr[:, 2])
    ti = ym - months[0]
    di = np.searchsorted(dep_ax, arr[:, 2])
    li = _nearest(lat_ax, arr[:, 0])
    oi = _nearest(lon_ax, arr[:, 1])
    flat = ((ti * dep_ax.size + di) * lat_ax.size + li) * lon_ax.size + oi
    order = np.argsort(flat, kind="stable")
    dup = np.flatnonzero(np.diff(flat[order]) == 0)
    if dup.size:
        first, second = sorted((lines[order[dup[0]]], lines[order[dup[0] + 1]]))
        raise DataError(f"{path}: line {second}: duplicate cell (first seen on line {first})")
    values = np.full((present.size, dep_ax.size, lat_ax.size, lon_ax.size), np.nan)
    values.reshape(-1)[flat] = arr[:, 5]
    return GriddedDataset(lat_ax, lon_ax, dep_ax, values, origin)


def _nearest(axis, x):
    if axis.size == 1:
        return np.zeros(x.size, dtype=int)
    step = axis[1] - axis[0]
    return np.round((x - axis[0]) / step).astype(int)


def _box_assignment(ds: GriddedDataset, region, box_size):
    south, north, west, east = (float(v) for v in region)
    west, east = float(normalize_lon(west)), float(normalize_lon(east))
    if east <= west:
        east += 360.0
    n_lat = (north - south) / box_size
    n_lon = (east - west) / box_size
    if min(n_lat, n_lon) < 1 or abs(n_lat - round(n_lat)) > 1e-9 or abs(n_lon - round(n_lon)) > 1e-9:
        raise ContractError(
            f"region {region} is not a whole number of {box_size} degree boxes")
    n_lat, n_lon = int(round(n_lat)), int(round(n_lon))
    bi = np.floor((ds.lat - south) / box_size + 1e-9).astype(int)
    bj = np.floor(np.mod(ds.lon - west, 360.0) / box_size + 1e-9).astype(int)
    bi[(bi < 0) | (bi >= n_lat)] = -1
    bj[(bj < 0) | (bj >= n_lon)] = -1
    boxes = [BoxDefinition(south + i * box_size, (west + j * box_size) % 360.0, box_size)
             for i in range(n_lat) for j in range(n_lon)]
    cell_box = np.where((bi[:, None] >= 0) & (bj[None, :] >= 0),
                        bi[:, None] * n_lon + bj[None, :], -1)
    return boxes, cell_box


def box_average(ds: GriddedDataset, region=(20.0, 65.0, 110.0, 250.0), box_size: float = 5.0,
                min_coverage: float = 0.5, depth: float | None = None, weighting: str = "none",
                max_missing_fraction: float = 0.5) -> SeriesPanel:
    """Average cells into boxes for one depth.

    ``region`` is ``(south, north, west, east)`` in degrees and must be a
    whole number of boxes. A cell belongs to the box whose half-open
    ``[SW, SW + size)`` range holds its centre. A box's ocean cells are those
    with data in some month; a box-month is missing when fewer than
    ``min_coverage`` of them report. Boxes without ocean cells, or missing in
    more than ``max_missing_fraction`` of months, are dropped. Panel columns
    follow box order (south to north, then west to east).
    """
    if weighting not in ("none", "cos"):
        raise ContractError(f"weighting must be 'none' or 'cos', got {weighting!r}")
    if not 0.0 <= min_coverage <= 1.0 or not 0.0 <= max_missing_fraction <= 1.0:
        raise ContractError("coverage thresholds must lie in [0, 1]")
    if depth is None:
        if ds.depths.size != 1:
            raise ContractError("dataset has several depths; pass depth=")
        d = 0
    else:
        d = ds.depth_index(depth)
    boxes, cell_box = _box_assignment(ds, region, box_size)
    field = ds.values[:, d].reshape(ds.length, -1)
    flat_box = cell_box.reshape(-1)
    w = np.ones(cell_box.shape)
    if weighting == "cos":
        w = np.broadcast_to(np.cos(np.deg2rad(ds.lat))[:, None], cell_box.shape)
    w = w.reshape(-1)
    ok = ~np.isnan(field)
    ocean = ok.any(axis=0) & (flat_box >= 0)
    cells = np.flatnonzero(ocean)
    member = sparse.csr_matrix(
        (np.ones(cells.size), (cells, flat_box[cells])), shape=(field.shape[1], len(boxes)))
    weighted = member.multiply(w[:, None]).tocsr()
    sums = np.asarray(weighted.T @ np.where(ok, field, 0.0).T).T
    wsum = np.asarray(weighted.T @ ok.T.astype(float)).T
    count = np.asarray(member.T @ ok.T.astype(float)).T
    n_ocean = np.asarray(member.sum(axis=0)).reshape(-1)
    with np.errstate(invalid="ignore", divide="ignore"):
        means = sums / wsum
        coverage = count / n_ocean
    means[~(coverage >= min_coverage) | (count == 0)] = np.nan
    keep = (n_ocean > 0) & (np.isnan(means).mean(axis=0) <= max_missing_fraction)
    idx = np.flatnonzero(keep)
    kept = [boxes[i] for i in idx]
    return SeriesPanel(
        tuple(b.box_id for b in kept), means[:, idx], ds.time_origin,
        depths=np.full(idx.size, ds.depths[d]),
        corners=np.array([(b.south, b.west) for b in kept]).reshape(-1, 2))


def align_depths(panels: dict) -> dict:
    """Restrict per-depth panels to the boxes present at every depth."""
    if not panels:
        return {}
    common = set.intersection(*(set(p.series_ids) for p in panels.values()))
    out = {}
    for depth, p in panels.items():
        cols = [i for i, s in enumerate(p.series_ids) if s in common]
        out[depth] = SeriesPanel(
            tuple(p.series_ids[i] for i in cols), p.data[:, cols], p.time_origin,
            depths=None if p.depths is None else p.depths[cols],
            corners=None if p.corners is None else p.corners[cols],
            trends=None if p.trends is None else p.trends[:, cols])
    return out


def _calendar(origin, length):
    k = origin[1] - 1 + np.arange(length)
    return origin[0] + k // 12, k % 12 + 1


def _write_grid_csv(ds: GriddedDataset, path):
    years, months = _calendar(ds.time_origin, ds.length)
    has_data = np.any(~np.isnan(ds.values), axis=0)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(GRID_HEADER)
        for t in range(ds.length):
            for d, depth in enumerate(ds.depths):
                for i, j in zip(*np.nonzero(has_data[d])):
                    w.writerow((repr(float(ds.lat[i])), repr(float(ds.lon[j])), repr(float(depth)),
                                int(years[t]), int(months[t]), fmt_float(ds.values[t, d, i, j])))


def _panel_records(panels):
    for depth, p in panels.items():
        years, months = _calendar(p.time_origin, p.length)
        for i, sid in enumerate(p.series_ids):
            for t in range(p.length):
                yield sid, float(depth), int(years[t]), int(months[t]), p.data[t, i]


def _as_depth_map(product):
    if isinstance(product, SeriesPanel):
        if product.depths is None or np.unique(product.depths).size != 1:
            raise ContractError("panel export needs a single depth recorded in panel.depths")
        return {float(product.depths[0]): product}
    return dict(product)


def export(product, path, fmt: str | None = None) -> None:
    """Write a dataset or panel(s) to disk.

    ``GriddedDataset`` supports ``grid-csv``. A ``SeriesPanel`` (or a
    ``{depth: SeriesPanel}`` mapping) supports ``panel-csv`` and ``jsonl``.
    Output order is deterministic.
    """
    path = Path(path)
    if isinstance(product, GriddedDataset):
        if fmt not in (None, "grid-csv"):
            raise ContractError(f"datasets export as grid-csv, not {fmt!r}")
        _write_grid_csv(product, path)
        return
    panels = _as_depth_map(product)
    fmt = fmt or ("jsonl" if path.suffix == ".jsonl" else "panel-csv")
    if fmt == "panel-csv":
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(PANEL_HEADER)
            for sid, depth, year, month, value in _panel_records(panels):
                w.writerow((sid, repr(depth), year, month, fmt_float(value)))
    elif fmt == "jsonl":
        with open(path, "w", encoding="utf-8") as fh:
            for sid, depth, year, month, value in _panel_records(panels):
                rec = dict(zip(PANEL_HEADER, (sid, depth, year, month,
                                              None if math.isnan(value) else float(value))))
                fh.write(json.dumps(rec) + "\n")
    else:
        raise ContractError(f"unsupported panel format {fmt!r}")


def read_panels(path, fmt: str | None = None) -> dict:
    """Read a panel CSV or line-JSON file into ``{depth: SeriesPanel}``.

    Series keep their first-appearance order; every series must cover the
    same contiguous months.
    """
    path = Path(path)
    fmt = fmt or ("jsonl" if path.suffix == ".jsonl" else "panel-csv")
    records = []
    if fmt == "panel-csv":
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header is None or tuple(h.strip() for h in header) != PANEL_HEADER:
                raise DataError(f"{path}: line 1: header must be {','.join(PANEL_HEADER)}")
            for lineno, rec in enumerate(reader, start=2):
                if not rec:
                    continue
                if len(rec) != 5:
                    raise DataError(f"{path}: line {lineno}: expected 5 fields, got {len(rec)}")
                try:
                    records.append((rec[0], float(rec[1]), int(rec[2]), int(rec[3]),
                                    float(rec[4]) if rec[4].strip() else math.nan, lineno))
                except ValueError as exc:
                    raise DataError(f"{path}: line {lineno}: {exc}") from None
    elif fmt == "jsonl":
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    o = json.loads(line)
                    v = o["value"]
                    records.append((str(o["box_id"]), float(o["depth_m"]), int(o["year"]),
                                    int(o["month"]), math.nan if v is None else float(v), lineno))
                except (ValueError, KeyError, TypeError) as exc:
                    raise DataError(f"{path}: line {lineno}: {exc!r}") from None
    else:
        raise ContractError(f"unsupported panel format {fmt!r}")
    if not records:
        raise DataError(f"{path}: no data rows")

    by_depth: dict = {}
    for sid, depth, year, month, value, lineno in records:
        by_depth.setdefault(depth, {}).setdefault(sid, []).append((year * 12 + month - 1, value, lineno))
    out = {}
    for depth, series in by_depth.items():
        ids = list(series)
        first = series[ids[0]]
        k0 = min(k for k, _, _ in first)
        length = max(k for k, _, _ in first) - k0 + 1
        data = np.full((length, len(ids)), np.nan)
        for c, sid in enumerate(ids):
            ks = np.array([k for k, _, _ in series[sid]]) - k0
            if ks.min() != 0 or ks.max() != length - 1 or ks.size != length \
                    or np.unique(ks).size != length:
                raise DataError(
                    f"{path}: series {sid!r} at depth {depth:g} m does not cover the same "
                    f"{length} contiguous months as {ids[0]!r} (near line {series[sid][0][2]})")
            data[ks, c] = [v for _, v, _ in series[sid]]
        out[depth] = SeriesPanel(tuple(ids), data, (k0 // 12, k0 % 12 + 1),
                                 depths=np.full(len(ids), depth),
                                 corners=np.array([_parse_box_id(s) for s in ids]))
    return dict(sorted(out.items()))


def _parse_box_id(sid: str):
    try:
        lat, lon = sid.split("_")
        south = float(lat[:-1]) * (1 if lat[-1] == "N" else -1)
        if lat[-1] not in "NS" or lon[-1] != "E":
            raise ValueError
        return south, float(lon[:-1])
    except ValueError:
        return math.nan, math.nan
