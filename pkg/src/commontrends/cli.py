"""Batch pipeline: per-series decompositions, per-depth common trends, reports.

Output layout under the configured directory::

    config.json                      effective configuration
    manifest.json                    failures and non-converged fits
    <depth>/decomp/<box>.csv         smoothed components per series
    <depth>/decomp/params.csv        fitted parameters and content hashes
    <depth>/trends/states.csv        common-trend trajectories
    <depth>/trends/model.json        realization diagnostics
    <depth>/maps/trend<j>.csv        loadings and correlations for trend j
    <depth>/recon/<box>.csv          cumulative reconstructions
    reports/change_points_univariate.csv
    reports/change_points_common.csv
    reports/stratification.csv

Reruns reuse a series' decomposition when its content hash (data plus model
and optimizer settings) is unchanged.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import analysis, config as cfgmod, grid, structural, subspace, synthetic
from .errors import CommonTrendsError, ConfigError
from .ssm import ObservationSeries

log = logging.getLogger("commontrends")

DECOMP_HEADER = ("year", "month", "observed", "trend", "trend_var", "seasonal", "seasonal_var",
                 "cycle", "cycle_var", "error", "error_var", "partial_residual")
PARAM_HEADER = ("box_id", "trend_var", "seasonal_var", "cycle_var", "obs_var", "rho",
                "frequency", "loglik", "evaluations", "converged", "hash")
HASH_VERSION = "1"

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_SERIES_FAILED = 2


def depth_dir(depth: float) -> str:
    return f"{depth:g}m"


@dataclass
class Manifest:
    command: str
    series: int = 0
    reused: int = 0
    failures: list = field(default_factory=list)
    nonconverged: list = field(default_factory=list)
    notes: list = field(default_factory=list)

    def write(self, out: Path):
        with open(out / "manifest.json", "w", encoding="utf-8") as fh:
            json.dump(asdict(self), fh, indent=2, sort_keys=True)
            fh.write("\n")


@dataclass
class SeriesFit:
    """Decomposition of one series, as written to or read from disk."""

    box_id: str
    observed: np.ndarray
    trend: np.ndarray
    partial_residual: np.ndarray
    converged: bool


def load_panels(cfg: cfgmod.RunConfig) -> dict:
    """Per-depth panels for the configured depths, restricted to common boxes."""
    if cfg.format == "grid-csv":
        ds = grid.ingest(cfg.input, "grid-csv")
        panels = {}
        for depth in cfg.depths:
            r = cfg.region
            panels[depth] = grid.box_average(ds, r.bounds, r.box_size, r.min_coverage, depth,
                                             r.weighting, r.max_missing_fraction)
    else:
        found = grid.read_panels(cfg.input, cfg.format)
        panels = {}
        for depth in cfg.depths:
            hit = [d for d in found if abs(d - depth) < 1e-9]
            if not hit:
                raise ConfigError(f"depth {depth:g} m not present in {cfg.input}; "
                                  f"available {sorted(found)}")
            panels[depth] = found[hit[0]]
    panels = grid.align_depths(panels)
    for depth, p in panels.items():
        if p.n_series == 0:
            raise ConfigError(f"no boxes with data at depth {depth:g} m")
    return panels


def _series_hash(values: np.ndarray, origin, cfg: cfgmod.RunConfig) -> str:
    h = hashlib.sha256()
    h.update(HASH_VERSION.encode())
    h.update(np.ascontiguousarray(values, dtype="<f8").tobytes())
    h.update(json.dumps([list(origin), cfgmod._plain(asdict(cfg.structural)),
                         cfgmod._plain(asdict(cfg.optimizer))], sort_keys=True).encode())
    return h.hexdigest()[:16]


def _fit_task(args):
    box, values, origin, spec, optim = args
    obs = ObservationSeries(values, time_origin=origin)
    try:
        res = structural.fit(obs, spec, optim)
    except CommonTrendsError as exc:
        return box, None, f"{type(exc).__name__}: {exc}"
    return box, res, None


def _write_decomp(path: Path, obs: ObservationSeries, res):
    years, months = obs.calendar()
    pr = structural.partial_residual(obs, res).values
    cols = (obs.values, res.trend, res.trend_var, res.seasonal, res.seasonal_var,
            res.cycle, res.cycle_var, res.error, res.error_var, pr)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(DECOMP_HEADER)
        for t in range(len(obs)):
            w.writerow([int(years[t]), int(months[t])] + [grid.fmt_float(c[t]) for c in cols])


def _read_decomp(path: Path, box: str, converged: bool) -> SeriesFit:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if tuple(rows[0]) != DECOMP_HEADER:
        raise CommonTrendsError(f"{path}: unexpected header")
    arr = np.array([[float(v) if v else np.nan for v in r[2:]] for r in rows[1:]])
    col = {name: i for i, name in enumerate(DECOMP_HEADER[2:])}
    return SeriesFit(box, arr[:, col["observed"]], arr[:, col["trend"]],
                     arr[:, col["partial_residual"]], converged)


def _read_params(path: Path) -> dict:
    if not path.exists():
        return {}
    with open(path, newline="", encoding="utf-8") as fh:
        return {row["box_id"]: row for row in csv.DictReader(fh)}


def _executor_map(fn, tasks, workers):
    if workers == 1 or len(tasks) <= 1:
        return [fn(t) for t in tasks]
    chunk = max(1, len(tasks) // (4 * workers))
    with ProcessPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, tasks, chunksize=chunk))


def decompose_depth(cfg, depth, panel: subspace.SeriesPanel, out: Path, manifest: Manifest):
    """Fit (or reuse) every series at one depth; returns fits in panel order."""
    ddir = out / depth_dir(depth) / "decomp"
    ddir.mkdir(parents=True, exist_ok=True)
    previous = _read_params(ddir / "params.csv")
    hashes = {}
    tasks = []
    for i, box in enumerate(panel.series_ids):
        values = panel.data[:, i]
        hashes[box] = _series_hash(values, panel.time_origin, cfg)
        old = previous.get(box)
        if old and old["hash"] == hashes[box] and (ddir / f"{box}.csv").exists():
            continue
        tasks.append((box, values, panel.time_origin, cfg.structural, cfg.optimizer))
    log.info("depth %g m: %d series, %d to fit", depth, panel.n_series, len(tasks))
    fitted = {box: (res, err) for box, res, err in _executor_map(_fit_task, tasks, cfg.workers)}

    rows = {}
    fits = []
    for i, box in enumerate(panel.series_ids):
        manifest.series += 1
        if box not in fitted:
            manifest.reused += 1
            row = previous[box]
            rows[box] = row
            conv = row["converged"] == "True"
            if not conv:
                manifest.nonconverged.append({"depth_m": depth, "box_id": box})
            fits.append(_read_decomp(ddir / f"{box}.csv", box, conv))
            continue
        res, err = fitted[box]
        if err is not None:
            manifest.failures.append({"depth_m": depth, "box_id": box, "error": err})
            log.warning("depth %g m, box %s: %s", depth, box, err)
            (ddir / f"{box}.csv").unlink(missing_ok=True)
            continue
        obs = ObservationSeries(panel.data[:, i], time_origin=panel.time_origin)
        _write_decomp(ddir / f"{box}.csv", obs, res)
        p = res.params
        rows[box] = {"box_id": box, "trend_var": repr(p.trend_var),
                     "seasonal_var": repr(p.seasonal_var), "cycle_var": repr(p.cycle_var),
                     "obs_var": repr(p.obs_var), "rho": repr(float(p.rho)),
                     "frequency": repr(float(p.frequency)), "loglik": repr(float(res.loglik)),
                     "evaluations": str(res.iterations), "converged": str(bool(res.converged)),
                     "hash": hashes[box]}
        if not res.converged:
            manifest.nonconverged.append({"depth_m": depth, "box_id": box})
        fits.append(SeriesFit(box, obs.values.copy(), res.trend,
                              structural.partial_residual(obs, res).values, bool(res.converged)))
    with open(ddir / "params.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, PARAM_HEADER, lineterminator="\n")
        w.writeheader()
        for box in panel.series_ids:
            if box in rows:
                w.writerow(rows[box])
    return fits


def _prepare(cfg: cfgmod.RunConfig, command: str):
    cfg.validate()
    out = Path(cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "config.json", "w", encoding="utf-8") as fh:
        json.dump(cfg.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    return out, Manifest(command)


def run_decompose(cfg: cfgmod.RunConfig, manifest: Manifest | None = None, out=None):
    """Fit every series at every depth. Returns ``({depth: fits}, panels, manifest)``."""
    if manifest is None:
        out, manifest = _prepare(cfg, "decompose")
    panels = load_panels(cfg)
    fits = {d: decompose_depth(cfg, d, panels[d], out, manifest) for d in cfg.depths}
    return fits, panels, manifest


def _trend_panel(fits, origin, depth):
    """Partial residuals, filled with the smoothed trend where the data are missing."""
    ids = tuple(f.box_id for f in fits)
    data = np.column_stack([np.where(np.isnan(f.partial_residual), f.trend, f.partial_residual)
                            for f in fits])
    trends = np.column_stack([f.trend for f in fits])
    corners = np.array([grid._parse_box_id(b) for b in ids])
    return subspace.SeriesPanel(ids, data, origin, depths=np.full(len(ids), depth),
                                corners=corners, trends=trends)


def _write_rows(path: Path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _calendar(origin, length):
    k = origin[1] - 1 + np.arange(length)
    return origin[0] + k // 12, k % 12 + 1


def common_trends_depth(cfg, depth, panel: subspace.SeriesPanel, out: Path, manifest: Manifest):
    """Identify, extract and write the common trends of one depth."""
    model = subspace.identify(panel, cfg.hankel, n=None if cfg.rank.energy else cfg.rank.fixed,
                              energy=cfg.rank.energy)
    result = subspace.extract_trends(model, panel)
    if model.n_projected:
        manifest.notes.append(f"depth {depth:g} m: {model.n_projected} unstable eigenvalue(s) projected")
    if model.riccati_ridge:
        manifest.notes.append(f"depth {depth:g} m: Riccati ridge {model.riccati_ridge:g}")
    base = out / depth_dir(depth)
    for sub in ("trends", "maps", "recon"):
        (base / sub).mkdir(parents=True, exist_ok=True)
    years, months = _calendar(panel.time_origin, panel.length)
    n = result.n
    _write_rows(base / "trends" / "states.csv",
                ("year", "month") + tuple(f"trend{j}" for j in range(1, n + 1)),
                ([int(years[t]), int(months[t])] + [repr(float(v)) for v in result.states[t]]
                 for t in range(panel.length)))
    eig = np.linalg.eigvals(model.A)
    diag = {"n": n, "singular_values": [float(s) for s in model.singular_values[:max(10, n)]],
            "eigenvalues_real": [float(e.real) for e in eig],
            "eigenvalues_imag": [float(e.imag) for e in eig],
            "offsets": [float(o) for o in result.offsets],
            "n_projected": model.n_projected, "riccati_ridge": model.riccati_ridge,
            "series_ids": list(panel.series_ids)}
    with open(base / "trends" / "model.json", "w", encoding="utf-8") as fh:
        json.dump(diag, fh, indent=2)
        fh.write("\n")
    for j in range(1, n + 1):
        loads = subspace.loading_map(result, j)
        corrs = subspace.correlation_map(panel, result, j)
        _write_rows(base / "maps" / f"trend{j}.csv",
                    ("box_id", "south", "west", "loading", "correlation"),
                    ([b, repr(float(panel.corners[i][0])), repr(float(panel.corners[i][1])),
                      repr(loads[b]), grid.fmt_float(corrs[b])]
                     for i, b in enumerate(panel.series_ids)))
    locations = cfg.report.locations or panel.series_ids
    for box in locations:
        if box not in panel.series_ids:
            manifest.notes.append(f"depth {depth:g} m: location {box} not in panel")
            continue
        recs = [subspace.reconstruct(result, box, range(1, k + 1)).values for k in range(1, n + 1)]
        _write_rows(base / "recon" / f"{box}.csv",
                    ("year", "month") + tuple("trends_" + "-".join(map(str, range(1, k + 1)))
                                              for k in range(1, n + 1)),
                    ([int(years[t]), int(months[t])] + [repr(float(r[t])) for r in recs]
                     for t in range(panel.length)))
    return model, result


def run_common_trends(cfg: cfgmod.RunConfig, manifest=None, out=None):
    if manifest is None:
        out, manifest = _prepare(cfg, "common-trends")
    fits, panels, manifest = run_decompose(cfg, manifest, out)
    results = {}
    for depth in cfg.depths:
        if not fits[depth]:
            manifest.notes.append(f"depth {depth:g} m: no series to analyse")
            continue
        tpanel = _trend_panel(fits[depth], panels[depth].time_origin, depth)
        try:
            results[depth] = (tpanel,) + common_trends_depth(cfg, depth, tpanel, out, manifest)
        except CommonTrendsError as exc:
            manifest.failures.append({"depth_m": depth, "box_id": "*",
                                      "error": f"{type(exc).__name__}: {exc}"})
    return fits, results, manifest


def run_report(cfg: cfgmod.RunConfig):
    out, manifest = _prepare(cfg, "report")
    fits, results, manifest = run_common_trends(cfg, manifest, out)
    rep = out / "reports"
    rep.mkdir(parents=True, exist_ok=True)
    cp = cfg.change_points
    uni, com = [], []
    for depth in cfg.depths:
        for f in fits[depth]:
            origin = results[depth][0].time_origin if depth in results else (1, 1)
            try:
                found = analysis.detect_change_points(
                    ObservationSeries(f.trend, time_origin=origin),
                    cp.min_persist, cp.slope_window, cp.inflection_factor)
            except CommonTrendsError as exc:
                manifest.notes.append(f"change points {depth:g} m {f.box_id}: {exc}")
                continue
            uni.extend((f.box_id, depth, c) for c in found)
        if depth in results:
            tpanel, _, result = results[depth]
            for j in range(1, result.n + 1):
                series = ObservationSeries(result.states[:, j - 1], time_origin=tpanel.time_origin)
                try:
                    found = analysis.detect_change_points(
                        series, cp.min_persist, cp.slope_window, cp.inflection_factor)
                except CommonTrendsError as exc:
                    manifest.notes.append(f"change points {depth:g} m trend{j}: {exc}")
                    continue
                com.extend((f"trend{j}", depth, c) for c in found)
    analysis.write_change_points(rep / "change_points_univariate.csv", uni)
    analysis.write_change_points(rep / "change_points_common.csv", com)

    rows = []
    sh, dp = cfg.report.shallow, cfg.report.deep
    if sh in results and dp in results:
        (ps, _, rs), (pd, _, rd) = results[sh], results[dp]
        ts = [j for j in cfg.report.trends if j <= min(rs.n, rd.n)]
        boxes = cfg.report.locations or ps.series_ids
        for box in boxes:
            if box not in ps.series_ids or box not in pd.series_ids:
                continue
            s = analysis.stratification(subspace.reconstruct(rs, box, ts),
                                        subspace.reconstruct(rd, box, ts))
            years, months = s.calendar()
            rows.extend([box, int(years[t]), int(months[t]), repr(float(s.values[t]))]
                        for t in range(len(s)))
    else:
        manifest.notes.append(f"stratification skipped: depths {sh:g} m and {dp:g} m not both analysed")
    _write_rows(rep / "stratification.csv", ("box_id", "year", "month", "value"), rows)
    return manifest


def run_simulate(output, fmt="panel-csv", length=564, depths=(10.0, 50.0, 100.0, 150.0, 200.0),
                 n_factors=4, noise=0.3, seed=0, region=(20.0, 65.0, 110.0, 250.0),
                 box_size=5.0, max_boxes=None):
    """Write a planted panel: shared factors plus seasonal cycle plus noise.

    Each depth has its own planted factors and loadings. The truth (factors,
    loadings, box ids) goes to ``<output>.truth.npz``.
    """
    south, north, west, east = region
    lats = np.arange(south, north - 1e-9, box_size)
    lons = np.arange(west, east - 1e-9, box_size)
    boxes = [(la, lo % 360.0) for la in lats for lo in lons]
    if max_boxes:
        boxes = boxes[:max_boxes]
    ids = tuple(grid.box_id(la, lo) for la, lo in boxes)
    panels, truth = {}, {"box_ids": np.array(ids)}
    for k, depth in enumerate(depths):
        pp = synthetic.planted_factor_panel(len(ids), length, n_factors, noise, seed=seed + 1000 * k)
        amp = 2.0 * np.exp(-depth / 100.0)
        level = 20.0 - depth / 20.0
        data = level + pp.data + amp * synthetic.seasonal_pattern(length)[:, None]
        panels[float(depth)] = subspace.SeriesPanel(ids, data, (1958, 1),
                                                    depths=np.full(len(ids), float(depth)))
        truth[f"factors_{depth:g}"] = pp.factors
        truth[f"loadings_{depth:g}"] = pp.loadings
    output = Path(output)
    if fmt == "grid-csv":
        lat_c = np.array(sorted({b[0] for b in boxes})) + box_size / 2
        lon_c = np.array(sorted({b[1] for b in boxes})) + box_size / 2
        values = np.full((length, len(depths), lat_c.size, lon_c.size), np.nan)
        for c, (la, lo) in enumerate(boxes):
            i = int(np.searchsorted(lat_c, la + box_size / 2))
            j = int(np.searchsorted(lon_c, lo + box_size / 2))
            for k, depth in enumerate(depths):
                values[:, k, i, j] = panels[float(depth)].data[:, c]
        grid.export(grid.GriddedDataset(lat_c, lon_c, depths, values, (1958, 1)), output, "grid-csv")
    else:
        grid.export(panels, output, fmt)
    np.savez(output.with_name(output.name + ".truth.npz"), **truth)
    return ids


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="commontrends", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in ("decompose", "common-trends", "report"):
        p = sub.add_parser(name)
        p.add_argument("--config", help="TOML run configuration")
        p.add_argument("--input")
        p.add_argument("--format", choices=cfgmod.INPUT_FORMATS)
        p.add_argument("--output")
        p.add_argument("--depths", type=float, nargs="+")
        p.add_argument("--workers", type=int)
        p.add_argument("--seed", type=int)
        p.add_argument("--trend-order", type=int)
        p.add_argument("--rank", type=int, help="fixed number of common trends")
        p.add_argument("--energy", type=float, help="energy threshold for the rank instead")
        p.add_argument("--past", type=int)
        p.add_argument("--future", type=int)
        p.add_argument("--demean", action="store_true", default=None)
        p.add_argument("--min-persist", type=int)
        p.add_argument("--slope-window", type=int)
        p.add_argument("--inflection-factor", type=float)
    p = sub.add_parser("simulate", help="write a synthetic planted panel")
    p.add_argument("--output", required=True)
    p.add_argument("--format", choices=cfgmod.INPUT_FORMATS, default="panel-csv")
    p.add_argument("--length", type=int, default=564)
    p.add_argument("--depths", type=float, nargs="+", default=[10.0, 50.0, 100.0, 150.0, 200.0])
    p.add_argument("--factors", type=int, default=4)
    p.add_argument("--noise", type=float, default=0.3)
    p.add_argument("--max-boxes", type=int)
    p.add_argument("--seed", type=int, default=0)
    return ap


def config_from_args(args) -> cfgmod.RunConfig:
    cfg = cfgmod.load(args.config) if args.config else cfgmod.RunConfig()
    top = {k: getattr(args, k) for k in ("input", "format", "output", "workers", "seed")
           if getattr(args, k) is not None}
    if args.depths is not None:
        top["depths"] = tuple(args.depths)
    cfg = replace(cfg, **top)
    sections = {}
    if args.trend_order is not None:
        sections["structural"] = {"trend_order": args.trend_order}
    if args.rank is not None or args.energy is not None:
        sections["rank"] = {k: v for k, v in (("fixed", args.rank), ("energy", args.energy))
                            if v is not None}
    hk = {k: v for k, v in (("past", args.past), ("future", args.future), ("demean", args.demean))
          if v is not None}
    if hk:
        sections["hankel"] = hk
    cp = {k: v for k, v in (("min_persist", args.min_persist), ("slope_window", args.slope_window),
                            ("inflection_factor", args.inflection_factor)) if v is not None}
    if cp:
        sections["change_points"] = cp
    return cfgmod.from_mapping(sections, cfg) if sections else cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "simulate":
            ids = run_simulate(args.output, args.format, args.length, tuple(args.depths),
                               args.factors, args.noise, args.seed, max_boxes=args.max_boxes)
            print(f"wrote {len(ids)} series x {len(args.depths)} depths to {args.output}")
            return EXIT_OK
        cfg = config_from_args(args)
        if args.command == "decompose":
            out, manifest = _prepare(cfg, "decompose")
            run_decompose(cfg, manifest, out)
        elif args.command == "common-trends":
            out, manifest = _prepare(cfg, "common-trends")
            run_common_trends(cfg, manifest, out)
        else:
            manifest = run_report(cfg)
            out = Path(cfg.output)
        manifest.write(out)
    except CommonTrendsError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    print(f"{manifest.series} series, {len(manifest.failures)} failed, "
          f"{len(manifest.nonconverged)} not converged, {manifest.reused} reused")
    return EXIT_SERIES_FAILED if manifest.failures else EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
