"""Command-line pipeline: ingest -> tune -> predict-map / uncertainty-map / evaluate.

Stages hand data off through plain CSV files (a normalized measurement table
and a key=value parameter file). Exit codes: 0 success, 1 internal error,
2 usage or input error. Diagnostics go to standard error only.
"""

from __future__ import annotations

import argparse
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .conformal import (
    CalibrationError,
    EscpConfig,
    EscpPredictor,
    default_neighborhood_size,
    enbpi_interval,
    fit_split_cp,
    split_cp,
)
from .geodata import (
    ColumnMapping,
    Dataset,
    EmptyDatasetError,
    ParseError,
    SchemaError,
    _project_arrays,
    load_tiles,
    remove_outliers,
    train_test_split,
    write_tiles_csv,
)
from .kernel import StbkrParams, cross_validate, stbkr_predict
from .evalharness import compare_methods, format_report_table

NUM_FMT = ".6g"


@dataclass(frozen=True)
class UncertaintyRaster:
    """Row-major grid of interval summaries over a lon/lat bounding box.

    Cell (ix, iy) sits at index iy * nx + ix; centers are evenly spaced
    inside the box. Cells beyond the extrapolation limit carry no_data=1 and
    NaN values.
    """

    bbox: tuple[float, float, float, float]
    nx: int
    ny: int
    lon: np.ndarray
    lat: np.ndarray
    center: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    no_data: np.ndarray

    @property
    def width(self) -> np.ndarray:
        return self.upper - self.lower


def _fmt(v: float) -> str:
    return format(float(v), NUM_FMT)


def _column_mapping(args) -> ColumnMapping:
    return ColumnMapping(
        lon=args.col_lon, lat=args.col_lat, quadkey=args.col_quadkey,
        score=args.col_score, download=args.col_download, upload=args.col_upload,
        tests=args.col_tests, devices=args.col_devices,
    )


def _add_column_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--col-lon", default="lon")
    p.add_argument("--col-lat", default="lat")
    p.add_argument("--col-quadkey", default="quadkey")
    p.add_argument("--col-score", default="score")
    p.add_argument("--col-download", default="avg_d_kbps")
    p.add_argument("--col-upload", default="avg_u_kbps")
    p.add_argument("--col-tests", default="tests")
    p.add_argument("--col-devices", default="devices")


def _add_method_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--method", choices=("split", "enbpi", "escp"), default="escp")
    p.add_argument("--alpha", type=float, default=0.2)
    p.add_argument("--B", type=int, default=50)
    p.add_argument("--K", type=int, default=None,
                   help="neighborhood size; defaults to min(500, train/10)")
    p.add_argument("--s", type=int, default=100)
    p.add_argument("--quantile-mode", choices=("empirical", "qrf"), default="qrf")
    p.add_argument("--point-predictor", choices=("full_neighborhood", "ensemble_mean"),
                   default="full_neighborhood")
    p.add_argument("--holdout-frac", type=float, default=0.5)
    p.add_argument("--training-radius", type=int, default=None)


def _add_params_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--params", default=None, help="key=value file written by `tune`")
    p.add_argument("--k", type=int, default=None)
    p.add_argument("--c", type=float, default=None)
    p.add_argument("--rk-power", type=float, default=None)


def read_params_file(path) -> dict:
    values = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, _, value = line.partition("=")
            values[key.strip()] = value.strip()
    return values


def _resolve_params(args) -> StbkrParams:
    k, c, rk_power = args.k, args.c, args.rk_power
    if args.params:
        stored = read_params_file(args.params)
        k = int(stored["k"]) if k is None else k
        c = float(stored["c"]) if c is None else c
        if rk_power is None and "rk_power" in stored:
            rk_power = float(stored["rk_power"])
    if k is None or c is None:
        raise ValueError("model parameters missing: pass --params FILE or --k and --c")
    return StbkrParams(c=c, k=k, rk_power=2.0 if rk_power is None else rk_power)


def _load_dataset(args) -> Dataset:
    return load_tiles(args.dataset, schema=_column_mapping(args),
                      raw_degrees=args.raw_degrees)


def _threads(args) -> int:
    if args.threads == "auto":
        return os.cpu_count() or 1
    n = int(args.threads)
    if n < 1:
        raise ValueError(f"--threads must be >= 1 or 'auto', got {n}")
    return n


def _interval_fn(method: str, train: Dataset, params: StbkrParams, args):
    """Per-query interval evaluator for the chosen method."""
    if method == "split":
        model, residuals = fit_split_cp(train, params, holdout_frac=args.holdout_frac,
                                        seed=args.seed)
        return lambda q: split_cp(residuals, args.alpha, stbkr_predict(model, q))
    if method == "enbpi":
        return lambda q: enbpi_interval(train, q, alpha=args.alpha, B=args.B,
                                        s=args.s, params=params, seed=args.seed)
    K = args.K if args.K is not None else default_neighborhood_size(len(train))
    cfg = EscpConfig(K=K, alpha=args.alpha, B=args.B, s=args.s,
                     quantile_mode=args.quantile_mode,
                     point_predictor=args.point_predictor, seed=args.seed)
    return EscpPredictor(train, cfg, params, args.training_radius).interval


def cmd_ingest(args) -> int:
    ds = load_tiles(args.input, schema=_column_mapping(args),
                    score_weights=(args.score_weight_download, args.score_weight_upload),
                    raw_degrees=args.raw_degrees)
    if args.no_outlier_filter:
        kept, removed = ds, np.empty(0, dtype=np.int64)
    else:
        kept, removed = remove_outliers(ds, neighbors=args.neighbors, sigma=args.sigma)
    write_tiles_csv(kept, args.out, fmt=NUM_FMT)
    if args.removed_out:
        with open(args.removed_out, "w", encoding="utf-8") as fh:
            fh.write("index\n")
            fh.writelines(f"{i}\n" for i in removed)
    print(f"kept={len(kept)} removed={len(removed)}")
    return 0


def cmd_tune(args) -> int:
    ds = _load_dataset(args)
    train, _ = train_test_split(ds, train_frac=args.train_frac, seed=args.seed)
    k_grid = [int(v) for v in args.k_grid.split(",")]
    c_grid = [float(v) for v in args.c_grid.split(",")]
    params = cross_validate(train, k_grid, c_grid, folds=args.folds, seed=args.seed,
                            rk_power=args.rk_power)
    with open(args.out, "w", encoding="utf-8") as fh:
        fh.write(f"k={params.k}\n")
        fh.write(f"c={params.c:{NUM_FMT}}\n")
        if params.rk_power != 2.0:
            fh.write(f"rk_power={params.rk_power:{NUM_FMT}}\n")
    print(f"selected k={params.k} c={params.c:{NUM_FMT}}")
    return 0


def _read_points(path, mapping: ColumnMapping):
    import csv

    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise EmptyDatasetError(f"{path}: file is empty") from None
        col = {name.strip(): i for i, name in enumerate(header)}
        for name in (mapping.lon, mapping.lat):
            if name not in col:
                raise SchemaError(f"missing required column {name!r}")
        lons, lats = [], []
        for line, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                lons.append(float(row[col[mapping.lon]]))
                lats.append(float(row[col[mapping.lat]]))
            except ValueError:
                raise ParseError(f"line {line}: non-numeric coordinate", line) from None
    if not lons:
        raise EmptyDatasetError(f"{path}: no data rows")
    return np.array(lons), np.array(lats)


def _planar_of(ds: Dataset, lon: np.ndarray, lat: np.ndarray):
    if ds.raw_degrees:
        return lon.copy(), lat.copy()
    return _project_arrays(lon, lat, ds.origin)


def _evaluate_cells(fn, xy, indices, threads: int):
    """Apply `fn` to xy[i] for the selected indices, preserving order."""
    results = [None] * xy.shape[0]

    def run(i):
        results[i] = fn(xy[i])

    if threads <= 1:
        for i in indices:
            run(i)
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(run, indices))
    return results


def cmd_predict_map(args) -> int:
    ds = _load_dataset(args)
    params = _resolve_params(args)
    lon, lat = _read_points(args.points, _column_mapping(args))
    px, py = _planar_of(ds, lon, lat)
    xy = np.column_stack([px, py])
    fn = _interval_fn(args.method, ds, params, args)
    intervals = _evaluate_cells(fn, xy, range(xy.shape[0]), _threads(args))
    with open(args.out, "w", encoding="utf-8") as fh:
        fh.write("lon,lat,center,lower,upper,width\n")
        for i, iv in enumerate(intervals):
            fh.write(f"{_fmt(lon[i])},{_fmt(lat[i])},{_fmt(iv.center)},"
                     f"{_fmt(iv.lower)},{_fmt(iv.upper)},{_fmt(iv.width)}\n")
    print(f"wrote {len(intervals)} intervals to {args.out}")
    return 0


def build_uncertainty_raster(train: Dataset, fn, bbox, nx: int, ny: int,
                             max_extrapolation: float, threads: int = 1) -> UncertaintyRaster:
    """Evaluate `fn` at every grid-cell center within reach of the data.

    Cells whose nearest training point is farther than `max_extrapolation`
    (planar units) are flagged no_data and left NaN.
    """
    lon_min, lat_min, lon_max, lat_max = bbox
    if nx < 1 or ny < 1:
        raise ValueError("grid dimensions must be >= 1")
    dx = (lon_max - lon_min) / nx
    dy = (lat_max - lat_min) / ny
    cell_lon = lon_min + dx * (np.arange(nx) + 0.5)
    cell_lat = lat_min + dy * (np.arange(ny) + 0.5)
    lon = np.tile(cell_lon, ny)
    lat = np.repeat(cell_lat, nx)
    px, py = _planar_of(train, lon, lat)
    xy = np.column_stack([px, py])
    nearest, _ = train.tree.query(xy, k=1)
    reachable = nearest <= max_extrapolation
    n_cells = nx * ny
    center = np.full(n_cells, np.nan)
    lower = np.full(n_cells, np.nan)
    upper = np.full(n_cells, np.nan)
    results = _evaluate_cells(fn, xy, np.flatnonzero(reachable), threads)
    for i in np.flatnonzero(reachable):
        iv = results[i]
        center[i], lower[i], upper[i] = iv.center, iv.lower, iv.upper
    return UncertaintyRaster(bbox=tuple(bbox), nx=nx, ny=ny, lon=lon, lat=lat,
                             center=center, lower=lower, upper=upper,
                             no_data=~reachable)


def cmd_uncertainty_map(args) -> int:
    ds = _load_dataset(args)
    params = _resolve_params(args)
    if args.bbox is not None:
        bbox = tuple(args.bbox)
    else:
        bbox = (float(ds.lon.min()), float(ds.lat.min()),
                float(ds.lon.max()), float(ds.lat.max()))
    fn = _interval_fn(args.method, ds, params, args)
    raster = build_uncertainty_raster(ds, fn, bbox, args.grid[0], args.grid[1],
                                      args.max_extrapolation_km, _threads(args))
    with open(args.out, "w", encoding="utf-8") as fh:
        fh.write("lon,lat,center,lower,upper,width,no_data\n")
        for i in range(raster.nx * raster.ny):
            if raster.no_data[i]:
                fh.write(f"{_fmt(raster.lon[i])},{_fmt(raster.lat[i])},,,,,1\n")
            else:
                fh.write(f"{_fmt(raster.lon[i])},{_fmt(raster.lat[i])},"
                         f"{_fmt(raster.center[i])},{_fmt(raster.lower[i])},"
                         f"{_fmt(raster.upper[i])},{_fmt(raster.width[i])},0\n")
    print(f"wrote {raster.nx}x{raster.ny} raster to {args.out}")
    return 0


def cmd_evaluate(args) -> int:
    ds = _load_dataset(args)
    train, test = train_test_split(ds, train_frac=args.train_frac, seed=args.seed)
    if args.tune:
        k_grid = [int(v) for v in args.k_grid.split(",")]
        c_grid = [float(v) for v in args.c_grid.split(",")]
        params = cross_validate(train, k_grid, c_grid, folds=args.folds,
                                seed=args.seed, rk_power=args.rk_power or 2.0)
        print(f"tuned k={params.k} c={params.c:{NUM_FMT}}", file=sys.stderr)
    else:
        params = _resolve_params(args)
    methods = tuple(m.strip() for m in args.methods.split(",") if m.strip())
    reports = compare_methods(
        train, test, params, alpha=args.alpha, B=args.B, s=args.s, K=args.K,
        quantile_mode=args.quantile_mode, point_predictor=args.point_predictor,
        seed=args.seed, holdout_frac=args.holdout_frac,
        training_radius=args.training_radius, methods=methods)
    print(format_report_table(reports, args.alpha))
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write("method,coverage,mean_width,median_width,n_test,infinite_count\n")
            for r in reports:
                fh.write(f"{r.method},{_fmt(r.coverage)},{_fmt(r.mean_width)},"
                         f"{_fmt(r.median_width)},{r.n_test},{r.infinite_width_count}\n")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="netuq",
        description="Calibrated prediction-interval maps for network-quality measurements.")
    parser.add_argument("--seed", type=int, default=0, help="global random seed")
    parser.add_argument("--threads", default="1", help="worker threads for grid evaluation, or 'auto'")
    parser.add_argument("--raw-degrees", action="store_true",
                        help="compute distances on raw lon/lat degrees instead of projected km")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="load tiles, filter outliers, write a normalized dataset")
    p.add_argument("input")
    p.add_argument("--out", required=True)
    p.add_argument("--no-outlier-filter", action="store_true")
    p.add_argument("--neighbors", type=int, default=50)
    p.add_argument("--sigma", type=float, default=3.0)
    p.add_argument("--removed-out", default=None)
    p.add_argument("--score-weight-download", type=float, default=0.5)
    p.add_argument("--score-weight-upload", type=float, default=0.5)
    _add_column_flags(p)
    p.set_defaults(fn=cmd_ingest)

    p = sub.add_parser("tune", help="cross-validate (k, c) and write a params file")
    p.add_argument("dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--k-grid", default="5,10,20")
    p.add_argument("--c-grid", default="0.001,0.01,0.1")
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--train-frac", type=float, default=0.8)
    p.add_argument("--rk-power", type=float, default=2.0)
    _add_column_flags(p)
    p.set_defaults(fn=cmd_tune)

    p = sub.add_parser("predict-map", help="intervals at the points of a lon/lat CSV")
    p.add_argument("dataset")
    p.add_argument("--points", required=True)
    p.add_argument("--out", required=True)
    _add_params_flags(p)
    _add_method_flags(p)
    _add_column_flags(p)
    p.set_defaults(fn=cmd_predict_map)

    p = sub.add_parser("uncertainty-map", help="interval raster over a grid")
    p.add_argument("dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--grid", type=int, nargs=2, metavar=("NX", "NY"), required=True)
    p.add_argument("--bbox", type=float, nargs=4,
                   metavar=("LON_MIN", "LAT_MIN", "LON_MAX", "LAT_MAX"), default=None)
    p.add_argument("--max-extrapolation-km", type=float, default=30.0)
    _add_params_flags(p)
    _add_method_flags(p)
    _add_column_flags(p)
    p.set_defaults(fn=cmd_uncertainty_map)

    p = sub.add_parser("evaluate", help="80/20 split and three-method comparison table")
    p.add_argument("dataset")
    p.add_argument("--out", default=None)
    p.add_argument("--methods", default="split,enbpi,escp")
    p.add_argument("--train-frac", type=float, default=0.8)
    p.add_argument("--tune", action="store_true", help="cross-validate (k, c) on the training part")
    p.add_argument("--k-grid", default="5,10,20")
    p.add_argument("--c-grid", default="0.001,0.01,0.1")
    p.add_argument("--folds", type=int, default=5)
    _add_params_flags(p)
    _add_method_flags(p)
    _add_column_flags(p)
    p.set_defaults(fn=cmd_evaluate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (SchemaError, ParseError, EmptyDatasetError, FileNotFoundError,
            KeyError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except CalibrationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
