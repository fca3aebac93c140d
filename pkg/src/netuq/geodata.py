"""Measurement ingestion, planar projection, spatial indexing, and dataset splits.

Datasets are immutable after construction: every filter or split returns a
new `Dataset`, and the k-d tree index always mirrors the point order.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial import ConvexHull, QhullError, cKDTree

EARTH_RADIUS_KM = 6371.0088

__all__ = [
    "EARTH_RADIUS_KM",
    "GeoPoint",
    "PlanarPoint",
    "Measurement",
    "ColumnMapping",
    "Dataset",
    "SchemaError",
    "ParseError",
    "EmptyDatasetError",
    "load_tiles",
    "write_tiles_csv",
    "NORMALIZED_COLUMNS",
    "quadkey_centroid",
    "project",
    "unproject",
    "knn",
    "remove_outliers",
    "train_test_split",
]


class SchemaError(ValueError):
    """A required input column is missing."""


class ParseError(ValueError):
    """A cell could not be parsed; carries the 1-based file line number."""

    def __init__(self, message: str, line: int | None = None):
        super().__init__(message)
        self.line = line


class EmptyDatasetError(ValueError):
    """The input contained a header but no data rows."""


@dataclass(frozen=True)
class GeoPoint:
    """WGS-84 longitude/latitude in degrees."""

    lon: float
    lat: float

    def __post_init__(self):
        if not (math.isfinite(self.lon) and math.isfinite(self.lat)):
            raise ValueError("coordinates must be finite")
        if not (-180.0 <= self.lon <= 180.0):
            raise ValueError(f"longitude {self.lon} outside [-180, 180]")
        if not (-90.0 <= self.lat <= 90.0):
            raise ValueError(f"latitude {self.lat} outside [-90, 90]")


@dataclass(frozen=True)
class PlanarPoint:
    """Local planar coordinates in kilometers east/north of the projection origin."""

    x: float
    y: float


@dataclass(frozen=True)
class Measurement:
    """One georeferenced network-quality sample."""

    location: GeoPoint
    planar: PlanarPoint
    score: float
    download_kbps: float
    upload_kbps: float
    tests: int
    devices: int


@dataclass(frozen=True)
class ColumnMapping:
    """Maps logical fields to input column names (all renameable)."""

    lon: str = "lon"
    lat: str = "lat"
    quadkey: str = "quadkey"
    score: str = "score"
    download: str = "avg_d_kbps"
    upload: str = "avg_u_kbps"
    tests: str = "tests"
    devices: str = "devices"


def project(p: GeoPoint, origin: GeoPoint) -> PlanarPoint:
    """Equirectangular projection of `p` into kilometers relative to `origin`."""
    x, y = _project_arrays(np.asarray(p.lon), np.asarray(p.lat), origin)
    return PlanarPoint(float(x), float(y))


def unproject(p: PlanarPoint, origin: GeoPoint) -> GeoPoint:
    """Inverse of `project`."""
    rad = math.pi / 180.0
    lon = origin.lon + p.x / (EARTH_RADIUS_KM * math.cos(origin.lat * rad) * rad)
    lat = origin.lat + p.y / (EARTH_RADIUS_KM * rad)
    return GeoPoint(lon, lat)


def _project_arrays(lon, lat, origin: GeoPoint):
    rad = math.pi / 180.0
    x = EARTH_RADIUS_KM * (lon - origin.lon) * math.cos(origin.lat * rad) * rad
    y = EARTH_RADIUS_KM * (lat - origin.lat) * rad
    return x, y


def quadkey_centroid(quadkey: str) -> GeoPoint:
    """Center of the Web-Mercator tile addressed by a base-4 quadkey."""
    if not quadkey:
        raise ParseError("empty quadkey")
    tx = ty = 0
    for ch in quadkey:
        if ch not in "0123":
            raise ParseError(f"illegal quadkey character {ch!r} in {quadkey!r}")
        d = ord(ch) - ord("0")
        tx = (tx << 1) | (d & 1)
        ty = (ty << 1) | (d >> 1)
    n = 1 << len(quadkey)
    u = (tx + 0.5) / n
    v = (ty + 0.5) / n
    lon = 360.0 * u - 180.0
    lat = math.degrees(math.atan(math.sinh(math.pi * (1.0 - 2.0 * v))))
    return GeoPoint(lon, lat)


class Dataset:
    """Immutable collection of measurements with a k-d tree over planar coordinates.

    Column arrays are read-only; `subset` and the split/filter operations
    return new instances sharing the projection origin so planar coordinates
    stay directly comparable.
    """

    _FIELDS = ("lon", "lat", "x", "y", "score", "download", "upload", "tests", "devices")

    def __init__(self, lon, lat, x, y, score, download, upload, tests, devices,
                 origin: GeoPoint, raw_degrees: bool = False):
        self.lon = np.asarray(lon, dtype=np.float64)
        self.lat = np.asarray(lat, dtype=np.float64)
        self.x = np.asarray(x, dtype=np.float64)
        self.y = np.asarray(y, dtype=np.float64)
        self.score = np.asarray(score, dtype=np.float64)
        self.download = np.asarray(download, dtype=np.float64)
        self.upload = np.asarray(upload, dtype=np.float64)
        self.tests = np.asarray(tests, dtype=np.int64)
        self.devices = np.asarray(devices, dtype=np.int64)
        self.origin = origin
        self.raw_degrees = raw_degrees
        n = self.lon.shape[0]
        for name in self._FIELDS:
            arr = getattr(self, name)
            if arr.shape != (n,):
                raise ValueError(f"column {name!r} has shape {arr.shape}, expected ({n},)")
            arr.flags.writeable = False
        self._xy = np.column_stack([self.x, self.y])
        self._xy.flags.writeable = False
        self._tree = None
        self._diameter = None

    @classmethod
    def from_coords(cls, lon, lat, score, download=None, upload=None, tests=None,
                    devices=None, origin: GeoPoint | None = None,
                    raw_degrees: bool = False) -> "Dataset":
        """Build a dataset from lon/lat arrays, projecting about the centroid by default."""
        lon = np.asarray(lon, dtype=np.float64)
        lat = np.asarray(lat, dtype=np.float64)
        n = lon.shape[0]
        if origin is None:
            origin = GeoPoint(float(np.mean(lon)) if n else 0.0,
                              float(np.mean(lat)) if n else 0.0)
        if raw_degrees:
            x, y = lon.copy(), lat.copy()
        else:
            x, y = _project_arrays(lon, lat, origin)
        zeros = np.zeros(n)
        ones = np.ones(n, dtype=np.int64)
        return cls(
            lon, lat, x, y, np.asarray(score, dtype=np.float64),
            zeros if download is None else download,
            zeros if upload is None else upload,
            ones if tests is None else tests,
            ones if devices is None else devices,
            origin, raw_degrees,
        )

    def __len__(self) -> int:
        return self.lon.shape[0]

    def __getitem__(self, i: int) -> Measurement:
        return Measurement(
            location=GeoPoint(float(self.lon[i]), float(self.lat[i])),
            planar=PlanarPoint(float(self.x[i]), float(self.y[i])),
            score=float(self.score[i]),
            download_kbps=float(self.download[i]),
            upload_kbps=float(self.upload[i]),
            tests=int(self.tests[i]),
            devices=int(self.devices[i]),
        )

    @property
    def xy(self) -> np.ndarray:
        """(n, 2) planar coordinates, row i matching point i."""
        return self._xy

    @property
    def tree(self) -> cKDTree:
        if self._tree is None:
            self._tree = cKDTree(self._xy)
        return self._tree

    @property
    def diameter(self) -> float:
        """Maximum pairwise planar distance, via convex hull (bounding-box
        diagonal for degenerate point sets, where the two coincide)."""
        if self._diameter is None:
            pts = self._xy
            n = len(self)
            if n <= 1:
                self._diameter = 0.0
            elif n <= 3:
                d = pts[:, None, :] - pts[None, :, :]
                self._diameter = float(np.sqrt((d ** 2).sum(-1)).max())
            else:
                try:
                    hull = pts[ConvexHull(pts).vertices]
                    d = hull[:, None, :] - hull[None, :, :]
                    self._diameter = float(np.sqrt((d ** 2).sum(-1)).max())
                except QhullError:
                    span = pts.max(axis=0) - pts.min(axis=0)
                    self._diameter = float(np.sqrt(span @ span))
        return self._diameter

    def subset(self, indices) -> "Dataset":
        indices = np.asarray(indices, dtype=np.int64)
        return Dataset(
            self.lon[indices], self.lat[indices], self.x[indices], self.y[indices],
            self.score[indices], self.download[indices], self.upload[indices],
            self.tests[indices], self.devices[indices],
            self.origin, self.raw_degrees,
        )


def _as_xy(q) -> np.ndarray:
    if isinstance(q, PlanarPoint):
        return np.array([q.x, q.y], dtype=np.float64)
    a = np.asarray(q, dtype=np.float64)
    if a.shape != (2,):
        raise ValueError(f"query point must have shape (2,), got {a.shape}")
    return a


def knn(ds: Dataset, q, k: int):
    """Exact k nearest points to `q` by planar Euclidean distance.

    Returns `(indices, distances)` sorted ascending by distance, ties broken
    by ascending positional index. `q` may be a PlanarPoint or an (x, y) pair.
    """
    n = len(ds)
    if not 1 <= k <= n:
        raise ValueError(f"k={k} must be in [1, {n}]")
    qxy = _as_xy(q)
    if k == n:
        cand = np.arange(n)
    else:
        d, _ = ds.tree.query(qxy, k=k)
        boundary = float(np.atleast_1d(d)[-1])
        # inflate the radius a hair so boundary ties cannot be dropped
        r = boundary * (1.0 + 1e-12) + 1e-300
        cand = np.asarray(ds.tree.query_ball_point(qxy, r), dtype=np.int64)
    delta = ds.xy[cand] - qxy
    dist = np.sqrt(delta[:, 0] ** 2 + delta[:, 1] ** 2)
    order = np.lexsort((cand, dist))[:k]
    return cand[order], dist[order]


def _neighbor_score_stats(ds: Dataset, neighbors: int):
    """Mean and sample std of each point's `neighbors`-NN scores, self excluded."""
    n = len(ds)
    _, idx = ds.tree.query(ds.xy, k=neighbors + 1)
    rows = np.arange(n)[:, None]
    is_self = idx == rows
    # drop the self column when present, otherwise the farthest column
    drop = np.where(is_self.any(axis=1), is_self.argmax(axis=1), neighbors)
    keep = np.arange(neighbors + 1)[None, :] != drop[:, None]
    nbr_scores = ds.score[idx][keep].reshape(n, neighbors)
    return nbr_scores.mean(axis=1), nbr_scores.std(axis=1, ddof=1)


def remove_outliers(ds: Dataset, neighbors: int = 50, sigma: float = 3.0):
    """Drop points whose score deviates from their neighborhood mean by more
    than `sigma` neighborhood standard deviations.

    Flags are computed in one pass against the original dataset, then all
    flagged points are removed together. Returns `(kept, removed_indices)`.
    """
    n = len(ds)
    if n <= neighbors:
        raise ValueError(f"dataset has {n} points, need more than neighbors={neighbors}")
    mean, std = _neighbor_score_stats(ds, neighbors)
    # strict inequality: a zero-std neighborhood flags any differing score
    flagged = np.abs(ds.score - mean) > sigma * std
    removed = np.flatnonzero(flagged)
    kept = ds.subset(np.flatnonzero(~flagged))
    return kept, removed


def train_test_split(ds: Dataset, train_frac: float = 0.8, seed: int = 0):
    """Uniform random partition into (train, test); |train| = round(train_frac * n)."""
    n = len(ds)
    if n == 0:
        raise ValueError("cannot split an empty dataset")
    if not 0.0 < train_frac < 1.0:
        raise ValueError(f"train_frac={train_frac} must be in (0, 1)")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    n_train = int(round(train_frac * n))
    train_idx = np.sort(perm[:n_train])
    test_idx = np.sort(perm[n_train:])
    return ds.subset(train_idx), ds.subset(test_idx)


NORMALIZED_COLUMNS = ("lon", "lat", "score", "avg_d_kbps", "avg_u_kbps", "tests", "devices")


def write_tiles_csv(ds: Dataset, path, fmt: str = ".17g") -> None:
    """Write a dataset in the normalized tile schema accepted by `load_tiles`."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(NORMALIZED_COLUMNS)
        for i in range(len(ds)):
            writer.writerow([
                format(ds.lon[i], fmt), format(ds.lat[i], fmt),
                format(ds.score[i], fmt), format(ds.download[i], fmt),
                format(ds.upload[i], fmt), int(ds.tests[i]), int(ds.devices[i]),
            ])


_MANDATORY = ("download", "upload", "tests", "devices")


def _parse_float(value: str, column: str, line: int) -> float:
    try:
        v = float(value)
    except ValueError:
        raise ParseError(f"line {line}: non-numeric value {value!r} in column {column!r}", line) from None
    if not math.isfinite(v):
        raise ParseError(f"line {line}: non-finite value in column {column!r}", line)
    return v


def _parse_count(value: str, column: str, line: int) -> int:
    v = _parse_float(value, column, line)
    if v != int(v) or v < 1:
        raise ParseError(f"line {line}: column {column!r} must be an integer >= 1, got {value!r}", line)
    return int(v)


def load_tiles(path, schema: ColumnMapping = ColumnMapping(),
               score_weights: tuple[float, float] = (0.5, 0.5),
               raw_degrees: bool = False) -> Dataset:
    """Load tile measurements from a comma-separated UTF-8 file with a header row.

    Coordinates come from lon/lat columns, or from a quadkey column (point at
    the tile center) when lon/lat are absent. A missing score column is filled
    with a weighted mean of download and upload speeds.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise EmptyDatasetError(f"{path}: file is empty") from None
        col = {name.strip(): i for i, name in enumerate(header)}

        have_lonlat = schema.lon in col and schema.lat in col
        have_quadkey = schema.quadkey in col
        if not have_lonlat and not have_quadkey:
            raise SchemaError(
                f"missing coordinate columns: need {schema.lon!r} and {schema.lat!r}, "
                f"or {schema.quadkey!r}")
        for field in _MANDATORY:
            name = getattr(schema, field)
            if name not in col:
                raise SchemaError(f"missing required column {name!r}")
        have_score = schema.score in col
        wd, wu = score_weights

        lons, lats, scores, downloads, uploads, tests, devices = [], [], [], [], [], [], []
        for line, row in enumerate(reader, start=2):
            if not row:
                continue
            if have_lonlat:
                lon = _parse_float(row[col[schema.lon]], schema.lon, line)
                lat = _parse_float(row[col[schema.lat]], schema.lat, line)
            else:
                try:
                    center = quadkey_centroid(row[col[schema.quadkey]].strip())
                except ParseError as exc:
                    raise ParseError(f"line {line}: {exc}", line) from None
                lon, lat = center.lon, center.lat
            if not (-180.0 <= lon <= 180.0) or not (-90.0 <= lat <= 90.0):
                raise ParseError(f"line {line}: coordinates ({lon}, {lat}) out of range", line)
            d = _parse_float(row[col[schema.download]], schema.download, line)
            u = _parse_float(row[col[schema.upload]], schema.upload, line)
            if d < 0 or u < 0:
                raise ParseError(f"line {line}: negative speed value", line)
            s = _parse_float(row[col[schema.score]], schema.score, line) if have_score \
                else wd * d + wu * u
            lons.append(lon)
            lats.append(lat)
            scores.append(s)
            downloads.append(d)
            uploads.append(u)
            tests.append(_parse_count(row[col[schema.tests]], schema.tests, line))
            devices.append(_parse_count(row[col[schema.devices]], schema.devices, line))

    if not lons:
        raise EmptyDatasetError(f"{path}: no data rows")
    return Dataset.from_coords(lons, lats, scores, downloads, uploads, tests, devices,
                               raw_degrees=raw_degrees)
