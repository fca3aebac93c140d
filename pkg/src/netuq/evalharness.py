"""Synthetic fixtures with known ground truth, plus coverage/width metrics
and the three-method comparison experiment.

The synthetic field is a fixed mixture of three Gaussian bumps over a unit
lon/lat square, so expected values are stable across runs and machines.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .conformal import (
    EscpConfig,
    default_neighborhood_size,
    escp_intervals,
    fit_split_cp,
    split_cp,
)
from .geodata import Dataset
from .kernel import StbkrParams, stbkr_predict_batch

__all__ = [
    "SyntheticSpec",
    "EvalReport",
    "field_mean",
    "generate",
    "coverage",
    "mean_width",
    "median_width",
    "count_infinite",
    "compare_methods",
    "format_report_table",
    "METHODS",
]

FIELD_KINDS = ("smooth", "heteroscedastic", "clustered")
METHODS = ("split", "enbpi", "escp")

# bump centers / heights / widths in unit-square coordinates; the base level
# keeps scores in a plausible positive range
_BASE = 100.0
_BUMPS = (
    (0.25, 0.30, 40.0, 0.18),
    (0.70, 0.60, -25.0, 0.22),
    (0.45, 0.85, 30.0, 0.12),
)
_CLUSTERS = ((0.20, 0.25), (0.75, 0.65), (0.50, 0.90))
_CLUSTER_STD = 0.035


@dataclass(frozen=True)
class SyntheticSpec:
    """Deterministic synthetic dataset description."""

    n: int
    field_kind: str = "smooth"
    noise_base: float = 5.0
    noise_ratio: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.n < 50:
            raise ValueError(f"n={self.n} must be >= 50")
        if self.field_kind not in FIELD_KINDS:
            raise ValueError(f"field_kind must be one of {FIELD_KINDS}")
        if self.noise_ratio < 1.0:
            raise ValueError(f"noise_ratio={self.noise_ratio} must be >= 1")


def field_mean(lon, lat):
    """Noise-free field value at unit-square coordinates. Accepts arrays."""
    lon = np.asarray(lon, dtype=np.float64)
    lat = np.asarray(lat, dtype=np.float64)
    mu = np.full(np.broadcast(lon, lat).shape, _BASE)
    for cu, cv, height, width in _BUMPS:
        mu = mu + height * np.exp(-((lon - cu) ** 2 + (lat - cv) ** 2) / (2.0 * width ** 2))
    return mu


def generate(spec: SyntheticSpec) -> Dataset:
    """Sample a dataset on the unit lon/lat square per the spec."""
    rng = np.random.default_rng(spec.seed)
    if spec.field_kind == "clustered":
        n_dense = int(0.9 * spec.n)
        per = [n_dense // len(_CLUSTERS)] * len(_CLUSTERS)
        per[0] += n_dense - sum(per)
        parts = [np.clip(rng.normal(c, _CLUSTER_STD, size=(m, 2)), 0.0, 1.0)
                 for (c, m) in zip(_CLUSTERS, per)]
        parts.append(rng.uniform(0.0, 1.0, size=(spec.n - n_dense, 2)))
        pts = np.concatenate(parts, axis=0)
        lon, lat = pts[:, 0], pts[:, 1]
    else:
        lon = rng.uniform(0.0, 1.0, spec.n)
        lat = rng.uniform(0.0, 1.0, spec.n)
    mu = field_mean(lon, lat)
    if spec.field_kind == "heteroscedastic":
        std = np.where(lon < 0.5, spec.noise_base, spec.noise_base * spec.noise_ratio)
    else:
        std = np.full(spec.n, spec.noise_base)
    score = mu + rng.standard_normal(spec.n) * std
    positive = np.clip(score, 0.0, None)
    return Dataset.from_coords(
        lon, lat, score,
        download=positive * 1.2, upload=positive * 0.8,
        tests=rng.integers(1, 6, spec.n), devices=rng.integers(1, 4, spec.n),
    )


def _check_lengths(intervals, truths):
    if len(intervals) != len(truths):
        raise ValueError(f"{len(intervals)} intervals vs {len(truths)} truths")


def coverage(intervals, truths) -> float:
    """Fraction of truths inside their (closed) interval."""
    _check_lengths(intervals, truths)
    if not intervals:
        raise ValueError("empty interval list")
    hits = sum(1 for iv, y in zip(intervals, truths) if iv.covers(y))
    return hits / len(intervals)


def _finite_widths(intervals) -> np.ndarray:
    return np.array([iv.width for iv in intervals if math.isfinite(iv.width)])


def count_infinite(intervals) -> int:
    return sum(1 for iv in intervals if not math.isfinite(iv.width))


def mean_width(intervals) -> float:
    """Mean width over finite-width intervals (infinite ones are counted
    separately by `count_infinite`)."""
    if not intervals:
        raise ValueError("empty interval list")
    finite = _finite_widths(intervals)
    return float(finite.mean()) if finite.size else math.nan


def median_width(intervals) -> float:
    if not intervals:
        raise ValueError("empty interval list")
    finite = _finite_widths(intervals)
    return float(np.median(finite)) if finite.size else math.nan


@dataclass(frozen=True)
class EvalReport:
    """Coverage and width summary of one method on one test set."""

    method: str
    coverage: float
    mean_width: float
    median_width: float
    n_test: int
    infinite_width_count: int

    @classmethod
    def from_intervals(cls, method: str, intervals, truths) -> "EvalReport":
        _check_lengths(intervals, truths)
        return cls(
            method=method,
            coverage=coverage(intervals, truths),
            mean_width=mean_width(intervals),
            median_width=median_width(intervals),
            n_test=len(intervals),
            infinite_width_count=count_infinite(intervals),
        )


def split_cp_intervals(train: Dataset, test_xy, params: StbkrParams, alpha: float,
                       holdout_frac: float = 0.5, seed: int = 0):
    """Split-conformal intervals at each row of `test_xy`."""
    model, residuals = fit_split_cp(train, params, holdout_frac=holdout_frac, seed=seed)
    centers, _ = stbkr_predict_batch(model, test_xy)
    return [split_cp(residuals, alpha, float(c)) for c in centers]


def enbpi_intervals(train: Dataset, test_xy, params: StbkrParams, alpha: float,
                    B: int, s: int, seed: int = 0):
    """Ensemble-baseline intervals at each row of `test_xy`."""
    cfg = EscpConfig(K=len(train), alpha=alpha, B=B, s=s,
                     quantile_mode="empirical", point_predictor="ensemble_mean",
                     seed=seed)
    return escp_intervals(train, test_xy, cfg, params)["empirical"]


def compare_methods(train: Dataset, test: Dataset, params: StbkrParams,
                    alpha: float = 0.2, B: int = 50, s: int = 100,
                    K: int | None = None, quantile_mode: str = "qrf",
                    point_predictor: str = "full_neighborhood", seed: int = 0,
                    holdout_frac: float = 0.5, training_radius: int | None = None,
                    methods=METHODS):
    """Run the requested interval methods on one train/test split with a
    shared seed and return one EvalReport per method."""
    if K is None:
        K = default_neighborhood_size(len(train))
    truths = test.score
    reports = []
    for method in methods:
        if method == "split":
            ivs = split_cp_intervals(train, test.xy, params, alpha,
                                     holdout_frac=holdout_frac, seed=seed)
        elif method == "enbpi":
            ivs = enbpi_intervals(train, test.xy, params, alpha, B, s, seed=seed)
        elif method == "escp":
            cfg = EscpConfig(K=K, alpha=alpha, B=B, s=s, quantile_mode=quantile_mode,
                             point_predictor=point_predictor, seed=seed)
            ivs = escp_intervals(train, test.xy, cfg, params,
                                 training_radius=training_radius)[quantile_mode]
        else:
            raise ValueError(f"unknown method {method!r}")
        reports.append(EvalReport.from_intervals(method, ivs, truths))
    return reports


def format_report_table(reports, alpha: float) -> str:
    """Aligned plain-text comparison table (methods as columns)."""
    names = [r.method for r in reports]
    width = max(12, *(len(n) + 2 for n in names))
    lines = [f"alpha={alpha:g}  (target coverage {1 - alpha:g})"]
    header = "metric".ljust(16) + "".join(n.rjust(width) for n in names)
    lines.append(header)
    lines.append("-" * len(header))
    for label, attr in (("coverage", "coverage"), ("mean_width", "mean_width"),
                        ("median_width", "median_width"),
                        ("infinite_count", "infinite_width_count")):
        row = label.ljust(16)
        for r in reports:
            v = getattr(r, attr)
            row += (f"{v:{width}d}" if isinstance(v, int) else f"{v:{width}.6g}")
        lines.append(row)
    lines.append(f"n_test={reports[0].n_test}" if reports else "n_test=0")
    return "\n".join(lines)
