"""Prediction-interval construction.

Three interval methods share one residual vocabulary (absolute prediction
errors):

* split conformal prediction, calibrated on a hold-out half;
* an ensemble baseline that bootstraps models from the full training set and
  aggregates leave-one-out residuals (the non-spatial ablation);
* ensemble spatial conformal prediction, which restricts the bootstrap to the
  query's K-nearest neighborhood and can calibrate the interval half-width
  with a locally fitted quantile random forest instead of the empirical
  residual quantile.

Every interval is symmetric about its center and deterministic given the
inputs: the bootstrap stream is seeded from the global seed and the quantized
query coordinates, so grid evaluation is order-independent.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numba import njit

from .geodata import Dataset, _as_xy, knn
from .kernel import KernelModel, StbkrParams, bandwidth_floor, stbkr_predict, stbkr_predict_batch
from .qrf import QrfModel, qrf_fit, qrf_quantile

__all__ = [
    "PredictionInterval",
    "ResidualSet",
    "EscpConfig",
    "BootstrapPlan",
    "CalibrationError",
    "default_neighborhood_size",
    "empirical_quantile",
    "split_cp",
    "fit_split_cp",
    "escp_interval",
    "escp_intervals",
    "EscpPredictor",
    "enbpi_interval",
    "build_residual_features",
    "loo_residual_field",
    "qrf_calibrate",
]

QUANTILE_MODES = ("empirical", "qrf")
POINT_PREDICTORS = ("full_neighborhood", "ensemble_mean")


def default_neighborhood_size(n_train: int) -> int:
    """Fallback K when none is given: a tenth of the training set, capped at
    500 and floored at 2. A heuristic of this artifact, not a tuned value."""
    return min(500, max(2, n_train // 10))


class CalibrationError(RuntimeError):
    """Raised when no usable leave-one-out residuals could be collected."""


@dataclass(frozen=True)
class PredictionInterval:
    """Symmetric interval [lower, upper] about a point prediction `center`."""

    center: float
    lower: float
    upper: float
    alpha: float

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ValueError(f"alpha={self.alpha} must be in (0, 1)")
        if math.isnan(self.center) or math.isnan(self.lower) or math.isnan(self.upper):
            raise ValueError("interval bounds must not be NaN")
        if not self.lower <= self.center <= self.upper:
            raise ValueError(f"need lower <= center <= upper, got {self}")

    @property
    def width(self) -> float:
        return self.upper - self.lower

    def covers(self, y: float) -> bool:
        return self.lower <= y <= self.upper


@dataclass(frozen=True)
class ResidualSet:
    """Nonnegative absolute residuals, in hold-out order."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 1:
            raise ValueError("residuals must be one-dimensional")
        if v.size and not (v >= 0).all():
            raise ValueError("residuals must be nonnegative")
        v = v.copy()
        v.flags.writeable = False
        object.__setattr__(self, "values", v)

    def __len__(self) -> int:
        return self.values.shape[0]


@dataclass(frozen=True, kw_only=True)
class EscpConfig:
    """Knobs for the ensemble spatial method.

    K is the neighborhood size and has no universal default; s is the
    bootstrap batch size (drawn with replacement, so s > K is fine).
    """

    K: int
    alpha: float = 0.2
    B: int = 50
    s: int = 100
    quantile_mode: str = "qrf"
    point_predictor: str = "full_neighborhood"
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ValueError(f"alpha={self.alpha} must be in (0, 1)")
        if self.B < 2:
            raise ValueError(f"B={self.B} must be >= 2")
        if self.K < 2:
            raise ValueError(f"K={self.K} must be >= 2")
        if self.s < 1:
            raise ValueError(f"s={self.s} must be >= 1")
        if self.quantile_mode not in QUANTILE_MODES:
            raise ValueError(f"quantile_mode must be one of {QUANTILE_MODES}")
        if self.point_predictor not in POINT_PREDICTORS:
            raise ValueError(f"point_predictor must be one of {POINT_PREDICTORS}")


@dataclass(frozen=True)
class BootstrapPlan:
    """B index multisets of size s over neighborhood positions 0..K-1, plus
    the membership matrix membership[b, i] = (position i appears in set b)."""

    index_sets: np.ndarray
    membership: np.ndarray

    @classmethod
    def draw(cls, rng: np.random.Generator, B: int, s: int, K: int) -> "BootstrapPlan":
        sets = rng.integers(0, K, size=(B, s))
        membership = np.zeros((B, K), dtype=bool)
        membership[np.arange(B)[:, None], sets] = True
        sets.flags.writeable = False
        membership.flags.writeable = False
        return cls(index_sets=sets, membership=membership)


def empirical_quantile(values, tau: float) -> float:
    """Order-statistic quantile: the lowest value whose cumulative fraction
    reaches tau (the ceil(tau*n)-th smallest)."""
    v = np.sort(np.asarray(values, dtype=np.float64))
    n = v.shape[0]
    if n == 0:
        raise ValueError("empty sample")
    idx = int(math.ceil(tau * n - 1e-12))
    return float(v[min(max(idx, 1), n) - 1])


def split_cp(train_residuals: ResidualSet, alpha: float, yhat: float) -> PredictionInterval:
    """Split-conformal interval about `yhat` from hold-out residuals.

    The half-width is the ceil((1-alpha)(n+1))-th smallest of the residuals
    augmented with +inf; when that rank exceeds n the interval is unbounded.
    """
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha={alpha} must be in (0, 1)")
    n = len(train_residuals)
    if n == 0:
        raise ValueError("empty residual set")
    rank = math.ceil((1.0 - alpha) * (n + 1))
    if rank > n:
        omega = math.inf
    else:
        omega = float(np.partition(train_residuals.values, rank - 1)[rank - 1])
    return PredictionInterval(center=yhat, lower=yhat - omega, upper=yhat + omega,
                              alpha=alpha)


def fit_split_cp(train: Dataset, params: StbkrParams, holdout_frac: float = 0.5,
                 seed: int = 0):
    """Split the data, fit the self-tuning regressor on the proper-training
    half, and score absolute residuals on the hold-out half.

    Returns (model, ResidualSet); the residual count is round(holdout_frac*n).
    """
    n = len(train)
    if not 0.0 < holdout_frac < 1.0:
        raise ValueError(f"holdout_frac={holdout_frac} must be in (0, 1)")
    n_hold = int(round(holdout_frac * n))
    if n_hold < 1 or n - n_hold < params.k:
        raise ValueError(
            f"cannot split {n} points into a hold-out of {n_hold} and a "
            f"training part supporting k={params.k}")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    hold = np.sort(perm[:n_hold])
    proper = np.sort(perm[n_hold:])
    model = KernelModel(train.subset(proper), params)
    preds, _ = stbkr_predict_batch(model, train.xy[hold])
    return model, ResidualSet(np.abs(train.score[hold] - preds))


def _query_rng(seed: int, q_xy: np.ndarray) -> np.random.Generator:
    # quantize to ~1 mm in km units: float noise in grid-center arithmetic
    # must not perturb the per-query stream
    mask = (1 << 64) - 1
    qx = int(round(float(q_xy[0]) * 1e6)) & mask
    qy = int(round(float(q_xy[1]) * 1e6)) & mask
    return np.random.default_rng(np.random.SeedSequence([int(seed) & mask, qx, qy]))


@njit(cache=True)
def _ensemble_core(nxy, ny, qx, qy, sets, k, c, h_floor, rk_power):
    """Self-tuning kernel predictions of every bootstrap model at the m
    neighborhood points and the query.

    nxy: (m, 2) neighborhood coordinates; ny: (m,) targets; sets: (B, s)
    positions into the neighborhood. Returns preds of shape (B, m + 1) with
    the query in the last column. Each model's bandwidth at an evaluation
    point uses the k-th smallest distance to the model's own (multiset)
    points, floored at h_floor; weights that underflow to exact zero are
    skipped, and an all-zero row falls back to the nearest model target.
    """
    B, s = sets.shape
    m = nxy.shape[0]
    preds = np.empty((B, m + 1))
    topk = np.empty(k)
    mx = np.empty(s)
    my = np.empty(s)
    yv = np.empty(s)
    d2 = np.empty(s)
    for b in range(B):
        ymin = ny[sets[b, 0]]
        ymax = ymin
        for j in range(s):
            idx = sets[b, j]
            mx[j] = nxy[idx, 0]
            my[j] = nxy[idx, 1]
            yv[j] = ny[idx]
            if yv[j] < ymin:
                ymin = yv[j]
            elif yv[j] > ymax:
                ymax = yv[j]
        for e in range(m + 1):
            if e < m:
                ex = nxy[e, 0]
                ey = nxy[e, 1]
            else:
                ex = qx
                ey = qy
            nk = 0
            for j in range(s):
                dx = ex - mx[j]
                dy = ey - my[j]
                v = dx * dx + dy * dy
                d2[j] = v
                if nk < k:
                    i = nk
                    while i > 0 and topk[i - 1] > v:
                        topk[i] = topk[i - 1]
                        i -= 1
                    topk[i] = v
                    nk += 1
                elif v < topk[k - 1]:
                    i = k - 1
                    while i > 0 and topk[i - 1] > v:
                        topk[i] = topk[i - 1]
                        i -= 1
                    topk[i] = v
            rk2 = topk[k - 1]
            if rk_power == 2.0:
                h = c * rk2
            else:
                h = c * rk2 ** (0.5 * rk_power)
            if h < h_floor:
                h = h_floor
            hh2 = 2.0 * h * h
            sw = 0.0
            swy = 0.0
            best = 0
            bestd = d2[0]
            for j in range(s):
                if d2[j] < bestd:
                    bestd = d2[j]
                    best = j
                a = -d2[j] / hh2
                if a > -760.0:  # below this exp() is exactly 0.0
                    w = np.exp(a)
                    sw += w
                    swy += w * yv[j]
            if sw > 0.0:
                v = swy / sw
                # a model's prediction stays within its own target range
                if v < ymin:
                    v = ymin
                elif v > ymax:
                    v = ymax
                preds[b, e] = v
            else:
                preds[b, e] = yv[best]
    return preds


@dataclass(frozen=True)
class _EnsembleState:
    """Per-query leave-one-out machinery shared by the interval methods."""

    nbr_idx: np.ndarray        # (K,) training indices, nearest-first
    plan: BootstrapPlan
    residuals: np.ndarray      # (K,) |loo - y|, NaN where the neighbor was never left out
    loo_counts: np.ndarray     # (K,) number of models excluding each neighbor
    preds_at_q: np.ndarray     # (B,) per-model predictions at the query

    @property
    def usable(self) -> np.ndarray:
        return self.loo_counts > 0


def _run_ensemble(train: Dataset, q_xy: np.ndarray, cfg: EscpConfig,
                  params: StbkrParams) -> _EnsembleState:
    n = len(train)
    if cfg.K > n:
        raise ValueError(f"K={cfg.K} exceeds training size {n}")
    if params.k > cfg.K:
        raise ValueError(f"params.k={params.k} exceeds neighborhood size K={cfg.K}")
    if params.k > cfg.s:
        raise ValueError(f"params.k={params.k} exceeds batch size s={cfg.s}; "
                         "each bootstrap model needs at least k points")
    nbr_idx, _ = knn(train, q_xy, cfg.K)
    plan = BootstrapPlan.draw(_query_rng(cfg.seed, q_xy), cfg.B, cfg.s, cfg.K)
    preds = _ensemble_core(
        train.xy[nbr_idx], train.score[nbr_idx],
        float(q_xy[0]), float(q_xy[1]),
        plan.index_sets, params.k, params.c,
        bandwidth_floor(train.diameter), params.rk_power,
    )
    excluded = ~plan.membership
    counts = excluded.sum(axis=0)
    sums = np.where(excluded, preds[:, :cfg.K], 0.0).sum(axis=0)
    with np.errstate(invalid="ignore"):
        loo = sums / counts
    residuals = np.abs(loo - train.score[nbr_idx])
    return _EnsembleState(nbr_idx=nbr_idx, plan=plan, residuals=residuals,
                          loo_counts=counts, preds_at_q=preds[:, cfg.K].copy())


def _center(train: Dataset, q_xy: np.ndarray, cfg: EscpConfig, params: StbkrParams,
            state: _EnsembleState) -> float:
    if cfg.point_predictor == "ensemble_mean":
        return float(state.preds_at_q.mean())
    model = KernelModel(train.subset(state.nbr_idx), params)
    return float(stbkr_predict(model, q_xy))


def build_residual_features(neighbor_residuals, own_residual: float,
                            expected_k: int | None = None):
    """Assemble one quantile-regression row: X is the nearest-first neighbor
    residual vector, Y the point's own residual."""
    x = np.asarray(neighbor_residuals, dtype=np.float64).copy()
    if x.ndim != 1:
        raise ValueError("neighbor residuals must be one-dimensional")
    if expected_k is not None and x.shape[0] != expected_k:
        raise ValueError(f"expected {expected_k} neighbor residuals, got {x.shape[0]}")
    return x, float(own_residual)


def loo_residual_field(train: Dataset, params: StbkrParams) -> np.ndarray:
    """Leave-one-out absolute residual of the self-tuning regressor at every
    training point (each point predicted with itself removed)."""
    n = len(train)
    if n <= params.k:
        raise ValueError(f"need more than k={params.k} points, have {n}")
    xy, y = train.xy, train.score
    k = params.k
    # k-th neighbor distance with the point itself excluded
    dist, idx = train.tree.query(xy, k=k + 1)
    rows = np.arange(n)[:, None]
    is_self = idx == rows
    drop = np.where(is_self.any(axis=1), is_self.argmax(axis=1), k)
    keep = np.arange(k + 1)[None, :] != drop[:, None]
    rk = dist[keep].reshape(n, k)[:, -1]
    h = np.maximum(params.c * rk ** params.rk_power, bandwidth_floor(train.diameter))
    out = np.empty(n)
    chunk = max(1, int(4_000_000 // n))
    for a in range(0, n, chunk):
        b = min(n, a + chunk)
        dx = xy[a:b, 0:1] - xy[None, :, 0]
        dy = xy[a:b, 1:2] - xy[None, :, 1]
        d = np.sqrt(dx * dx + dy * dy)
        u = d / h[a:b, None]
        with np.errstate(over="ignore", under="ignore"):
            w = np.exp(-0.5 * u * u)
        w[np.arange(a, b) - a, np.arange(a, b)] = 0.0  # leave self out
        sw = w.sum(axis=1)
        bad = sw == 0.0
        vals = (w @ y) / np.where(bad, 1.0, sw)
        if bad.any():
            dd = d[bad]
            dd[np.arange(dd.shape[0]), np.arange(a, b)[bad]] = np.inf
            vals[bad] = y[dd.argmin(axis=1)]
        out[a:b] = np.clip(vals, y.min(), y.max())
    return np.abs(out - y)


def _knn_table(train: Dataset, K: int) -> np.ndarray:
    """(n, K) nearest-first indices of each training point's K nearest other
    training points."""
    n = len(train)
    if K >= n:
        raise ValueError(f"K={K} must be < number of points {n}")
    _, idx = train.tree.query(train.xy, k=K + 1)
    rows = np.arange(n)[:, None]
    is_self = idx == rows
    drop = np.where(is_self.any(axis=1), is_self.argmax(axis=1), K)
    keep = np.arange(K + 1)[None, :] != drop[:, None]
    return idx[keep].reshape(n, K)


class _QrfCalibrator:
    """Shared state for QRF-mode calibration: the training-point residual
    field, each point's neighbor-residual features, and (when the training
    neighborhood is the whole training set, so the rows are the same for
    every query) a single cached forest.
    """

    def __init__(self, train: Dataset, cfg: EscpConfig, params: StbkrParams,
                 training_radius: int | None = None):
        n = len(train)
        radius = min(10 * cfg.K, n) if training_radius is None else int(training_radius)
        if radius > n:
            raise ValueError(f"training_radius={radius} exceeds training size {n}")
        if radius < cfg.K + 1:
            raise ValueError(f"training_radius={radius} must be at least K+1={cfg.K + 1}")
        self.train = train
        self.cfg = cfg
        self.params = params
        self.radius = radius
        self.field = loo_residual_field(train, params)
        self.features = self.field[_knn_table(train, cfg.K)]
        mask = (1 << 64) - 1
        self.fit_seed = int(np.random.SeedSequence(
            [int(cfg.seed) & mask, 0x51CF]).generate_state(1)[0])
        # when the training neighborhood is the whole set the forest is the
        # same for every query; fit it once, eagerly, so lookups are
        # read-only afterwards (safe under concurrent queries)
        self._full_model: QrfModel | None = None
        if self.radius == len(train):
            self._full_model = qrf_fit(self.features, self.field, seed=self.fit_seed)

    def _model_for(self, q_xy: np.ndarray) -> QrfModel:
        if self._full_model is not None:
            return self._full_model
        rows, _ = knn(self.train, q_xy, self.radius)
        return qrf_fit(self.features[rows], self.field[rows], seed=self.fit_seed)

    def omega(self, q_xy: np.ndarray, q_features: np.ndarray) -> float:
        model = self._model_for(q_xy)
        return qrf_quantile(model, q_features, 1.0 - self.cfg.alpha)


def _query_features(state: _EnsembleState, K: int) -> np.ndarray:
    """Nearest-first ensemble residuals of the query's neighbors; the rare
    never-left-out neighbor is imputed with the mean usable residual."""
    feats = state.residuals.copy()
    usable = state.usable
    if not usable.all():
        feats[~usable] = feats[usable].mean()
    return feats[:K]


def _interval_from_state(train, q_xy, cfg, params, state, mode, calibrator):
    resid = state.residuals[state.usable]
    if resid.size == 0:
        raise CalibrationError(
            "every neighbor appeared in all bootstrap sets, so no leave-one-out "
            "residuals exist; increase B")
    if mode == "empirical":
        omega = empirical_quantile(resid, 1.0 - cfg.alpha)
    else:
        omega = calibrator.omega(q_xy, _query_features(state, cfg.K))
    omega = max(omega, 0.0)
    center = _center(train, q_xy, cfg, params, state)
    return PredictionInterval(center=center, lower=center - omega,
                              upper=center + omega, alpha=cfg.alpha)


def escp_interval(train: Dataset, q, cfg: EscpConfig, params: StbkrParams,
                  training_radius: int | None = None, return_details: bool = False):
    """Ensemble spatial conformal interval at one query point.

    Bootstraps B batches of size s from the query's K-nearest neighborhood,
    fits the self-tuning regressor on each, aggregates leave-one-out
    residuals over the neighborhood, and calibrates the half-width with the
    empirical residual quantile or a locally fitted quantile forest.
    """
    q_xy = _as_xy(q)
    state = _run_ensemble(train, q_xy, cfg, params)
    calibrator = None
    if cfg.quantile_mode == "qrf":
        calibrator = _QrfCalibrator(train, cfg, params, training_radius)
    interval = _interval_from_state(train, q_xy, cfg, params, state,
                                    cfg.quantile_mode, calibrator)
    if return_details:
        return interval, state
    return interval


def escp_intervals(train: Dataset, q_xy, cfg: EscpConfig, params: StbkrParams,
                   modes=None, training_radius: int | None = None):
    """Intervals for an (m, 2) array of query points, optionally for several
    quantile modes from one ensemble pass per query.

    Equivalent to calling `escp_interval` per point and per mode (the
    bootstrap stream depends only on the seed and the query location, not on
    the mode). Returns {mode: [PredictionInterval, ...]}.
    """
    q_xy = np.atleast_2d(np.asarray(q_xy, dtype=np.float64))
    modes = (cfg.quantile_mode,) if modes is None else tuple(modes)
    for mode in modes:
        if mode not in QUANTILE_MODES:
            raise ValueError(f"unknown quantile mode {mode!r}")
    calibrator = None
    if "qrf" in modes:
        calibrator = _QrfCalibrator(train, cfg, params, training_radius)
    out = {mode: [] for mode in modes}
    for row in q_xy:
        state = _run_ensemble(train, row, cfg, params)
        for mode in modes:
            out[mode].append(_interval_from_state(train, row, cfg, params, state,
                                                  mode, calibrator))
    return out


class EscpPredictor:
    """Reusable per-query interval evaluator.

    Precomputes everything query-independent (the QRF residual field and,
    when the QRF training neighborhood is the full set, the forest itself),
    after which `interval` is side-effect-free and may be called from
    multiple threads. Results are identical to `escp_interval`.
    """

    def __init__(self, train: Dataset, cfg: EscpConfig, params: StbkrParams,
                 training_radius: int | None = None):
        self.train = train
        self.cfg = cfg
        self.params = params
        self.calibrator = (_QrfCalibrator(train, cfg, params, training_radius)
                           if cfg.quantile_mode == "qrf" else None)

    def interval(self, q) -> PredictionInterval:
        q_xy = _as_xy(q)
        state = _run_ensemble(self.train, q_xy, self.cfg, self.params)
        return _interval_from_state(self.train, q_xy, self.cfg, self.params,
                                    state, self.cfg.quantile_mode, self.calibrator)


def qrf_calibrate(train: Dataset, q, cfg: EscpConfig, params: StbkrParams,
                  training_radius: int | None = None) -> float:
    """QRF-calibrated interval half-width at `q`.

    Trains the forest on the `training_radius` nearest training points (rows
    pair each point's leave-one-out residual with its K nearest neighbors'
    residuals) and evaluates the (1 - alpha) quantile at the query's own
    nearest-first neighborhood residual vector.
    """
    q_xy = _as_xy(q)
    state = _run_ensemble(train, q_xy, cfg, params)
    if not state.usable.any():
        raise CalibrationError(
            "every neighbor appeared in all bootstrap sets, so no leave-one-out "
            "residuals exist; increase B")
    calibrator = _QrfCalibrator(train, cfg, params, training_radius)
    return calibrator.omega(q_xy, _query_features(state, cfg.K))


def enbpi_interval(train: Dataset, q, alpha: float = 0.2, B: int = 50, s: int = 100,
                   params: StbkrParams | None = None, seed: int = 0) -> PredictionInterval:
    """Non-spatial ensemble baseline: the same bootstrap/leave-one-out
    machinery with the neighborhood widened to the full training set, the
    empirical residual quantile, and the ensemble-mean center."""
    if params is None:
        raise ValueError("params is required")
    cfg = EscpConfig(K=len(train), alpha=alpha, B=B, s=s,
                     quantile_mode="empirical", point_predictor="ensemble_mean",
                     seed=seed)
    return escp_interval(train, q, cfg, params)
