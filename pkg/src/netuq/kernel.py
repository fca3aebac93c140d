"""Kernel regression over planar measurements.

`kr_predict` is plain Nadaraya-Watson with a fixed bandwidth; the self-tuning
variant rescales the bandwidth at each query from the distance to its k-th
nearest training point, so sparse regions smooth over a wider area. Weights
are computed over the full training set by default; the optional `cutoff`
skips points whose weight is provably below `cutoff` times the maximum, using
a range query on the spatial index.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geodata import Dataset, PlanarPoint, _as_xy, knn

__all__ = [
    "StbkrParams",
    "KernelModel",
    "gaussian_kernel",
    "bandwidth_floor",
    "kr_predict",
    "stbkr_bandwidth",
    "stbkr_predict",
    "stbkr_predict_batch",
    "cross_validate",
]

_SQRT_2PI = math.sqrt(2.0 * math.pi)


@dataclass(frozen=True)
class StbkrParams:
    """Self-tuning bandwidth parameters: h(q) = c * R_k(q) ** rk_power.

    `rk_power` defaults to the squared-distance law; set it to 1.0 to use the
    raw neighbor distance as the bandwidth scale instead.
    """

    c: float
    k: int
    rk_power: float = 2.0

    def __post_init__(self):
        if not self.c > 0:
            raise ValueError(f"c={self.c} must be > 0")
        if self.k < 1:
            raise ValueError(f"k={self.k} must be >= 1")


@dataclass(frozen=True)
class KernelModel:
    """A fitted regressor: the training data plus tuned parameters."""

    train: Dataset
    params: StbkrParams

    def __post_init__(self):
        if self.params.k > len(self.train):
            raise ValueError(f"k={self.params.k} exceeds training size {len(self.train)}")

    def predict(self, q, return_underflow: bool = False):
        return stbkr_predict(self, q, return_underflow=return_underflow)


def gaussian_kernel(u):
    """Standard Gaussian kernel, exp(-u^2/2) / sqrt(2*pi). Accepts arrays."""
    u = np.asarray(u, dtype=np.float64)
    out = np.exp(-0.5 * u * u) / _SQRT_2PI
    return float(out) if out.ndim == 0 else out


def bandwidth_floor(diameter: float) -> float:
    """Minimum bandwidth for a dataset of the given planar diameter.

    Keeps the kernel well defined when the k-th neighbor distance is zero
    (duplicated tile locations). An all-duplicate dataset has diameter zero,
    where a small absolute floor applies.
    """
    return 1e-8 * diameter * diameter if diameter > 0 else 1e-8


def _weighted_mean(train_xy, train_y, q_xy, h, cutoff=None, tree=None):
    """Nadaraya-Watson values for query rows `q_xy` with per-query bandwidths `h`.

    Returns (values, underflow). Where every weight underflows to zero the
    value falls back to the nearest training score and the flag is set.
    """
    n = train_xy.shape[0]
    m = q_xy.shape[0]
    out = np.empty(m)
    under = np.zeros(m, dtype=bool)
    ymin = float(train_y.min())
    ymax = float(train_y.max())
    if cutoff is not None and tree is not None:
        # keep only points that can carry at least cutoff * max weight
        for i in range(m):
            dmin, _ = tree.query(q_xy[i], k=1)
            r = math.sqrt(dmin * dmin + 2.0 * h[i] * h[i] * math.log(1.0 / cutoff))
            sel = tree.query_ball_point(q_xy[i], r)
            v, u = _weighted_mean(train_xy[sel], train_y[sel], q_xy[i:i + 1],
                                  h[i:i + 1])
            out[i] = v[0]
            under[i] = u[0]
        return out, under
    chunk = max(1, int(4_000_000 // max(1, n)))
    for a in range(0, m, chunk):
        b = min(m, a + chunk)
        dx = q_xy[a:b, 0:1] - train_xy[None, :, 0]
        dy = q_xy[a:b, 1:2] - train_xy[None, :, 1]
        d = np.sqrt(dx * dx + dy * dy)
        u = d / h[a:b, None]
        with np.errstate(over="ignore", under="ignore"):
            w = np.exp(-0.5 * u * u)
        sw = w.sum(axis=1)
        bad = sw == 0.0
        vals = (w @ train_y) / np.where(bad, 1.0, sw)
        if bad.any():
            vals[bad] = train_y[d[bad].argmin(axis=1)]
        out[a:b] = np.clip(vals, ymin, ymax)
        under[a:b] = bad
    return out, under


def kr_predict(model: KernelModel, q, h: float, return_underflow: bool = False,
               cutoff: float | None = None):
    """Fixed-bandwidth kernel regression estimate at `q`.

    The normalized weight of point i is K(d_i / h) / sum_j K(d_j / h); the
    1/h factor of the scaled kernel cancels. The result always lies within
    the range of the training scores.
    """
    if len(model.train) < 1:
        raise ValueError("model has no training points")
    if not h > 0:
        raise ValueError(f"bandwidth h={h} must be > 0")
    qxy = _as_xy(q)[None, :]
    vals, under = _weighted_mean(model.train.xy, model.train.score, qxy,
                                 np.array([h]), cutoff=cutoff,
                                 tree=model.train.tree if cutoff else None)
    if return_underflow:
        return float(vals[0]), bool(under[0])
    return float(vals[0])


def stbkr_bandwidth(model: KernelModel, q) -> float:
    """Self-tuned bandwidth at `q`: c * R_k(q) ** rk_power, floored at the
    dataset's bandwidth floor."""
    p = model.params
    if len(model.train) < p.k:
        raise ValueError(f"training size {len(model.train)} < k={p.k}")
    _, dist = knn(model.train, q, p.k)
    rk = float(dist[-1])
    return max(p.c * rk ** p.rk_power, bandwidth_floor(model.train.diameter))


def stbkr_predict(model: KernelModel, q, return_underflow: bool = False,
                  cutoff: float | None = None):
    """Self-tuning-bandwidth prediction at `q`."""
    return kr_predict(model, q, stbkr_bandwidth(model, q),
                      return_underflow=return_underflow, cutoff=cutoff)


def stbkr_predict_batch(model: KernelModel, q_xy, cutoff: float | None = None):
    """Vectorized self-tuning predictions for an (m, 2) array of query points.

    Returns (values, underflow_flags). Equivalent to calling `stbkr_predict`
    per row.
    """
    p = model.params
    train = model.train
    if len(train) < p.k:
        raise ValueError(f"training size {len(train)} < k={p.k}")
    q_xy = np.atleast_2d(np.asarray(q_xy, dtype=np.float64))
    d, _ = train.tree.query(q_xy, k=p.k)
    rk = d.reshape(q_xy.shape[0], p.k)[:, -1]
    h = np.maximum(p.c * rk ** p.rk_power, bandwidth_floor(train.diameter))
    return _weighted_mean(train.xy, train.score, q_xy, h, cutoff=cutoff,
                          tree=train.tree if cutoff else None)


def cross_validate(train: Dataset, k_grid, c_grid, folds: int = 5, seed: int = 0,
                   rk_power: float = 2.0, return_scores: bool = False):
    """Grid-search (k, c) by K-fold cross-validated RMSE.

    Folds are contiguous blocks of a seeded shuffle. Ties break toward the
    smaller k, then the smaller c. With `return_scores`, also returns the
    deduplicated sorted grids and the fold-averaged RMSE matrix indexed
    [k, c].
    """
    ks = np.unique(np.asarray(k_grid, dtype=np.int64))
    cs = np.unique(np.asarray(c_grid, dtype=np.float64))
    if ks.size == 0 or cs.size == 0:
        raise ValueError("k_grid and c_grid must be non-empty")
    if folds < 2:
        raise ValueError(f"folds={folds} must be >= 2")
    n = len(train)
    kmax = int(ks.max())
    if n < folds * kmax:
        raise ValueError(f"need at least folds*max(k) = {folds * kmax} points, have {n}")

    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    blocks = np.array_split(perm, folds)
    rmse = np.zeros((ks.size, cs.size))
    for f in range(folds):
        held = np.sort(blocks[f])
        rest = np.sort(np.concatenate([blocks[g] for g in range(folds) if g != f]))
        part = train.subset(rest)
        held_xy = train.xy[held]
        held_y = train.score[held]
        dk, _ = part.tree.query(held_xy, k=kmax)
        dk = dk.reshape(held.size, kmax)
        floor = bandwidth_floor(part.diameter)
        txy, ty = part.xy, part.score
        sse = np.zeros((ks.size, cs.size))
        chunk = max(1, int(4_000_000 // max(1, len(part))))
        for a in range(0, held_xy.shape[0], chunk):
            b = min(held_xy.shape[0], a + chunk)
            dx = held_xy[a:b, 0:1] - txy[None, :, 0]
            dy = held_xy[a:b, 1:2] - txy[None, :, 1]
            d = np.sqrt(dx * dx + dy * dy)
            for ki, k in enumerate(ks):
                rk = dk[a:b, k - 1]
                for ci, c in enumerate(cs):
                    h = np.maximum(c * rk ** rk_power, floor)
                    u = d / h[:, None]
                    with np.errstate(over="ignore", under="ignore"):
                        w = np.exp(-0.5 * u * u)
                    sw = w.sum(axis=1)
                    bad = sw == 0.0
                    vals = (w @ ty) / np.where(bad, 1.0, sw)
                    if bad.any():
                        vals[bad] = ty[d[bad].argmin(axis=1)]
                    np.clip(vals, ty.min(), ty.max(), out=vals)
                    sse[ki, ci] += ((vals - held_y[a:b]) ** 2).sum()
        rmse += np.sqrt(sse / held.size)
    rmse /= folds

    best = (0, 0)
    for ki in range(ks.size):
        for ci in range(cs.size):
            if rmse[ki, ci] < rmse[best]:
                best = (ki, ci)
    params = StbkrParams(c=float(cs[best[1]]), k=int(ks[best[0]]), rk_power=rk_power)
    if return_scores:
        return params, ks, cs, rmse
    return params
