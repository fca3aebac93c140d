"""Quantile regression forest.

Trees are grown with variance-minimizing splits on bootstrap samples with a
sqrt-sized random feature subset per split (scikit-learn does the growing);
what makes the forest a quantile estimator is that every leaf retains all
training targets routed to it, so any conditional quantile can be read off
the pooled leaf distributions.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from sklearn.ensemble import RandomForestRegressor

__all__ = ["QrfModel", "qrf_fit", "qrf_quantile", "qrf_quantile_batch"]

# slack when comparing cumulative weights against tau; covers float drift in
# the cumsum without ever moving past a genuinely distinct weight step
_CUM_EPS = 1e-9


@dataclass
class QrfModel:
    forest: RandomForestRegressor
    feature_dim: int
    # per tree: mapping from leaf id to the training targets routed there
    leaf_targets: list[dict[int, np.ndarray]] = field(repr=False, default_factory=list)
    n_train: int = 0

    @property
    def n_trees(self) -> int:
        return len(self.leaf_targets)


def qrf_fit(features, targets, trees: int = 100, min_leaf: int = 5,
            seed: int = 0) -> QrfModel:
    """Fit a quantile random forest on (n, K) features and n scalar targets."""
    X = np.asarray(features, dtype=np.float64)
    y = np.asarray(targets, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] == 0:
        raise ValueError("features must be a non-empty (n, K) matrix")
    if y.shape != (X.shape[0],):
        raise ValueError(f"targets shape {y.shape} does not match {X.shape[0]} rows")
    if X.shape[0] < min_leaf:
        raise ValueError(f"need at least min_leaf={min_leaf} rows, have {X.shape[0]}")
    forest = RandomForestRegressor(
        n_estimators=trees,
        min_samples_leaf=min_leaf,
        max_features="sqrt",
        bootstrap=True,
        random_state=int(seed) % (2 ** 32),
        n_jobs=1,
    )
    forest.fit(X, y)
    # route the full training set down each tree; leaves keep every target
    leaf_ids = forest.apply(X)
    leaf_targets = []
    for t in range(leaf_ids.shape[1]):
        col = leaf_ids[:, t]
        order = np.argsort(col, kind="stable")
        sorted_ids = col[order]
        starts = np.concatenate([[0], np.flatnonzero(np.diff(sorted_ids)) + 1])
        groups = np.split(order, starts[1:])
        leaf_targets.append({int(sorted_ids[s]): y[g] for s, g in zip(starts, groups)})
    return QrfModel(forest=forest, feature_dim=X.shape[1],
                    leaf_targets=leaf_targets, n_train=X.shape[0])


def _pooled(model: QrfModel, x: np.ndarray):
    """Targets and weights pooled over the leaves `x` lands in, one per tree."""
    leaves = model.forest.apply(x[None, :])[0]
    t_total = model.n_trees
    vals, wts = [], []
    for t, leaf in enumerate(leaves):
        targets = model.leaf_targets[t][int(leaf)]
        vals.append(targets)
        wts.append(np.full(targets.shape[0], 1.0 / (t_total * targets.shape[0])))
    return np.concatenate(vals), np.concatenate(wts)


def qrf_quantile(model: QrfModel, x, tau: float) -> float:
    """The tau-quantile of the pooled weighted leaf distribution at `x`:
    the lowest target value whose cumulative weight reaches tau."""
    if not 0.0 < tau < 1.0:
        raise ValueError(f"tau={tau} must be in (0, 1)")
    x = np.asarray(x, dtype=np.float64).ravel()
    if x.shape[0] != model.feature_dim:
        raise ValueError(f"feature vector has length {x.shape[0]}, expected {model.feature_dim}")
    vals, wts = _pooled(model, x)
    order = np.argsort(vals, kind="stable")
    cum = np.cumsum(wts[order])
    idx = int(np.searchsorted(cum, tau - _CUM_EPS, side="left"))
    idx = min(idx, vals.shape[0] - 1)
    return float(vals[order][idx])


def qrf_quantile_batch(model: QrfModel, X, tau: float) -> np.ndarray:
    """Row-wise `qrf_quantile` over an (m, K) matrix."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    return np.array([qrf_quantile(model, row, tau) for row in X])
