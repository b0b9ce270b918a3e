"""Bagged CART regression forest with out-of-bag predictions and impurity importance.

Tree growth runs in the compiled kernel when available (see ``_kernels``).
Every tree draws from its own splitmix64 stream seeded from
``(config.seed, tree index)``, so a fit is reproducible bit for bit and
independent of the backend.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from ._forest_py import _mix_array
from ._kernels import kernels

logger = logging.getLogger(__name__)

_GAMMA = np.uint64(0x9E3779B97F4A7C15)


@dataclass(frozen=True)
class ForestConfig:
    """Forest hyper-parameters.

    ``split_candidates`` is the number of covariates sampled at each node
    (``mtry``); ``None`` means ``max(1, floor(sqrt(p)))``. Nodes holding
    ``min_node_size`` or fewer bagged observations become leaves.
    """

    num_trees: int = 500
    split_candidates: int | None = None
    min_node_size: int = 5
    max_depth: int | None = None
    seed: int = 0

    def __post_init__(self):
        if self.num_trees < 1:
            raise ValueError("num_trees must be >= 1")
        if self.split_candidates is not None and self.split_candidates < 1:
            raise ValueError("split_candidates must be >= 1")
        if self.min_node_size < 1:
            raise ValueError("min_node_size must be >= 1")
        if self.max_depth is not None and self.max_depth < 1:
            raise ValueError("max_depth must be >= 1")
        if not 0 <= int(self.seed) < 2**64:
            raise ValueError("seed must fit in an unsigned 64-bit integer")

    def mtry(self, p: int) -> int:
        if self.split_candidates is None:
            return max(1, int(np.sqrt(p)))
        if self.split_candidates > p:
            raise ValueError(f"split_candidates={self.split_candidates} exceeds p={p}")
        return self.split_candidates


def tree_seeds(seed: int, num_trees: int) -> np.ndarray:
    """Per-tree stream seeds derived from the forest seed and tree index."""
    with np.errstate(over="ignore"):
        base = _mix_array(np.array([seed], dtype=np.uint64) ^ np.uint64(0xD1B54A32D192ED03))[0]
        idx = np.arange(1, num_trees + 1, dtype=np.uint64)
        return _mix_array(base + idx * _GAMMA)


class Forest:
    """A fitted forest. Treat instances as immutable.

    Attributes
    ----------
    importance : ndarray, shape (p,)
        Total decrease in within-node sum of squares attributed to each
        covariate, summed over every split of every tree.
    inbag : ndarray, shape (num_trees, n)
        Multiplicity of each training row in each tree's bootstrap bag.
    oob_predictions : ndarray, shape (n,)
        Mean prediction over the trees whose bag excluded the row.
    n_oob_missing : int
        Rows that were in-bag for every tree; their OOB prediction falls
        back to the full-forest prediction.
    """

    def __init__(self, config, arrays, X_train):
        feature, threshold, left, right, value, node_count, inbag, importance = arrays
        width = int(node_count.max())
        self.config = config
        self.feature = np.ascontiguousarray(feature[:, :width])
        self.threshold = np.ascontiguousarray(threshold[:, :width])
        self.left = np.ascontiguousarray(left[:, :width])
        self.right = np.ascontiguousarray(right[:, :width])
        self.value = np.ascontiguousarray(value[:, :width])
        # slots past each tree's node count are scratch; pin them
        unused = np.arange(width) >= node_count[:, None]
        self.feature[unused] = -1
        self.left[unused] = -1
        self.right[unused] = -1
        self.threshold[unused] = 0.0
        self.value[unused] = 0.0
        self.node_count = node_count
        self.inbag = inbag
        self.tree_importance = importance
        self.importance = importance.sum(axis=0)
        self.n_features = X_train.shape[1]
        self._X_train = X_train
        self._oob = None
        self._insample = None
        self.n_oob_missing = 0

    @property
    def num_trees(self) -> int:
        return self.feature.shape[0]

    def _tables(self):
        return self.feature, self.threshold, self.left, self.right, self.value

    def predict(self, X) -> np.ndarray:
        X = _as_matrix(X)
        if X.shape[1] != self.n_features:
            raise ValueError(f"expected {self.n_features} covariates, got {X.shape[1]}")
        return kernels.predict(*self._tables(), X)

    @property
    def fitted_values(self) -> np.ndarray:
        """In-sample predictions for the training rows (cached)."""
        if self._insample is None:
            self._insample = self.predict(self._X_train)
        return self._insample

    @property
    def oob_predictions(self) -> np.ndarray:
        if self._oob is None:
            pred, counts = kernels.predict_oob(*self._tables(), self._X_train, self.inbag)
            missing = counts == 0
            if missing.any():
                self.n_oob_missing = int(missing.sum())
                logger.warning("%d rows in-bag for every tree; using full-forest "
                               "predictions for them", self.n_oob_missing)
                pred[missing] = self.fitted_values[missing]
            self._oob_counts = counts
            self._oob = pred
        return self._oob

    @property
    def oob_counts(self) -> np.ndarray:
        self.oob_predictions
        return self._oob_counts

    def importance_ranking(self) -> list[int]:
        """Covariate indices, most important first; ties by index."""
        return sorted(range(self.n_features), key=lambda k: (-self.importance[k], k))


def _as_matrix(X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    if X.ndim != 2:
        raise ValueError("covariates must be a 2-D array")
    return np.ascontiguousarray(X)


def fit_forest(X, y, config: ForestConfig | None = None) -> Forest:
    """Grow ``config.num_trees`` CART trees on bootstrap bags of size n."""
    config = config or ForestConfig()
    X = _as_matrix(X)
    y = np.ascontiguousarray(np.asarray(y, dtype=np.float64).ravel())
    n, p = X.shape
    if n == 0 or p == 0:
        raise ValueError("empty data")
    if n < 2:
        raise ValueError("need at least two rows")
    if y.shape[0] != n:
        raise ValueError(f"response has {y.shape[0]} rows, covariates {n}")
    if not (np.isfinite(X).all() and np.isfinite(y).all()):
        raise ValueError("covariates and response must be finite")
    mtry = config.mtry(p)
    order = np.ascontiguousarray(
        np.stack([np.argsort(X[:, f], kind="stable") for f in range(p)]).astype(np.int32))
    seeds = tree_seeds(int(config.seed), config.num_trees)
    arrays = kernels.build_forest(
        X, y, order, seeds, mtry, config.min_node_size,
        -1 if config.max_depth is None else config.max_depth)
    return Forest(config, arrays, X)


def predict(forest: Forest, points) -> np.ndarray:
    return forest.predict(points)


def predict_oob(forest: Forest) -> np.ndarray:
    return forest.oob_predictions
