"""The performance function U(S) and its run ledger.

U(S) trains a classifier on the points indexed by S and returns its accuracy
on the test split.  Every cache miss is one training run; the ledger counts
them, since training runs are the cost unit every method is compared on.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist

from .data import EmbeddingDataset, SplitSpec


@dataclass(frozen=True)
class UtilitySpec:
    model_kind: str = "knn"
    knn_k: int = 5
    learning_rate: float = 0.5
    epochs: int = 100
    l2: float = 0.0
    metric: str = "accuracy"
    seed: int = 0
    # None means 1/K
    empty_set_utility: float | None = None

    def __post_init__(self):
        if self.model_kind not in ("knn", "logistic"):
            raise ValueError(f"model_kind must be 'knn' or 'logistic', got {self.model_kind!r}")
        if self.knn_k < 1:
            raise ValueError("knn_k must be >= 1")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.l2 < 0:
            raise ValueError("l2 must be >= 0")
        if self.metric != "accuracy":
            raise ValueError(f"unsupported metric {self.metric!r}")
        if self.empty_set_utility is not None and not 0.0 <= self.empty_set_utility <= 1.0:
            raise ValueError("empty_set_utility must lie in [0, 1]")


@dataclass
class RunLedger:
    training_runs: int = 0
    cache_hits: int = 0

    def snapshot(self) -> dict:
        return {"training_runs": self.training_runs, "cache_hits": self.cache_hits}


# --------------------------------------------------------------------------- models


def knn_predict(dist: np.ndarray, train_labels: np.ndarray, k: int, n_classes: int) -> np.ndarray:
    """Majority vote over the k nearest columns of ``dist`` (n_query x n_train).

    Distance ties go to the earlier column; vote ties go to the class whose
    first neighbor ranks nearest.
    """
    n_train = dist.shape[1]
    k = min(k, n_train)
    if k == 1:
        return train_labels[np.argmin(dist, axis=1)]
    nbr = np.argsort(dist, axis=1, kind="stable")[:, :k]
    nbr_labels = train_labels[nbr]
    onehot = nbr_labels[:, :, None] == np.arange(n_classes)
    counts = onehot.sum(axis=1)
    first = np.where(onehot.any(axis=1), onehot.argmax(axis=1), k)
    return np.argmax(counts * (k + 1) - first, axis=1)


def _softmax_xent(W, b, X, Y, l2):
    logits = X @ W + b
    logits -= logits.max(axis=1, keepdims=True)
    logp = logits - np.log(np.exp(logits).sum(axis=1, keepdims=True))
    loss = -(Y * logp).sum() / X.shape[0] + 0.5 * l2 * (W * W).sum()
    return loss, np.exp(logp)


def train_logistic(X, y, n_classes, learning_rate=0.5, epochs=100, l2=0.0):
    """Multinomial logistic regression by full-batch gradient descent.

    Starts from zero weights.  The step is capped at 1/L, L being the
    gradient-Lipschitz bound of the mean cross-entropy, so the loss never
    increases between epochs.  Returns ``(W, b, losses)`` where ``losses``
    holds the loss before each epoch and after the last one.
    """
    X = np.asarray(X, dtype=np.float64)
    n, d = X.shape
    Y = np.zeros((n, n_classes))
    Y[np.arange(n), y] = 1.0
    Xb = np.hstack([X, np.ones((n, 1))])
    lip = 0.5 * np.linalg.norm(Xb, 2) ** 2 / n + l2
    step = min(learning_rate, 1.0 / lip)
    W = np.zeros((d, n_classes))
    b = np.zeros(n_classes)
    losses = []
    for _ in range(epochs):
        loss, P = _softmax_xent(W, b, X, Y, l2)
        losses.append(loss)
        G = (P - Y) / n
        W = W - step * (X.T @ G + l2 * W)
        b = b - step * G.sum(axis=0)
    losses.append(_softmax_xent(W, b, X, Y, l2)[0])
    return W, b, np.array(losses)


# --------------------------------------------------------------------------- evaluator


class UtilityEvaluator:
    """Cached, metered U(S) for one dataset, split and spec.

    Thread-safe: the cache and ledger share one lock.  Training itself runs
    outside the lock, so two threads racing on the same uncached subset may
    both train it; the ledger then counts one run and one hit.
    """

    def __init__(self, ds: EmbeddingDataset, splits: SplitSpec, spec: UtilitySpec | None = None):
        splits.check_bounds(ds.m)
        if splits.test.size == 0:
            raise ValueError("test split is empty; U(S) needs a performance set")
        self.ds = ds
        self.splits = splits
        self.spec = spec or UtilitySpec()
        self.ledger = RunLedger()
        self._cache: dict[bytes, float] = {}
        self._lock = threading.Lock()
        self._test_x = ds.points[splits.test]
        self._test_y = ds.labels[splits.test]
        if self.spec.model_kind == "knn":
            self._dist = cdist(self._test_x, ds.points, "sqeuclidean")

    @property
    def empty_utility(self) -> float:
        if self.spec.empty_set_utility is None:
            return 1.0 / self.ds.n_classes
        return float(self.spec.empty_set_utility)

    def canonical(self, S) -> np.ndarray:
        idx = np.unique(np.asarray(S, dtype=np.int64).reshape(-1))
        if idx.size and (idx[0] < 0 or idx[-1] >= self.ds.m):
            raise IndexError(f"subset index out of range [0, {self.ds.m})")
        return idx

    def _key(self, idx: np.ndarray) -> bytes:
        mask = np.zeros(self.ds.m, dtype=bool)
        mask[idx] = True
        return np.packbits(mask).tobytes()

    def utility(self, S) -> float:
        idx = self.canonical(S)
        if idx.size == 0:
            return self.empty_utility
        key = self._key(idx)
        with self._lock:
            hit = self._cache.get(key)
            if hit is not None:
                self.ledger.cache_hits += 1
                return hit
        u = self._train_and_score(idx)
        with self._lock:
            if key in self._cache:
                self.ledger.cache_hits += 1
                return self._cache[key]
            self._cache[key] = u
            self.ledger.training_runs += 1
        return u

    __call__ = utility

    def marginal(self, S, z: int) -> float:
        idx = self.canonical(S)
        if np.any(idx == z):
            raise ValueError(f"point {z} is already in S")
        return self.utility(np.append(idx, z)) - self.utility(idx)

    def _train_and_score(self, idx: np.ndarray) -> float:
        y = self.ds.labels[idx]
        if self.spec.model_kind == "knn":
            pred = knn_predict(self._dist[:, idx], y, self.spec.knn_k, self.ds.n_classes)
        else:
            W, b, _ = train_logistic(
                self.ds.points[idx], y, self.ds.n_classes,
                self.spec.learning_rate, self.spec.epochs, self.spec.l2,
            )
            pred = np.argmax(self._test_x @ W + b, axis=1)
        return float(np.mean(pred == self._test_y))

    def fresh(self) -> "UtilityEvaluator":
        """Same dataset, split and spec with an empty cache and ledger."""
        return UtilityEvaluator(self.ds, self.splits, self.spec)


def utility(ev: UtilityEvaluator, S) -> float:
    return ev.utility(S)


def marginal(ev: UtilityEvaluator, S, z: int) -> float:
    """U(S + {z}) - U(S); ``z`` must not already be in ``S``."""
    return ev.marginal(S, z)
