"""Gaussian mixture clustering of embeddings.

EM from a k-means start, with ``reg_covar`` added to every covariance
diagonal in each M-step and Cholesky-based log-densities.  The defaults of
:class:`ClusterConfig` are the usual scikit-learn ones (full covariances,
tol 1e-3, reg_covar 1e-6, 100 iterations, one init) with 30 components.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cholesky, solve_triangular, LinAlgError
from scipy.special import logsumexp


class ClusteringError(ValueError):
    pass


class SingularModelError(ClusteringError):
    """A component covariance stayed non-positive-definite after regularization."""


@dataclass(frozen=True)
class ClusterConfig:
    n_components: int = 30
    covariance_type: str = "full"
    tol: float = 1e-3
    reg_covar: float = 1e-6
    max_iter: int = 100
    n_init: int = 1
    init: str = "kmeans"
    seed: int = 0

    def __post_init__(self):
        if self.n_components < 1:
            raise ValueError("n_components must be >= 1")
        if self.covariance_type not in ("full", "diag"):
            raise ValueError(f"covariance_type must be 'full' or 'diag', got {self.covariance_type!r}")
        if self.init != "kmeans":
            raise ValueError(f"only kmeans initialization is supported, got {self.init!r}")
        if self.tol < 0 or self.reg_covar < 0:
            raise ValueError("tol and reg_covar must be nonnegative")
        if self.max_iter < 1 or self.n_init < 1:
            raise ValueError("max_iter and n_init must be >= 1")


# --------------------------------------------------------------------------- k-means


def _sq_dists(X, C):
    return ((X[:, None, :] - C[None, :, :]) ** 2).sum(axis=2)


def kmeans_plusplus(points, k, rng) -> np.ndarray:
    """k-means++ seeding; returns the chosen row indices in selection order."""
    X = np.asarray(points, dtype=np.float64)
    n = X.shape[0]
    chosen = [int(rng.integers(n))]
    closest = ((X - X[chosen[0]]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = closest.sum()
        if total > 0:
            nxt = int(rng.choice(n, p=closest / total))
        else:
            # every point coincides with a center already; pick an unused row
            free = np.setdiff1d(np.arange(n), chosen)
            nxt = int(rng.choice(free))
        chosen.append(nxt)
        closest = np.minimum(closest, ((X - X[nxt]) ** 2).sum(axis=1))
    return np.array(chosen)


def lloyd(points, means, max_iter=50):
    """Lloyd iterations until the assignment is stationary or ``max_iter``.

    Empty clusters keep their previous center.  Returns ``(means, labels,
    inertia)`` where ``inertia[t]`` is the within-cluster sum of squares of
    the assignment made at iteration t.
    """
    X = np.asarray(points, dtype=np.float64)
    C = np.array(means, dtype=np.float64)
    labels = None
    inertia = []
    for _ in range(max_iter):
        D = _sq_dists(X, C)
        new = np.argmin(D, axis=1)
        inertia.append(float(D[np.arange(len(X)), new].sum()))
        if labels is not None and np.array_equal(new, labels):
            break
        labels = new
        for j in range(C.shape[0]):
            members = labels == j
            if members.any():
                C[j] = X[members].mean(axis=0)
    D = _sq_dists(X, C)
    labels = np.argmin(D, axis=1)
    return C, labels, np.array(inertia)


def kmeans_init(points, k, seed) -> np.ndarray:
    X = np.asarray(points, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] == 0:
        raise ClusteringError("kmeans_init needs a non-empty 2-d point matrix")
    if not 1 <= k <= X.shape[0]:
        raise ClusteringError(f"k={k} must lie in [1, {X.shape[0]}]")
    rng = np.random.default_rng(seed)
    seeds = kmeans_plusplus(X, k, rng)
    means, _, _ = lloyd(X, X[seeds], max_iter=50)
    return means


# --------------------------------------------------------------------------- GMM


def _cholesky_all(covariances):
    chols = []
    for j, cov in enumerate(covariances):
        try:
            chols.append(cholesky(cov, lower=True))
        except LinAlgError as exc:
            raise SingularModelError(
                f"component {j} covariance is singular even after reg_covar; "
                "try a larger reg_covar or fewer components"
            ) from exc
    return np.array(chols)


def _log_gaussian(X, means, chols):
    n, d = X.shape
    out = np.empty((n, means.shape[0]))
    for j, (mu, L) in enumerate(zip(means, chols)):
        z = solve_triangular(L, (X - mu).T, lower=True)
        log_det = 2.0 * np.log(np.diag(L)).sum()
        out[:, j] = -0.5 * (d * np.log(2 * np.pi) + log_det + (z * z).sum(axis=0))
    return out


@dataclass
class ClusterModel:
    n_components: int
    weights: np.ndarray
    means: np.ndarray
    covariances: np.ndarray
    assignments: np.ndarray
    log_likelihood_trace: np.ndarray
    covariance_type: str = "full"
    reg_covar: float = 1e-6
    seed: int = 0
    converged: bool = False
    _chols: np.ndarray | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        for name in ("weights", "means", "covariances", "log_likelihood_trace"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        self.assignments = np.asarray(self.assignments, dtype=np.int64)
        if self._chols is None:
            self._chols = _cholesky_all(self.covariances)

    @property
    def d(self) -> int:
        return self.means.shape[1]

    def _check(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 1:
            X = X[None, :]
        if X.shape[1] != self.d:
            raise ClusteringError(f"expected {self.d}-d points, got {X.shape[1]}-d")
        if not np.all(np.isfinite(X)):
            raise ClusteringError("points must be finite")
        return X

    def weighted_log_prob(self, X) -> np.ndarray:
        X = self._check(X)
        with np.errstate(divide="ignore"):
            return _log_gaussian(X, self.means, self._chols) + np.log(self.weights)

    def responsibilities(self, X) -> np.ndarray:
        wlp = self.weighted_log_prob(X)
        return np.exp(wlp - logsumexp(wlp, axis=1, keepdims=True))

    def predict(self, X):
        """Hard cluster (posterior argmax, ties to the lowest index) and the
        Euclidean distance to that cluster's mean, for each row of X."""
        X = self._check(X)
        labels = np.argmax(self.weighted_log_prob(X), axis=1)
        dist = np.linalg.norm(X - self.means[labels], axis=1)
        return labels, dist

    def to_dict(self) -> dict:
        return {
            "n_components": self.n_components,
            "covariance_type": self.covariance_type,
            "reg_covar": self.reg_covar,
            "seed": self.seed,
            "converged": self.converged,
            "weights": self.weights.tolist(),
            "means": self.means.tolist(),
            "covariances": self.covariances.tolist(),
            "assignments": self.assignments.tolist(),
            "log_likelihood_trace": self.log_likelihood_trace.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ClusterModel":
        return cls(**d)


def assign(model: ClusterModel, x):
    """Cluster index and centroid distance for a single point."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ClusteringError("assign takes one d-vector; use ClusterModel.predict for batches")
    labels, dist = model.predict(x)
    return int(labels[0]), float(dist[0])


def _m_step(X, resp, covariance_type, reg_covar):
    n, d = X.shape
    nk = resp.sum(axis=0) + 10 * np.finfo(resp.dtype).eps
    means = resp.T @ X / nk[:, None]
    covs = np.empty((len(nk), d, d))
    for j in range(len(nk)):
        diff = X - means[j]
        if covariance_type == "full":
            covs[j] = (resp[:, j, None] * diff).T @ diff / nk[j]
        else:
            covs[j] = np.diag((resp[:, j, None] * diff * diff).sum(axis=0) / nk[j])
        covs[j].flat[:: d + 1] += reg_covar
    return nk / n, means, covs


def _fit_once(X, cfg: ClusterConfig, seed):
    k = cfg.n_components
    init_means = kmeans_init(X, k, seed)
    labels = np.argmin(_sq_dists(X, init_means), axis=1)
    resp = np.zeros((X.shape[0], k))
    resp[np.arange(X.shape[0]), labels] = 1.0
    weights, means, covs = _m_step(X, resp, cfg.covariance_type, cfg.reg_covar)
    trace = []
    converged = False
    for _ in range(cfg.max_iter):
        chols = _cholesky_all(covs)
        with np.errstate(divide="ignore"):
            wlp = _log_gaussian(X, means, chols) + np.log(weights)
        norm = logsumexp(wlp, axis=1)
        trace.append(float(norm.mean()))
        if len(trace) > 1 and abs(trace[-1] - trace[-2]) < cfg.tol:
            converged = True
            break
        resp = np.exp(wlp - norm[:, None])
        weights, means, covs = _m_step(X, resp, cfg.covariance_type, cfg.reg_covar)
    else:
        chols = _cholesky_all(covs)
        with np.errstate(divide="ignore"):
            wlp = _log_gaussian(X, means, chols) + np.log(weights)
        trace.append(float(logsumexp(wlp, axis=1).mean()))
    return ClusterModel(
        n_components=k,
        weights=weights,
        means=means,
        covariances=covs,
        assignments=np.argmax(wlp, axis=1),
        log_likelihood_trace=np.array(trace),
        covariance_type=cfg.covariance_type,
        reg_covar=cfg.reg_covar,
        seed=seed,
        converged=converged,
        _chols=chols,
    )


def fit_gmm(points, cfg: ClusterConfig | None = None) -> ClusterModel:
    """Fit a Gaussian mixture by EM; with ``n_init > 1`` keep the run with
    the highest final mean log-likelihood."""
    cfg = cfg or ClusterConfig()
    X = np.asarray(points, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] == 0 or X.shape[1] == 0:
        raise ClusteringError("fit_gmm needs a non-empty n x d matrix with d >= 1")
    if cfg.n_components > X.shape[0]:
        raise ClusteringError(f"n_components={cfg.n_components} exceeds {X.shape[0]} points")
    if not np.all(np.isfinite(X)):
        raise ClusteringError("points must be finite")
    seeds = np.random.SeedSequence(cfg.seed).generate_state(cfg.n_init)
    best = None
    for i in range(cfg.n_init):
        run_seed = cfg.seed if cfg.n_init == 1 else int(seeds[i])
        model = _fit_once(X, cfg, run_seed)
        if best is None or model.log_likelihood_trace[-1] > best.log_likelihood_trace[-1]:
            best = model
    best.seed = cfg.seed
    return best
