"""EcoVal: cluster-level valuation propagated to cluster members.

Steps, for a training set B clustered by a fitted mixture model:

1. Leave-cluster-out: ``V_c = U(B) - U(B minus c)`` for every cluster with
   members in B, and the flat share ``V_i = V_c / n_c``.
2. A curated subset D with an equal number of points per cluster is valued
   by truncated Monte Carlo Shapley; a k-NN regressor fitted on those values
   predicts ``Q_i`` for every point of B.
3. Each point's distance ``d_i`` to its cluster mean is measured.
4. Two normalized adjustment factors redistribute V_c inside the cluster::

       gamma(s_i) = (1 + s_i / sum_c(s) * V_c) / (1 + V_c / n_c)

   with ``s = Q`` for gamma_alpha and ``s = d`` for gamma_beta, and the
   final value is ``V_i * (gamma_alpha + gamma_beta - 1)``.

Because each gamma column sums to n_c over a cluster, the member values of
a cluster always add back up to V_c.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import cdist

from .clustering import ClusterConfig, ClusterModel, fit_gmm
from .data import EmbeddingDataset, SplitSpec, ValueReport
from .shapley import TmcConfig, tmc_shapley
from .utility import UtilityEvaluator

VARIANTS = ("full", "no_alpha", "no_beta", "no_adjustment")
METHOD_TAG = {
    "full": "ecoval",
    "no_alpha": "ecoval_no_alpha",
    "no_beta": "ecoval_no_beta",
    "no_adjustment": "ecoval_no_adjustment",
}
# |sum of scores| below this counts as zero
ZERO_SUM_TOL = 1e-9


class EcoValWarning(UserWarning):
    pass


@dataclass(frozen=True)
class EcoValConfig:
    n_s: int = 5
    variant: str = "full"
    tmc: TmcConfig = field(default_factory=TmcConfig)
    regressor_k: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.n_s < 1:
            raise ValueError("n_s must be >= 1")
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.regressor_k < 1:
            raise ValueError("regressor_k must be >= 1")


@dataclass(frozen=True)
class ClusterValue:
    cluster_id: int
    V_c: float
    n_c: int
    members: np.ndarray


# --------------------------------------------------------------------------- clustering glue


def cluster_fit_indices(splits: SplitSpec) -> np.ndarray:
    """Rows the mixture model is fitted on: train plus the distribution pool."""
    return np.sort(np.concatenate([splits.train, splits.distribution_pool]))


def fit_clusters(ds: EmbeddingDataset, splits: SplitSpec, cfg: ClusterConfig | None = None) -> ClusterModel:
    return fit_gmm(ds.points[cluster_fit_indices(splits)], cfg)


# --------------------------------------------------------------------------- leave-cluster-out


def lco_values(ev: UtilityEvaluator, model: ClusterModel, B) -> list[ClusterValue]:
    B = np.asarray(B, dtype=np.int64)
    labels, _ = model.predict(ev.ds.points[B])
    full = ev.utility(B)
    out = []
    present = np.unique(labels)
    if present.size == 1 and B.size:
        warnings.warn(
            "every training point fell in one cluster; its value is U(B) - U(empty)",
            EcoValWarning,
            stacklevel=2,
        )
    for c in present:
        inside = labels == c
        V_c = full - ev.utility(B[~inside])
        out.append(ClusterValue(int(c), float(V_c), int(inside.sum()), B[inside]))
    return out


def init_values(cv: ClusterValue) -> np.ndarray:
    if cv.n_c < 1:
        raise ValueError("cluster has no members")
    return np.full(cv.n_c, cv.V_c / cv.n_c)


def curated_subset(model: ClusterModel, n_s: int, seed) -> np.ndarray:
    """Up to n_s fitted-point positions drawn without replacement per cluster."""
    if n_s < 1:
        raise ValueError("n_s must be >= 1")
    rng = np.random.default_rng(seed)
    picks = []
    for c in range(model.n_components):
        members = np.flatnonzero(model.assignments == c)
        if members.size:
            picks.append(rng.choice(members, size=min(n_s, members.size), replace=False))
    return np.sort(np.concatenate(picks)) if picks else np.zeros(0, dtype=np.int64)


# --------------------------------------------------------------------------- surrogate


@dataclass
class SurrogateModel:
    """k-NN regressor: the mean target of the k nearest fitted embeddings.

    Distance ties go to the earlier fitted row.
    """

    k: int
    X: np.ndarray
    y: np.ndarray
    kind: str = "knn_regressor"

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.float64)
        if self.k > len(self.y):
            raise ValueError(f"k={self.k} exceeds the {len(self.y)} fitted samples")

    def predict(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        dist = cdist(X, self.X, "sqeuclidean")
        if self.k == 1:
            return self.y[np.argmin(dist, axis=1)]
        nbr = np.argsort(dist, axis=1, kind="stable")[:, : self.k]
        return self.y[nbr].mean(axis=1)


def fit_surrogate(D, tmc_values, embeddings, k: int) -> SurrogateModel:
    D = np.asarray(D, dtype=np.int64)
    if D.size < k:
        raise ValueError(f"curated subset has {D.size} points, fewer than k={k}")
    return SurrogateModel(k=k, X=np.asarray(embeddings)[D], y=np.asarray(tmc_values))


# --------------------------------------------------------------------------- adjustment factors


def _normalized_gamma(score, score_sum, V_c, n_c):
    return (1.0 + score / score_sum * V_c) / (1.0 + V_c / n_c)


def _all_equal(scores) -> bool:
    # equal scores give gamma = 1 algebraically; return it exactly rather
    # than through a rounded sum
    return bool(np.all(scores == scores[0]))


def adjustment_factors(scores, V_c: float, n_c: int) -> np.ndarray | None:
    """Normalized factor for every member of one cluster, or None when the
    scores sum to (numerically) zero and no redistribution is defined."""
    scores = np.asarray(scores, dtype=np.float64)
    if n_c == 1:
        return np.ones(scores.size)
    total = scores.sum()
    if abs(total) < ZERO_SUM_TOL:
        return None
    if _all_equal(scores):
        return np.ones(scores.size)
    return _normalized_gamma(scores, total, V_c, n_c)


def gamma_alpha(Q_i: float, Q_cluster, V_c: float, n_c: int) -> float:
    if n_c < 1:
        raise ValueError("n_c must be >= 1")
    total = float(np.sum(Q_cluster))
    if n_c == 1:
        return 1.0
    if abs(total) < ZERO_SUM_TOL:
        warnings.warn("predicted values sum to zero in cluster; gamma_alpha falls back to 1", EcoValWarning, stacklevel=2)
        return 1.0
    if _all_equal(np.asarray(Q_cluster, dtype=np.float64)) and Q_i == np.asarray(Q_cluster).flat[0]:
        return 1.0
    return float(_normalized_gamma(Q_i, total, V_c, n_c))


def gamma_beta(d_i: float, d_cluster, V_c: float, n_c: int) -> float:
    if n_c < 1:
        raise ValueError("n_c must be >= 1")
    total = float(np.sum(d_cluster))
    if n_c == 1 or total == 0.0:
        return 1.0
    if _all_equal(np.asarray(d_cluster, dtype=np.float64)) and d_i == np.asarray(d_cluster).flat[0]:
        return 1.0
    return float(_normalized_gamma(d_i, total, V_c, n_c))


# --------------------------------------------------------------------------- pipeline


@dataclass(frozen=True)
class ClusterStats:
    V_c: float
    n_c: int
    sum_Q: float
    sum_d: float


@dataclass
class EcoValState:
    """Everything a fitted run keeps: enough to value new points later."""

    model: ClusterModel
    config: EcoValConfig
    clusters: dict[int, ClusterStats]
    report: ValueReport
    B: np.ndarray
    surrogate: SurrogateModel | None = None
    curated: np.ndarray | None = None
    tmc_values: np.ndarray | None = None
    tmc_permutations: int = 0


def run_ecoval(
    ev: UtilityEvaluator,
    model: ClusterModel,
    cfg: EcoValConfig,
    splits: SplitSpec,
    fit_indices=None,
) -> EcoValState:
    ds = ev.ds
    B = np.asarray(splits.train, dtype=np.int64)
    if fit_indices is None:
        fit_indices = cluster_fit_indices(splits)
    fit_indices = np.asarray(fit_indices, dtype=np.int64)
    if fit_indices.size != model.assignments.size:
        raise ValueError(
            f"cluster model was fitted on {model.assignments.size} points, "
            f"but {fit_indices.size} fit indices were given"
        )
    X_B = ds.points[B]
    labels, dist = model.predict(X_B)
    cvs = lco_values(ev, model, B)
    by_cluster = {cv.cluster_id: cv for cv in cvs}

    Q = np.full(B.size, np.nan)
    surrogate = curated = tmc_vals = None
    perms = 0
    if cfg.variant in ("full", "no_beta"):
        curated = fit_indices[curated_subset(model, cfg.n_s, cfg.seed)]
        res = tmc_shapley(ev, curated, cfg.tmc)
        tmc_vals, perms = res.values, res.permutations_used
        k = min(cfg.regressor_k, curated.size)
        if k < cfg.regressor_k:
            warnings.warn(f"curated subset has {curated.size} points; regressor k lowered to {k}", EcoValWarning, stacklevel=2)
        surrogate = fit_surrogate(curated, tmc_vals, ds.points, k)
        Q = surrogate.predict(X_B)

    n = B.size
    V_c = np.empty(n)
    n_c = np.empty(n, dtype=np.int64)
    ga = np.ones(n)
    gb = np.ones(n)
    stats = {}
    for c, cv in by_cluster.items():
        inside = labels == c
        V_c[inside] = cv.V_c
        n_c[inside] = cv.n_c
        sum_Q = float(Q[inside].sum()) if surrogate is not None else float("nan")
        sum_d = float(dist[inside].sum())
        stats[c] = ClusterStats(cv.V_c, cv.n_c, sum_Q, sum_d)
        if cfg.variant in ("full", "no_beta"):
            g = adjustment_factors(Q[inside], cv.V_c, cv.n_c)
            if g is None:
                warnings.warn(
                    f"cluster {c}: predicted values sum to ~0; gamma_alpha falls back to 1",
                    EcoValWarning,
                    stacklevel=2,
                )
            else:
                ga[inside] = g
        if cfg.variant in ("full", "no_alpha"):
            g = adjustment_factors(dist[inside], cv.V_c, cv.n_c) if sum_d > 0 else None
            if g is not None:
                gb[inside] = g
    if cfg.variant == "no_beta":
        gb[:] = 1.0
    V_i = V_c / n_c
    value = V_i * (ga + gb - 1.0)

    report = ValueReport(
        ids=tuple(ds.ids[i] for i in B),
        value=value,
        method=METHOD_TAG[cfg.variant],
        seed=cfg.seed,
        cluster_id=labels,
        V_c=V_c,
        n_c=n_c,
        V_i=V_i,
        Q_i=Q,
        d_i=dist,
        gamma_alpha=ga,
        gamma_beta=gb,
        ledger=ev.ledger.snapshot(),
        meta={
            "valued_split": "train",
            "cluster_fit_set": "train+distribution_pool",
            "oos_rule": "frozen-cluster",
            "n_components": model.n_components,
            "nonempty_clusters": len(by_cluster),
            "curated_size": 0 if curated is None else int(curated.size),
            "tmc_permutations": perms,
            "n_s": cfg.n_s,
            "regressor_k": cfg.regressor_k,
        },
    )
    return EcoValState(
        model=model,
        config=cfg,
        clusters=stats,
        report=report,
        B=B,
        surrogate=surrogate,
        curated=curated,
        tmc_values=tmc_vals,
        tmc_permutations=perms,
    )


def ecoval_values(ev, model, cfg: EcoValConfig, splits, fit_indices=None) -> ValueReport:
    return run_ecoval(ev, model, cfg, splits, fit_indices).report


# --------------------------------------------------------------------------- out-of-sample


def _oos_terms(state: EcoValState, X):
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    labels, dist = state.model.predict(X)
    variant = state.config.variant
    Q = state.surrogate.predict(X) if state.surrogate is not None else np.full(len(X), np.nan)
    n = len(X)
    V_c = np.zeros(n)
    n_c = np.zeros(n, dtype=np.int64)
    V_i = np.zeros(n)
    ga = np.ones(n)
    gb = np.ones(n)
    orphans = 0
    for j, c in enumerate(labels):
        st = state.clusters.get(int(c))
        if st is None:
            orphans += 1
            continue
        V_c[j], n_c[j], V_i[j] = st.V_c, st.n_c, st.V_c / st.n_c
        if variant in ("full", "no_beta") and st.n_c > 1 and abs(st.sum_Q) >= ZERO_SUM_TOL:
            ga[j] = _normalized_gamma(Q[j], st.sum_Q, st.V_c, st.n_c)
        if variant in ("full", "no_alpha") and st.n_c > 1 and st.sum_d > 0:
            gb[j] = _normalized_gamma(dist[j], st.sum_d, st.V_c, st.n_c)
    if orphans:
        warnings.warn(f"{orphans} out-of-sample points fell in clusters without training members; valued 0", EcoValWarning, stacklevel=3)
    return labels, dist, Q, V_c, n_c, V_i, ga, gb


def value_oos_batch(state: EcoValState, X) -> np.ndarray:
    """Values for unseen points under the frozen clusters of a fitted run.

    Each point is assigned by posterior, inherits its cluster's V_c and n_c,
    and is scored against the cluster's stored sums of Q and d.  Points that
    land in a cluster with no training members get 0: there is no cluster
    value to share.
    """
    *_, V_i, ga, gb = _oos_terms(state, X)
    return V_i * (ga + gb - 1.0)


def oos_report(state: EcoValState, ds: EmbeddingDataset, idx) -> ValueReport:
    """A ValueReport for dataset rows ``idx`` valued out of sample."""
    idx = np.asarray(idx, dtype=np.int64)
    labels, dist, Q, V_c, n_c, V_i, ga, gb = _oos_terms(state, ds.points[idx])
    base = state.report
    return ValueReport(
        ids=tuple(ds.ids[i] for i in idx),
        value=V_i * (ga + gb - 1.0),
        method=base.method,
        seed=base.seed,
        cluster_id=labels,
        V_c=V_c,
        n_c=n_c,
        V_i=V_i,
        Q_i=Q,
        d_i=dist,
        gamma_alpha=ga,
        gamma_beta=gb,
        ledger=base.ledger,
        meta={**base.meta, "valued_split": "oos"},
    )


def value_oos(state: EcoValState, x) -> float:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError("value_oos takes one d-vector; use value_oos_batch for many")
    return float(value_oos_batch(state, x[None, :])[0])


# --------------------------------------------------------------------------- error-bound audit


@dataclass
class ErrorBoundAudit:
    ids: tuple[str, ...]
    observed: np.ndarray
    bound: np.ndarray
    delta_R: float
    cluster_mean_exact: dict[int, float]
    slack: float
    excluded_clusters: list[int]
    satisfied: np.ndarray

    @property
    def satisfied_fraction(self) -> float:
        included = ~np.isnan(self.bound)
        return float(self.satisfied[included].mean()) if included.any() else float("nan")

    def to_dict(self) -> dict:
        return {
            "delta_R": self.delta_R,
            "slack": self.slack,
            "satisfied_fraction": self.satisfied_fraction,
            "excluded_clusters": self.excluded_clusters,
            "cluster_mean_exact": {str(k): v for k, v in sorted(self.cluster_mean_exact.items())},
            "points": [
                {
                    "id": pid,
                    "observed": float(o),
                    "bound": None if np.isnan(b) else float(b),
                    "satisfied": bool(s),
                }
                for pid, o, b, s in zip(self.ids, self.observed, self.bound, self.satisfied)
            ],
        }


def error_bound(n_c, mean_exact, sum_Q, Q_i, delta_R):
    """Approximate |estimate - Shapley| from the regression error delta_R:

        n_c * mean * delta_R / sum_Q + n_c^2 * mean * Q_i * delta_R / sum_Q^2

    Each term enters by magnitude, so the bound is never negative.
    """
    first = np.abs(n_c * mean_exact * delta_R / sum_Q)
    second = np.abs(n_c**2 * mean_exact * Q_i * delta_R / sum_Q**2)
    return first + second


def audit_error_bound(phi_hat, exact, state: EcoValState, slack: float = 0.02) -> ErrorBoundAudit:
    if state.surrogate is None:
        raise ValueError(f"variant {state.config.variant!r} fits no surrogate; nothing to audit")
    phi_hat = np.asarray(phi_hat, dtype=np.float64)
    exact = np.asarray(exact, dtype=np.float64)
    r = state.report
    if phi_hat.shape != (len(r),) or exact.shape != (len(r),):
        raise ValueError("phi_hat and exact must have one entry per valued point")
    fitted_on = state.surrogate.X
    delta_R = float(np.max(np.abs(state.surrogate.predict(fitted_on) - state.surrogate.y)))
    observed = np.abs(phi_hat - exact)
    bound = np.full(len(r), np.nan)
    means: dict[int, float] = {}
    excluded = []
    for c, st in sorted(state.clusters.items()):
        inside = r.cluster_id == c
        means[c] = float(exact[inside].mean())
        if abs(st.sum_Q) < ZERO_SUM_TOL:
            excluded.append(c)
            continue
        bound[inside] = error_bound(st.n_c, means[c], st.sum_Q, r.Q_i[inside], delta_R)
    if excluded:
        warnings.warn(f"clusters {excluded} excluded from the audit: predicted values sum to ~0", EcoValWarning, stacklevel=2)
    satisfied = np.where(np.isnan(bound), False, observed <= bound + slack)
    return ErrorBoundAudit(
        ids=r.ids,
        observed=observed,
        bound=bound,
        delta_R=delta_R,
        cluster_mean_exact=means,
        slack=slack,
        excluded_clusters=excluded,
        satisfied=satisfied,
    )
