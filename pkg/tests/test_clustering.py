import numpy as np
import pytest
from hypothesis import example, given, settings
from hypothesis import strategies as st

from ecoval.clustering import (
    ClusterConfig,
    ClusteringError,
    ClusterModel,
    SingularModelError,
    assign,
    fit_gmm,
    kmeans_init,
    kmeans_plusplus,
    lloyd,
)
from ecoval.synth import make_blobs


def _model(means, covs, weights=None):
    means = np.asarray(means, dtype=float)
    k = len(means)
    return ClusterModel(
        n_components=k,
        weights=np.full(k, 1 / k) if weights is None else weights,
        means=means,
        covariances=np.asarray(covs, dtype=float),
        assignments=np.zeros(0, dtype=int),
        log_likelihood_trace=[0.0],
    )


# --------------------------------------------------------------------------- k-means


def test_kmeans_k_equals_n():
    X = np.random.default_rng(0).standard_normal((6, 3))
    means = kmeans_init(X, 6, seed=1)
    assert sorted(map(tuple, means)) == sorted(map(tuple, X))


def test_kmeans_two_points_1d():
    means = kmeans_init(np.array([[0.0], [10.0]]), 2, seed=0)
    assert sorted(means[:, 0]) == [0.0, 10.0]


def test_kmeans_plusplus_distinct_rows():
    X = np.repeat(np.arange(5.0)[:, None], 3, axis=0)
    rows = kmeans_plusplus(X, 5, np.random.default_rng(0))
    assert len(set(X[rows, 0])) == 5


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), n=st.integers(5, 60), k=st.integers(1, 5), d=st.integers(1, 4))
def test_lloyd_inertia_nonincreasing(seed, n, k, d):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, d)) + rng.integers(0, 3, size=(n, 1)) * 4
    start = X[rng.choice(n, size=k, replace=False)]
    _, labels, inertia = lloyd(X, start)
    assert np.all(np.diff(inertia) <= 1e-9)
    assert labels.shape == (n,)


def test_kmeans_bad_k():
    with pytest.raises(ClusteringError):
        kmeans_init(np.zeros((3, 2)), 4, seed=0)


# --------------------------------------------------------------------------- GMM


def test_single_component_fixed_point():
    X = np.random.default_rng(1).standard_normal((50, 3))
    m = fit_gmm(X, ClusterConfig(n_components=1))
    np.testing.assert_allclose(m.means[0], X.mean(axis=0), atol=1e-12)
    np.testing.assert_allclose(m.responsibilities(X), 1.0)
    np.testing.assert_allclose(m.covariances[0], np.cov(X.T, bias=True) + 1e-6 * np.eye(3), atol=1e-12)


def test_two_far_blobs_recovered():
    ds = make_blobs(80, seed=2, separation=20.0)
    m = fit_gmm(ds.points, ClusterConfig(n_components=2, seed=0))
    # exhaustive nearest-mean assignment agrees, and so do the blob labels
    nearest = np.argmin(((ds.points[:, None] - m.means[None]) ** 2).sum(-1), axis=1)
    np.testing.assert_array_equal(m.assignments, nearest)
    agree = max(np.mean(m.assignments == ds.labels), np.mean(m.assignments != ds.labels))
    assert agree == 1.0


def test_matches_sklearn_on_separated_blobs():
    from sklearn.mixture import GaussianMixture

    ds = make_blobs(150, seed=4, n_classes=3, dim=2, separation=12.0)
    ours = fit_gmm(ds.points, ClusterConfig(n_components=3, seed=0))
    ref = GaussianMixture(3, random_state=0).fit(ds.points)
    order = [int(np.argmin(((ref.means_ - mu) ** 2).sum(1))) for mu in ours.means]
    assert sorted(order) == [0, 1, 2]
    np.testing.assert_allclose(ours.means, ref.means_[order], atol=1e-3)
    np.testing.assert_allclose(ours.weights, ref.weights_[order], atol=1e-3)
    np.testing.assert_allclose(ours.covariances, ref.covariances_[order], atol=1e-2)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10_000), d=st.integers(1, 5), k=st.integers(1, 4), cov=st.sampled_from(["full", "diag"]))
@example(seed=949, d=5, k=4, cov="full")
def test_em_invariants(seed, d, k, cov):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((40, d)) * rng.uniform(0.5, 3, size=d) + rng.integers(0, 3, size=(40, 1)) * 3
    reg = 1e-4
    m = fit_gmm(X, ClusterConfig(n_components=k, covariance_type=cov, reg_covar=reg, seed=seed))
    assert abs(m.weights.sum() - 1) <= 1e-9 and np.all(m.weights >= 0)
    for c in m.covariances:
        assert np.linalg.eigvalsh(c).min() >= reg * (1 - 1e-6)
    # the covariance floor makes the M-step inexact, so allow rounding-level dips
    trace = m.log_likelihood_trace
    assert np.all(np.diff(trace) >= -1e-7 * np.maximum(1.0, np.abs(trace[:-1])))


def test_trace_converged_flag():
    X = make_blobs(60, seed=0).points
    m = fit_gmm(X, ClusterConfig(n_components=2, tol=1e-3))
    assert m.converged
    assert abs(m.log_likelihood_trace[-1] - m.log_likelihood_trace[-2]) < 1e-3


def test_n_init_keeps_best():
    X = make_blobs(90, seed=5, n_classes=3, separation=3.0).points
    seeds = np.random.SeedSequence(0).generate_state(4)
    finals = [fit_gmm(X, ClusterConfig(n_components=3, seed=int(s))).log_likelihood_trace[-1] for s in seeds]
    multi = fit_gmm(X, ClusterConfig(n_components=3, n_init=4, seed=0))
    assert multi.seed == 0
    assert multi.log_likelihood_trace[-1] == max(finals)


@pytest.mark.parametrize("cfg, X", [
    (ClusterConfig(n_components=3), np.zeros((2, 2))),
    (ClusterConfig(n_components=1), np.zeros((0, 2))),
    (ClusterConfig(n_components=1), np.array([[np.nan, 0.0]])),
])
def test_fit_errors(cfg, X):
    with pytest.raises(ClusteringError):
        fit_gmm(X, cfg)


def test_singular_without_regularization():
    X = np.tile([[1.0, 2.0]], (6, 1))
    with pytest.raises(SingularModelError):
        fit_gmm(X, ClusterConfig(n_components=1, reg_covar=0.0))
    # the default regularization cures the same collapse
    fit_gmm(X, ClusterConfig(n_components=1))


def test_config_validation():
    for bad in ({"n_components": 0}, {"covariance_type": "tied"}, {"init": "random"}, {"tol": -1}, {"max_iter": 0}):
        with pytest.raises(ValueError):
            ClusterConfig(**bad)


# --------------------------------------------------------------------------- assignment


def test_assign_at_centroid():
    m = _model([[0, 0], [5, 5]], [np.eye(2), np.eye(2)])
    assert assign(m, np.array([5.0, 5.0])) == (1, 0.0)


def test_posterior_tie_goes_to_lowest_index():
    m = _model([[1, 1], [1, 1]], [np.eye(2), np.eye(2)])
    assert assign(m, np.array([3.0, -2.0]))[0] == 0


def test_covariance_scaled_posterior_beats_euclidean():
    # A is stretched along x; the point is Euclidean-nearer to B's mean
    m = _model([[0, 0], [12, 0]], [np.diag([100.0, 1.0]), np.diag([0.25, 0.25])])
    x = np.array([8.0, 0.0])
    assert np.linalg.norm(x - m.means[1]) < np.linalg.norm(x - m.means[0])
    post = m.responsibilities(x)[0]
    assert post[0] > post[1]
    c, dist = assign(m, x)
    assert c == 0 and dist == pytest.approx(8.0)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), k=st.integers(2, 5), d=st.integers(1, 4), s=st.floats(0.1, 5.0))
def test_isotropic_equal_weights_is_nearest_centroid(seed, k, d, s):
    rng = np.random.default_rng(seed)
    means = rng.standard_normal((k, d)) * 5
    m = _model(means, [np.eye(d) * s] * k)
    X = rng.standard_normal((25, d)) * 5
    labels, dist = m.predict(X)
    sq = ((X[:, None] - means[None]) ** 2).sum(-1)
    nearest = np.argmin(sq, axis=1)
    gap = np.sort(sq, axis=1)
    clear = gap[:, 1] - gap[:, 0] > 1e-9
    np.testing.assert_array_equal(labels[clear], nearest[clear])
    np.testing.assert_allclose(dist, np.linalg.norm(X - means[labels], axis=1))


def test_assign_dimension_mismatch():
    m = _model([[0, 0]], [np.eye(2)])
    with pytest.raises(ClusteringError):
        assign(m, np.zeros(3))


def test_assign_is_pure_and_serializable():
    X = make_blobs(40, seed=7).points
    m = fit_gmm(X, ClusterConfig(n_components=2, seed=3))
    x = X[5]
    first = assign(m, x)
    assert all(assign(m, x) == first for _ in range(5))
    back = ClusterModel.from_dict(m.to_dict())
    assert assign(back, x) == first
    np.testing.assert_array_equal(back.predict(X)[0], m.predict(X)[0])
