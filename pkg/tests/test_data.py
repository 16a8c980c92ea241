import json

import numpy as np
import pytest
from hypothesis import example, given, settings
from hypothesis import strategies as st

from ecoval.data import (
    DataError,
    DuplicateIdError,
    EmbeddingDataset,
    MalformedReportError,
    NonFiniteError,
    ShapeMismatchError,
    SplitError,
    SplitSpec,
    UnknownClassError,
    ValueReport,
    load_dataset,
    make_splits,
    read_report,
    report_to_csv,
    save_dataset,
    write_report,
)
from ecoval.synth import make_blobs


def _write(tmp_path, points, meta):
    emb, mp = tmp_path / "e.f32", tmp_path / "m.json"
    np.asarray(points, dtype="<f4").tofile(emb)
    mp.write_text(json.dumps(meta))
    return emb, mp


def test_load_four_by_two(tmp_path):
    pts = np.arange(8, dtype=float).reshape(4, 2)
    emb, mp = _write(tmp_path, pts, {"m": 4, "d": 2, "classes": ["x", "y"], "labels": [0, 1, 0, 1], "ids": list("abcd")})
    ds = load_dataset(emb, mp)
    assert (ds.m, ds.d, ds.n_classes) == (4, 2, 2)
    assert ds.points.dtype == np.float64
    np.testing.assert_array_equal(ds.points, pts)


def test_load_row_count_mismatch(tmp_path):
    emb, mp = _write(tmp_path, np.zeros((4, 2)), {"m": 5, "d": 2, "classes": ["x", "y"], "labels": [0] * 5, "ids": list("abcde")})
    with pytest.raises(ShapeMismatchError):
        load_dataset(emb, mp)


def test_load_nan(tmp_path):
    pts = np.zeros((4, 2))
    pts[2, 1] = np.nan
    emb, mp = _write(tmp_path, pts, {"m": 4, "d": 2, "classes": ["x", "y"], "labels": [0, 1, 0, 1], "ids": list("abcd")})
    with pytest.raises(NonFiniteError, match="row 2"):
        load_dataset(emb, mp)


def test_load_missing_field(tmp_path):
    emb, mp = _write(tmp_path, np.zeros((2, 2)), {"m": 2, "d": 2, "classes": ["x", "y"], "labels": [0, 1]})
    with pytest.raises(DataError, match="ids"):
        load_dataset(emb, mp)


@pytest.mark.parametrize(
    "kwargs, err",
    [
        ({"ids": ("a", "a", "b")}, DuplicateIdError),
        ({"labels": [0, 1, 2]}, UnknownClassError),
        ({"labels": [0, 1, -1]}, UnknownClassError),
        ({"classes": ("only",), "labels": [0, 0, 0]}, UnknownClassError),
        ({"labels": [0, 1]}, ShapeMismatchError),
        ({"points": np.zeros(3)}, ShapeMismatchError),
    ],
)
def test_dataset_diagnostics_are_distinct(kwargs, err):
    base = dict(points=np.zeros((3, 2)), labels=[0, 1, 0], ids=("a", "b", "c"), classes=("x", "y"))
    base.update(kwargs)
    with pytest.raises(err):
        EmbeddingDataset(**base)


def test_dataset_is_read_only():
    ds = make_blobs(6)
    with pytest.raises(ValueError):
        ds.points[0, 0] = 1.0


def test_save_load_round_trip(tmp_path):
    ds = make_blobs(30, noise=0.2, seed=3, n_classes=3, dim=4)
    save_dataset(ds, tmp_path / "e.f32", tmp_path / "m.json")
    back = load_dataset(tmp_path / "e.f32", tmp_path / "m.json")
    np.testing.assert_array_equal(back.points, ds.points)
    np.testing.assert_array_equal(back.labels, ds.labels)
    assert back.ids == ds.ids and back.classes == ds.classes
    assert (tmp_path / "e.f32").stat().st_size == 30 * 4 * 4


def test_index_of():
    ds = make_blobs(5)
    np.testing.assert_array_equal(ds.index_of(["p3", "p0"]), [3, 0])
    with pytest.raises(DataError):
        ds.index_of(["nope"])


# --------------------------------------------------------------------------- splits


def test_split_sizes_example():
    ds = make_blobs(100, seed=1)
    sp = make_splits(ds, (0.2, 0.2, 0.4, 0.2), seed=7)
    assert [a.size for a in (sp.train, sp.test, sp.distribution_pool, sp.oos)] == [20, 20, 40, 20]


def test_split_determinism():
    ds = make_blobs(50, noise=0.1, seed=2, n_classes=3)
    a = make_splits(ds, (0.3, 0.3, 0.2, 0.1), seed=4)
    b = make_splits(ds, (0.3, 0.3, 0.2, 0.1), seed=4)
    assert a.to_dict() == b.to_dict()
    c = make_splits(ds, (0.3, 0.3, 0.2, 0.1), seed=5)
    assert a.to_dict() != c.to_dict()


def test_split_overfull_fractions():
    with pytest.raises(SplitError):
        make_splits(make_blobs(20), (0.5, 0.5, 0.2, 0.0), seed=0)


def test_split_too_small():
    with pytest.raises(SplitError, match="empty"):
        make_splits(make_blobs(4), (0.1, 0.8, 0.0, 0.1), seed=0)


def test_splitspec_rejects_overlap_and_bounds():
    with pytest.raises(SplitError):
        SplitSpec([0, 1], [1, 2], [], [])
    sp = SplitSpec([0, 1], [2, 9], [], [])
    with pytest.raises(SplitError):
        sp.check_bounds(5)


@settings(max_examples=60, deadline=None)
@given(
    m=st.integers(20, 200),
    K=st.integers(2, 5),
    seed=st.integers(0, 1000),
    w=st.lists(st.floats(0.05, 1.0), min_size=4, max_size=4),
)
@example(m=20, K=2, seed=0, w=[1.0, 1.0, 0.125, 0.0625])
def test_split_properties(m, K, seed, w):
    ds = make_blobs(m, noise=0.3, seed=seed, n_classes=K)
    fr = np.array(w) / np.sum(w) * 0.95
    try:
        sp = make_splits(ds, fr, seed)
    except SplitError:
        # only allowed when a positive fraction is worth less than one point
        assert np.any(fr * m < 1.0)
        return
    parts = [sp.train, sp.test, sp.distribution_pool, sp.oos]
    allidx = np.concatenate(parts)
    assert len(set(allidx.tolist())) == allidx.size
    for f, p in zip(fr, parts):
        assert abs(p.size - f * m) < 1.0 + 1e-9
    global_p = np.bincount(ds.labels, minlength=K) / m
    for p in parts:
        counts = np.bincount(ds.labels[p], minlength=K)
        # every class x split cell is the floor or the ceiling of its share
        assert np.all(np.abs(counts - global_p * p.size) < 1.0 + 1e-9)


# --------------------------------------------------------------------------- reports


def _ecoval_report(n=3):
    V_i = np.array([0.1, 0.2, -0.05, 0.3, 1e-17])[:n]
    ga = np.array([1.1, 0.9, 1.0, 1.2, 0.7])[:n]
    gb = np.array([0.95, 1.05, 1.0, 0.8, 1.3])[:n]
    return ValueReport(
        ids=tuple(f"x{i}" for i in range(n)),
        value=V_i * (ga + gb - 1.0),
        method="ecoval",
        seed=3,
        cluster_id=np.arange(n) % 2,
        V_c=V_i * 2,
        n_c=np.full(n, 2),
        V_i=V_i,
        Q_i=np.linspace(-1, 1, n),
        d_i=np.linspace(0, 2, n) / 3,
        gamma_alpha=ga,
        gamma_beta=gb,
        ledger={"training_runs": 7, "cache_hits": 2},
        meta={"n_s": 5},
    )


def test_report_rows_and_round_trip(tmp_path):
    r = _ecoval_report(3)
    path = tmp_path / "r.csv"
    write_report(r, path)
    lines = path.read_text().splitlines()
    assert lines[0].startswith("# {")
    assert lines[1] == "id,cluster_id,V_c,n_c,V_i,Q_i,d_i,gamma_alpha,gamma_beta,value"
    assert len(lines) == 2 + 3
    back = read_report(path)
    assert back.equals(r)
    # repr formatting makes the round trip exact, not just close
    np.testing.assert_array_equal(back.value, r.value)


def test_baseline_report_round_trip(tmp_path):
    r = ValueReport(ids=("a", "b"), value=[0.5, -0.25], method="loo", seed=0)
    write_report(r, tmp_path / "b.csv")
    back = read_report(tmp_path / "b.csv")
    assert back.equals(r)
    assert np.all(back.cluster_id == -1) and np.all(np.isnan(back.V_c))


def test_report_missing_value_column(tmp_path):
    text = report_to_csv(_ecoval_report(2)).splitlines()
    text[1] = text[1].rsplit(",", 1)[0]
    text[2:] = [row.rsplit(",", 1)[0] for row in text[2:]]
    (tmp_path / "bad.csv").write_text("\n".join(text) + "\n")
    with pytest.raises(MalformedReportError):
        read_report(tmp_path / "bad.csv")


def test_report_missing_header(tmp_path):
    text = report_to_csv(_ecoval_report(2)).split("\n", 1)[1]
    (tmp_path / "bad.csv").write_text(text)
    with pytest.raises(MalformedReportError):
        read_report(tmp_path / "bad.csv")


def test_report_identity_enforced():
    r = _ecoval_report(3)
    with pytest.raises(DataError, match="gamma"):
        ValueReport(**{**r.__dict__, "value": r.value + 1e-6})


def test_report_duplicate_ids():
    with pytest.raises(DuplicateIdError):
        ValueReport(ids=("a", "a"), value=[0, 0], method="tmc", seed=0)


def test_report_unknown_method():
    with pytest.raises(DataError):
        ValueReport(ids=("a",), value=[0], method="banzhaf", seed=0)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3, allow_nan=False), min_size=1, max_size=30))
def test_report_round_trip_property(tmp_path_factory, vals):
    r = ValueReport(ids=tuple(f"i{k}" for k in range(len(vals))), value=vals, method="tmc", seed=1)
    path = tmp_path_factory.mktemp("rt") / "r.csv"
    write_report(r, path)
    assert read_report(path).equals(r)
