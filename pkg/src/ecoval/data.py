"""Embedding datasets, train/test/pool/OOS splits, and value reports.

On disk an embedding matrix is raw little-endian float32 (row-major, no
header) next to a JSON sidecar ``{m, d, classes, labels, ids}``.  Reports are
UTF-8 CSV with a single ``#``-prefixed JSON header line.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np


class DataError(ValueError):
    """Base class for dataset and report validation failures."""


class ShapeMismatchError(DataError):
    pass


class NonFiniteError(DataError):
    pass


class DuplicateIdError(DataError):
    pass


class UnknownClassError(DataError):
    pass


class SplitError(DataError):
    pass


class MalformedReportError(DataError):
    pass


@dataclass(frozen=True)
class EmbeddingDataset:
    points: np.ndarray
    labels: np.ndarray
    ids: tuple[str, ...]
    classes: tuple[str, ...]

    def __post_init__(self):
        points = np.array(self.points, dtype=np.float64)
        if points.ndim != 2:
            raise ShapeMismatchError(f"points must be 2-d, got shape {points.shape}")
        labels = np.array(self.labels)
        if labels.ndim != 1 or labels.shape[0] != points.shape[0]:
            raise ShapeMismatchError(
                f"{points.shape[0]} rows but {labels.shape[0] if labels.ndim else 0} labels"
            )
        if len(self.ids) != points.shape[0]:
            raise ShapeMismatchError(f"{points.shape[0]} rows but {len(self.ids)} ids")
        if not np.all(np.isfinite(points)):
            bad = np.argwhere(~np.isfinite(points))[0]
            raise NonFiniteError(f"non-finite value at row {bad[0]}, column {bad[1]}")
        ids = tuple(str(i) for i in self.ids)
        if len(set(ids)) != len(ids):
            seen: set[str] = set()
            dup = next(i for i in ids if i in seen or seen.add(i))
            raise DuplicateIdError(f"duplicate id {dup!r}")
        n_classes = len(self.classes)
        if n_classes < 2:
            raise UnknownClassError(f"need at least 2 classes, got {n_classes}")
        if labels.size and not np.issubdtype(labels.dtype, np.integer):
            if not np.all(np.equal(np.mod(labels, 1), 0)):
                raise UnknownClassError("labels must be integer class indices")
        labels = labels.astype(np.int64)
        if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
            bad = labels[(labels < 0) | (labels >= n_classes)][0]
            raise UnknownClassError(f"class index {bad} outside [0, {n_classes})")
        points.setflags(write=False)
        labels.setflags(write=False)
        object.__setattr__(self, "points", points)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "ids", ids)
        object.__setattr__(self, "classes", tuple(str(c) for c in self.classes))

    @property
    def m(self) -> int:
        return self.points.shape[0]

    @property
    def d(self) -> int:
        return self.points.shape[1]

    @property
    def n_classes(self) -> int:
        return len(self.classes)

    def index_of(self, ids: Sequence[str]) -> np.ndarray:
        lookup = {k: i for i, k in enumerate(self.ids)}
        missing = [i for i in ids if i not in lookup]
        if missing:
            raise DataError(f"{len(missing)} ids not in dataset, e.g. {missing[0]!r}")
        return np.array([lookup[i] for i in ids], dtype=np.int64)


def load_dataset(embeddings_path, meta_path) -> EmbeddingDataset:
    with open(meta_path, encoding="utf-8") as fh:
        try:
            meta = json.load(fh)
        except json.JSONDecodeError as exc:
            raise DataError(f"metadata is not valid JSON: {exc}") from exc
    for key in ("m", "d", "classes", "labels", "ids"):
        if key not in meta:
            raise DataError(f"metadata missing field {key!r}")
    m, d = int(meta["m"]), int(meta["d"])
    raw = np.fromfile(embeddings_path, dtype="<f4")
    if raw.size != m * d:
        rows = raw.size / d if d else float("nan")
        raise ShapeMismatchError(
            f"metadata declares ({m}, {d}) but file holds {raw.size} values ({rows:g} rows)"
        )
    if len(meta["labels"]) != m or len(meta["ids"]) != m:
        raise ShapeMismatchError(
            f"metadata declares m={m} but lists {len(meta['labels'])} labels "
            f"and {len(meta['ids'])} ids"
        )
    return EmbeddingDataset(
        points=raw.reshape(m, d).astype(np.float64),
        labels=np.asarray(meta["labels"]),
        ids=tuple(meta["ids"]),
        classes=tuple(meta["classes"]),
    )


def save_dataset(ds: EmbeddingDataset, embeddings_path, meta_path) -> None:
    np.ascontiguousarray(ds.points, dtype="<f4").tofile(embeddings_path)
    meta = {
        "m": ds.m,
        "d": ds.d,
        "classes": list(ds.classes),
        "labels": [int(v) for v in ds.labels],
        "ids": list(ds.ids),
    }
    with open(meta_path, "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=1)
        fh.write("\n")


# --------------------------------------------------------------------------- splits

SPLIT_NAMES = ("train", "test", "distribution_pool", "oos")


@dataclass(frozen=True)
class SplitSpec:
    train: np.ndarray
    test: np.ndarray
    distribution_pool: np.ndarray
    oos: np.ndarray

    def __post_init__(self):
        seen: set[int] = set()
        for name in SPLIT_NAMES:
            arr = np.array(getattr(self, name), dtype=np.int64).reshape(-1)
            if np.any(arr < 0):
                raise SplitError(f"negative index in {name}")
            s = set(arr.tolist())
            if len(s) != arr.size or seen & s:
                raise SplitError(f"{name} overlaps another split or repeats an index")
            seen |= s
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    def check_bounds(self, m: int) -> None:
        for name in SPLIT_NAMES:
            arr = getattr(self, name)
            if arr.size and arr.max() >= m:
                raise SplitError(f"{name} holds index {arr.max()} >= m={m}")

    def to_dict(self) -> dict:
        return {name: getattr(self, name).tolist() for name in SPLIT_NAMES}


def _largest_remainder(total: int, shares: np.ndarray) -> np.ndarray:
    raw = shares * total
    out = np.floor(raw + 1e-9).astype(np.int64)
    short = total - out.sum()
    # stable on ties: earlier entries get the extra unit first
    order = np.argsort(-(raw - out), kind="stable")
    out[order[:short]] += 1
    return out


def make_splits(ds: EmbeddingDataset, fractions: Sequence[float], seed: int) -> SplitSpec:
    """Stratified, seeded split into (train, test, distribution_pool, oos).

    Split sizes are ``fraction * m`` by largest remainder; any leftover points
    are left unused.  Each (class, split) cell receives either the floor or
    the ceiling of its proportional share, so per-split class counts stay
    within one point of the global class proportions.
    """
    fr = np.asarray(fractions, dtype=np.float64)
    if fr.shape != (4,):
        raise SplitError(f"need four fractions, got {len(fr)}")
    if np.any(fr < 0) or not np.all(np.isfinite(fr)):
        raise SplitError("fractions must be finite and nonnegative")
    if fr.sum() > 1 + 1e-9:
        raise SplitError(f"fractions sum to {fr.sum():g} > 1")
    m = ds.m
    shares = np.append(fr, max(0.0, 1.0 - fr.sum()))
    sizes = _largest_remainder(m, shares)
    for name, f, n in zip(SPLIT_NAMES, fr, sizes):
        if f > 0 and n == 0:
            raise SplitError(f"split {name!r} would be empty: m={m} too small for fraction {f:g}")

    class_counts = np.bincount(ds.labels, minlength=ds.n_classes)
    target = np.outer(class_counts, sizes) / m
    cells = np.floor(target + 1e-9).astype(np.int64)
    row_left = class_counts - cells.sum(axis=1)
    col_left = sizes - cells.sum(axis=0)
    frac = target - cells
    # Gale-Ryser greedy: biggest demand first, at most one extra unit per cell
    for k in sorted(range(ds.n_classes), key=lambda k: (-row_left[k], k)):
        if row_left[k] == 0:
            continue
        cols = sorted(
            (j for j in range(len(sizes)) if col_left[j] > 0),
            key=lambda j: (-col_left[j], -frac[k, j], j),
        )[: row_left[k]]
        for j in cols:
            cells[k, j] += 1
            col_left[j] -= 1
        row_left[k] = 0
    assert cells.sum(axis=0).tolist() == sizes.tolist()

    rng = np.random.default_rng(seed)
    parts: list[list[np.ndarray]] = [[] for _ in SPLIT_NAMES]
    for k in range(ds.n_classes):
        members = rng.permutation(np.flatnonzero(ds.labels == k))
        start = 0
        for j in range(len(SPLIT_NAMES)):
            parts[j].append(members[start : start + cells[k, j]])
            start += cells[k, j]
    return SplitSpec(*(np.sort(np.concatenate(p)) for p in parts))


# --------------------------------------------------------------------------- reports

REPORT_COLUMNS = (
    "id",
    "cluster_id",
    "V_c",
    "n_c",
    "V_i",
    "Q_i",
    "d_i",
    "gamma_alpha",
    "gamma_beta",
    "value",
)
_FLOAT_COLUMNS = ("V_c", "V_i", "Q_i", "d_i", "gamma_alpha", "gamma_beta", "value")

METHODS = ("ecoval", "ecoval_no_alpha", "ecoval_no_beta", "ecoval_no_adjustment", "tmc", "loo", "exact")


@dataclass
class ValueReport:
    """Per-point values plus every intermediate of the computation.

    Baseline methods (``tmc``, ``loo``, ``exact``) have no cluster stage: their
    ``cluster_id`` is -1, ``n_c`` 0 and the cluster intermediates NaN.
    """

    ids: tuple[str, ...]
    value: np.ndarray
    method: str
    seed: int
    cluster_id: np.ndarray | None = None
    V_c: np.ndarray | None = None
    n_c: np.ndarray | None = None
    V_i: np.ndarray | None = None
    Q_i: np.ndarray | None = None
    d_i: np.ndarray | None = None
    gamma_alpha: np.ndarray | None = None
    gamma_beta: np.ndarray | None = None
    ledger: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.ids)
        self.ids = tuple(str(i) for i in self.ids)
        self.value = np.asarray(self.value, dtype=np.float64).reshape(-1)
        nan = np.full(n, np.nan)
        self.cluster_id = np.full(n, -1, np.int64) if self.cluster_id is None else np.asarray(self.cluster_id, np.int64)
        self.n_c = np.zeros(n, np.int64) if self.n_c is None else np.asarray(self.n_c, np.int64)
        for col in _FLOAT_COLUMNS[:-1]:
            v = getattr(self, col)
            setattr(self, col, nan.copy() if v is None else np.asarray(v, dtype=np.float64).reshape(-1))
        self.validate()

    def validate(self) -> None:
        n = len(self.ids)
        if len(set(self.ids)) != n:
            raise DuplicateIdError("report ids are not unique")
        for col in REPORT_COLUMNS[1:]:
            if getattr(self, col).shape != (n,):
                raise ShapeMismatchError(f"column {col} has {getattr(self, col).shape} entries, expected {n}")
        if self.method not in METHODS:
            raise DataError(f"unknown method tag {self.method!r}")
        if self.method.startswith("ecoval"):
            recon = self.V_i * (self.gamma_alpha + self.gamma_beta - 1.0)
            scale = np.maximum(np.abs(self.value), np.abs(recon))
            if not np.all(np.abs(recon - self.value) <= 1e-12 * scale):
                raise DataError("value != V_i * (gamma_alpha + gamma_beta - 1)")

    def __len__(self) -> int:
        return len(self.ids)

    def header(self) -> dict:
        return {"method": self.method, "seed": int(self.seed), "ledger": self.ledger, **self.meta}

    def equals(self, other: "ValueReport", rtol: float = 1e-12) -> bool:
        if self.ids != other.ids or self.header() != other.header():
            return False
        for col in REPORT_COLUMNS[1:]:
            a, b = getattr(self, col), getattr(other, col)
            if not np.allclose(a, b, rtol=rtol, atol=0.0, equal_nan=True):
                return False
        return True


def _fmt(x: float) -> str:
    return repr(float(x))


def report_to_csv(r: ValueReport) -> str:
    buf = io.StringIO()
    buf.write("# " + json.dumps(r.header(), sort_keys=True) + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_COLUMNS)
    for i, pid in enumerate(r.ids):
        w.writerow(
            [pid, int(r.cluster_id[i]), _fmt(r.V_c[i]), int(r.n_c[i])]
            + [_fmt(getattr(r, c)[i]) for c in _FLOAT_COLUMNS[1:]]
        )
    return buf.getvalue()


def write_report(r: ValueReport, path) -> None:
    r.validate()
    Path(path).write_text(report_to_csv(r), encoding="utf-8")


def read_report(path) -> ValueReport:
    text = Path(path).read_text(encoding="utf-8")
    lines = text.splitlines()
    if not lines or not lines[0].startswith("#"):
        raise MalformedReportError(f"{path}: missing '#' JSON header line")
    try:
        header = json.loads(lines[0][1:])
    except json.JSONDecodeError as exc:
        raise MalformedReportError(f"{path}: header is not JSON: {exc}") from exc
    for key in ("method", "seed", "ledger"):
        if key not in header:
            raise MalformedReportError(f"{path}: header lacks {key!r}")
    rows = list(csv.reader(lines[1:]))
    if not rows or tuple(rows[0]) != REPORT_COLUMNS:
        raise MalformedReportError(f"{path}: expected columns {','.join(REPORT_COLUMNS)}")
    body = rows[1:]
    cols: dict[str, list] = {c: [] for c in REPORT_COLUMNS}
    try:
        for lineno, row in enumerate(body, start=3):
            if len(row) != len(REPORT_COLUMNS):
                raise MalformedReportError(f"{path}:{lineno}: expected {len(REPORT_COLUMNS)} fields")
            cols["id"].append(row[0])
            cols["cluster_id"].append(int(row[1]))
            cols["n_c"].append(int(row[3]))
            for c in _FLOAT_COLUMNS:
                cols[c].append(float(row[REPORT_COLUMNS.index(c)]))
    except ValueError as exc:
        if isinstance(exc, MalformedReportError):
            raise
        raise MalformedReportError(f"{path}: unparsable field: {exc}") from exc
    meta = {k: v for k, v in header.items() if k not in ("method", "seed", "ledger")}
    try:
        return ValueReport(
            ids=tuple(cols["id"]),
            value=np.array(cols["value"]),
            method=header["method"],
            seed=int(header["seed"]),
            cluster_id=np.array(cols["cluster_id"], dtype=np.int64),
            V_c=np.array(cols["V_c"]),
            n_c=np.array(cols["n_c"], dtype=np.int64),
            V_i=np.array(cols["V_i"]),
            Q_i=np.array(cols["Q_i"]),
            d_i=np.array(cols["d_i"]),
            gamma_alpha=np.array(cols["gamma_alpha"]),
            gamma_beta=np.array(cols["gamma_beta"]),
            ledger=header["ledger"],
            meta=meta,
        )
    except DataError as exc:
        raise MalformedReportError(f"{path}: {exc}") from exc
