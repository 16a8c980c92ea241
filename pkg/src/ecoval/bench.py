"""Evaluation harness: value-ordered addition/removal curves and cost tables.

Curves freeze the valuation and retrain only the utility model, from
scratch, at every fraction.
"""

from __future__ import annotations

import csv
import io
import warnings
from dataclasses import dataclass, field

import numpy as np

from .data import EmbeddingDataset, SplitSpec, ValueReport, make_splits
from .synth import make_blobs
from .utility import UtilityEvaluator

DIRECTIONS = ("remove_high_first", "add_high_first", "remove_random", "add_random")


class CurveWarning(UserWarning):
    pass


@dataclass
class Curve:
    fractions: np.ndarray
    accuracy: np.ndarray
    direction: str
    method: str
    seed: int
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.fractions = np.asarray(self.fractions, dtype=np.float64)
        self.accuracy = np.asarray(self.accuracy, dtype=np.float64)
        if self.fractions.shape != self.accuracy.shape:
            raise ValueError("fractions and accuracy differ in length")
        if self.fractions.size and (self.fractions[0] != 0 or np.any(np.diff(self.fractions) <= 0)):
            raise ValueError("fractions must start at 0 and strictly increase")
        if self.direction not in DIRECTIONS:
            raise ValueError(f"unknown direction {self.direction!r}")

    @property
    def delta(self) -> np.ndarray:
        return self.accuracy - self.accuracy[0]

    def area(self) -> float:
        return float(np.trapezoid(self.accuracy, self.fractions))

    def at(self, fraction: float) -> float:
        i = int(np.argmin(np.abs(self.fractions - fraction)))
        return float(self.accuracy[i])

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["fraction", "accuracy", "delta"])
        for f, a, d in zip(self.fractions, self.accuracy, self.delta):
            w.writerow([repr(float(f)), repr(float(a)), repr(float(d))])
        return buf.getvalue()

    def manifest(self) -> dict:
        return {
            "direction": self.direction,
            "method": self.method,
            "seed": int(self.seed),
            "points": int(self.fractions.size),
            "area": self.area(),
            "retrain": "utility model only; valuation and clustering frozen",
            **self.meta,
        }


def value_order(ids, values, random: bool, seed: int) -> np.ndarray:
    """Positions sorted high value first (ties by id), or a seeded shuffle."""
    n = len(ids)
    if random:
        return np.random.default_rng(seed).permutation(n)
    values = np.asarray(values, dtype=np.float64)
    if n and np.all(values == values[0]):
        warnings.warn("all values are equal; value order falls back to id order", CurveWarning, stacklevel=3)
    return np.array(sorted(range(n), key=lambda i: (-values[i], ids[i])), dtype=np.int64)


def _fractions(steps: int) -> np.ndarray:
    if steps < 2:
        raise ValueError("steps must be >= 2")
    return np.arange(steps + 1) / steps


def _curve(ev, report, steps, random, seed, base, mode):
    pool = ev.ds.index_of(report.ids)
    base = np.zeros(0, np.int64) if base is None else np.asarray(base, dtype=np.int64)
    order = pool[value_order(report.ids, report.value, random, seed)]
    n = order.size
    fr_out, acc = [], []
    for f in _fractions(steps):
        k = int(round(f * n))
        chosen = order[k:] if mode == "remove" else order[:k]
        S = np.concatenate([chosen, base])
        if S.size == 0 and mode == "remove":
            warnings.warn(f"removing {f:.0%} leaves an empty training set; curve truncated", CurveWarning, stacklevel=3)
            break
        fr_out.append(f)
        acc.append(ev.utility(S))
    direction = f"{mode}_{'random' if random else 'high_first'}"
    return Curve(np.array(fr_out), np.array(acc), direction, report.method, seed, {"pool_size": int(n), "base_size": int(base.size)})


def removal_curve(ev: UtilityEvaluator, values: ValueReport, steps: int = 20, direction: str = "high_first", seed: int = 0, base=None) -> Curve:
    """Accuracy as a growing fraction of the valued points is removed.

    ``direction`` is ``"high_first"`` or ``"random"``.  ``base`` holds extra
    training rows that are never removed (the training set when the valued
    points are out-of-sample additions).
    """
    if direction not in ("high_first", "random"):
        raise ValueError(f"direction must be 'high_first' or 'random', got {direction!r}")
    return _curve(ev, values, steps, direction == "random", seed, base, "remove")


def addition_curve(ev: UtilityEvaluator, values: ValueReport, steps: int = 20, direction: str = "high_first", seed: int = 0, base=None) -> Curve:
    if direction not in ("high_first", "random"):
        raise ValueError(f"direction must be 'high_first' or 'random', got {direction!r}")
    return _curve(ev, values, steps, direction == "random", seed, base, "add")


def fraction_to_reach(curve: Curve, target: float) -> float:
    """Smallest fraction at which the curve reaches ``target`` (inf if never)."""
    hit = np.flatnonzero(curve.accuracy >= target)
    return float(curve.fractions[hit[0]]) if hit.size else float("inf")


# --------------------------------------------------------------------------- cost


@dataclass
class CostReport:
    counts: dict[str, int]
    m: int
    p: int
    clusters: int

    def __post_init__(self):
        if any(v < 0 for v in self.counts.values()):
            raise ValueError("training-run counts must be nonnegative")

    def predicted(self) -> dict[str, int]:
        return {
            "loo": self.m + 1,
            "tmc": 3 * self.m * self.m,
            "ecoval_no_alpha": self.clusters + 1,
            "ecoval": self.clusters + 1 + 3 * self.p * self.p,
        }

    def ratio(self, num="ecoval", den="tmc") -> float:
        return self.counts[num] / self.counts[den]

    def to_dict(self) -> dict:
        out = {
            "m": self.m,
            "p": self.p,
            "clusters": self.clusters,
            "observed": dict(sorted(self.counts.items())),
            "predicted": self.predicted(),
        }
        if "ecoval" in self.counts and self.counts.get("tmc"):
            out["ratio_ecoval_to_tmc"] = self.ratio()
        return out


def cost_report(ledgers: dict, m: int, p: int, clusters: int) -> CostReport:
    """Tabulate cold-cache training runs per method.

    ``ledgers`` maps a method name to a RunLedger or its snapshot dict.
    """
    counts = {}
    for name, led in ledgers.items():
        snap = led.snapshot() if hasattr(led, "snapshot") else led
        counts[name] = int(snap["training_runs"])
    return CostReport(counts, m, p, clusters)


# --------------------------------------------------------------------------- benchmarks


def blob_benchmark(
    n_train: int,
    noise: float = 0.0,
    seed: int = 0,
    test: int | None = None,
    pool: int = 0,
    oos: int = 0,
    separation: float = 10.0,
    dim: int = 2,
    n_classes: int = 2,
) -> tuple[EmbeddingDataset, SplitSpec]:
    """Gaussian blobs, one per class, split into exact train/test/pool/OOS counts."""
    test = 3 * n_train if test is None else test
    m = n_train + test + pool + oos
    ds = make_blobs(m, noise=noise, seed=seed, n_classes=n_classes, dim=dim, separation=separation)
    splits = make_splits(ds, (n_train / m, test / m, pool / m, oos / m), seed)
    return ds, splits


def duplicated_pairs_benchmark(n_pairs: int, test: int, seed: int = 0, separation: float = 10.0) -> tuple[EmbeddingDataset, SplitSpec]:
    """Blobs where every training point has an exact copy (same label).

    Rows 0..2*n_pairs-1 are the training set, laid out as consecutive
    copies; the rest is the test set.  Under a 1-NN utility every copy
    masks its twin, so leave-one-out scores are all zero.
    """
    base = make_blobs(n_pairs + test, seed=seed, separation=separation)
    src = np.concatenate([np.repeat(np.arange(n_pairs), 2), np.arange(n_pairs, n_pairs + test)])
    m = src.size
    width = len(str(m - 1))
    ds = EmbeddingDataset(
        points=base.points[src],
        labels=base.labels[src],
        ids=tuple(f"p{i:0{width}d}" for i in range(m)),
        classes=base.classes,
    )
    none = np.zeros(0, dtype=np.int64)
    return ds, SplitSpec(np.arange(2 * n_pairs), np.arange(2 * n_pairs, m), none, none)
