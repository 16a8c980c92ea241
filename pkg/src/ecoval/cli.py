"""Command-line entry point.

    ecoval value  CONFIG --method {ecoval,ecoval-no-alpha,...,tmc,loo,exact}
    ecoval curve  CONFIG --report values_ecoval.csv --mode remove --direction value
    ecoval cost   CONFIG
    ecoval audit  CONFIG
    ecoval synth  --preset blobs --m 48 --noise 0.1 --seed 0 --out data/

A config is one JSON object with per-module blocks::

    {
      "dataset":    {"embeddings": "data/embeddings.f32", "meta": "data/meta.json"},
      "splits":     {"fractions": [0.25, 0.5, 0.25, 0.0], "seed": 0},
      "utility":    {"model_kind": "knn", "knn_k": 1},
      "clustering": {"n_components": 2, "seed": 0},
      "tmc":        {"truncation_tol": 0.01},
      "ecoval":     {"n_s": 5, "regressor_k": 5, "seed": 0},
      "curve":      {"steps": 20, "seed": 0},
      "audit":      {"slack": 0.02},
      "output_dir": "out"
    }

Relative paths resolve against the config file's directory.  Exit codes:
0 success, 1 runtime failure, 2 usage or config error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import warnings
from dataclasses import dataclass, field, fields
from pathlib import Path

from .bench import addition_curve, cost_report, removal_curve
from .clustering import ClusterConfig
from .data import DataError, ValueReport, load_dataset, make_splits, read_report, save_dataset, write_report
from .pipeline import (
    EcoValConfig,
    audit_error_bound,
    cluster_fit_indices,
    fit_clusters,
    oos_report,
    run_ecoval,
)
from .shapley import OracleGuardError, TmcConfig, exact_shapley, loo, tmc_shapley
from .synth import make_blobs
from .utility import UtilityEvaluator, UtilitySpec

log = logging.getLogger("ecoval")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2

VALUE_METHODS = {
    "ecoval": "full",
    "ecoval-no-alpha": "no_alpha",
    "ecoval-no-beta": "no_beta",
    "ecoval-no-adjustment": "no_adjustment",
    "tmc": None,
    "loo": None,
    "exact": None,
}
CONFIG_KEYS = {"dataset", "splits", "utility", "clustering", "tmc", "ecoval", "curve", "audit", "output_dir"}


class ConfigError(Exception):
    """Bad config file or flags; maps to exit code 2."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigError(message)


# --------------------------------------------------------------------------- config


@dataclass
class RunConfig:
    embeddings: Path
    meta: Path
    fractions: tuple
    split_seed: int
    utility: UtilitySpec
    clustering: ClusterConfig
    tmc: TmcConfig
    ecoval: EcoValConfig
    output_dir: Path
    curve: dict = field(default_factory=dict)
    audit: dict = field(default_factory=dict)


def _block(cls, raw, name):
    if raw is None:
        return cls()
    if not isinstance(raw, dict):
        raise ConfigError(f"config block {name!r} must be an object")
    allowed = {f.name for f in fields(cls)} - {"variant", "tmc"}
    unknown = set(raw) - allowed
    if unknown:
        raise ConfigError(f"unknown keys in {name!r}: {sorted(unknown)}")
    try:
        return cls(**raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{name}: {exc}") from exc


def _check_keys(raw, name, allowed):
    if raw is None:
        return {}
    if not isinstance(raw, dict):
        raise ConfigError(f"config block {name!r} must be an object")
    unknown = set(raw) - allowed
    if unknown:
        raise ConfigError(f"unknown keys in {name!r}: {sorted(unknown)}")
    return raw


def load_config(path, output_dir=None) -> RunConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path} is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    unknown = set(raw) - CONFIG_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    root = path.parent

    ds_block = _check_keys(raw.get("dataset"), "dataset", {"embeddings", "meta"})
    if "embeddings" not in ds_block or "meta" not in ds_block:
        raise ConfigError("dataset block needs 'embeddings' and 'meta' paths")
    emb, meta = root / ds_block["embeddings"], root / ds_block["meta"]
    for p in (emb, meta):
        if not p.is_file():
            raise ConfigError(f"dataset file not found: {p}")

    sp = _check_keys(raw.get("splits"), "splits", {"fractions", "seed"})
    fractions = tuple(sp.get("fractions", (0.25, 0.5, 0.25, 0.0)))
    if len(fractions) != 4:
        raise ConfigError("splits.fractions needs four entries: train, test, distribution_pool, oos")

    tmc = _block(TmcConfig, raw.get("tmc"), "tmc")
    eco_raw = _check_keys(raw.get("ecoval"), "ecoval", {"n_s", "regressor_k", "seed"})
    try:
        eco = EcoValConfig(tmc=tmc, **eco_raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"ecoval: {exc}") from exc

    curve = _check_keys(raw.get("curve"), "curve", {"steps", "seed"})
    audit = _check_keys(raw.get("audit"), "audit", {"slack"})
    out = output_dir if output_dir is not None else raw.get("output_dir", "out")
    return RunConfig(
        embeddings=emb,
        meta=meta,
        fractions=fractions,
        split_seed=int(sp.get("seed", 0)),
        utility=_block(UtilitySpec, raw.get("utility"), "utility"),
        clustering=_block(ClusterConfig, raw.get("clustering"), "clustering"),
        tmc=tmc,
        ecoval=eco,
        output_dir=root / out if output_dir is None else Path(out),
        curve=curve,
        audit=audit,
    )


def _prepare(cfg: RunConfig):
    ds = load_dataset(cfg.embeddings, cfg.meta)
    try:
        splits = make_splits(ds, cfg.fractions, cfg.split_seed)
    except DataError as exc:
        raise ConfigError(f"splits: {exc}") from exc
    if splits.train.size == 0:
        raise ConfigError("splits leave the training set empty")
    cfg.output_dir.mkdir(parents=True, exist_ok=True)
    return ds, splits


def _with_variant(cfg: RunConfig, variant: str) -> EcoValConfig:
    e = cfg.ecoval
    return EcoValConfig(n_s=e.n_s, variant=variant, tmc=e.tmc, regressor_k=e.regressor_k, seed=e.seed)


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


# --------------------------------------------------------------------------- commands


def cmd_value(cfg: RunConfig, method: str) -> int:
    ds, splits = _prepare(cfg)
    ev = UtilityEvaluator(ds, splits, cfg.utility)
    B = splits.train
    ids = tuple(ds.ids[i] for i in B)
    variant = VALUE_METHODS[method]
    out = cfg.output_dir
    if variant is not None:
        model = fit_clusters(ds, splits, cfg.clustering)
        state = run_ecoval(ev, model, _with_variant(cfg, variant), splits)
        report = state.report
        tag = report.method
        if splits.oos.size:
            write_report(oos_report(state, ds, splits.oos), out / f"values_{tag}_oos.csv")
        _write_json(out / "cluster_model.json", model.to_dict())
    else:
        if method == "exact":
            values = exact_shapley(ev, B)
            meta = {}
        elif method == "loo":
            values = loo(ev, B)
            meta = {}
        else:
            res = tmc_shapley(ev, B, cfg.tmc)
            values = res.values
            meta = {"tmc_permutations": res.permutations_used}
        report = ValueReport(ids=ids, value=values, method=method, seed=cfg.tmc.seed, ledger=ev.ledger.snapshot(), meta={"valued_split": "train", **meta})
        tag = method
    path = out / f"values_{tag}.csv"
    write_report(report, path)
    log.info("wrote %s (%d rows, %d training runs)", path, len(report), ev.ledger.training_runs)
    return EXIT_OK


def cmd_curve(cfg: RunConfig, report_path, mode: str, direction: str) -> int:
    ds, splits = _prepare(cfg)
    try:
        report = read_report(report_path)
    except OSError as exc:
        raise ConfigError(f"cannot read report {report_path}: {exc}") from exc
    known = set(ds.ids)
    missing = [i for i in report.ids if i not in known]
    if missing:
        raise DataError(f"report ids not in dataset: {missing[:5]}")
    pos = ds.index_of(report.ids)
    train, oos = set(splits.train.tolist()), set(splits.oos.tolist())
    if set(pos.tolist()) == train:
        valued = "train"
    elif set(pos.tolist()) == oos and oos:
        valued = "oos"
    else:
        raise DataError("report ids match neither the train split nor the oos split of this config")
    ev = UtilityEvaluator(ds, splits, cfg.utility)
    steps = int(cfg.curve.get("steps", 20))
    seed = int(cfg.curve.get("seed", 0))
    fn = removal_curve if mode == "remove" else addition_curve
    curve = fn(ev, report, steps=steps, direction="random" if direction == "random" else "high_first", seed=seed)
    curve.meta["valued_split"] = valued
    stem = f"curve_{report.method}_{valued}_{mode}_{direction}"
    (cfg.output_dir / f"{stem}.csv").write_text(curve.to_csv(), encoding="utf-8")
    _write_json(cfg.output_dir / f"{stem}.json", curve.manifest())
    log.info("wrote %s.csv (%d points)", stem, curve.fractions.size)
    return EXIT_OK


def cmd_cost(cfg: RunConfig) -> int:
    ds, splits = _prepare(cfg)
    base = UtilityEvaluator(ds, splits, cfg.utility)
    B = splits.train
    model = fit_clusters(ds, splits, cfg.clustering)
    ledgers = {}
    ev = base.fresh()
    loo(ev, B)
    ledgers["loo"] = ev.ledger
    ev = base.fresh()
    full = run_ecoval(ev, model, _with_variant(cfg, "full"), splits)
    ledgers["ecoval"] = ev.ledger
    ev = base.fresh()
    run_ecoval(ev, model, _with_variant(cfg, "no_alpha"), splits)
    ledgers["ecoval_no_alpha"] = ev.ledger
    ev = base.fresh()
    tmc_shapley(ev, B, cfg.tmc)
    ledgers["tmc"] = ev.ledger
    rep = cost_report(ledgers, m=int(B.size), p=int(full.curated.size), clusters=len(full.clusters))
    _write_json(cfg.output_dir / "cost.json", rep.to_dict())
    log.info("wrote cost.json: %s", rep.counts)
    return EXIT_OK


def cmd_audit(cfg: RunConfig) -> int:
    ds, splits = _prepare(cfg)
    ev = UtilityEvaluator(ds, splits, cfg.utility)
    exact = exact_shapley(ev, splits.train)
    model = fit_clusters(ds, splits, cfg.clustering)
    state = run_ecoval(ev, model, _with_variant(cfg, "full"), splits)
    audit = audit_error_bound(state.report.value, exact, state, slack=float(cfg.audit.get("slack", 0.02)))
    doc = audit.to_dict()
    doc["curated_size"] = int(state.curated.size)
    doc["cluster_fit_points"] = int(cluster_fit_indices(splits).size)
    _write_json(cfg.output_dir / "audit.json", doc)
    log.info("wrote audit.json: delta_R=%.4g satisfied=%.3f", audit.delta_R, audit.satisfied_fraction)
    return EXIT_OK


def cmd_synth(preset: str, m: int, noise: float, seed: int, out, n_classes: int = 2, dim: int = 2) -> int:
    if preset != "blobs":
        raise ConfigError(f"unknown preset {preset!r}")
    try:
        ds = make_blobs(m, noise=noise, seed=seed, n_classes=n_classes, dim=dim)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    save_dataset(ds, out / "embeddings.f32", out / "meta.json")
    log.info("wrote %d points to %s", m, out)
    return EXIT_OK


# --------------------------------------------------------------------------- entry point


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="ecoval", description="Cluster-based data valuation and baselines.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def with_config(name, help_):
        s = sub.add_parser(name, help=help_)
        s.add_argument("config", help="JSON run config")
        s.add_argument("--output-dir", default=None, help="override the config's output_dir")
        return s

    s = with_config("value", "value the training split")
    s.add_argument("--method", choices=sorted(VALUE_METHODS), default="ecoval")
    s = with_config("curve", "addition/removal curve for a value report")
    s.add_argument("--report", required=True)
    s.add_argument("--mode", choices=("add", "remove"), default="remove")
    s.add_argument("--direction", choices=("value", "random"), default="value")
    with_config("cost", "training-run counts per method")
    with_config("audit", "error-bound audit against exact Shapley values")
    s = sub.add_parser("synth", help="write a synthetic dataset")
    s.add_argument("--preset", choices=("blobs",), default="blobs")
    s.add_argument("--m", type=int, required=True)
    s.add_argument("--noise", type=float, default=0.0)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--n-classes", type=int, default=2)
    s.add_argument("--dim", type=int, default=2)
    s.add_argument("--out", required=True)
    return p


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        args = build_parser().parse_args(argv)
    except ConfigError as exc:
        print(f"ecoval: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    if args.verbose:
        log.setLevel(logging.INFO)
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("always")
            warnings.showwarning = lambda msg, cat, *a, **k: log.warning("%s", msg)
            if args.command == "synth":
                return cmd_synth(args.preset, args.m, args.noise, args.seed, args.out, args.n_classes, args.dim)
            cfg = load_config(args.config, args.output_dir)
            if args.command == "value":
                return cmd_value(cfg, args.method)
            if args.command == "curve":
                return cmd_curve(cfg, args.report, args.mode, args.direction)
            if args.command == "cost":
                return cmd_cost(cfg)
            return cmd_audit(cfg)
    except ConfigError as exc:
        print(f"ecoval: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OracleGuardError as exc:
        print(f"ecoval: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001 - the exit-code contract covers every failure
        print(f"ecoval: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
