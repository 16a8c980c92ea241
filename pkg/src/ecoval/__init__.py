"""Cluster-based data valuation (EcoVal) with Shapley baselines and benchmarks."""

from .bench import Curve, CostReport, addition_curve, blob_benchmark, cost_report, removal_curve
from .clustering import ClusterConfig, ClusterModel, assign, fit_gmm
from .data import EmbeddingDataset, SplitSpec, ValueReport, load_dataset, make_splits, read_report, save_dataset, write_report
from .pipeline import (
    EcoValConfig,
    EcoValState,
    ErrorBoundAudit,
    audit_error_bound,
    ecoval_values,
    fit_clusters,
    lco_values,
    oos_report,
    run_ecoval,
    value_oos,
    value_oos_batch,
)
from .shapley import OracleGuardError, TmcConfig, exact_shapley, loo, tmc_shapley
from .synth import make_blobs
from .utility import RunLedger, UtilityEvaluator, UtilitySpec

__version__ = "0.1.0"
