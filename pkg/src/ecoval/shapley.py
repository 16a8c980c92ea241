"""Baseline valuations: leave-one-out, exact Shapley, truncated Monte Carlo.

All three take a *game*: any object with ``utility(indices) -> float``.
:class:`~ecoval.utility.UtilityEvaluator` is the usual one; tests also pass
linear combinations of evaluators.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

EXACT_MAX_PLAYERS = 14


class OracleGuardError(ValueError):
    pass


def _ledger(game) -> dict:
    ledger = getattr(game, "ledger", None)
    return ledger.snapshot() if ledger is not None else {}


def loo(game, B) -> np.ndarray:
    """U(B) - U(B minus z) for every z in B, in the order of ``B``."""
    B = np.asarray(B, dtype=np.int64)
    if B.size == 0:
        raise ValueError("loo needs at least one point")
    full = game.utility(B)
    return np.array([full - game.utility(np.delete(B, i)) for i in range(B.size)])


def subset_utilities(game, B) -> np.ndarray:
    """U over all 2^|B| subsets of B; entry ``mask`` holds U({B[j] : bit j set})."""
    B = np.asarray(B, dtype=np.int64)
    n = B.size
    bits = (np.arange(2**n)[:, None] >> np.arange(n)) & 1
    return np.array([game.utility(B[row.astype(bool)]) for row in bits])


def exact_shapley(game, B) -> np.ndarray:
    """Shapley values by enumerating every coalition.

    value(z) = (1/m) * sum_k 1/C(m-1, k-1) * sum_{S, |S|=k-1, z not in S} U(S+z) - U(S)
    """
    B = np.asarray(B, dtype=np.int64)
    n = B.size
    if n > EXACT_MAX_PLAYERS:
        raise OracleGuardError(
            f"exact Shapley enumerates 2^|B| coalitions and is capped at |B| <= "
            f"{EXACT_MAX_PLAYERS} (got {n}); use tmc_shapley instead"
        )
    if n == 0:
        return np.zeros(0)
    u = subset_utilities(game, B)
    masks = np.arange(2**n)
    sizes = np.array([bin(s).count("1") for s in masks])
    weight = np.array([1.0 / (n * math.comb(n - 1, s)) for s in range(n)])
    values = np.empty(n)
    for j in range(n):
        without = masks[(masks >> j) & 1 == 0]
        values[j] = np.sum(weight[sizes[without]] * (u[without | (1 << j)] - u[without]))
    return values


@dataclass(frozen=True)
class TmcConfig:
    """Truncated Monte Carlo settings.

    ``max_permutations=None`` means 3|B|.  ``truncation_tol=0`` switches
    truncation off; any positive tolerance truncates a permutation once
    |U(prefix) - U(B)| <= truncation_tol.  Sampling stops early once no
    running mean moved by ``convergence_tol`` or more over the last
    ``convergence_window`` permutations (``convergence_tol=0`` disables this).
    """

    max_permutations: int | None = None
    convergence_window: int = 100
    convergence_tol: float = 1e-3
    truncation_tol: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if self.max_permutations is not None and self.max_permutations < 1:
            raise ValueError("max_permutations must be >= 1")
        if self.convergence_window < 1:
            raise ValueError("convergence_window must be >= 1")
        if self.truncation_tol < 0 or self.convergence_tol < 0:
            raise ValueError("tolerances must be nonnegative")


@dataclass
class ShapleyResult:
    values: np.ndarray
    permutations_used: int
    ledger: dict = field(default_factory=dict)
    truncated_positions: int = 0


def tmc_shapley(game, B, cfg: TmcConfig | None = None) -> ShapleyResult:
    cfg = cfg or TmcConfig()
    B = np.asarray(B, dtype=np.int64)
    n = B.size
    if n == 0:
        raise ValueError("tmc_shapley needs at least one point")
    cap = cfg.max_permutations or 3 * n
    rng = np.random.default_rng(cfg.seed)
    full = game.utility(B)
    empty = game.utility(B[:0])
    total = np.zeros(n)
    history = []
    truncated = 0
    t = 0
    while t < cap:
        order = rng.permutation(n)
        marg = np.zeros(n)
        prev = empty
        for pos in range(n):
            if cfg.truncation_tol > 0 and abs(prev - full) <= cfg.truncation_tol:
                truncated += n - pos
                break
            cur = game.utility(B[order[: pos + 1]])
            marg[order[pos]] = cur - prev
            prev = cur
        total += marg
        t += 1
        if cfg.convergence_tol > 0:
            history.append(total / t)
            if len(history) > cfg.convergence_window:
                history.pop(0)
                if np.max(np.abs(history[-1] - history[0])) < cfg.convergence_tol:
                    break
    return ShapleyResult(values=total / t, permutations_used=t, ledger=_ledger(game), truncated_positions=truncated)
