"""Coalition utilities, exact Shapley values, GTG-Shapley, cumulative valuations."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, Hashable, Iterable, Optional

import numpy as np

from .errors import CapacityError, ConfigurationError, LogicError, UtilityError

EXACT_MAX_PLAYERS = 20


class CoalitionUtility:
    """Memoising wrapper around a set function ``U(S)``.

    ``evals`` counts calls into the wrapped function, so repeated queries
    of one coalition cost a single evaluation.
    """

    def __init__(self, fn: Callable[[frozenset], float]):
        self._fn = fn
        self._cache: Dict[frozenset, float] = {}
        self.evals = 0

    def __call__(self, subset: Iterable[Hashable]) -> float:
        key = frozenset(subset)
        try:
            return self._cache[key]
        except KeyError:
            pass
        try:
            value = float(self._fn(key))
        except UtilityError:
            raise
        except Exception as exc:
            raise UtilityError(f"utility evaluation failed: {exc}", key) from exc
        self.evals += 1
        self._cache[key] = value
        return value


def _as_utility(u) -> CoalitionUtility:
    return u if isinstance(u, CoalitionUtility) else CoalitionUtility(u)


def exact_shapley(u, players) -> Dict[Hashable, float]:
    """Shapley values by enumerating every coalition."""
    u = _as_utility(u)
    players = list(players)
    m = len(players)
    if m > EXACT_MAX_PLAYERS:
        raise CapacityError(
            f"exact enumeration over {m} players needs 2^{m} evaluations; use gtg_shapley"
        )
    if m == 0:
        return {}
    weights = [
        math.factorial(s) * math.factorial(m - s - 1) / math.factorial(m) for s in range(m)
    ]
    values = {}
    for k in players:
        others = [p for p in players if p != k]
        total = 0.0
        for size in range(m):
            for coalition in itertools.combinations(others, size):
                total += weights[size] * (u(coalition + (k,)) - u(coalition))
        values[k] = total
    return values


@dataclass
class GtgConfig:
    """Settings for ``gtg_shapley``.

    ``max_iters=None`` means 50 sampling rounds per player. ``exhaustive``
    replaces random sampling by a single pass over every permutation for
    every pivot; it exists for oracle comparisons at small sizes.
    """

    epsilon: float = 1e-4
    max_iters: Optional[int] = None
    convergence_window: int = 5
    convergence_tol: Optional[float] = None
    exhaustive: bool = False

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ConfigurationError("epsilon must be positive")
        if self.max_iters is not None and self.max_iters < 1:
            raise ConfigurationError("max_iters must be >= 1")
        if self.convergence_window < 1:
            raise ConfigurationError("convergence_window must be >= 1")

    def iterations_for(self, m: int) -> int:
        return self.max_iters if self.max_iters is not None else 50 * m

    @property
    def tolerance(self) -> float:
        return self.epsilon if self.convergence_tol is None else self.convergence_tol


@dataclass
class SvReport:
    round_sv: Dict[Hashable, float]
    truncated_between_rounds: bool = False
    permutations_used: int = 0
    utility_evals: int = 0
    converged: bool = False


def gtg_shapley(u, players, cfg: Optional[GtgConfig] = None, rng=None) -> SvReport:
    """Truncated permutation-sampling estimate of per-player Shapley values.

    Each sampling round draws, for every pivot player, a permutation that
    starts with the pivot and continues with the remaining players in
    random order. Prefix utilities ``v_0 = U(empty) .. v_M = U(all)`` are
    scanned and player ``pi[j]`` is credited ``v_{j+1} - v_j``. Once the
    remaining gap ``|v_M - v_j|`` drops below ``epsilon`` the prefix value
    is frozen, so the rest of the permutation contributes zero. A round
    whose total gap is already below ``epsilon`` returns all zeros.
    """
    cfg = cfg or GtgConfig()
    rng = rng if rng is not None else np.random.default_rng(0)
    u = _as_utility(u)
    players = list(players)
    if not players:
        raise ConfigurationError("gtg_shapley needs at least one player")
    m = len(players)
    evals_before = u.evals

    v_empty = u(())
    v_full = u(players)
    if abs(v_full - v_empty) < cfg.epsilon:
        return SvReport(
            {k: 0.0 for k in players},
            truncated_between_rounds=True,
            utility_evals=u.evals - evals_before,
        )

    sums = np.zeros(m)
    counts = np.zeros(m, dtype=np.int64)
    permutations = 0

    def scan(perm):
        v_prev = v_empty
        for j in range(m):
            if abs(v_full - v_prev) < cfg.epsilon:
                v_next = v_prev
            else:
                v_next = u(players[i] for i in perm[: j + 1])
            sums[perm[j]] += v_next - v_prev
            counts[perm[j]] += 1
            v_prev = v_next

    converged = False
    if cfg.exhaustive:
        for pivot in range(m):
            rest = [i for i in range(m) if i != pivot]
            for tail in itertools.permutations(rest):
                scan((pivot,) + tail)
                permutations += 1
    else:
        history = []
        window = cfg.convergence_window
        for _ in range(cfg.iterations_for(m)):
            for pivot in range(m):
                rest = np.array([i for i in range(m) if i != pivot], dtype=np.int64)
                scan((pivot, *rng.permutation(rest).tolist()))
                permutations += 1
            history.append(sums / counts)
            if len(history) > window:
                recent = np.array(history[-(window + 1) :])
                if np.max(np.abs(np.diff(recent, axis=0))) < cfg.tolerance:
                    converged = True
                    break

    estimates = sums / counts
    return SvReport(
        {k: float(estimates[i]) for i, k in enumerate(players)},
        truncated_between_rounds=False,
        permutations_used=permutations,
        utility_evals=u.evals - evals_before,
        converged=converged or cfg.exhaustive,
    )


@dataclass
class CumulativeSv:
    """Per-client running valuation across the rounds it was selected.

    ``mode`` is ``"mean"`` or ``"exponential"``; the exponential update is
    ``alpha * old + (1 - alpha) * new`` with the first observation taken
    as is. Clients never observed are absent from ``values``.
    """

    mode: str = "mean"
    alpha: float = 0.9
    values: Dict[Hashable, float] = field(default_factory=dict)
    counts: Dict[Hashable, int] = field(default_factory=dict)
    history: Dict[Hashable, list] = field(default_factory=dict)

    def __post_init__(self):
        if self.mode not in ("mean", "exponential"):
            raise ConfigurationError(f"unknown cumulative SV mode {self.mode!r}")
        if not 0.0 <= self.alpha < 1.0:
            raise ConfigurationError("exponential alpha must lie in [0, 1)")

    def record_selection(self, client) -> None:
        self.counts[client] = self.counts.get(client, 0) + 1

    def is_initialized(self, client) -> bool:
        return client in self.values

    def get(self, client, default=None):
        return self.values.get(client, default)

    def update(self, report: SvReport) -> "CumulativeSv":
        for k, sv in report.round_sv.items():
            n_k = self.counts.get(k, 0)
            seen = len(self.history.get(k, ()))
            if n_k != seen + 1:
                raise LogicError(
                    f"client {k} has N_k={n_k} after {seen} SV updates; "
                    "record_selection must precede each update"
                )
            if k not in self.values:
                new = sv
            elif self.mode == "mean":
                new = ((n_k - 1) * self.values[k] + sv) / n_k
            else:
                new = self.alpha * self.values[k] + (1.0 - self.alpha) * sv
            self.values[k] = new
            self.history.setdefault(k, []).append(sv)
        return self


def update_cumulative(c: CumulativeSv, report: SvReport) -> CumulativeSv:
    return c.update(report)
