"""Client selection strategies.

All strategies share one entry point, :func:`select`. The Shapley-based
ones (GreedyFed, UCB) first walk a fixed random permutation of the
clients in disjoint blocks of ``M`` until every client has been valued
once, then switch to ranking by cumulative SV.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional, Sequence

import numpy as np

from .errors import ConfigurationError, InputError

KINDS = ("greedy_fed", "ucb", "s_fedavg", "fedavg", "fedprox", "power_of_choice", "centralized")
SV_KINDS = ("greedy_fed", "ucb", "s_fedavg")
RR_KINDS = ("greedy_fed", "ucb")


@dataclass
class StrategyConfig:
    kind: str = "greedy_fed"
    c_explore: float = 0.1
    beta_temp: float = 10.0
    d0: Optional[int] = None
    decay: float = 0.9
    tie_break: str = "lowest_index"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigurationError(f"unknown strategy {self.kind!r}; choose from {KINDS}")
        if not self.c_explore > 0:
            raise ConfigurationError("c_explore must be positive")
        if not self.beta_temp > 0:
            raise ConfigurationError("beta_temp must be positive")
        if not 0.0 < self.decay <= 1.0:
            raise ConfigurationError("decay must lie in (0, 1]")
        if self.tie_break != "lowest_index":
            raise ConfigurationError(f"unsupported tie_break {self.tie_break!r}")

    @property
    def uses_sv(self) -> bool:
        return self.kind in SV_KINDS


@dataclass
class SelectionContext:
    """Everything a strategy may look at when choosing ``S_t``.

    ``sv`` maps initialised clients to their cumulative SV and ``counts``
    holds ``N_k``. ``local_loss_query`` returns the current server model's
    loss on a client's shard and is only needed by Power-Of-Choice.
    """

    t: int
    n_clients: int
    m: int
    sizes: Sequence[int]
    rr_order: Sequence[int]
    sv: Mapping[int, float] = field(default_factory=dict)
    counts: Mapping[int, int] = field(default_factory=dict)
    local_loss_query: Optional[Callable[[int], float]] = None

    def __post_init__(self):
        if not 1 <= self.m <= self.n_clients:
            raise ConfigurationError(f"need 1 <= M <= N, got M={self.m}, N={self.n_clients}")
        if sorted(self.rr_order) != list(range(self.n_clients)):
            raise ConfigurationError("rr_order must be a permutation of all client indices")
        if len(self.sizes) != self.n_clients:
            raise ConfigurationError("sizes must list one n_k per client")


def rr_phase_length(n_clients: int, m: int) -> int:
    if n_clients < 1 or m < 1:
        raise InputError("N and M must be >= 1")
    return -(-n_clients // m)


def round_robin_block(rr_order: Sequence[int], t: int, m: int) -> list:
    """The ``t``-th block of ``m`` entries of ``rr_order``, wrapping at the end."""
    n = len(rr_order)
    start = t * m
    return [int(rr_order[(start + i) % n]) for i in range(m)]


def top_m(scores: Mapping[int, float], m: int) -> list:
    """The ``m`` keys with the largest score; ties go to the lower index."""
    ranked = sorted(scores, key=lambda k: (-scores[k], k))
    return ranked[:m]


def _require_initialized(ctx: SelectionContext):
    missing = [k for k in range(ctx.n_clients) if k not in ctx.sv]
    if missing:
        raise ConfigurationError(
            f"greedy selection at round {ctx.t} but {len(missing)} clients have no SV "
            f"(first: {missing[0]})"
        )


def _ucb_scores(ctx: SelectionContext, c_explore: float) -> dict:
    total = sum(ctx.counts.get(k, 0) for k in range(ctx.n_clients))
    log_total = math.log(total) if total > 1 else 0.0
    return {
        k: ctx.sv[k] + c_explore * math.sqrt(2.0 * log_total / ctx.counts[k])
        for k in range(ctx.n_clients)
    }


def softmax_probabilities(values: np.ndarray, beta: float) -> np.ndarray:
    z = beta * np.asarray(values, dtype=np.float64)
    z = z - z.max()
    p = np.exp(z)
    return p / p.sum()


def s_fedavg_values(ctx: SelectionContext) -> np.ndarray:
    """Cumulative SVs with unvalued clients placed at the mean of valued ones."""
    known = [ctx.sv[k] for k in range(ctx.n_clients) if k in ctx.sv]
    fill = float(np.mean(known)) if known else 0.0
    return np.array([ctx.sv.get(k, fill) for k in range(ctx.n_clients)], dtype=np.float64)


def candidate_set_size(cfg: StrategyConfig, ctx: SelectionContext) -> int:
    d0 = ctx.n_clients if cfg.d0 is None else cfg.d0
    if d0 < ctx.m:
        raise ConfigurationError(f"d0={d0} must be at least M={ctx.m}")
    d = max(ctx.m, int(round(d0 * cfg.decay**ctx.t)))
    return min(d, ctx.n_clients)


def select(ctx: SelectionContext, cfg: StrategyConfig, rng: np.random.Generator) -> list:
    """Choose ``M`` distinct clients for round ``ctx.t``."""
    kind = cfg.kind
    if kind == "centralized":
        raise ConfigurationError("centralized training does not select clients")

    if kind in RR_KINDS:
        if ctx.t < rr_phase_length(ctx.n_clients, ctx.m):
            return round_robin_block(ctx.rr_order, ctx.t, ctx.m)
        _require_initialized(ctx)
        if kind == "greedy_fed":
            return top_m(ctx.sv, ctx.m)
        return top_m(_ucb_scores(ctx, cfg.c_explore), ctx.m)

    if kind == "s_fedavg":
        p = softmax_probabilities(s_fedavg_values(ctx), cfg.beta_temp)
        return [int(k) for k in rng.choice(ctx.n_clients, size=ctx.m, replace=False, p=p)]

    if kind in ("fedavg", "fedprox"):
        return [int(k) for k in rng.choice(ctx.n_clients, size=ctx.m, replace=False)]

    # power_of_choice
    if ctx.local_loss_query is None:
        raise ConfigurationError("power_of_choice needs a local_loss_query")
    d = candidate_set_size(cfg, ctx)
    sizes = np.asarray(ctx.sizes, dtype=np.float64)
    candidates = rng.choice(ctx.n_clients, size=d, replace=False, p=sizes / sizes.sum())
    losses = {int(k): float(ctx.local_loss_query(int(k))) for k in sorted(candidates)}
    return top_m(losses, ctx.m)
