import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from fedshap.errors import ConfigurationError, InputError
from fedshap.selection import (
    SelectionContext,
    StrategyConfig,
    candidate_set_size,
    round_robin_block,
    rr_phase_length,
    select,
    top_m,
)


def ctx(t=0, n=5, m=2, sv=None, counts=None, rr=None, sizes=None, loss=None):
    return SelectionContext(
        t=t,
        n_clients=n,
        m=m,
        sizes=sizes or [10] * n,
        rr_order=rr if rr is not None else list(range(n)),
        sv=sv or {},
        counts=counts or {},
        local_loss_query=loss,
    )


@pytest.mark.parametrize("n,m,expected", [(300, 3, 100), (5, 2, 3), (4, 4, 1), (1, 1, 1), (7, 3, 3)])
def test_rr_phase_length(n, m, expected):
    assert rr_phase_length(n, m) == expected


def test_rr_phase_length_rejects_zero():
    with pytest.raises(InputError):
        rr_phase_length(0, 1)


def test_round_robin_blocks_wrap():
    rr = [4, 0, 3, 1, 2]
    cfg = StrategyConfig("greedy_fed")
    got = [select(ctx(t=t, rr=rr), cfg, np.random.default_rng(0)) for t in range(3)]
    assert got == [[4, 0], [3, 1], [2, 4]]
    assert [round_robin_block(rr, t, 2) for t in range(3)] == got


def test_greedy_top_m():
    assert set(top_m({1: 0.3, 2: 0.1, 3: 0.5}, 2)) == {3, 1}


def test_greedy_phase_uses_cumulative_sv():
    sv = {0: 0.3, 1: 0.1, 2: 0.5, 3: -0.2, 4: 0.3}
    picked = select(ctx(t=3, sv=sv, counts=dict.fromkeys(sv, 1)), StrategyConfig("greedy_fed"), np.random.default_rng(0))
    assert picked == [2, 0]


def test_ties_go_to_lower_index():
    assert top_m({5: 1.0, 2: 1.0, 9: 1.0}, 2) == [2, 5]


def test_greedy_requires_initialised_sv():
    with pytest.raises(ConfigurationError):
        select(ctx(t=3, sv={0: 1.0}), StrategyConfig("greedy_fed"), np.random.default_rng(0))


def test_ucb_bonus_favours_rarely_selected():
    sv = {0: 0.50, 1: 0.49, 2: 0.0, 3: 0.0, 4: 0.0}
    counts = {0: 20, 1: 1, 2: 20, 3: 20, 4: 20}
    cfg = StrategyConfig("ucb", c_explore=0.1)
    picked = select(ctx(t=10, m=1, sv=sv, counts=counts), cfg, np.random.default_rng(0))
    assert picked == [1]
    total = sum(counts.values())
    assert 0.49 + 0.1 * math.sqrt(2 * math.log(total) / 1) > 0.5 + 0.1 * math.sqrt(2 * math.log(total) / 20)


def test_rr_phase_covers_every_client():
    for n, m in [(5, 2), (30, 3), (7, 7), (10, 4)]:
        rr = np.random.default_rng(n).permutation(n).tolist()
        seen = set()
        for t in range(rr_phase_length(n, m)):
            seen.update(select(ctx(t=t, n=n, m=m, rr=rr), StrategyConfig("ucb"), np.random.default_rng(0)))
        assert seen == set(range(n))


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), scale=st.floats(0.01, 100.0))
def test_argmax_invariant_to_positive_scaling(seed, scale):
    rng = np.random.default_rng(seed)
    n, m = 8, 3
    sv = {k: float(v) for k, v in enumerate(rng.normal(size=n))}
    counts = {k: int(c) for k, c in enumerate(rng.integers(1, 10, size=n))}
    scaled = {k: v * scale for k, v in sv.items()}
    g = StrategyConfig("greedy_fed")
    assert select(ctx(t=5, n=n, m=m, sv=sv, counts=counts), g, rng) == select(ctx(t=5, n=n, m=m, sv=scaled, counts=counts), g, rng)
    u1 = StrategyConfig("ucb", c_explore=0.2)
    u2 = StrategyConfig("ucb", c_explore=0.2 * scale)
    a = select(ctx(t=5, n=n, m=m, sv=sv, counts=counts), u1, rng)
    b = select(ctx(t=5, n=n, m=m, sv=scaled, counts=counts), u2, rng)
    assert set(a) == set(b)


@pytest.mark.parametrize("kind", ["greedy_fed", "ucb", "s_fedavg", "fedavg", "fedprox", "power_of_choice"])
def test_distinct_in_range_and_reproducible(kind):
    n, m = 12, 4
    rng = np.random.default_rng(0)
    sv = {k: float(v) for k, v in enumerate(rng.normal(size=n))}
    counts = dict.fromkeys(range(n), 2)
    losses = rng.random(n)
    c = ctx(t=7, n=n, m=m, sv=sv, counts=counts, rr=list(range(n)), sizes=list(range(1, n + 1)), loss=lambda k: losses[k])
    a = select(c, StrategyConfig(kind), np.random.default_rng(99))
    b = select(c, StrategyConfig(kind), np.random.default_rng(99))
    assert a == b
    assert len(a) == m == len(set(a))
    assert all(0 <= k < n for k in a)


def test_s_fedavg_equal_values_uniform():
    n, m, draws = 6, 2, 10_000
    sv = dict.fromkeys(range(n), 0.25)
    rng = np.random.default_rng(2024)
    freq = np.zeros(n)
    c = ctx(n=n, m=m, sv=sv)
    for _ in range(draws):
        for k in select(c, StrategyConfig("s_fedavg"), rng):
            freq[k] += 1
    _, p = stats.chisquare(freq)
    assert p > 0.01


def test_s_fedavg_fills_unvalued_with_mean():
    from fedshap.selection import s_fedavg_values

    values = s_fedavg_values(ctx(n=4, sv={0: 1.0, 2: 3.0}))
    np.testing.assert_array_equal(values, [1.0, 2.0, 3.0, 2.0])


def test_s_fedavg_prefers_high_value():
    sv = {0: 1.0, 1: 0.0, 2: 0.0, 3: 0.0}
    rng = np.random.default_rng(0)
    hits = sum(0 in select(ctx(n=4, m=1, sv=sv), StrategyConfig("s_fedavg", beta_temp=10.0), rng) for _ in range(2000))
    assert hits > 1900


def test_fedavg_inclusion_frequency():
    n, m, rounds = 10, 3, 10_000
    rng = np.random.default_rng(7)
    freq = np.zeros(n)
    for t in range(rounds):
        for k in select(ctx(t=t, n=n, m=m), StrategyConfig("fedavg"), rng):
            freq[k] += 1
    p = m / n
    se = math.sqrt(p * (1 - p) / rounds)
    assert np.all(np.abs(freq / rounds - p) < 3 * se)


class TestPowerOfChoice:
    def test_needs_loss_query(self):
        with pytest.raises(ConfigurationError):
            select(ctx(), StrategyConfig("power_of_choice"), np.random.default_rng(0))

    def test_candidate_set_decays(self):
        cfg = StrategyConfig("power_of_choice", decay=0.9)
        sizes = [candidate_set_size(cfg, ctx(t=t, n=30, m=3)) for t in (0, 1, 5, 40)]
        assert sizes == [30, 27, round(30 * 0.9**5), 3]

    def test_d0_below_m_rejected(self):
        with pytest.raises(ConfigurationError):
            candidate_set_size(StrategyConfig("power_of_choice", d0=1), ctx(m=2))

    def test_picks_highest_loss_when_querying_all(self):
        losses = [0.1, 0.9, 0.5, 0.7, 0.2]
        picked = select(ctx(t=0, loss=lambda k: losses[k]), StrategyConfig("power_of_choice"), np.random.default_rng(0))
        assert picked == [1, 3]


def test_centralized_does_not_select():
    with pytest.raises(ConfigurationError):
        select(ctx(), StrategyConfig("centralized"), np.random.default_rng(0))


def test_config_validation():
    with pytest.raises(ConfigurationError):
        StrategyConfig("random")
    with pytest.raises(ConfigurationError):
        StrategyConfig("power_of_choice", decay=0.0)
    with pytest.raises(ConfigurationError):
        ctx(n=3, m=4)
    with pytest.raises(ConfigurationError):
        ctx(n=3, rr=[0, 0, 1])
