import math
from fractions import Fraction as F

import pytest
from hypothesis import given
from hypothesis import strategies as st

from nearline.model import (
    PRODUCTION_TRUNCATION,
    ConfigError,
    ScenarioConfig,
    ScoringParams,
    Strategy,
    final_score,
    production_channel_configs,
)

# (rank_index, time_index, alpha, beta, exact value); each fraction was reduced by hand
HAND_EVALUATED = [
    (0, 0, 50, 10, F(1)),
    (0, 0, 1, 1, F(1)),
    (0, 0, 500, 0.5, F(1)),
    (3, 0, 50, 10, F(50, 53)),
    (0, 1, 50, 10, F(10, 11)),
    (50, 0, 50, 10, F(1, 2)),
    (0, 10, 50, 10, F(1, 2)),
    (50, 10, 50, 10, F(1, 4)),
    (1, 1, 1, 1, F(1, 4)),
    (9, 0, 1, 1, F(1, 10)),
    (0, 9, 1, 1, F(1, 10)),
    (10, 5, 10, 10, F(1, 3)),
    (20, 3, 20, 10, F(5, 13)),
    (100, 2, 50, 10, F(5, 18)),
    (199, 7, 200, 10, F(2000, 6783)),
    (499, 0, 500, 10, F(500, 999)),
    (0, 7, 500, 10, F(10, 17)),
    (4, 4, 10, 20, F(25, 42)),
    (7, 1, 200, 5, F(500, 621)),
    (250, 15, 500, 10, F(4, 15)),
    (1, 0, 0.5, 10, F(1, 3)),
    (2, 3, 2.5, 0.25, F(5, 117)),
    (499, 7, 10, 10, F(100, 8653)),
    (12, 6, 50, 10, F(125, 248)),
]


@pytest.mark.parametrize("rank,time,alpha,beta,expected", HAND_EVALUATED)
def test_final_score_hand_values(rank, time, alpha, beta, expected):
    assert abs(final_score(rank, time, ScoringParams(alpha, beta)) - float(expected)) <= 1e-12


def test_hand_values_agree_with_exact_arithmetic():
    # guards the table itself against a slip when reducing fractions
    for rank, time, alpha, beta, expected in HAND_EVALUATED:
        a, b = F(alpha), F(beta)
        assert a / (a + rank) * (b / (b + time)) == expected


def test_named_examples():
    p = ScoringParams()
    assert final_score(0, 0, p) == 1.0
    assert final_score(50, 0, p) == 0.5
    assert final_score(0, 1, p) == pytest.approx(10 / 11, abs=1e-15)


ranks = st.integers(min_value=0, max_value=10_000)
times = st.integers(min_value=0, max_value=10_000)
positive = st.floats(min_value=1e-3, max_value=1e6, allow_nan=False, allow_infinity=False)


@given(ranks, times, positive, positive)
def test_score_in_unit_interval(r, t, a, b):
    s = final_score(r, t, ScoringParams(a, b))
    assert 0.0 < s <= 1.0


@given(ranks, times, positive, positive)
def test_score_non_increasing_in_rank_and_time(r, t, a, b):
    p = ScoringParams(a, b)
    s = final_score(r, t, p)
    assert final_score(r + 1, t, p) <= s
    assert final_score(r, t + 1, p) <= s


@given(ranks, times, positive)
def test_large_alpha_leaves_only_recency(r, t, b):
    s = final_score(r, t, ScoringParams(1e15, b))
    assert s == pytest.approx(b / (b + t), rel=1e-9)


@pytest.mark.parametrize("bad", [0, -1.0, math.inf, math.nan, "50", True])
def test_scoring_params_rejected(bad):
    with pytest.raises(ConfigError):
        ScoringParams(alpha=bad)
    with pytest.raises(ConfigError):
        ScoringParams(beta=bad)


def test_scenario_config_defaults_and_roundtrip():
    c = ScenarioConfig("main_search")
    assert (c.alpha, c.beta, c.strategy) == (50.0, 10.0, Strategy.SCORED)
    assert ScenarioConfig.from_dict(c.to_dict()) == c
    assert ScenarioConfig.from_dict({"scenario_id": "x", "strategy": "RANDOM"}).strategy is Strategy.RANDOM


@pytest.mark.parametrize("d,path", [
    ({"scenario_id": "x", "k": 0}, "s.k"),
    ({"scenario_id": "x", "truncation": 1.5}, "s.truncation"),
    ({"scenario_id": "x", "alpha": -2}, "s.alpha"),
    ({"scenario_id": "x", "strategy": "GREEDY"}, "s.strategy"),
    ({"scenario_id": "x", "colour": 1}, "s.colour"),
    ({"k": 3}, "s.scenario_id"),
])
def test_scenario_config_errors_name_the_field(d, path):
    with pytest.raises(ConfigError) as exc:
        ScenarioConfig.from_dict(d, path="s")
    assert exc.value.path == path


def test_production_channel_sizes():
    configs = production_channel_configs()
    assert configs["main_search"].truncation == 500
    assert configs["mini_detail"].truncation == 500
    assert configs["post_purchase"].truncation == 500
    assert configs["in_shop"].truncation == 20
    assert configs["photo_search"].truncation == 20
    for sid, c in configs.items():
        assert c.k == c.truncation == PRODUCTION_TRUNCATION[sid]


def test_alpha_sweep_values():
    from nearline.sim.harness import ALPHA_SWEEP
    assert ALPHA_SWEEP == (10.0, 20.0, 50.0, 200.0, 500.0)
