import math
import random

import pytest
from hypothesis import given, strategies as st

from lorakvsim.costmodel import (
    CostParams, DomainError, LoraDemand, NodeView, UsageStats,
    expected_lora_count, lora_reward, node_eval, retain_eval,
)


# ---------------------------------------------------------------------------
# independent scalar oracle, written from the formulas alone

def oracle_expected_count(probs, bs):
    return sum(1.0 - (1.0 - p) ** bs for p in probs)


def oracle_reward(low, now):
    return max(1.0, low / max(now, 1))


def oracle_retain(cost, prob, t, midpoint, scale):
    sig = 1.0 / (1.0 + math.exp(-((t - midpoint) / scale)))
    return cost * prob * (1.0 - sig)


def test_expected_lora_count_basics():
    assert expected_lora_count([], 5.0) == 0.0
    assert expected_lora_count([1.0], 5.0) == 1.0
    assert expected_lora_count([0.3, 0.7], 2.0) == pytest.approx(1.42, abs=1e-12)


def test_expected_lora_count_domain_error():
    with pytest.raises(DomainError):
        expected_lora_count([1.5], 2.0)
    with pytest.raises(DomainError):
        expected_lora_count([0.5], -1.0)


def test_lora_reward_branches():
    assert lora_reward(5.0, 10) == 1.0
    assert lora_reward(10.0, 5) == 2.0
    assert lora_reward(3.0, 0) == 3.0     # denominator guard


def test_retain_eval_midpoint_and_limits():
    p = CostParams()
    v = NodeView(is_lora=False, size_bytes=0, prob=0.5,
                 t_since_visit=p.sigmoid_midpoint, transfer_cost=2.0)
    assert retain_eval(v, p) == pytest.approx(0.5, abs=1e-12)
    v2 = NodeView(is_lora=False, size_bytes=0, prob=0.0,
                  t_since_visit=0.0, transfer_cost=2.0)
    assert retain_eval(v2, p) == 0.0
    v3 = NodeView(is_lora=False, size_bytes=0, prob=1.0,
                  t_since_visit=1e7, transfer_cost=2.0)
    assert retain_eval(v3, p) < 1e-9


def test_retain_eval_one_scale_past_midpoint():
    p = CostParams()
    v = NodeView(is_lora=False, size_bytes=0, prob=0.25,
                 t_since_visit=p.sigmoid_midpoint + p.sigmoid_scale,
                 transfer_cost=1.6)
    sig1 = 1.0 / (1.0 + math.exp(-1.0))
    assert retain_eval(v, p) == pytest.approx(1.6 * 0.25 * (1 - sig1), abs=1e-12)


def test_eval_composition():
    p = CostParams()
    kv = NodeView(is_lora=False, size_bytes=0, prob=0.5,
                  t_since_visit=p.sigmoid_midpoint, transfer_cost=2.0)
    demand = LoraDemand(low_lora=10.0, now_lora=5)
    assert node_eval(kv, demand, p) == retain_eval(kv, p)
    lora = NodeView(is_lora=True, size_bytes=0, prob=0.5,
                    t_since_visit=p.sigmoid_midpoint, transfer_cost=2.0)
    assert node_eval(lora, demand, p) == pytest.approx(0.5 * 2.0, abs=1e-12)


def test_eval_all_nodes_scope():
    p = CostParams(lora_reward_scope="all_nodes")
    kv = NodeView(is_lora=False, size_bytes=0, prob=0.5,
                  t_since_visit=p.sigmoid_midpoint, transfer_cost=2.0)
    demand = LoraDemand(low_lora=10.0, now_lora=5)
    assert node_eval(kv, demand, p) == pytest.approx(1.0, abs=1e-12)


def test_oracle_agreement_random_inputs():
    # 1000 random inputs across the documented domains; 1e-9 tolerance.
    rng = random.Random(42)
    p = CostParams()
    for _ in range(1000):
        probs = [rng.random() for _ in range(rng.randint(0, 30))]
        bs = rng.random() * 64
        assert expected_lora_count(probs, bs) == pytest.approx(
            oracle_expected_count(probs, bs), abs=1e-9)
        low = rng.random() * 30
        now = rng.randint(0, 30)
        assert lora_reward(low, now) == pytest.approx(
            oracle_reward(low, now), abs=1e-9)
        cost = rng.random() * 4
        prob = rng.random()
        t = rng.random() * 600
        v = NodeView(is_lora=False, size_bytes=0, prob=prob,
                     t_since_visit=t, transfer_cost=cost)
        assert retain_eval(v, p) == pytest.approx(
            oracle_retain(cost, prob, t, p.sigmoid_midpoint,
                          p.sigmoid_scale), abs=1e-9)
        vl = NodeView(is_lora=True, size_bytes=0, prob=prob,
                      t_since_visit=t, transfer_cost=cost)
        demand = LoraDemand(low_lora=low, now_lora=now)
        assert node_eval(vl, demand, p) == pytest.approx(
            oracle_retain(cost, prob, t, p.sigmoid_midpoint, p.sigmoid_scale)
            * oracle_reward(low, now), abs=1e-9)


@given(
    prob=st.floats(0, 1), cost=st.floats(0, 10),
    t=st.floats(0, 600), t2=st.floats(0, 600),
)
def test_monotonicity_properties(prob, cost, t, t2):
    p = CostParams()
    v1 = NodeView(False, 0, prob, min(t, t2), cost)
    v2 = NodeView(False, 0, prob, max(t, t2), cost)
    r1, r2 = retain_eval(v1, p), retain_eval(v2, p)
    assert r1 >= r2
    # strictness checked away from the saturated logistic tail
    if prob > 1e-6 and cost > 1e-6 and abs(t - t2) >= 1.0 and max(t, t2) <= 300:
        assert r1 > r2
    # doubling transfer cost doubles the score
    vd = NodeView(False, 0, prob, min(t, t2), cost * 2)
    assert retain_eval(vd, p) == pytest.approx(2 * r1, rel=1e-12, abs=1e-300)


@given(probs=st.lists(st.floats(0, 1), max_size=20),
       bs1=st.floats(0, 64), bs2=st.floats(0, 64))
def test_expected_count_bounds_and_monotone(probs, bs1, bs2):
    lo, hi = sorted([bs1, bs2])
    a, b = expected_lora_count(probs, lo), expected_lora_count(probs, hi)
    assert 0 <= a <= len(probs) + 1e-12
    assert a <= b + 1e-12


# ---------------------------------------------------------------------------
# sliding-window statistics

def test_stats_pure_smoothing():
    s = UsageStats(CostParams())
    assert s.current_bs(0.0) == 0.0
    assert s.lora_prob("a", 4, 0.0) == pytest.approx(0.25)


def test_stats_smoothed_shares():
    s = UsageStats(CostParams(smoothing=1.0))
    for i in range(10):
        s.observe_query("a", [], float(i) * 0.1)
    assert s.lora_prob("a", 2, 1.0) == pytest.approx(11 / 12)
    assert s.lora_prob("b", 2, 1.0) == pytest.approx(1 / 12)


def test_stats_window_expiry():
    p = CostParams(freq_window=60.0)
    s = UsageStats(p)
    s.observe_query("a", [7], 0.0)
    assert s.lora_prob("a", 2, 30.0) == pytest.approx(2 / 3)
    # after the window the observation drops out -> pure smoothing
    assert s.lora_prob("a", 2, 61.0) == pytest.approx(0.5)
    assert s.node_prob(7, 2, 61.0) == pytest.approx(0.5)


def test_bs_time_weighted_mean():
    p = CostParams(bs_window=5.0)
    s = UsageStats(p)
    s.query_started(0.0)
    # one query in flight for the whole window
    assert s.current_bs(5.0) == pytest.approx(1.0)
    s.query_started(5.0)
    # second half of the window has 2 in flight: (2.5*1 + 2.5*2)/5
    assert s.current_bs(7.5) == pytest.approx(1.5)
    s.query_finished(7.5)
    s.query_finished(7.5)
    assert s.current_bs(100.0) == pytest.approx(0.0)


def test_time_must_be_monotone():
    s = UsageStats(CostParams())
    s.observe_query("a", [], 5.0)
    with pytest.raises(ValueError):
        s.observe_query("a", [], 4.0)


def test_params_validation():
    with pytest.raises(ValueError):
        CostParams(bs_window=0)
    with pytest.raises(ValueError):
        CostParams(prob_source="bogus")
    with pytest.raises(ValueError):
        CostParams(lora_reward_scope="bogus")
