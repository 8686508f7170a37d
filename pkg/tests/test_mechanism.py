import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mechsim.game import AgentStrategy, Environment, StrategyProfile, simulate
from mechsim.mechanism import (
    Budget,
    SettlementError,
    component_median,
    measured_epsilon,
    penalty,
    vcg_payment_centralized,
)
from mechsim.numerics import FeasibleSet, quadratic
from mechsim.scenario import EvParams, build_ev_instance

from oracles import median_by_sorting, vcg_1d_closed_form

X1 = FeasibleSet.box(-5, 5, 1)


def sq(c, a=1.0):
    return quadratic([[2.0 * a]], [-2.0 * a * c], a * c * c)


def env_for(funcs, k_f=2000, **kw):
    return Environment(tuple(funcs), X1, k_f=k_f, **kw)


# ---------------------------------------------------------------- median

def test_median_of_three():
    assert component_median([[1.0], [3.0], [2.0]]).tolist() == [2.0]


def test_median_of_two_is_midpoint():
    assert component_median([[1.0], [3.0]]).tolist() == [2.0]


def test_median_is_per_coordinate():
    assert component_median([[0.0, 10.0], [5.0, 5.0], [10.0, 0.0]]).tolist() == [5.0, 5.0]


@given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=9))
def test_median_matches_sorting(values):
    assert component_median([[v] for v in values])[0] == pytest.approx(median_by_sorting(values), rel=1e-12, abs=1e-9)


@given(st.lists(st.floats(-100, 100), min_size=2, max_size=3), st.integers(1, 7))
def test_unanimous_reports_are_selected(point, n):
    assert component_median([point] * n).tolist() == point


# ---------------------------------------------------------------- centralised VCG oracle

def test_centralised_two_squares():
    o, pay = vcg_payment_centralized([sq(1.0), sq(-1.0)], X1)
    assert o[0] == pytest.approx(0.0, abs=1e-7)
    assert pay == pytest.approx([1.0, 1.0], abs=1e-7)


def test_centralised_single_agent_pays_nothing():
    o, pay = vcg_payment_centralized([sq(0.3)], X1)
    assert pay.tolist() == [0.0] and o[0] == pytest.approx(0.3, abs=1e-7)


def test_centralised_identical_agents_pay_nothing():
    _, pay = vcg_payment_centralized([sq(0.7)] * 3, X1)
    assert np.allclose(pay, 0.0, atol=1e-9)


@given(st.integers(0, 10_000))
@settings(max_examples=25)
def test_centralised_matches_closed_form(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 5))
    curv, centers = rng.uniform(0.5, 2, n), rng.uniform(-2, 2, n)
    o, pay = vcg_payment_centralized([sq(c, a) for a, c in zip(curv, centers)], X1)
    o_ref, pay_ref = vcg_1d_closed_form(curv, centers)
    assert o[0] == pytest.approx(o_ref, abs=1e-6)
    assert pay == pytest.approx(pay_ref, abs=1e-6)


def test_centralised_rejects_empty():
    from mechsim.numerics import EMPTY

    with pytest.raises(ValueError):
        vcg_payment_centralized([EMPTY], X1)


# ---------------------------------------------------------------- settlement

def test_two_agents_pay_the_clarke_amount():
    rep = simulate(StrategyProfile.tisi([sq(1.0), sq(-1.0)]), "devcg", env_for([sq(1.0), sq(-1.0)]))
    assert rep.payments == pytest.approx([1.0, 1.0], abs=0.05)
    assert rep.o_star[0] == pytest.approx(0.0, abs=0.05)


def test_all_quit_pays_p_bar():
    funcs = [sq(1.0), sq(-1.0)]
    prof = StrategyProfile((AgentStrategy.quit(), AgentStrategy.quit()))
    for mech in ("devcg", "devcg-g"):
        rep = simulate(prof, mech, env_for(funcs, p_bar=1e6))
        assert rep.quit and rep.o_star is None
        assert rep.payoffs.tolist() == [-1e6, -1e6]
        assert rep.payments.tolist() == [1e6, 1e6]


def test_lone_participant_pays_nothing_and_quitter_gets_outcome_cost():
    funcs = [sq(1.0), sq(-1.0)]
    prof = StrategyProfile((AgentStrategy.truthful(funcs[0]), AgentStrategy.quit()))
    rep = simulate(prof, "devcg", env_for(funcs))
    assert rep.participants == (0,) and rep.payments.tolist() == [0.0, 0.0]
    assert rep.payoffs[0] == pytest.approx(-funcs[0].value(rep.o_star))
    assert rep.payoffs[1] == pytest.approx(-funcs[1].value(rep.o_star))
    assert rep.o_star[0] == pytest.approx(1.0, abs=0.01)


def test_payment_ignores_own_budget():
    funcs = [sq(1.0), sq(-1.0), sq(0.5, 2.0)]
    env = env_for(funcs, k_f=300)
    base = simulate(StrategyProfile.tisi(funcs), "devcg", env)

    def tamper(i, b):
        if i != 0:
            return b
        return Budget(b.social + 123.0, {j: v - 55.0 for j, v in b.per_sequence.items()})

    moved = simulate(StrategyProfile.tisi(funcs), "devcg", env, tamper=tamper)
    assert moved.payments[0] == base.payments[0]
    assert moved.payments[1] != base.payments[1]


def test_penalty_values():
    assert penalty(0.0, 300) == 0.0
    assert penalty(1e-12, 300) > 1.0
    assert penalty(0.5, 10) == 6.0


def test_truthful_runs_match_between_mechanisms():
    costs, X = build_ev_instance(EvParams(demand=(40.0, 55.0, 70.0, 45.0)))
    env = Environment(tuple(costs), X, algorithm="newton-tracking")
    a = simulate(StrategyProfile.tisi(costs), "devcg", env)
    b = simulate(StrategyProfile.tisi(costs), "devcg-g", env)
    assert np.array_equal(a.payments, b.payments) and np.all(b.penalties == 0.0)
    assert measured_epsilon(a, StrategyProfile.tisi(costs), X) <= 1e-6


def test_penalties_are_zero_or_above_one():
    funcs = [sq(1.0), sq(-1.0), sq(0.5, 2.0)]
    env = env_for(funcs, k_f=300)
    for c in (0.0, -0.01, -1.0, -100.0):
        prof = StrategyProfile.tisi(funcs).replace(0, AgentStrategy.with_shifts(funcs[0], {1: c, 2: c}))
        rep = simulate(prof, "devcg-g", env)
        assert all(p == 0.0 or p > 1.0 for p in rep.penalties)


def test_admissible_shift_is_not_penalised():
    funcs = [sq(1.0), sq(-1.0), sq(0.5, 2.0)]
    env = env_for(funcs, k_f=300)
    honest = simulate(StrategyProfile.tisi(funcs), "devcg-g", env)
    prof = StrategyProfile.tisi(funcs).replace(0, AgentStrategy.with_shifts(funcs[0], {1: -0.05}))
    rep = simulate(prof, "devcg-g", env)
    assert rep.e_terms[0] == 0.0 and rep.penalties[0] == 0.0
    # a lower declared value in sequence 1 is charged to agent 1
    assert rep.payments[1] == pytest.approx(honest.payments[1] + 0.05, abs=1e-12)


def test_huge_shift_on_ev_is_penalised():
    costs, X = build_ev_instance(EvParams(demand=(40.0, 55.0, 70.0, 45.0)))
    env = Environment(tuple(costs), X, algorithm="newton-tracking")
    honest = simulate(StrategyProfile.tisi(costs), "devcg-g", env)
    prof = StrategyProfile.tisi(costs).replace(0, AgentStrategy.with_shifts(costs[0], {j: -1e6 for j in (1, 2, 3)}))
    rep = simulate(prof, "devcg-g", env)
    assert rep.penalties[0] > 1.0
    assert rep.payoffs[0] < honest.payoffs[0]


def test_settlement_json_keys():
    funcs = [sq(1.0), sq(-1.0)]
    rep = simulate(StrategyProfile.tisi(funcs), "devcg-g", env_for(funcs, k_f=300))
    d = json.loads(rep.to_json())
    assert set(d) == {"participants", "o_star", "o_seq", "payments", "penalties", "e_terms", "payoffs", "quit"}
    assert d["quit"] is False and len(d["payments"]) == 2


def test_payoff_decomposition():
    funcs = [sq(1.0), sq(-1.0), sq(0.5, 2.0)]
    rep = simulate(StrategyProfile.tisi(funcs), "devcg-g", env_for(funcs, k_f=300))
    for i, f in enumerate(funcs):
        assert rep.payoffs[i] == -f.value(rep.o_star) - rep.payments[i]


def test_payments_approach_centralised_as_k_f_grows():
    funcs = [sq(1.0), sq(-1.0), sq(0.5, 2.0)]
    _, ref = vcg_payment_centralized(funcs, X1)
    errs = [np.abs(simulate(StrategyProfile.tisi(funcs), "devcg", env_for(funcs, k_f=k)).payments - ref).max()
            for k in (100, 1000, 4000)]
    assert errs[0] > errs[1] > errs[2] and errs[2] <= 0.01


def test_missing_social_trace_is_an_error():
    from mechsim.mechanism import collect_messages

    with pytest.raises(SettlementError):
        collect_messages([None])
