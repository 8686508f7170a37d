import numpy as np
import pytest
from hypothesis import given, strategies as st

from mechsim.mechanism import vcg_payment_centralized
from mechsim.scenario import (
    DEFAULT_DEMAND_24,
    EvParams,
    agent_cost,
    build_ev_instance,
    default_demand,
    feasible_set,
    random_quadratics,
    tisd_perturbation,
)

from oracles import central_diff, ev_cost_by_hand


def test_capacities():
    p = EvParams()
    assert p.capacities[0] == pytest.approx(24.0)
    assert p.capacities == pytest.approx((24.0, 22.5, 20.1, 22.8))
    assert p.slot_cap == 7.5 and p.dim == 16


def test_cost_at_origin():
    p = EvParams(demand=(0.0,) * 4)
    f = agent_cost(p, 0)
    assert f.value(np.zeros(16)) == pytest.approx(10.0 * 24.0**2 + 200.0)


def test_cost_matches_hand_formula_with_gamma():
    p = EvParams(demand=(40.0, 55.0, 70.0, 45.0))
    x = np.random.default_rng(0).uniform(0, 7.5, 16)
    f = agent_cost(p, 2, alpha=3.0, gamma=-11.0)
    assert f.value(x) == pytest.approx(ev_cost_by_hand(x, 2, 4, 4, 3.0, 20.1, 0.005, p.demand, gamma=-11.0), rel=1e-12)


def test_coupling_gradient_on_other_agents_block():
    p = EvParams(demand=(40.0, 55.0, 70.0, 45.0))
    f = agent_cost(p, 0)
    x = np.random.default_rng(1).uniform(0, 7.5, 16)
    loads = np.asarray(p.demand) + x.reshape(4, 4).sum(axis=0)
    expected = 2 * p.beta / p.n_agents * loads
    assert f.gradient(x)[4:8] == pytest.approx(expected, rel=1e-12)
    assert f.gradient(x)[4:8] == pytest.approx(central_diff(f.value, x, 1e-4)[4:8], rel=1e-6)


def test_feasible_set_blocks():
    X = feasible_set(EvParams())
    assert [cap for *_, cap in X.blocks] == pytest.approx([24.0, 22.5, 20.1, 22.8])
    assert np.all(X.lower == 0.0) and np.all(X.upper == 7.5)


def test_parameter_validation():
    with pytest.raises(ValueError):
        EvParams(beta=-0.1)
    with pytest.raises(ValueError):
        EvParams(alpha=(1.0, 2.0))
    with pytest.raises(ValueError):
        EvParams(s0=(0.95, 0.1, 0.1, 0.1))
    with pytest.raises(ValueError):
        EvParams(demand=(1.0, 2.0))


def test_default_demand():
    assert len(default_demand(24)) == 24 and default_demand(24) == list(DEFAULT_DEMAND_24)
    assert default_demand(4) == pytest.approx(np.reshape(DEFAULT_DEMAND_24, (4, 6)).mean(axis=1))
    assert len(default_demand(5)) == 5


def test_perturbation_range_zero_is_truthful():
    a = tisd_perturbation([10.0, 4.0, 8.0, 7.0], 0.0, seed=3)
    assert np.array_equal(a, np.tile([[10.0], [4.0], [8.0], [7.0]], (1, 4)))


@given(st.floats(0, 5), st.integers(0, 1000))
def test_perturbation_bounds_and_diagonal(r, seed):
    alpha = np.array([10.0, 4.0, 8.0, 7.0])
    a = tisd_perturbation(alpha, r, seed)
    assert np.array_equal(np.diag(a), alpha)
    assert np.all(np.abs(a - alpha[:, None]) <= r + 1e-12)


def test_perturbation_is_deterministic_and_scales():
    a = tisd_perturbation([1.0, 2.0, 3.0], 1.0, 7)
    b = tisd_perturbation([1.0, 2.0, 3.0], 2.0, 7)
    assert np.array_equal(a, tisd_perturbation([1.0, 2.0, 3.0], 1.0, 7))
    assert np.allclose(b - [[1.0], [2.0], [3.0]], 2 * (a - [[1.0], [2.0], [3.0]]))
    with pytest.raises(ValueError):
        tisd_perturbation([1.0], -1.0, 0)


def test_optimal_schedule_fills_the_valley():
    p = EvParams(demand=(40.0, 55.0, 70.0, 45.0))
    costs, X = build_ev_instance(p)
    o, _ = vcg_payment_centralized(costs, X)
    charge = o.reshape(4, 4).sum(axis=0)
    loads = np.asarray(p.demand) + charge
    # most charging happens in the low-demand slot and the load spread shrinks
    assert charge[0] == charge.max() and charge[2] == charge.min()
    assert np.ptp(loads) < np.ptp(p.demand)


def test_random_quadratics():
    inst = random_quadratics(3, seed=5, dim=2)
    assert len(inst.costs) == 3 and inst.X.dim == 2
    for f, c, a in zip(inst.costs, inst.centers, inst.curvatures):
        assert f.value(c) == pytest.approx(0.0, abs=1e-12)
        assert f.value(c + [1.0, 0.0]) == pytest.approx(a)
        assert 0.5 <= a <= 2.0 and np.all(np.abs(c) <= 2.0)
