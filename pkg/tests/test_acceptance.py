"""Acceptance criteria.  Each test records one PASS/FAIL line (see conftest)."""
import time

import numpy as np
import pytest

from mechsim.config import parse_config
from mechsim.experiments import run_experiment
from mechsim.filter import InterleavedStream, filter_stream
from mechsim.game import AgentStrategy, Environment, StrategyProfile, maliciousness_bound_check, run_epsilon, simulate
from mechsim.mechanism import vcg_payment_centralized
from mechsim.numerics import quadratic
from mechsim.scenario import EvParams, agent_cost, build_ev_instance, random_quadratics

from oracles import repaired_1d_by_grid

DESK = {"kind": "ev", "demand": [40, 55, 70, 45]}


@pytest.fixture(scope="module")
def desk():
    params = EvParams(demand=tuple(float(d) for d in DESK["demand"]))
    costs, X = build_ev_instance(params)
    env = Environment(tuple(costs), X, k_f=300, algorithm="newton-tracking")
    return params, costs, X, env


def test_c01_payments_match_centralised_vcg(criterion):
    t0 = time.perf_counter()
    worst_rel, worst_abs, ok = 0.0, 0.0, True
    for seed in range(5):
        inst = random_quadratics(2 + seed % 3, seed)
        env = Environment(tuple(inst.costs), inst.X, k_f=2000)
        rep = simulate(StrategyProfile.tisi(inst.costs), "devcg", env)
        _, ref = vcg_payment_centralized(inst.costs, inst.X)
        err = np.abs(rep.payments - ref)
        rel = err / np.maximum(np.abs(ref), 1e-300)
        ok &= bool(np.all((rel <= 0.02) | (err <= 0.05)))
        worst_rel, worst_abs = max(worst_rel, float(rel.max())), max(worst_abs, float(err.max()))
    elapsed = time.perf_counter() - t0
    ok &= elapsed < 10.0
    assert criterion(1, "DeVCG vs centralised VCG", ok,
                     f"max rel {worst_rel:.4f}, max abs {worst_abs:.4f} (need 2% or 0.05), {elapsed:.1f}s (< 10s)")


def test_c02_incentive_gap_shrinks_with_k_f(criterion):
    deltas = [-0.2, -0.1, -0.05, -0.02, -0.01, 0.0, 0.01, 0.02, 0.05, 0.1, 0.2]
    eps = []
    for k_f in (100, 300, 1000, 3000):
        cfg = parse_config({"experiment": "tisi-sweep", "mechanism": "devcg", "k_f": k_f,
                            "scenario": {"kind": "synthetic", "n_agents": 3, "instance_seed": 11},
                            "sweep": {"parameter": "center_shift", "values": deltas}})
        eps.append(run_experiment(cfg).summary["worst_gain"])
    ok = all(a > b for a, b in zip(eps, eps[1:])) and eps[-1] < 0.01
    assert criterion(2, "epsilon-IC trend", ok,
                     "eps_k at k_f 100/300/1000/3000 = " + ", ".join(f"{e:.2e}" for e in eps) + " (< 0.01 at 3000)")


def _quadratic_stream(rng, length, d):
    A = rng.normal(size=(d, d))
    v = quadratic(A @ A.T + 0.1 * np.eye(d), rng.normal(size=d), float(rng.normal()))
    pts = rng.uniform(-2, 2, size=(length, d))
    return pts, np.array([v.gradient(p) for p in pts])


def test_c03_filter_pass_through_and_repair(criterion):
    rng = np.random.default_rng(2024)
    honest = []
    for _ in range(20):
        pts, grads = _quadratic_stream(rng, int(rng.integers(1, 61)), int(rng.integers(1, 4)))
        honest.append(filter_stream(InterleavedStream(0, pts, grads, ())).repair_magnitude)
    injected, worst_dev = [], 0.0
    for _ in range(10):
        n = int(rng.integers(3, 6))
        a, c = rng.uniform(0.5, 2.0), rng.uniform(-1, 1)
        pts = np.sort(rng.uniform(-2, 2, size=n))
        grads = 2 * a * (pts - c)
        # swap the gradients of the two largest points: slopes now decrease
        grads[-1], grads[-2] = grads[-2], grads[-1]
        order = rng.permutation(n - 2)
        pts = np.concatenate([pts[:-2][order], pts[-2:]])
        grads = np.concatenate([grads[:-2][order], grads[-2:]])
        st = filter_stream(InterleavedStream(0, pts[:, None], grads[:, None], ()))
        injected.append(st.repair_magnitude)
        for t in range(1, n):
            ref = repaired_1d_by_grid(pts[: t + 1], st.repaired[:t, 0], grads[t])
            worst_dev = max(worst_dev, abs(st.repaired[t, 0] - ref))
    ok = all(r == 0.0 for r in honest) and all(r > 0.0 for r in injected) and worst_dev <= 1e-4
    assert criterion(3, "filter pass-through and repair", ok,
                     f"honest repairs all zero: {all(r == 0.0 for r in honest)}; injected min repair "
                     f"{min(injected):.3e}; max deviation from grid {worst_dev:.1e} (<= 1e-4)")


def test_c04_single_joiner_equilibria(criterion):
    t0 = time.perf_counter()
    found = {}
    for mech in ("devcg", "devcg-g"):
        cfg = parse_config({"experiment": "equilibrium-search", "mechanism": mech,
                            "scenario": {"kind": "synthetic", "n_agents": 2,
                                         "agents": [{"curvature": 1, "center": [1]},
                                                    {"curvature": 1, "center": [-1]}]}})
        found[mech] = [tuple(p) for p in run_experiment(cfg).summary["equilibria"]]
    elapsed = time.perf_counter() - t0
    lone = {("quit", "shift"), ("shift", "quit")}
    ok = set(found["devcg"]) == lone and not lone & set(found["devcg-g"]) and elapsed < 60
    assert criterion(4, "single-joiner equilibria", ok,
                     f"DeVCG {found['devcg']}, DeVCG-G {found['devcg-g']}, {elapsed:.1f}s (< 60s)")


def test_c05_penalised_mechanism_reduces_under_tisi(desk, criterion):
    params, costs, X, env = desk
    rng = np.random.default_rng(5)
    same = 0
    for _ in range(10):
        scale = rng.uniform(0.5, 1.5, params.n_agents)
        declared = [agent_cost(params, i, alpha=params.alpha[i] * s) for i, s in enumerate(scale)]
        prof = StrategyProfile.tisi(declared)
        a, b = simulate(prof, "devcg", env), simulate(prof, "devcg-g", env)
        same += a.to_dict() == b.to_dict() and np.array_equal(a.payments, b.payments)
    assert criterion(5, "DeVCG-G equals DeVCG under TISI", same == 10, f"{same}/10 profiles field-identical")


def test_c06_truthful_alpha_is_best(criterion):
    t0 = time.perf_counter()
    cfg = parse_config({"experiment": "tisi-sweep", "scenario": DESK,
                        "sweep": {"parameter": "alpha_scale", "values": [0.5, 0.75, 1.0, 1.25, 1.5]}})
    s = run_experiment(cfg).summary
    elapsed = time.perf_counter() - t0
    gains = [s["agents"][a]["worst_gain"] for a in range(4)]
    ok = all(g <= s["epsilon"] for g in gains) and elapsed < 300
    assert criterion(6, "truthful alpha maximises payoff", ok,
                     f"worst gains {[f'{g:.1e}' for g in gains]} vs eps {s['epsilon']:.1e}, {elapsed:.1f}s (< 300s)")


def test_c07_sequence_dependent_noise_does_not_pay(criterion):
    cfg = parse_config({"experiment": "tisd-range-sweep", "scenario": DESK,
                        "sweep": {"parameter": "range", "values": [0, 1, 2, 3]}})
    s = run_experiment(cfg).summary
    eps = s["max_epsilon"]
    adv = max(r["max_advantage"] for r in s["ranges"].values())
    means = [r["mean_payoff"] for _, r in sorted(s["ranges"].items(), key=lambda kv: float(kv[0]))]
    ok = s["range0_gap"] <= eps and adv <= eps
    assert criterion(7, "noise range sweep", ok,
                     f"range-0 gap {s['range0_gap']:.1e}, max unilateral advantage {adv:.1e}, eps {eps:.1e}; "
                     f"mean payoffs {[round(m, 4) for m in means]}")


def test_c08_maliciousness_hurts_the_attacker_most(criterion):
    cfg = parse_config({"experiment": "malice-sweep", "scenario": DESK,
                        "sweep": {"parameter": "gamma", "values": [-50, -100, -150, -200, -250, -300]}})
    s = run_experiment(cfg).summary
    ok = s["others_non_increasing"] and s["focal_steepest"] and len(s["gamma"]) == 7
    assert criterion(8, "maliciousness sweep", ok,
                     f"others non-increasing {s['others_non_increasing']}, decreases "
                     f"{[round(d, 2) for d in s['decrease']]}")


def test_c09_joining_beats_quitting(desk, criterion):
    _, costs, _, env = desk
    truthful = StrategyProfile.tisi(costs)
    rep = simulate(truthful, "devcg-g", env)
    eps = run_epsilon(truthful, rep, env)
    margins = []
    for i in range(len(costs)):
        quit_prof = truthful.replace(i, AgentStrategy.quit())
        alone = simulate(quit_prof, "devcg-g", env)
        eps = max(eps, run_epsilon(quit_prof, alone, env))
        margins.append(float(rep.payoffs[i] - alone.payoffs[i]))
    ok = all(m >= -eps for m in margins)
    assert criterion(9, "participation", ok, f"join minus quit {[round(m, 3) for m in margins]}, eps {eps:.1e}")


def test_c10_bands(desk, criterion):
    _, costs, _, env = desk
    n = len(costs)
    truthful = StrategyProfile.tisi(costs)
    base = simulate(truthful, "devcg-g", env)
    eps = run_epsilon(truthful, base, env)
    band = maliciousness_bound_check(truthful, base).band
    rng = np.random.default_rng(10)
    good = 0
    for k in range(10):
        i = k % n
        shifts = {j: float(rng.uniform(0.99 * band[(i, j)][0], 0.0)) for j in range(n) if j != i}
        prof = truthful.replace(i, AgentStrategy.with_shifts(costs[i], shifts))
        rep = simulate(prof, "devcg-g", env)
        good += maliciousness_bound_check(prof, rep, eps).passed and rep.e_terms[i] == 0.0
    bad = 0
    for k, delta in enumerate((0.5, 5.0, 50.0, 500.0, 1e6)):
        i = k % n
        shifts = {j: band[(i, j)][0] - delta for j in range(n) if j != i}
        prof = truthful.replace(i, AgentStrategy.with_shifts(costs[i], shifts))
        rep = simulate(prof, "devcg-g", env)
        bad += rep.penalties[i] > 1.0 and rep.payoffs[i] < base.payoffs[i]
    assert criterion(10, "maliciousness bands", good == 10 and bad == 5,
                     f"{good}/10 admissible settings pass with e = 0; {bad}/5 below-band settings penalised")
