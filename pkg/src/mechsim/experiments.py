"""Named experiments: build cells, settle them, write tables.

A *cell* is one full mechanism run.  Its strategy profile is described by a
plain-JSON *plan* (one entry per agent) so that the manifest alone is enough
to rebuild and rerun any cell.
"""
from __future__ import annotations

import csv
import itertools
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import numpy as np

from . import __version__
from .config import EvScenario, ExperimentConfig, dump_config, parse_config
from .distopt import CommGraph, StepRule, run_all_sequences, write_trace_csv
from .filter import filter_stream, interleave, write_repair_log
from .game import (
    AgentStrategy,
    Environment,
    GridGame,
    StrategyProfile,
    brute_force_nash,
    epsilon_dse_check,
    maliciousness_bound_check,
    run_epsilon,
    simulate,
)
from .mechanism import SettlementReport
from .numerics import EvaluationFunction, FeasibleSet, quadratic, shifted
from .scenario import EvParams, agent_cost, build_ev_instance, random_quadratics, tisd_perturbation


# ---------------------------------------------------------------- building blocks

def ev_params(sc: EvScenario) -> EvParams:
    return EvParams(
        n_agents=sc.n_agents, n_slots=sc.n_slots, dt=sc.dt, beta=sc.beta, alpha=tuple(sc.alpha),
        gamma=tuple(sc.gamma or [0.0] * sc.n_agents), s0=tuple(sc.s0), theta=sc.theta, s_bar=sc.s_bar,
        demand=None if sc.demand is None else tuple(sc.demand), degradation=sc.degradation,
        x_max=sc.x_max, base_cost=sc.base_cost,
    )


class Instance:
    """True costs, feasible set and a factory for declared functions."""

    def __init__(self, cfg: ExperimentConfig):
        sc = cfg.scenario
        self.kind = sc.kind
        if sc.kind == "ev":
            self.params = ev_params(sc)
            self.costs, self.X = build_ev_instance(self.params)
        else:
            if sc.agents is not None:
                self.curv = np.array([a.curvature for a in sc.agents])
                self.centers = np.array([a.center for a in sc.agents], dtype=float)
            else:
                inst = random_quadratics(sc.n_agents, sc.instance_seed, sc.dim, sc.box)
                self.curv, self.centers = inst.curvatures, inst.centers
            self.costs = [self._quad(c, a) for a, c in zip(self.curv, self.centers)]
            self.X = FeasibleSet.box(-sc.box, sc.box, sc.dim)
        self.n = len(self.costs)

    @staticmethod
    def _quad(center, curvature) -> EvaluationFunction:
        c = np.atleast_1d(np.asarray(center, dtype=float))
        d = c.size
        return quadratic(2 * curvature * np.eye(d), -2 * curvature * c, float(curvature * c @ c))

    def declared(self, agent: int, override: dict[str, Any]) -> EvaluationFunction:
        """Function described by ``override`` (without any ``shift`` key)."""
        if not override:
            return self.costs[agent]
        if self.kind == "ev":
            unknown = set(override) - {"alpha"}
            if unknown:
                raise ValueError(f"unsupported EV overrides {sorted(unknown)}")
            return agent_cost(self.params, agent, alpha=float(override["alpha"]))
        unknown = set(override) - {"center", "curvature"}
        if unknown:
            raise ValueError(f"unsupported quadratic overrides {sorted(unknown)}")
        return self._quad(override.get("center", self.centers[agent]), override.get("curvature", self.curv[agent]))

    def strategy(self, agent: int, plan: dict[str, Any]) -> AgentStrategy:
        if plan.get("quit"):
            return AgentStrategy.quit()
        social_over = dict(plan.get("social", {}))
        social_shift = social_over.pop("shift", 0.0)
        social = self.declared(agent, social_over)
        if social_shift:
            social = shifted(social, social_shift)
        per = {}
        for key, over in plan.get("sequences", {}).items():
            over = dict(over)
            c = over.pop("shift", 0.0)
            base = social if not over else self.declared(agent, over)
            if c > 0:
                raise ValueError("maliciousness offsets must be non-positive")
            per[int(key)] = shifted(base, c) if c else base
        return AgentStrategy(social, per, plan.get("label", ""))

    def profile(self, plan: list[dict[str, Any]]) -> StrategyProfile:
        if len(plan) != self.n:
            raise ValueError(f"plan lists {len(plan)} agents, instance has {self.n}")
        return StrategyProfile(tuple(self.strategy(i, p) for i, p in enumerate(plan)))


def build_graph(cfg: ExperimentConfig, n: int) -> CommGraph:
    g = cfg.graph
    if g.kind == "edges":
        return CommGraph(n, tuple(tuple(e) for e in g.edges))
    return getattr(CommGraph, g.kind)(n)


def build_environment(cfg: ExperimentConfig, inst: Instance | None = None) -> Environment:
    inst = inst or Instance(cfg)
    return Environment(
        tuple(inst.costs), inst.X, graph=build_graph(cfg, inst.n), k_f=cfg.k_f, k_s=cfg.k_s,
        window=cfg.k_s_window, seed=cfg.seed, step_rule=StepRule(cfg.step_rule.a, cfg.step_rule.b),
        algorithm=cfg.algorithm, p_bar=cfg.p_bar,
    )


def truthful_plan(n: int) -> list[dict[str, Any]]:
    return [{"label": "truthful"} for _ in range(n)]


@dataclass
class CellResult:
    index: int
    coords: dict[str, Any]
    plan: list[dict[str, Any]]
    report: SettlementReport
    epsilon: float


def _run_cell(job) -> tuple[SettlementReport, float]:
    cfg_dict, plan = job
    cfg = parse_config(cfg_dict)
    inst = Instance(cfg)
    env = build_environment(cfg, inst)
    profile = inst.profile(plan)
    report = simulate(profile, cfg.mechanism, env)
    return report, run_epsilon(profile, report, env)


def run_cells(cfg: ExperimentConfig, cells: list[tuple[dict, list]], jobs: int = 1) -> list[CellResult]:
    cfg_dict = dump_config(cfg)
    work = [(cfg_dict, plan) for _, plan in cells]
    if jobs > 1 and len(work) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            outs = list(pool.map(_run_cell, work))
    else:
        outs = [_run_cell(w) for w in work]
    return [CellResult(k, coords, plan, rep, eps) for k, ((coords, plan), (rep, eps)) in enumerate(zip(cells, outs))]


# ---------------------------------------------------------------- experiments

def _alpha_or_center(inst: Instance, agent: int, value: float, parameter: str) -> dict[str, Any]:
    if parameter == "alpha_scale":
        if inst.kind != "ev":
            raise ValueError("alpha_scale sweeps need the EV scenario")
        return {"alpha": inst.params.alpha[agent] * value}
    if parameter == "alpha":
        return {"alpha": value}
    if parameter == "center_shift":
        if inst.kind == "ev":
            raise ValueError("center_shift sweeps need the synthetic scenario")
        return {"center": (inst.centers[agent] + value).tolist()}
    raise ValueError(f"unsupported sweep parameter {parameter!r}")


def _truth_value(inst: Instance, agent: int, parameter: str) -> float:
    if parameter == "alpha":
        return inst.params.alpha[agent]
    if parameter in ("alpha_scale", "center_shift"):
        return {"alpha_scale": 1.0, "center_shift": 0.0}[parameter]
    raise ValueError(f"unsupported sweep parameter {parameter!r}")


def tisi_cells(cfg: ExperimentConfig, inst: Instance):
    sw = cfg.sweep
    values = list(sw.values)
    agents = sw.agents if sw.agents is not None else list(range(inst.n))
    truth = {a: _truth_value(inst, a, sw.parameter) for a in range(inst.n)}
    for a in agents:
        if not any(np.isclose(v, truth[a], rtol=0, atol=1e-12) for v in values):
            raise ValueError(f"sweep values must contain the truthful value {truth[a]} for agent {a}")
    grids = [values if a in agents else [truth[a]] for a in range(inst.n)]
    truth_idx = [int(np.argmin([abs(v - truth[a]) for v in grids[a]])) for a in range(inst.n)]
    base = tuple(truth_idx)
    if sw.mode == "full":
        profiles = list(itertools.product(*(range(len(g)) for g in grids)))
    else:
        profiles = [base] + [base[:a] + (s,) + base[a + 1:] for a in agents
                             for s in range(len(grids[a])) if s != base[a]]
    cells = []
    for prof in profiles:
        plan = []
        for a, s in enumerate(prof):
            if s == truth_idx[a]:
                plan.append({"label": "truthful"})
            else:
                plan.append({"label": f"{sw.parameter}={grids[a][s]!r}",
                             "social": _alpha_or_center(inst, a, grids[a][s], sw.parameter)})
        coords = {f"s{a}": grids[a][s] for a, s in enumerate(prof)}
        cells.append((coords, plan))
    return cells, grids, truth_idx, profiles


def _noise_plan(inst: Instance, alphas: np.ndarray, noisy: set[int]) -> list[dict[str, Any]]:
    plan = []
    for i in range(inst.n):
        if i not in noisy:
            plan.append({"label": "truthful"})
            continue
        seqs = {str(j): {"alpha": float(alphas[i, j])} for j in range(inst.n) if j != i}
        plan.append({"label": "tisd", "sequences": seqs})
    return plan


def draw_seed(seed: int, draw: int) -> int:
    return int(np.random.SeedSequence([seed, draw]).generate_state(1)[0])


def tisd_cells(cfg: ExperimentConfig, inst: Instance):
    """All agents add sign * range * U to their per-sequence alphas (antithetic
    pairs share U); a counterfactual arm keeps the focal agent faithful."""
    if inst.kind != "ev":
        raise ValueError("tisd-range-sweep needs the EV scenario")
    sw = cfg.sweep
    focal = sw.focal_agent
    alpha = np.asarray(inst.params.alpha)
    cells = []
    for r in sw.values:
        for d in range(sw.draws):
            unit = tisd_perturbation(alpha, 1.0, draw_seed(cfg.seed, d)) - alpha[:, None]
            for sign in (1, -1):
                alphas = alpha[:, None] + sign * r * unit
                everyone = set(range(inst.n))
                for arm, noisy in (("all", everyone), ("focal-faithful", everyone - {focal})):
                    coords = {"range": r, "draw": d, "sign": sign, "arm": arm}
                    cells.append((coords, _noise_plan(inst, alphas, noisy)))
    return cells


def malice_cells(cfg: ExperimentConfig, inst: Instance):
    if inst.kind != "ev":
        raise ValueError("malice-sweep needs the EV scenario")
    sw = cfg.sweep
    focal = sw.focal_agent
    alpha = np.asarray(inst.params.alpha)
    alphas = tisd_perturbation(alpha, sw.noise_range, draw_seed(cfg.seed, 0))
    values = list(sw.values)
    if not any(v == 0 for v in values):
        values = [0.0] + values
    cells = []
    for g in values:
        plan = _noise_plan(inst, alphas, set(range(inst.n)))
        for j, over in plan[focal]["sequences"].items():
            over["shift"] = float(g)
        plan[focal]["label"] = f"tisd gamma={g!r}"
        cells.append(({"gamma": g}, plan))
    return cells


def equilibrium_cells(cfg: ExperimentConfig, inst: Instance):
    eq = cfg.equilibrium
    shift = eq.shift if eq.shift is not None else -10.0 * cfg.p_bar
    options = []
    for s in eq.strategies:
        if s == "truthful":
            options.append(lambda a: {"label": "truthful"})
        elif s == "quit":
            options.append(lambda a: {"label": "quit", "quit": True})
        else:
            options.append(lambda a, c=shift: {"label": "shift", "sequences": {
                str(j): {"shift": c} for j in range(inst.n) if j != a}})
    profiles = list(itertools.product(range(len(options)), repeat=inst.n))
    cells = [({f"s{a}": eq.strategies[s] for a, s in enumerate(p)}, [options[s](a) for a, s in enumerate(p)])
             for p in profiles]
    return cells, profiles


# ---------------------------------------------------------------- output

def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_results(path: Path, results: list[CellResult]) -> None:
    keys = list(results[0].coords) if results else []
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["cell"] + keys + ["agent", "payoff", "payment", "penalty"])
        for r in results:
            for a in range(r.report.n_agents):
                w.writerow([r.index] + [_fmt(r.coords[k]) for k in keys] +
                           [a, _fmt(r.report.payoffs[a]), _fmt(r.report.payments[a]), _fmt(r.report.penalties[a])])


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def write_cells(out: Path, results: list[CellResult]) -> None:
    for r in results:
        d = out / "cells" / f"{r.index:04d}"
        d.mkdir(parents=True, exist_ok=True)
        _write_json(d / "settlement.json", r.report.to_dict())


@dataclass
class ExperimentOutput:
    config: ExperimentConfig
    results: list[CellResult]
    summary: dict[str, Any]
    out_dir: Path | None


def run_experiment(cfg: ExperimentConfig, out_dir: str | os.PathLike | None = None, jobs: int = 1) -> ExperimentOutput:
    inst = Instance(cfg)
    env = build_environment(cfg, inst)
    extra: dict[str, Any] = {}
    exp = cfg.experiment
    if exp == "single-run":
        cells = [({"profile": "truthful"}, truthful_plan(inst.n))]
        results = run_cells(cfg, cells, jobs)
        summary = {"epsilon": results[0].epsilon}
    elif exp == "tisi-sweep":
        cells, grids, truth_idx, profiles = tisi_cells(cfg, inst)
        results = run_cells(cfg, cells, jobs)
        summary = summarize_tisi(results, grids, truth_idx, profiles, inst.n)
        extra["grid"] = summary.pop("_grid")
    elif exp == "tisd-range-sweep":
        results = run_cells(cfg, tisd_cells(cfg, inst), jobs)
        summary = summarize_tisd(results, cfg.sweep.focal_agent)
    elif exp == "malice-sweep":
        results = run_cells(cfg, malice_cells(cfg, inst), jobs)
        summary = summarize_malice(results, cfg.sweep.focal_agent)
    elif exp == "equilibrium-search":
        cells, profiles = equilibrium_cells(cfg, inst)
        results = run_cells(cfg, cells, jobs)
        summary = summarize_equilibria(results, profiles, cfg)
        extra["grid"] = summary.pop("_grid")
    elif exp == "filter-demo":
        results, summary = filter_demo(cfg, inst, env, out_dir)
    else:  # pragma: no cover - guarded by config validation
        raise ValueError(exp)
    summary["k_s"] = env.k_s
    summary["max_epsilon"] = max((r.epsilon for r in results), default=0.0)
    summary["tolerance"] = cfg.tolerance
    summary["tolerance_met"] = summary["max_epsilon"] <= cfg.tolerance
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        write_results(out / "results.csv", results)
        write_cells(out, results)
        if "grid" in extra:
            extra["grid"].write_csv(out / "tensor.csv")
        _write_json(out / "summary.json", _jsonable(summary))
        manifest = {
            "version": __version__,
            "experiment": cfg.experiment,
            "config": dump_config(cfg),
            "seed": cfg.seed,
            "k_s": env.k_s,
            "cells": [{"index": r.index, "coords": _jsonable(r.coords), "plan": r.plan,
                       "epsilon": r.epsilon} for r in results],
        }
        _write_json(out / "manifest.json", manifest)
    return ExperimentOutput(cfg, results, summary, out)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        return float(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def reproduce_cell(manifest: dict | str | os.PathLike, index: int) -> tuple[SettlementReport, float]:
    """Rerun one cell using nothing but the manifest."""
    if not isinstance(manifest, dict):
        manifest = json.loads(Path(manifest).read_text())
    cell = next(c for c in manifest["cells"] if c["index"] == index)
    return _run_cell((manifest["config"], cell["plan"]))


# ---------------------------------------------------------------- summaries

def summarize_tisi(results, grids, truth_idx, profiles, n):
    by_prof = {p: r for p, r in zip(profiles, results)}
    game = GridGame(grids, lambda p: by_prof[p].report.payoffs, truth_idx)
    game.fill(cells=profiles)
    base = tuple(truth_idx)
    eps = max(r.epsilon for r in results)
    verdict = epsilon_dse_check(game, base, eps)
    per_agent = {}
    for a in range(n):
        vals = [float(game.payoffs(base[:a] + (s,) + base[a + 1:])[a]) for s in range(len(grids[a]))]
        per_agent[a] = {"values": grids[a], "payoffs": vals, "truthful_index": truth_idx[a],
                        "best_index": int(np.argmax(vals)),
                        "worst_gain": max(vals) - vals[truth_idx[a]]}
    return {"agents": per_agent, "worst_gain": verdict.worst_gain, "epsilon": eps,
            "truthful_is_eps_dse": verdict.passed, "_grid": game}


def summarize_tisd(results, focal):
    ranges = sorted({r.coords["range"] for r in results})
    out = {}
    for rg in ranges:
        arm = lambda name: [r.report.payoffs[focal] for r in results  # noqa: E731
                            if r.coords["range"] == rg and r.coords["arm"] == name]
        all_arm, faithful = np.array(arm("all")), np.array(arm("focal-faithful"))
        out[rg] = {"mean_payoff": float(all_arm.mean()), "mean_faithful_payoff": float(faithful.mean()),
                   "max_advantage": float(np.max(all_arm - faithful)),
                   "mean_penalty": float(np.mean([r.report.penalties[focal] for r in results
                                                  if r.coords["range"] == rg and r.coords["arm"] == "all"]))}
    best = max(v["mean_payoff"] for v in out.values())
    return {"focal_agent": focal, "ranges": out, "range0_gap": best - out[min(ranges)]["mean_payoff"]}


def summarize_malice(results, focal):
    gammas = [r.coords["gamma"] for r in results]
    pay = np.array([r.report.payoffs for r in results])
    order = np.argsort(gammas)[::-1]  # from 0 down to the most negative
    pay = pay[order]
    drop = pay[0] - pay[-1]
    return {"focal_agent": focal, "gamma": [gammas[k] for k in order], "payoffs": pay.tolist(),
            "decrease": drop.tolist(),
            "others_non_increasing": bool(all(np.all(np.diff(pay[:, a]) <= 0)
                                              for a in range(pay.shape[1]) if a != focal)),
            "focal_steepest": bool(all(drop[focal] > drop[a] for a in range(pay.shape[1]) if a != focal))}


def summarize_equilibria(results, profiles, cfg):
    eq = cfg.equilibrium
    by_prof = {p: r for p, r in zip(profiles, results)}
    n = len(profiles[0])
    game = GridGame([eq.strategies] * n, lambda p: by_prof[p].report.payoffs,
                    [eq.strategies.index("truthful") if "truthful" in eq.strategies else None] * n)
    game.fill(cells=profiles)
    ne = brute_force_nash(game, eq.preference, eq.tol, eq.eliminate_dominated)
    return {"equilibria": [[eq.strategies[s] for s in p] for p in ne], "_grid": game}


def filter_demo(cfg, inst, env, out_dir):
    """Honest run and a run where agent 0 scales its function in every other sequence."""
    out = Path(out_dir) if out_dir is not None else None
    plans = {"honest": truthful_plan(inst.n)}
    scale = cfg.sweep.values[0] if cfg.sweep else 3.0
    lie = truthful_plan(inst.n)
    if inst.kind == "ev":
        lie[0] = {"label": "tisd", "sequences": {str(j): {"alpha": inst.params.alpha[0] * scale}
                                                 for j in range(1, inst.n)}}
    else:
        lie[0] = {"label": "tisd", "sequences": {str(j): {"curvature": float(inst.curv[0] * scale)}
                                                 for j in range(1, inst.n)}}
    plans["manipulated"] = lie
    results, summary = [], {}
    for k, (name, plan) in enumerate(plans.items()):
        profile = inst.profile(plan)
        traces = run_all_sequences(env.graph, profile, env.X, env.x0, env.k_f, env.step_rule, algorithm=env.algorithm)
        states = [filter_stream(interleave(traces, a, env.k_s, env.k_f)) for a in profile.participants]
        report = simulate(profile, "devcg-g", env)
        results.append(CellResult(k, {"case": name}, plan, report, run_epsilon(profile, report, env)))
        summary[name] = {"repair": [s.repair_magnitude for s in states], "e_terms": report.e_terms.tolist()}
        if out is not None:
            out.mkdir(parents=True, exist_ok=True)
            write_repair_log(states, out / f"repair_log_{name}.csv")
            write_trace_csv(traces, out / f"traces_{name}.csv")
    return results, summary


def bound_check_cell(cfg: ExperimentConfig, plan, eps: float = 0.0):
    inst = Instance(cfg)
    env = build_environment(cfg, inst)
    profile = inst.profile(plan)
    report = simulate(profile, cfg.mechanism, env)
    return report, maliciousness_bound_check(profile, report, eps)
