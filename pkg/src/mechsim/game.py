"""Strategies, payoffs and grid-based equilibrium analysis."""
from __future__ import annotations

import csv
import itertools
from concurrent.futures import Executor
from dataclasses import dataclass, field
from typing import Any, Callable, Hashable, Mapping, Sequence

import numpy as np

from .distopt import CommGraph, StepRule, run_all_sequences
from .filter import draw_k_s
from .mechanism import (
    DEFAULT_P_BAR,
    SettlementReport,
    Tamper,
    collect_messages,
    measured_epsilon,
    propose_budgets,
    select_outcomes,
    settle_devcg,
    settle_devcg_g,
)
from .numerics import EMPTY, EvaluationFunction, FeasibleSet, shifted

MECHANISMS = ("devcg", "devcg-g")
MAX_PROFILES = 10**6


@dataclass(frozen=True, eq=False)
class AgentStrategy:
    """Evaluation functions of one agent.

    ``per_sequence[j]`` is used in the run without agent ``j``; sequences
    not listed reuse ``social``.  An empty ``social`` means the agent quits.
    """

    social: EvaluationFunction
    per_sequence: Mapping[int, EvaluationFunction] = field(default_factory=dict)
    label: str = ""

    def __post_init__(self):
        if self.social.is_empty and any(not v.is_empty for v in self.per_sequence.values()):
            raise ValueError("a quitting agent cannot declare per-sequence functions")
        if not self.social.is_empty and any(v.is_empty for v in self.per_sequence.values()):
            raise ValueError("a participating agent must declare a function in every sequence")

    @property
    def quits(self) -> bool:
        return self.social.is_empty

    @property
    def sequence_independent(self) -> bool:
        return all(v is self.social for v in self.per_sequence.values())

    def evaluation(self, sequence: int | None) -> EvaluationFunction:
        if sequence is None:
            return self.social
        return self.per_sequence.get(sequence, self.social)

    @classmethod
    def truthful(cls, f: EvaluationFunction, label: str = "truthful") -> "AgentStrategy":
        return cls(f, {}, label)

    @classmethod
    def quit(cls, label: str = "quit") -> "AgentStrategy":
        return cls(EMPTY, {}, label)

    @classmethod
    def tisd(cls, social: EvaluationFunction, per_sequence: Mapping[int, EvaluationFunction],
             label: str = "tisd") -> "AgentStrategy":
        return cls(social, dict(per_sequence), label)

    @classmethod
    def with_shifts(cls, v: EvaluationFunction, shifts: Mapping[int, float], label: str = "shifted") -> "AgentStrategy":
        """Same function everywhere, shifted by ``c_ij <= 0`` in sequence ``j``."""
        bad = {j: c for j, c in shifts.items() if c > 0}
        if bad:
            raise ValueError(f"maliciousness offsets must be non-positive, got {bad}")
        return cls(v, {j: shifted(v, c) for j, c in shifts.items()}, label)


@dataclass(frozen=True, eq=False)
class StrategyProfile:
    agents: tuple[AgentStrategy, ...]

    @classmethod
    def tisi(cls, funcs: Sequence[EvaluationFunction]) -> "StrategyProfile":
        return cls(tuple(AgentStrategy.truthful(f) for f in funcs))

    @property
    def n_agents(self) -> int:
        return len(self.agents)

    @property
    def participants(self) -> tuple[int, ...]:
        return tuple(i for i, a in enumerate(self.agents) if not a.quits)

    def evaluation(self, agent: int, sequence: int | None) -> EvaluationFunction:
        return self.agents[agent].evaluation(sequence)

    def replace(self, agent: int, strategy: AgentStrategy) -> "StrategyProfile":
        agents = list(self.agents)
        agents[agent] = strategy
        return StrategyProfile(tuple(agents))

    def shift(self, agent: int, sequence: int) -> float:
        """Constant ``v_ij - v_i`` (only meaningful for shifted strategies)."""
        a = self.agents[agent]
        v, w = a.social, a.evaluation(sequence)
        if w is v:
            return 0.0
        if w.kind == "shifted" and (w.base is v or (v.kind == "shifted" and w.base is v.base)):
            return w.offset - (v.offset if v.kind == "shifted" else 0.0)
        raise ValueError(f"agent {agent} does not use a shifted function in sequence {sequence}")


@dataclass(frozen=True, eq=False)
class Environment:
    true_costs: tuple[EvaluationFunction, ...]
    X: FeasibleSet
    graph: CommGraph | None = None
    x0: np.ndarray | None = None
    k_f: int = 300
    k_s: int | None = None
    window: int = 4
    seed: int = 0
    step_rule: StepRule = StepRule()
    algorithm: str = "dgd"
    p_bar: float = DEFAULT_P_BAR

    def __post_init__(self):
        object.__setattr__(self, "true_costs", tuple(self.true_costs))
        if self.graph is None:
            object.__setattr__(self, "graph", CommGraph.complete(len(self.true_costs)))
        if self.x0 is None:
            object.__setattr__(self, "x0", self.X.project(np.zeros(self.X.dim)))
        if self.k_s is None:
            object.__setattr__(self, "k_s", draw_k_s(self.k_f, self.window, np.random.default_rng(self.seed)))
        if not 0 <= self.k_s < self.k_f:
            raise ValueError("need 0 <= k_s < k_f")

    @property
    def n_agents(self) -> int:
        return len(self.true_costs)


def simulate(profile: StrategyProfile, mech: str, env: Environment, *, tamper: Tamper | None = None,
             executor: Executor | None = None) -> SettlementReport:
    """Run every sequence, exchange messages and settle."""
    if mech not in MECHANISMS:
        raise ValueError(f"unknown mechanism {mech!r}")
    if profile.n_agents != env.n_agents:
        raise ValueError("profile and environment disagree on the number of agents")
    if not profile.participants:
        if mech == "devcg":
            return settle_devcg([], env.true_costs, env.p_bar)
        return settle_devcg_g([], env.true_costs, [], env.k_s, env.k_f, env.p_bar)
    traces = run_all_sequences(env.graph, profile, env.X, env.x0, env.k_f, env.step_rule,
                               algorithm=env.algorithm, executor=executor)
    bundles = collect_messages(traces)
    o_star, o_seq = select_outcomes(bundles)
    bundles = propose_budgets(bundles, profile, o_star, o_seq, tamper)
    if mech == "devcg":
        return settle_devcg(bundles, env.true_costs, env.p_bar)
    return settle_devcg_g(bundles, env.true_costs, traces, env.k_s, env.k_f, env.p_bar)


def payoff(profile: StrategyProfile, mech: str, env: Environment) -> np.ndarray:
    """Payoffs ``-f_i(o*) - p_i`` against the true costs."""
    return simulate(profile, mech, env).payoffs


def run_epsilon(profile: StrategyProfile, report: SettlementReport, env: Environment) -> float:
    return measured_epsilon(report, profile, env.X)


class GridGame:
    """Finite game: ``grids[i]`` lists agent i's strategy parameters.

    ``payoff_fn(indices)`` maps a profile (one index per agent) to the
    payoff vector; results are cached in ``tensor``.
    """

    def __init__(self, grids: Sequence[Sequence[Hashable]], payoff_fn: Callable[[tuple[int, ...]], Sequence[float]],
                 truthful: Sequence[int | None] | None = None):
        self.grids = [list(g) for g in grids]
        if any(len(g) == 0 for g in self.grids):
            raise ValueError("every agent needs a non-empty strategy grid")
        self.n_agents = len(self.grids)
        self.payoff_fn = payoff_fn
        self.truthful = list(truthful) if truthful is not None else [None] * self.n_agents
        self.shape = tuple(len(g) for g in self.grids)
        total = int(np.prod(self.shape, dtype=float))
        if total > MAX_PROFILES:
            raise ValueError(f"grid has {total} profiles, more than the limit of {MAX_PROFILES}")
        self.tensor = np.full(self.shape + (self.n_agents,), np.nan)

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    def profiles(self):
        return itertools.product(*(range(n) for n in self.shape))

    def unilateral_profiles(self, base: Sequence[int]):
        seen = []
        for i in range(self.n_agents):
            for s in range(self.shape[i]):
                prof = tuple(base[:i]) + (s,) + tuple(base[i + 1:])
                if prof not in seen:
                    seen.append(prof)
        return seen

    def fill(self, cells: Sequence[tuple[int, ...]] | None = None, executor: Executor | None = None) -> "GridGame":
        cells = [tuple(c) for c in (self.profiles() if cells is None else cells)]
        todo = [c for c in cells if np.isnan(self.tensor[c]).any()]
        results = list(executor.map(self.payoff_fn, todo)) if executor else [self.payoff_fn(c) for c in todo]
        for c, u in zip(todo, results):
            u = np.asarray(u, dtype=float)
            if u.shape != (self.n_agents,) or not np.all(np.isfinite(u)):
                raise ValueError(f"payoff at {c} must be {self.n_agents} finite numbers")
            self.tensor[c] = u
        return self

    def payoffs(self, profile: Sequence[int]) -> np.ndarray:
        u = self.tensor[tuple(profile)]
        if np.isnan(u).any():
            raise ValueError(f"payoff tensor is not filled at profile {tuple(profile)}")
        return u

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow([f"s{i}" for i in range(self.n_agents)] + ["agent", "payoff"])
            for prof in self.profiles():
                u = self.tensor[prof]
                if np.isnan(u).any():
                    continue
                for i in range(self.n_agents):
                    w.writerow(list(prof) + [i, repr(float(u[i]))])


def best_response(grid: GridGame, agent: int, others: Sequence[int], tol: float = 0.0) -> tuple[int, float]:
    """Best grid strategy of ``agent`` against ``others`` (a full profile; the
    agent's own entry is ignored).  Within ``tol`` of the best, the truthful
    entry wins, then the lowest index."""
    base = list(others)
    values = []
    for s in range(grid.shape[agent]):
        base[agent] = s
        values.append(float(grid.payoffs(base)[agent]))
    best = max(values)
    ties = [s for s, v in enumerate(values) if v >= best - tol]
    truth = grid.truthful[agent]
    pick = truth if truth in ties else ties[0]
    return pick, values[pick]


@dataclass(frozen=True)
class DseVerdict:
    passed: bool
    worst_gain: float
    worst_agent: int | None
    worst_deviation: int | None

    @property
    def violation(self) -> float:
        return self.worst_gain


def epsilon_dse_check(grid: GridGame, candidate: Sequence[int], eps: float) -> DseVerdict:
    """Largest gain any agent gets from a unilateral grid deviation."""
    candidate = tuple(candidate)
    u0 = grid.payoffs(candidate)
    worst, who, dev = 0.0, None, None
    for i in range(grid.n_agents):
        for s in range(grid.shape[i]):
            prof = candidate[:i] + (s,) + candidate[i + 1:]
            gain = float(grid.payoffs(prof)[i] - u0[i])
            if gain > worst:
                worst, who, dev = gain, i, s
    return DseVerdict(worst <= eps, worst, who, dev)


def _prefers(a: np.ndarray, b: np.ndarray, i: int, preference: str, tol: float) -> int:
    """+1 if agent i strictly prefers payoff vector a to b, -1 if b to a, 0 if indifferent."""
    da = a[i] - b[i]
    if da > tol:
        return 1
    if da < -tol:
        return -1
    if preference == "selfish":
        return 0
    others_a = a.sum() - a[i]
    others_b = b.sum() - b[i]
    scale = tol * max(1.0, abs(others_a), abs(others_b)) if tol else 0.0
    if others_a < others_b - scale:
        return 1
    if others_a > others_b + scale:
        return -1
    return 0


def eliminate_dominated(grid: GridGame, preference: str = "selfish", tol: float = 0.0) -> list[list[int]]:
    """Iterated removal of weakly dominated strategies; returns surviving indices."""
    alive = [list(range(n)) for n in grid.shape]
    changed = True
    while changed:
        changed = False
        for i in range(grid.n_agents):
            others = [alive[k] for k in range(grid.n_agents) if k != i]
            for s in list(alive[i]):
                for t in alive[i]:
                    if t == s:
                        continue
                    strictly = False
                    dominated = True
                    for rest in itertools.product(*others):
                        ps = rest[:i] + (s,) + rest[i:]
                        pt = rest[:i] + (t,) + rest[i:]
                        c = _prefers(grid.payoffs(pt), grid.payoffs(ps), i, preference, tol)
                        if c < 0:
                            dominated = False
                            break
                        strictly |= c > 0
                    if dominated and strictly:
                        alive[i].remove(s)
                        changed = True
                        break
    return alive


def brute_force_nash(grid: GridGame, preference: str = "selfish", tol: float = 0.0,
                     eliminate: bool = False) -> list[tuple[int, ...]]:
    """All pure profiles where no agent has a strictly preferred unilateral deviation.

    ``preference='malicious'`` ranks payoff vectors by own payoff first and,
    among ties within ``tol``, prefers lower total payoff of the others.
    """
    if preference not in ("selfish", "malicious"):
        raise ValueError("preference must be 'selfish' or 'malicious'")
    if grid.size > MAX_PROFILES:
        raise ValueError(f"{grid.size} profiles exceed the limit of {MAX_PROFILES}")
    alive = eliminate_dominated(grid, preference, tol) if eliminate else [list(range(n)) for n in grid.shape]
    out = []
    for prof in itertools.product(*alive):
        u = grid.payoffs(prof)
        stable = True
        for i in range(grid.n_agents):
            for s in alive[i]:
                if s == prof[i]:
                    continue
                dev = prof[:i] + (s,) + prof[i + 1:]
                if _prefers(grid.payoffs(dev), u, i, preference, tol) > 0:
                    stable = False
                    break
            if not stable:
                break
        if stable:
            out.append(prof)
    return out


@dataclass(frozen=True)
class BoundVerdict:
    passed: bool
    band: dict[tuple[int, int], tuple[float, float]]
    shifts: dict[tuple[int, int], float]
    band_margin: float
    aggregate: dict[int, tuple[float, float]]
    aggregate_margin: float


def maliciousness_bound_check(profile: StrategyProfile, report: SettlementReport, eps: float = 0.0) -> BoundVerdict:
    """Check every ``c_ij`` against its admissible band at the realised outcomes
    and, per victim ``i``, ``|sum_j c_ji| <= sum_j f_j(o_i) - sum_j f_j(o*) + eps``.

    ``f`` is each agent's declared social function.  ``band_margin`` is the
    smallest slack over all band checks (negative means a violation).
    """
    parts = report.participants
    o_star = report.o_star
    band, shifts = {}, {}
    margin = np.inf
    for i in parts:
        f = profile.agents[i].social
        g = f.gradient(o_star)
        for j in parts:
            o_j = report.o_seq.get(j)
            if j == i or o_j is None:
                continue
            lo = f.value(o_star) + float(g @ (o_j - o_star)) - f.value(o_j)
            c = profile.shift(i, j)
            band[(i, j)] = (lo, 0.0)
            shifts[(i, j)] = c
            margin = min(margin, c - lo, -c)
    aggregate = {}
    agg_margin = np.inf
    for i in parts:
        o_i = report.o_seq.get(i)
        if o_i is None:
            continue
        total = sum(shifts[(j, i)] for j in parts if j != i)
        cap = sum(profile.agents[j].social.value(o_i) - profile.agents[j].social.value(o_star) for j in parts) + eps
        aggregate[i] = (abs(total), cap)
        agg_margin = min(agg_margin, cap - abs(total))
    margin = float(margin) if np.isfinite(margin) else 0.0
    agg_margin = float(agg_margin) if np.isfinite(agg_margin) else 0.0
    return BoundVerdict(margin >= -eps and agg_margin >= 0.0, band, shifts, margin, aggregate, agg_margin)


def describe(profile: StrategyProfile) -> list[dict[str, Any]]:
    return [{"agent": i, "label": a.label, "quits": a.quits,
             "social": a.social.to_dict(),
             "per_sequence": {str(j): v.to_dict() for j, v in sorted(a.per_sequence.items())}}
            for i, a in enumerate(profile.agents)]
