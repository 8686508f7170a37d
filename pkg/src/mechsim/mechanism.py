"""Central authority: outcome selection, payments, penalties and settlement."""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from typing import Callable, Mapping, Protocol, Sequence

import numpy as np
from scipy.optimize import LinearConstraint, minimize

from .distopt import SequenceTrace
from .filter import FilterState, filter_stream, interleave
from .numerics import EvaluationFunction, FeasibleSet

DEFAULT_P_BAR = 1e6


class SettlementError(RuntimeError):
    pass


class _Profile(Protocol):
    participants: tuple[int, ...]

    def evaluation(self, agent: int, sequence: int | None) -> EvaluationFunction: ...


@dataclass(frozen=True, eq=False)
class Budget:
    """Budget proposal: declared value at ``o*`` and at each ``o_j``."""

    social: float
    per_sequence: Mapping[int, float]

    def __getitem__(self, j: int | None) -> float:
        return self.social if j is None else self.per_sequence[j]


@dataclass(frozen=True, eq=False)
class MessageBundle:
    agent: int
    final_social: np.ndarray
    final_sequences: Mapping[int, np.ndarray]
    states: Mapping[str, np.ndarray] = field(repr=False)
    gradients: Mapping[str, np.ndarray] = field(repr=False)
    budget: Budget | None = None

    def with_budget(self, budget: Budget) -> "MessageBundle":
        return replace(self, budget=budget)


def collect_messages(traces: Sequence[SequenceTrace | None]) -> list[MessageBundle]:
    """First-phase messages: final decisions plus full histories."""
    social = traces[0]
    if social is None or social.sequence is not None:
        raise SettlementError("the first trace must be the social sequence")
    others = [t for t in traces[1:] if t is not None]
    out = []
    for i in social.participants:
        p = social.index(i)
        finals, states, grads = {}, {social.tag: social.states[:, p]}, {social.tag: social.gradients[:, p]}
        for tr in others:
            if i in tr.participants:
                q = tr.index(i)
                finals[tr.sequence] = tr.states[tr.k_f, q]
                states[tr.tag] = tr.states[:, q]
                grads[tr.tag] = tr.gradients[:, q]
        out.append(MessageBundle(i, social.states[social.k_f, p], finals, states, grads))
    return out


def component_median(points: Sequence[np.ndarray]) -> np.ndarray:
    """Per-coordinate median; an even count takes the midpoint of the middle pair."""
    arr = np.asarray(points, dtype=float)
    if arr.ndim == 1:
        arr = arr[:, None]
    return np.median(arr, axis=0)


def select_outcomes(bundles: Sequence[MessageBundle]) -> tuple[np.ndarray, dict[int, np.ndarray | None]]:
    if not bundles:
        raise SettlementError("no participants")
    o_star = component_median([b.final_social for b in bundles])
    o_seq: dict[int, np.ndarray | None] = {}
    for b in bundles:
        pts = [other.final_sequences[b.agent] for other in bundles if other.agent != b.agent]
        o_seq[b.agent] = component_median(pts) if pts else None
    return o_star, o_seq


Tamper = Callable[[int, Budget], Budget]


def propose_budgets(
    bundles: Sequence[MessageBundle],
    strategy: _Profile,
    o_star: np.ndarray,
    o_seq: Mapping[int, np.ndarray | None],
    tamper: Tamper | None = None,
) -> list[MessageBundle]:
    """Second phase: each agent reports its declared values at the outcomes."""
    out = []
    for b in bundles:
        i = b.agent
        per = {j: strategy.evaluation(i, j).value(o_seq[j]) for j in b.final_sequences if o_seq.get(j) is not None}
        budget = Budget(strategy.evaluation(i, None).value(o_star), per)
        if tamper is not None:
            budget = tamper(i, budget)
        out.append(b.with_budget(budget))
    return out


@dataclass(frozen=True, eq=False)
class SettlementReport:
    n_agents: int
    participants: tuple[int, ...]
    o_star: np.ndarray | None
    o_seq: dict[int, np.ndarray | None]
    payments: np.ndarray
    penalties: np.ndarray
    e_terms: np.ndarray
    payoffs: np.ndarray
    quit: bool
    mechanism: str = "devcg"
    k_s: int | None = None
    filters: dict[int, FilterState] = field(default_factory=dict, repr=False)

    def to_dict(self) -> dict:
        vec = lambda v: None if v is None else [float(x) for x in np.atleast_1d(v)]  # noqa: E731
        return {
            "participants": list(self.participants),
            "o_star": vec(self.o_star),
            "o_seq": {str(j): vec(v) for j, v in sorted(self.o_seq.items())},
            "payments": vec(self.payments),
            "penalties": vec(self.penalties),
            "e_terms": vec(self.e_terms),
            "payoffs": vec(self.payoffs),
            "quit": self.quit,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _externality_payments(bundles: Sequence[MessageBundle], n_agents: int) -> np.ndarray:
    p = np.zeros(n_agents)
    for b in bundles:
        if any(o.budget is None for o in bundles):
            raise SettlementError("budget proposal missing")
        i = b.agent
        p[i] = sum(o.budget.social for o in bundles if o.agent != i) - sum(
            o.budget[i] for o in bundles if o.agent != i)
    return p


def _all_quit(n_agents: int, p_bar: float, mechanism: str) -> SettlementReport:
    z = np.zeros(n_agents)
    return SettlementReport(n_agents, (), None, {}, np.full(n_agents, p_bar), z.copy(), z.copy(),
                            np.full(n_agents, -p_bar), True, mechanism)


def _payoffs(true_costs: Sequence[EvaluationFunction], o_star, payments) -> np.ndarray:
    return np.array([-f.value(o_star) - p for f, p in zip(true_costs, payments)])


def settle_devcg(
    bundles: Sequence[MessageBundle],
    true_costs: Sequence[EvaluationFunction],
    p_bar: float = DEFAULT_P_BAR,
) -> SettlementReport:
    """Payments ``p_i = sum_{j != i} tau_j[social] - sum_{j != i} tau_j[i]``."""
    n = len(true_costs)
    if not bundles:
        return _all_quit(n, p_bar, "devcg")
    o_star, o_seq = select_outcomes(bundles)
    payments = _externality_payments(bundles, n)
    z = np.zeros(n)
    return SettlementReport(n, tuple(b.agent for b in bundles), o_star, o_seq, payments, z.copy(), z.copy(),
                            _payoffs(true_costs, o_star, payments), False, "devcg")


def penalty(e: float, k_f: int) -> float:
    return 0.0 if e == 0 else k_f * e + 1.0


def settle_devcg_g(
    bundles: Sequence[MessageBundle],
    true_costs: Sequence[EvaluationFunction],
    traces: Sequence[SequenceTrace | None],
    k_s: int,
    k_f: int,
    p_bar: float = DEFAULT_P_BAR,
) -> SettlementReport:
    """DeVCG payment plus ``pi_i`` driven by gradient repair and budget checks.

    ``e_i = repair_i - sum_{j != i} min(0, tau_i[j] - tau_i[social] - g_i'(o_j - o*))``
    with ``g_i`` agent i's final social-sequence gradient.
    """
    n = len(true_costs)
    if not bundles:
        return _all_quit(n, p_bar, "devcg-g")
    o_star, o_seq = select_outcomes(bundles)
    base = _externality_payments(bundles, n)
    e = np.zeros(n)
    pen = np.zeros(n)
    filters = {}
    social_tag = "social"
    for b in bundles:
        i = b.agent
        state = filter_stream(interleave(traces, i, k_s, k_f))
        filters[i] = state
        g = b.gradients[social_tag][k_f]
        gap_term = 0.0
        for j, o_j in o_seq.items():
            if j == i or o_j is None:
                continue
            gap_term += min(0.0, b.budget[j] - b.budget.social - float(g @ (o_j - o_star)))
        e[i] = state.repair_magnitude - gap_term
        pen[i] = penalty(e[i], k_f)
    payments = base + pen
    return SettlementReport(n, tuple(b.agent for b in bundles), o_star, o_seq, payments, pen, e,
                            _payoffs(true_costs, o_star, payments), False, "devcg-g", k_s, filters)


def vcg_payment_centralized(evals: Sequence[EvaluationFunction], X: FeasibleSet) -> tuple[np.ndarray, np.ndarray]:
    """Reference outcome and Clarke-pivot payments from a generic NLP solver."""
    if any(v.is_empty for v in evals):
        raise ValueError("centralised VCG needs non-empty evaluation functions")
    o_star, _ = _centralized_min(evals, X)
    pay = np.zeros(len(evals))
    for i in range(len(evals)):
        rest = [v for k, v in enumerate(evals) if k != i]
        if not rest:
            continue
        _, best = _centralized_min(rest, X)
        pay[i] = sum(v.value(o_star) for v in rest) - best
    return o_star, pay


def _centralized_min(evals, X: FeasibleSet):
    fun = lambda x: sum(v.value(x) for v in evals)  # noqa: E731
    jac = lambda x: sum(v.gradient(x) for v in evals)  # noqa: E731
    cons = []
    for start, stop, cap in X.blocks:
        row = np.zeros(X.dim)
        row[start:stop] = 1.0
        cons.append(LinearConstraint(row[None, :], -np.inf, cap))
    x0 = X.project(np.zeros(X.dim))
    res = minimize(fun, x0, jac=jac, method="SLSQP", bounds=list(zip(X.lower, X.upper)),
                   constraints=cons, options={"ftol": 1e-14, "maxiter": 1000})
    if not res.success:
        raise SettlementError(f"centralised minimiser failed: {res.message}")
    x = X.project(res.x)
    return x, fun(x)


def outcome_gap(evals: Sequence[EvaluationFunction], X: FeasibleSet, o) -> float:
    """Frank-Wolfe gap of ``sum(evals)`` at ``o``; bounds the suboptimality of ``o``."""
    if not evals:
        return 0.0
    g = sum(v.gradient(o) for v in evals)
    return max(0.0, float(g @ (o - X.linear_minimizer(g))))


def measured_epsilon(report: SettlementReport, strategy: _Profile, X: FeasibleSet) -> float:
    """Run tolerance: worst over agents of the social plus leave-one-out gaps."""
    if report.quit:
        return 0.0
    parts = report.participants
    social = outcome_gap([strategy.evaluation(i, None) for i in parts], X, report.o_star)
    worst = social
    for j in parts:
        o_j = report.o_seq.get(j)
        if o_j is None:
            continue
        seq = outcome_gap([strategy.evaluation(i, j) for i in parts if i != j], X, o_j)
        worst = max(worst, social + seq)
    return worst
