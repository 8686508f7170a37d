"""Problem instances: the EV-charging cost model and synthetic quadratics."""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .numerics import EvaluationFunction, FeasibleSet, ev_cost, quadratic

# Synthetic hourly background load (kW) with an evening peak, starting at noon.
DEFAULT_DEMAND_24 = (
    52.0, 50.0, 49.0, 50.0, 54.0, 60.0, 68.0, 75.0, 78.0, 76.0, 70.0, 62.0,
    54.0, 46.0, 40.0, 36.0, 34.0, 33.0, 34.0, 37.0, 41.0, 45.0, 48.0, 51.0,
)


def default_demand(n_slots: int) -> list[float]:
    """Block-average the 24-hour profile down (or interpolate up) to ``n_slots``."""
    base = np.asarray(DEFAULT_DEMAND_24)
    if 24 % n_slots == 0:
        return base.reshape(n_slots, -1).mean(axis=1).tolist()
    grid = np.linspace(0, 24, n_slots, endpoint=False) + 12 / n_slots
    return np.interp(grid, np.arange(24) + 0.5, base, period=24).tolist()


@dataclass(frozen=True)
class EvParams:
    n_agents: int = 4
    n_slots: int = 4
    dt: float = 1.0
    beta: float = 0.005
    alpha: tuple[float, ...] = (10.0, 4.0, 8.0, 7.0)
    gamma: tuple[float, ...] = (0.0, 0.0, 0.0, 0.0)
    s0: tuple[float, ...] = (0.1, 0.15, 0.23, 0.14)
    theta: float = 30.0
    s_bar: float = 0.9
    demand: tuple[float, ...] | None = None
    degradation: float = 0.002
    x_max: float | None = None
    base_cost: float = 200.0

    def __post_init__(self):
        N = self.n_agents
        for name in ("alpha", "gamma", "s0"):
            vals = tuple(float(v) for v in getattr(self, name))
            if len(vals) != N:
                raise ValueError(f"{name} must have {N} entries")
            object.__setattr__(self, name, vals)
        if self.demand is None:
            object.__setattr__(self, "demand", tuple(default_demand(self.n_slots)))
        else:
            object.__setattr__(self, "demand", tuple(float(v) for v in self.demand))
        if len(self.demand) != self.n_slots:
            raise ValueError(f"demand must have {self.n_slots} entries")
        if self.beta <= 0:
            raise ValueError("beta must be positive")
        if any(a <= 0 for a in self.alpha):
            raise ValueError("alpha entries must be positive")
        if self.theta <= 0 or self.dt <= 0 or self.degradation <= 0:
            raise ValueError("theta, dt and degradation must be positive")
        if any(g <= 0 for g in self.capacities):
            raise ValueError("every capacity theta*(s_bar - s0) must be positive")
        if self.x_max is not None and self.x_max <= 0:
            raise ValueError("x_max must be positive")

    @property
    def capacities(self) -> tuple[float, ...]:
        return tuple(self.theta * (self.s_bar - s) for s in self.s0)

    @property
    def slot_cap(self) -> float:
        return self.theta / 4 if self.x_max is None else self.x_max

    @property
    def dim(self) -> int:
        return self.n_agents * self.n_slots

    def with_values(self, **kw) -> "EvParams":
        return replace(self, **kw)

    def to_dict(self) -> dict:
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in self.__dict__.items()}


def feasible_set(params: EvParams) -> FeasibleSet:
    n = params.n_slots
    blocks = tuple((i * n, (i + 1) * n, cap) for i, cap in enumerate(params.capacities))
    return FeasibleSet(np.zeros(params.dim), np.full(params.dim, params.slot_cap), blocks)


def agent_cost(params: EvParams, agent: int, alpha: float | None = None, gamma: float | None = None) -> EvaluationFunction:
    return ev_cost(
        agent, params.n_agents, params.n_slots,
        alpha=params.alpha[agent] if alpha is None else alpha,
        capacity=params.capacities[agent],
        beta=params.beta, demand=params.demand,
        gamma=params.gamma[agent] if gamma is None else gamma,
        degradation=params.degradation, base_cost=params.base_cost,
    )


def build_ev_instance(params: EvParams) -> tuple[list[EvaluationFunction], FeasibleSet]:
    return [agent_cost(params, i) for i in range(params.n_agents)], feasible_set(params)


def tisd_perturbation(alpha_true, range_: float, seed: int) -> np.ndarray:
    """Per-sequence alphas: entry ``[i, i]`` is agent i's social alpha, ``[i, j]``
    the alpha it declares in the sequence without ``j``.

    The noise is ``range_ * U`` with ``U ~ Uniform[-1, 1]`` drawn from ``seed``,
    so different ranges under one seed share the same underlying draw.
    """
    if range_ < 0:
        raise ValueError("range must be non-negative")
    alpha_true = np.asarray(alpha_true, dtype=float)
    N = alpha_true.size
    unit = np.random.default_rng(seed).uniform(-1.0, 1.0, size=(N, N))
    np.fill_diagonal(unit, 0.0)
    return alpha_true[:, None] + range_ * unit


@dataclass(frozen=True)
class SyntheticInstance:
    costs: list[EvaluationFunction]
    X: FeasibleSet
    centers: np.ndarray = field(repr=False)
    curvatures: np.ndarray = field(repr=False)


def random_quadratics(n_agents: int, seed: int, dim: int = 1, box: float = 5.0) -> SyntheticInstance:
    """Separable quadratics ``a_i ||x - c_i||^2`` with random curvature and centre."""
    rng = np.random.default_rng(seed)
    curv = rng.uniform(0.5, 2.0, size=n_agents)
    centers = rng.uniform(-2.0, 2.0, size=(n_agents, dim))
    costs = [quadratic(2 * a * np.eye(dim), -2 * a * c, float(a * c @ c)) for a, c in zip(curv, centers)]
    return SyntheticInstance(costs, FeasibleSet.box(-box, box, dim), centers, curv)
