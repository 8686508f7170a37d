"""Experiment configuration (JSON) with strict validation."""
from __future__ import annotations

import json
from pathlib import Path
from typing import Annotated, Literal, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

EXPERIMENTS = {
    "single-run": "one settlement of a fixed strategy profile",
    "tisi-sweep": "sequence-independent misreport grid over a cost parameter",
    "tisd-range-sweep": "sequence-dependent noise on alpha, payoff vs noise range",
    "malice-sweep": "one agent shifts its per-sequence values down by gamma",
    "equilibrium-search": "pure equilibria of a truthful/quit/shift grid",
    "filter-demo": "gradient repair log on honest and manipulated data",
}


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class EvScenario(_Strict):
    kind: Literal["ev"] = "ev"
    n_agents: int = Field(4, ge=1)
    n_slots: int = Field(4, ge=1)
    dt: float = Field(1.0, gt=0)
    beta: float = 0.005
    alpha: list[float] = [10.0, 4.0, 8.0, 7.0]
    gamma: list[float] | None = None
    s0: list[float] = [0.1, 0.15, 0.23, 0.14]
    theta: float = Field(30.0, gt=0)
    s_bar: float = 0.9
    demand: list[float] | None = None
    degradation: float = Field(0.002, gt=0)
    x_max: float | None = Field(None, gt=0)
    base_cost: float = 200.0

    @field_validator("beta")
    @classmethod
    def _beta_positive(cls, v):
        if v <= 0:
            raise ValueError("beta must be positive")
        return v

    @field_validator("alpha")
    @classmethod
    def _alpha_positive(cls, v):
        if any(a <= 0 for a in v):
            raise ValueError("alpha entries must be positive")
        return v

    @model_validator(mode="after")
    def _lengths(self):
        for name in ("alpha", "s0") + (("gamma",) if self.gamma is not None else ()):
            if len(getattr(self, name)) != self.n_agents:
                raise ValueError(f"{name} must have n_agents={self.n_agents} entries")
        if self.demand is not None and len(self.demand) != self.n_slots:
            raise ValueError(f"demand must have n_slots={self.n_slots} entries")
        if any(self.theta * (self.s_bar - s) <= 0 for s in self.s0):
            raise ValueError("every theta*(s_bar - s0) must be positive")
        return self


class QuadraticAgent(_Strict):
    curvature: float = Field(gt=0)
    center: list[float]


class SyntheticScenario(_Strict):
    kind: Literal["synthetic"] = "synthetic"
    n_agents: int = Field(2, ge=1)
    dim: int = Field(1, ge=1)
    box: float = Field(5.0, gt=0)
    instance_seed: int = 0
    agents: list[QuadraticAgent] | None = None

    @model_validator(mode="after")
    def _agents(self):
        if self.agents is not None:
            if len(self.agents) != self.n_agents:
                raise ValueError(f"agents must list n_agents={self.n_agents} entries")
            if any(len(a.center) != self.dim for a in self.agents):
                raise ValueError(f"every center must have dim={self.dim} entries")
        return self


Scenario = Annotated[Union[EvScenario, SyntheticScenario], Field(discriminator="kind")]


class GraphSpec(_Strict):
    kind: Literal["complete", "ring", "path", "edges"] = "complete"
    edges: list[tuple[int, int]] | None = None

    @model_validator(mode="after")
    def _edges(self):
        if (self.kind == "edges") != (self.edges is not None):
            raise ValueError("edges are given exactly when kind is 'edges'")
        return self


class StepRuleSpec(_Strict):
    a: float = Field(1.0, gt=0)
    b: float = Field(10.0, gt=0)


class Sweep(_Strict):
    parameter: str
    values: list[float] = Field(min_length=1)
    agents: list[int] | None = None
    mode: Literal["unilateral", "full"] = "unilateral"
    draws: int = Field(4, ge=1)
    focal_agent: int = Field(0, ge=0)
    noise_range: float = Field(2.0, ge=0)


class EquilibriumSpec(_Strict):
    strategies: list[Literal["truthful", "quit", "shift"]] = ["truthful", "quit", "shift"]
    shift: float | None = Field(None, le=0)
    preference: Literal["selfish", "malicious"] = "malicious"
    eliminate_dominated: bool = True
    tol: float = Field(1e-6, ge=0)


class ExperimentConfig(_Strict):
    experiment: Literal[
        "single-run", "tisi-sweep", "tisd-range-sweep", "malice-sweep", "equilibrium-search", "filter-demo"]
    scenario: Scenario = Field(default_factory=EvScenario)
    mechanism: Literal["devcg", "devcg-g"] = "devcg-g"
    algorithm: Literal["dgd", "newton-tracking"] | None = None
    graph: GraphSpec = GraphSpec()
    k_f: int = Field(300, ge=1)
    k_s_window: int = Field(4, ge=1)
    k_s: int | None = Field(None, ge=0)
    step_rule: StepRuleSpec = StepRuleSpec()
    p_bar: float = Field(1e6, gt=0)
    tolerance: float = Field(0.1, gt=0)
    seed: int = 0
    sweep: Sweep | None = None
    equilibrium: EquilibriumSpec | None = None
    out: str | None = None

    @model_validator(mode="after")
    def _consistency(self):
        if self.k_s is not None and self.k_s >= self.k_f:
            raise ValueError(f"k_s={self.k_s} must be smaller than k_f={self.k_f}")
        if self.k_s_window >= self.k_f and self.k_s is None and self.k_f > 1:
            raise ValueError(f"k_s_window={self.k_s_window} must be smaller than k_f={self.k_f}")
        if self.experiment in ("tisi-sweep", "tisd-range-sweep", "malice-sweep") and self.sweep is None:
            raise ValueError(f"experiment {self.experiment} needs a sweep section")
        if self.experiment in ("tisd-range-sweep", "malice-sweep") and self.scenario.kind != "ev":
            raise ValueError(f"experiment {self.experiment} perturbs alpha and needs the EV scenario")
        if self.experiment == "tisd-range-sweep" and any(v < 0 for v in self.sweep.values):
            raise ValueError("noise ranges must be non-negative")
        if self.experiment == "malice-sweep" and any(v > 0 for v in self.sweep.values):
            raise ValueError("maliciousness offsets must be non-positive")
        n = self.scenario.n_agents
        if self.sweep is not None:
            bad = [a for a in (self.sweep.agents or []) + [self.sweep.focal_agent] if a >= n]
            if bad:
                raise ValueError(f"sweep references unknown agents {bad}")
        if self.graph.edges is not None and any(max(e) >= n or min(e) < 0 for e in self.graph.edges):
            raise ValueError("graph edges reference unknown agents")
        return self

    def resolved(self) -> "ExperimentConfig":
        """Copy with every implicit default made explicit."""
        updates = {}
        if self.algorithm is None:
            updates["algorithm"] = "newton-tracking" if self.scenario.kind == "ev" else "dgd"
        if self.experiment == "equilibrium-search" and self.equilibrium is None:
            updates["equilibrium"] = EquilibriumSpec()
        if isinstance(self.scenario, EvScenario):
            sc = self.scenario
            fill = {}
            if sc.gamma is None:
                fill["gamma"] = [0.0] * sc.n_agents
            if sc.demand is None:
                from .scenario import default_demand
                fill["demand"] = default_demand(sc.n_slots)
            if sc.x_max is None:
                fill["x_max"] = sc.theta / 4
            if fill:
                updates["scenario"] = sc.model_copy(update=fill)
        return self.model_copy(update=updates) if updates else self


class ConfigError(ValueError):
    def __init__(self, errors: list[str]):
        super().__init__("; ".join(errors))
        self.errors = errors


def parse_config(data: dict) -> ExperimentConfig:
    try:
        return ExperimentConfig.model_validate(data).resolved()
    except ValidationError as exc:
        raise ConfigError([_format(e) for e in exc.errors()]) from None


def _format(err) -> str:
    loc = ".".join(str(p) for p in err["loc"]) or "<root>"
    return f"{loc}: {err['msg']}"


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError([f"{path}: {exc.strerror}"]) from None
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError([f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}"]) from None
    if not isinstance(data, dict):
        raise ConfigError([f"{path}: top level must be an object"])
    return parse_config(data)


def validate_config(path) -> ExperimentConfig:
    return load_config(path)


def dump_config(cfg: ExperimentConfig) -> dict:
    return cfg.model_dump(mode="json")
