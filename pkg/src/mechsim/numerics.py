"""Evaluation-function families, feasible sets and a small dense QP solver.

Every non-empty family used here is a convex quadratic
``v(x) = 0.5 x'Qx + b'x + c``; the families differ in how (Q, b, c) are
parametrised and serialised.  The distinguished :data:`EMPTY` element stands
for non-participation.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Iterable, Sequence

import numpy as np

__all__ = [
    "EMPTY",
    "EmptyFunctionError",
    "EvaluationFunction",
    "FeasibleSet",
    "QPError",
    "ev_cost",
    "evaluate",
    "project",
    "quadratic",
    "shifted",
    "solve_metric_qp",
    "solve_projection_qp",
    "subgradient",
]


class EmptyFunctionError(ValueError):
    """Raised when a value or gradient is requested from the empty element."""


class QPError(RuntimeError):
    """The projection QP could not be solved to tolerance."""

    def __init__(self, message: str, max_violation: float = float("nan")):
        super().__init__(message)
        self.max_violation = max_violation


@dataclass(frozen=True, eq=False)
class EvaluationFunction:
    """A strongly convex quadratic evaluation function, or the empty element.

    ``mu`` is the strong-convexity modulus.  For the EV family it holds on the
    agent's own block only (see ``mu_mask``); along other agents' blocks the
    function is merely convex.
    """

    kind: str
    dim: int
    Q: np.ndarray | None = None
    b: np.ndarray | None = None
    c: float = 0.0
    mu: float = 0.0
    offset: float = 0.0
    params: dict[str, Any] = field(default_factory=dict)
    base: "EvaluationFunction | None" = None
    mu_mask: np.ndarray | None = None

    @property
    def is_empty(self) -> bool:
        return self.kind == "empty"

    def _require(self) -> None:
        if self.is_empty:
            raise EmptyFunctionError("non-participant has no value")

    def value(self, x) -> float:
        self._require()
        x = np.asarray(x, dtype=float)
        return float(0.5 * x @ (self.Q @ x) + self.b @ x + self.c + self.offset)

    def gradient(self, x) -> np.ndarray:
        self._require()
        x = np.asarray(x, dtype=float)
        return self.Q @ x + self.b

    def hessian(self) -> np.ndarray:
        self._require()
        return self.Q

    def lipschitz(self, X: "FeasibleSet") -> float:
        """Upper bound on the gradient norm over ``X``."""
        self._require()
        radius = float(np.linalg.norm(np.maximum(np.abs(X.lower), np.abs(X.upper))))
        return float(np.linalg.norm(self.Q, 2) * radius + np.linalg.norm(self.b))

    def to_dict(self) -> dict[str, Any]:
        if self.kind == "shifted":
            return {"kind": "shifted", "offset": self.offset, "base": self.base.to_dict()}
        return {"kind": self.kind, "dim": self.dim, **self.params}

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "EvaluationFunction":
        data = dict(data)
        kind = data.pop("kind")
        if kind == "empty":
            return empty(data.get("dim", 1))
        if kind == "shifted":
            return shifted(cls.from_dict(data["base"]), data["offset"])
        if kind == "quadratic-form":
            return quadratic(data["Q"], data.get("b"), data.get("c", 0.0), mu=data.get("mu"))
        if kind == "ev-cost":
            data.pop("dim", None)
            return ev_cost(**data)
        raise ValueError(f"unknown evaluation function kind {kind!r}")

    def __repr__(self) -> str:
        if self.is_empty:
            return "EvaluationFunction(empty)"
        if self.kind == "shifted":
            return f"shifted({self.base!r}, {self.offset:g})"
        return f"EvaluationFunction({self.kind}, dim={self.dim})"


def empty(dim: int = 1) -> EvaluationFunction:
    return EvaluationFunction(kind="empty", dim=dim)


EMPTY = empty()


def quadratic(Q, b=None, c: float = 0.0, mu: float | None = None) -> EvaluationFunction:
    """``0.5 x'Qx + b'x + c`` with Q symmetric positive definite."""
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    n = Q.shape[0]
    if Q.shape != (n, n):
        raise ValueError("Q must be square")
    if not np.allclose(Q, Q.T):
        raise ValueError("Q must be symmetric")
    b = np.zeros(n) if b is None else np.atleast_1d(np.asarray(b, dtype=float))
    min_eig = float(np.linalg.eigvalsh(Q)[0])
    if mu is None:
        mu = min_eig
    if mu <= 0 or mu > min_eig * (1 + 1e-12):
        raise ValueError(f"strong convexity modulus {mu} not supported by Q (min eigenvalue {min_eig})")
    params = {"Q": Q.tolist(), "b": b.tolist(), "c": float(c), "mu": float(mu)}
    return EvaluationFunction("quadratic-form", n, Q, b, float(c), float(mu), params=params)


def ev_cost(
    agent: int,
    n_agents: int,
    n_slots: int,
    alpha: float,
    capacity: float,
    beta: float,
    demand: Sequence[float],
    gamma: float = 0.0,
    degradation: float = 0.002,
    base_cost: float = 200.0,
) -> EvaluationFunction:
    """EV charging cost of ``agent`` over the joint schedule ``x`` in R^{N n}.

    f_i(x) = sum_t d x_it^2 + alpha (sum_t x_it - capacity)^2
             + beta/N sum_t (D_t + sum_j x_jt)^2 + base_cost + gamma
    """
    if alpha <= 0 or beta <= 0 or degradation <= 0:
        raise ValueError("alpha, beta and degradation must be positive")
    demand = np.asarray(demand, dtype=float)
    if demand.shape != (n_slots,):
        raise ValueError(f"demand must have {n_slots} entries")
    dim = n_agents * n_slots
    own = np.zeros(dim)
    own[agent * n_slots:(agent + 1) * n_slots] = 1.0
    slots = np.tile(np.eye(n_slots), n_agents)  # (n, N n): x -> per-slot totals
    coupling = 2.0 * beta / n_agents
    Q = 2.0 * degradation * np.diag(own) + 2.0 * alpha * np.outer(own, own) + coupling * slots.T @ slots
    b = -2.0 * alpha * capacity * own + coupling * slots.T @ demand
    c = alpha * capacity**2 + beta / n_agents * float(demand @ demand) + base_cost + gamma
    params = dict(
        agent=agent, n_agents=n_agents, n_slots=n_slots, alpha=alpha, capacity=capacity,
        beta=beta, demand=demand.tolist(), gamma=gamma, degradation=degradation, base_cost=base_cost,
    )
    return EvaluationFunction(
        "ev-cost", dim, Q, b, float(c), mu=2.0 * degradation + coupling,
        params=params, mu_mask=own.astype(bool),
    )


def shifted(v: EvaluationFunction, constant: float) -> EvaluationFunction:
    """``v + constant``; gradients are untouched."""
    if v.is_empty:
        raise EmptyFunctionError("cannot shift the empty evaluation function")
    if v.kind == "shifted":
        return shifted(v.base, v.offset + constant)
    return EvaluationFunction(
        "shifted", v.dim, v.Q, v.b, v.c, v.mu, offset=float(constant),
        params={}, base=v, mu_mask=v.mu_mask,
    )


def evaluate(v: EvaluationFunction, x) -> float:
    return v.value(x)


def subgradient(v: EvaluationFunction, x) -> np.ndarray:
    return v.gradient(x)


@dataclass(frozen=True, eq=False)
class FeasibleSet:
    """Box ``lower <= x <= upper`` with optional caps ``sum(x[block]) <= cap``.

    Blocks are disjoint index ranges given as ``(start, stop, cap)``.
    """

    lower: np.ndarray
    upper: np.ndarray
    blocks: tuple[tuple[int, int, float], ...] = ()

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.lower, dtype=float))
        hi = np.atleast_1d(np.asarray(self.upper, dtype=float))
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)
        if lo.shape != hi.shape or np.any(lo > hi):
            raise ValueError("box bounds must have equal shape with lower <= upper")
        if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
            raise ValueError("feasible set must be bounded")
        covered = np.zeros(lo.size, dtype=bool)
        for start, stop, cap in self.blocks:
            if covered[start:stop].any():
                raise ValueError("budget blocks must be disjoint")
            covered[start:stop] = True
            if lo[start:stop].sum() > cap:
                raise ValueError(f"block [{start}, {stop}) is empty: lower bounds exceed cap {cap}")

    @classmethod
    def box(cls, lower, upper, dim: int | None = None) -> "FeasibleSet":
        if dim is not None:
            lower = np.full(dim, lower, dtype=float)
            upper = np.full(dim, upper, dtype=float)
        return cls(np.asarray(lower, dtype=float), np.asarray(upper, dtype=float))

    @property
    def dim(self) -> int:
        return self.lower.size

    def contains(self, x, tol: float = 1e-9) -> bool:
        x = np.asarray(x, dtype=float)
        if np.any(x < self.lower - tol) or np.any(x > self.upper + tol):
            return False
        return all(x[s:e].sum() <= cap + tol for s, e, cap in self.blocks)

    def project(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        y = np.clip(x, self.lower, self.upper)
        for start, stop, cap in self.blocks:
            if y[start:stop].sum() > cap:
                y[start:stop] = _project_capped_box(x[start:stop], self.lower[start:stop], self.upper[start:stop], cap)
        return y

    def constraints(self) -> tuple[np.ndarray, np.ndarray]:
        """Polyhedral description ``A x <= b``."""
        n = self.dim
        eye = np.eye(n)
        rows = [eye, -eye]
        rhs = [self.upper, -self.lower]
        for start, stop, cap in self.blocks:
            row = np.zeros((1, n))
            row[0, start:stop] = 1.0
            rows.append(row)
            rhs.append(np.array([cap]))
        return np.vstack(rows), np.concatenate(rhs)

    def linear_minimizer(self, c) -> np.ndarray:
        """``argmin_{y in X} c'y`` (vertex), used for duality-gap diagnostics."""
        c = np.asarray(c, dtype=float)
        y = np.where(c < 0, self.upper, self.lower)
        for start, stop, cap in self.blocks:
            blk = slice(start, stop)
            lo = self.lower[blk]
            budget = cap - lo.sum()
            order = np.argsort(c[blk], kind="stable")
            vals = lo.copy()
            for t in order:
                if c[blk][t] >= 0 or budget <= 0:
                    break
                step = min(self.upper[blk][t] - lo[t], budget)
                vals[t] += step
                budget -= step
            y[blk] = vals
        return y

    def to_dict(self) -> dict[str, Any]:
        return {"lower": self.lower.tolist(), "upper": self.upper.tolist(),
                "blocks": [list(b) for b in self.blocks]}


def _project_capped_box(y, lo, hi, cap):
    # Projection of y onto {lo <= z <= hi, sum z <= cap} with an active cap:
    # z = clip(y - lam, lo, hi) where lam > 0 solves sum z = cap.
    # sum z is piecewise linear and non-increasing in lam; walk its breakpoints.
    breaks = np.unique(np.concatenate([y - hi, y - lo, [0.0]]))
    breaks = breaks[breaks >= 0]
    total = lambda lam: np.clip(y - lam, lo, hi).sum()  # noqa: E731
    prev_lam, prev_total = breaks[0], total(breaks[0])
    for lam in breaks[1:]:
        cur = total(lam)
        if cur <= cap:
            # linear on [prev_lam, lam]
            if prev_total == cur:
                return np.clip(y - lam, lo, hi)
            lam_star = prev_lam + (prev_total - cap) * (lam - prev_lam) / (prev_total - cur)
            return np.clip(y - lam_star, lo, hi)
        prev_lam, prev_total = lam, cur
    return np.clip(y - breaks[-1], lo, hi)


def project(X: FeasibleSet, x) -> np.ndarray:
    return X.project(x)


def _as_constraint_arrays(constraints, n):
    if constraints is None:
        return np.zeros((0, n)), np.zeros(0)
    if isinstance(constraints, tuple) and len(constraints) == 2 and isinstance(constraints[0], np.ndarray) \
            and constraints[0].ndim == 2:
        A, b = constraints
        return np.asarray(A, dtype=float).reshape(-1, n), np.asarray(b, dtype=float).ravel()
    pairs = list(constraints)
    if not pairs:
        return np.zeros((0, n)), np.zeros(0)
    A = np.array([np.atleast_1d(np.asarray(a, dtype=float)) for a, _ in pairs]).reshape(len(pairs), n)
    b = np.array([float(bb) for _, bb in pairs])
    return A, b


def solve_projection_qp(
    target,
    constraints: Iterable[tuple[Any, float]] | tuple[np.ndarray, np.ndarray] | None = None,
    *,
    tol: float = 1e-8,
    max_iter: int | None = None,
) -> np.ndarray:
    """Euclidean projection of ``target`` onto ``{x : a'x <= b}``.

    Dual active-set method (Goldfarb-Idnani with identity Hessian): start at
    the unconstrained minimiser and repeatedly add the most violated
    constraint, dropping constraints whose multiplier would turn negative.
    ``constraints`` is either a list of ``(a, b)`` pairs or a pair of arrays
    ``(A, b)``.
    """
    t = np.atleast_1d(np.asarray(target, dtype=float)).copy()
    n = t.size
    A, b = _as_constraint_arrays(constraints, n)
    m = A.shape[0]
    if m == 0:
        return t
    norms = np.linalg.norm(A, axis=1)
    scale = 1.0 + np.abs(b) + norms * (1.0 + np.linalg.norm(t))
    add_tol = 1e-13 * scale
    max_iter = max_iter or 20 * (m + n) + 50

    x = t.copy()
    active: list[int] = []
    tolerated: list[int] = []
    lam = np.zeros(0)
    it = 0
    while True:
        viol = A @ x - b
        if active:
            viol[active] = -np.inf
        if tolerated:
            viol[tolerated] = -np.inf
        viol[norms == 0.0] = -np.inf
        p = int(np.argmax(viol))
        if viol[p] <= add_tol[p]:
            break
        a_p = A[p]
        lam_p = 0.0
        while True:
            it += 1
            if it > max_iter:
                raise QPError(f"projection QP exceeded {max_iter} iterations", float(np.max(A @ x - b)))
            if active:
                N = A[active].T
                r, *_ = np.linalg.lstsq(N, a_p, rcond=None)
                z = a_p - N @ r
            else:
                r = np.zeros(0)
                z = a_p
            zz = float(z @ z)
            # dual blocking step: an active multiplier hits zero
            t1, block = np.inf, -1
            pos = r > 1e-14 * max(1.0, float(np.abs(r).max(initial=0.0)))
            if np.any(pos):
                ratios = np.full(r.shape, np.inf)
                ratios[pos] = lam[pos] / r[pos]
                block = int(np.argmin(ratios))
                t1 = float(ratios[block])
            if zz <= (1e-12 * np.linalg.norm(a_p)) ** 2:
                if not np.isfinite(t1):
                    # dependent on the active set; a round-off sized violation
                    # means the feasible set is degenerate, not empty
                    if a_p @ x - b[p] <= tol * scale[p]:
                        tolerated.append(p)
                        break
                    raise QPError("projection QP is infeasible", float(a_p @ x - b[p]))
                lam = lam - t1 * r
                lam_p += t1
                del active[block]
                lam = np.delete(lam, block)
                continue
            slack = float(a_p @ x - b[p])
            t2 = slack / float(a_p @ z)
            step = min(t1, t2)
            x = x - step * z
            lam = lam - step * r
            lam_p += step
            if t2 <= t1:
                active.append(p)
                lam = np.append(lam, lam_p)
                break
            del active[block]
            lam = np.delete(lam, block)

    max_violation = float(np.max(A @ x - b))
    if max_violation > tol * max(1.0, float(np.max(scale)) * 1e-3):
        raise QPError(f"projection QP left a constraint violated by {max_violation:.3e}", max_violation)
    return x


def solve_metric_qp(M, target, A, b, *, tol: float = 1e-8) -> np.ndarray:
    """``argmin 0.5 (x-target)' M (x-target)`` s.t. ``A x <= b`` for SPD ``M``."""
    R = np.linalg.cholesky(M).T  # M = R'R
    Rinv = np.linalg.inv(R)
    AR = A @ Rinv
    y = solve_projection_qp(R @ target, (AR, b), tol=tol)
    return Rinv @ y
