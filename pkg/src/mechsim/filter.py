"""Causal repair of gradient data so that it stays cyclically monotone.

For one agent, the gradients it reported in every sequence are merged into a
single stream of (point, gradient) pairs.  Each incoming gradient is replaced
by the closest vector that keeps every cycle through the accepted pairs
non-positive:

    sum over a cycle of  xi_a' (eta_b - eta_a)  <=  0.

``F[tau, m]`` holds the heaviest path from accepted pair ``tau`` to accepted
pair ``m`` with edge weight ``xi_a' (eta_b - eta_a)``; a new gradient ``xi``
at ``eta_t`` is admissible iff for every ``tau``

    xi' (eta_tau - eta_t) + max_m (F[tau, m] + xi_m' (eta_t - eta_m)) <= 0.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .distopt import SequenceTrace
from .numerics import QPError, solve_projection_qp

PASS_SLACK = 1e-9


class FilterError(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class InterleavedStream:
    agent: int
    points: np.ndarray
    gradients: np.ndarray
    tags: tuple[str, ...]
    steps: tuple[int, ...] = ()

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        grd = np.asarray(self.gradients, dtype=float)
        if pts.ndim == 1:
            pts, grd = pts[:, None], grd[:, None]
        if pts.shape != grd.shape:
            raise ValueError("points and gradients must have matching shapes")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "gradients", grd)
        if len(self.tags) != len(pts):
            object.__setattr__(self, "tags", tuple(self.tags) or ("",) * len(pts))
        if not self.steps:
            object.__setattr__(self, "steps", (0,) * len(pts))

    def __len__(self) -> int:
        return len(self.points)


@dataclass(frozen=True, eq=False)
class FilterState:
    repaired: np.ndarray
    F: np.ndarray
    repairs: np.ndarray
    passed: np.ndarray
    stream: InterleavedStream | None = field(default=None, repr=False)
    relaxation: np.ndarray | None = None

    @property
    def repair_magnitude(self) -> float:
        return float(self.repairs.sum())

    def log_rows(self):
        s = self.stream
        for t in range(len(self.repairs)):
            tag = s.tags[t] if s is not None else ""
            relax = float(self.relaxation[t]) if self.relaxation is not None else 0.0
            yield (s.agent if s is not None else -1, t, tag, float(self.repairs[t]), bool(self.passed[t]), relax)


@dataclass(frozen=True)
class ConsistencyVerdict:
    consistent: bool
    first_violation: int | None
    repair_magnitude: float


def draw_k_s(k_f: int, window: int, rng: np.random.Generator) -> int:
    """Uniform draw from ``[max(0, k_f - window), k_f - 1]``."""
    if window < 1 or k_f < 1:
        raise ValueError("window and k_f must be positive")
    return int(rng.integers(max(0, k_f - window), k_f))


def interleave(traces: Sequence[SequenceTrace | None], agent: int, k_s: int, k_f: int) -> InterleavedStream:
    """Merge agent data: per step, the social gradient first, then the runs
    without each other participant in increasing agent order."""
    if not 0 <= k_s <= k_f:
        raise ValueError("need 0 <= k_s <= k_f")
    social = next((t for t in traces if t is not None and t.sequence is None), None)
    if social is None:
        raise FilterError("social sequence data is missing")
    if agent not in social.participants:
        raise FilterError(f"agent {agent} did not take part in the social sequence")
    by_seq = {t.sequence: t for t in traces if t is not None and t.sequence is not None}
    ordered = [social]
    for j in social.participants:
        if j == agent:
            continue
        tr = by_seq.get(j)
        if tr is None or agent not in tr.participants:
            raise FilterError(f"data of agent {agent} in the sequence without {j} is missing")
        ordered.append(tr)
    for tr in ordered:
        if tr.k_f < k_f:
            raise FilterError(f"sequence {tr.tag} stops at step {tr.k_f} < {k_f}")
    pts, grads, tags, steps = [], [], [], []
    for k in range(k_s, k_f + 1):
        for tr in ordered:
            p = tr.index(agent)
            pts.append(tr.states[k, p])
            grads.append(tr.gradients[k, p])
            tags.append(tr.tag)
            steps.append(k)
    return InterleavedStream(agent, np.array(pts), np.array(grads), tuple(tags), tuple(steps))


def filter_stream(stream: InterleavedStream) -> FilterState:
    T, d = stream.points.shape
    if T == 0:
        raise ValueError("cannot filter an empty stream")
    eta, xi = stream.points, stream.gradients
    rep = np.empty_like(xi)
    F = np.zeros((T, T))
    repairs = np.zeros(T)
    relax = np.zeros(T)
    passed = np.ones(T, dtype=bool)
    rep[0] = xi[0]
    for t in range(1, T):
        prev = slice(0, t)
        # bound[tau] = max_m F[tau, m] + rep_m'(eta_t - eta_m)
        into_t = np.einsum("md,md->m", rep[prev], eta[t] - eta[prev])
        bound = np.max(F[prev, prev] + into_t[None, :], axis=1)
        A = eta[prev] - eta[t]
        b = -bound
        lhs = A @ xi[t]
        scale = np.maximum(1.0, np.maximum(np.abs(lhs), np.abs(b)))
        if np.all(lhs - b <= PASS_SLACK * scale):
            new = xi[t].copy()
        else:
            new, relax[t] = _repair(xi[t], A, b, float(np.abs(eta[: t + 1]).max()), t)
            passed[t] = False
            repairs[t] = float(np.sum((new - xi[t]) ** 2))
        rep[t] = new
        F[prev, t] = bound
        out_t = (eta[prev] - eta[t]) @ new
        # cap cycles through t at zero: an excess accepted within tolerance
        # must not be counted again by every later path through t
        F[t, prev] = np.minimum(np.max(out_t[:, None] + F[prev, prev], axis=0), -bound)
        F[t, t] = 0.0
        F[prev, prev] = np.maximum(F[prev, prev], F[prev, t][:, None] + F[t, prev][None, :])
    return FilterState(rep, F, repairs, passed, stream, relax)


def _repair(raw: np.ndarray, A: np.ndarray, b: np.ndarray, size: float, t: int) -> tuple[np.ndarray, float]:
    """Closest admissible gradient, plus the cycle slack that had to be allowed.

    With exact arithmetic the admissible set is never empty.  Round-off on
    nearly coincident points can still empty it; the constraints are then
    relaxed by the smallest uniform amount that restores feasibility.
    """
    if not np.all(np.isfinite(A)) or not np.all(np.isfinite(b)) or not np.all(np.isfinite(raw)):
        raise FilterError(f"step {t}: non-finite stream data")
    # rows of repeated points do not involve xi; their cycles are fixed already
    keep = np.linalg.norm(A, axis=1) > 1e-12 * max(1.0, size)
    A, b = A[keep], b[keep]
    try:
        return solve_projection_qp(raw, (A, b)), 0.0
    except QPError:
        pass
    # smallest cycle excess delta (value units) that makes the rows feasible;
    # at delta = max(A raw - b) the raw gradient itself is admissible
    lo, hi = 0.0, max(0.0, float(np.max(A @ raw - b)))
    best = raw.copy()
    for _ in range(100):
        if hi - lo <= 1e-12 * max(1.0, hi):
            break
        mid = 0.5 * (lo + hi)
        try:
            best, hi = solve_projection_qp(raw, (A, b + mid)), mid
        except QPError:
            lo = mid
    return best, hi


def check_consistency(stream: InterleavedStream | None) -> ConsistencyVerdict:
    if stream is None or len(stream) == 0:
        return ConsistencyVerdict(True, None, 0.0)
    state = filter_stream(stream)
    bad = np.flatnonzero(~state.passed)
    return ConsistencyVerdict(bad.size == 0, int(bad[0]) if bad.size else None, state.repair_magnitude)


def write_repair_log(states: Sequence[FilterState], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["agent", "t", "sequence", "repair", "passed", "relaxation"])
        for st in states:
            for agent, t, tag, r, ok, relax in st.log_rows():
                w.writerow([agent, t, tag, repr(r), int(ok), repr(relax)])
