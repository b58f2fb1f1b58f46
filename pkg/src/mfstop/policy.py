"""Optimal stopping policy built from a value table, and Monte Carlo evaluation.

At every grid node the policy compares the value of the current regime with
the values obtained by dropping one alive particle.  While some drop (nearly)
attains the current value, the smallest such index is stopped and the test
repeats in the smaller regime, so several particles may stop at one node.
Survivors stop at the final node.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import Model
from .simulate import (
    NEVER,
    STOPS,
    FixedTimes,
    IidSurvival,
    Never,
    ParticlePaths,
    TimeGrid,
    _as_states,
    _fixed_decider,
    driving_noise,
    iid_stopping_rule,
    propagate,
    stream,
)
from .snell import LatticeTable, ValueTable, value_at


@dataclass
class StoppingPolicy:
    """Stopping rule read off ``table`` with equality slack ``eta``.

    ``eta=None`` selects the default: ten times the table's interpolation
    error estimate for lattice tables, zero otherwise.
    """

    table: ValueTable
    eta: float | None = None
    clamp_tol: float = np.inf

    @property
    def resolved_eta(self) -> float:
        if self.eta is not None:
            return float(self.eta)
        if isinstance(self.table, LatticeTable):
            return 10.0 * self.table.interp_error_estimate()
        return 0.0


@dataclass
class PolicyTrace:
    """Stopping events per replication.

    ``order[r, j]`` is the index stopped ``j``-th and ``nodes[r, j]`` its node;
    unused slots (particles that started stopped) hold -1.
    """

    order: np.ndarray
    nodes: np.ndarray
    initial: np.ndarray
    eta: float
    clamps: int = 0

    def events(self, r: int):
        """``[(node, index, alive set after the stop), ...]`` for replication ``r``."""
        alive = set(np.flatnonzero(self.initial).tolist())
        out = []
        for s, k in zip(self.nodes[r], self.order[r]):
            if k < 0:
                break
            alive.discard(int(k))
            out.append((int(s), int(k), frozenset(alive)))
        return out

    def validate(self) -> None:
        start = frozenset(np.flatnonzero(self.initial).tolist())
        for r in range(self.order.shape[0]):
            ev = self.events(r)
            if len(ev) != len(start):
                raise AssertionError(f"replication {r}: {len(ev)} events for {len(start)} alive particles")
            prev_set, prev_node = start, -1
            for s, k, after in ev:
                if s < prev_node or k not in prev_set or after != prev_set - {k}:
                    raise AssertionError(f"replication {r}: invalid event {(s, k)}")
                prev_set, prev_node = after, s


def _policy_decider(policy: StoppingPolicy, grid: TimeGrid, R: int, N: int, order, nodes, counter):
    table, eta = policy.table, policy.resolved_eta
    bit = 1 << np.arange(N)
    n = grid.n_steps

    def record(rows, ks, s):
        slot = counter[rows]
        order[rows, slot] = ks
        nodes[rows, slot] = s
        counter[rows] += 1

    def decide(s, x, ind):
        ind = ind.copy()
        if s == n:
            for k in range(N):
                rows = np.flatnonzero(ind[:, k] == 1)
                record(rows, k, s)
            return np.zeros_like(ind)
        while True:
            codes = ind.astype(np.int64) @ bit
            rows = np.flatnonzero(codes != 0)
            if rows.size == 0:
                break
            cur, drops = table.drop_values(s, x[rows], codes[rows], policy.clamp_tol)
            hit = drops + eta >= cur[:, None]
            stop = np.any(hit, axis=1)
            if not np.any(stop):
                break
            rows, k = rows[stop], np.argmax(hit[stop], axis=1)
            record(rows, k, s)
            ind[rows, k] = 0
        return ind

    return decide


def run_policy(policy: StoppingPolicy, model: Model, grid: TimeGrid, y0, seed: int, *,
               replications: int = 1, rep_offset: int = 0, stream_ids=None, scheme: str = "euler"):
    """Simulate ``replications`` systems from ``y0`` under the policy.

    Returns ``(ParticlePaths, PolicyTrace)``; the paths carry the realised
    objective of every replication.
    """
    x0, i0 = _as_states(y0)
    N, d = x0.shape
    R = replications
    sids = np.arange(N) if stream_ids is None else np.asarray(stream_ids)
    noise = driving_noise(scheme, seed, grid.n_steps, d, R, sids, rep_offset=rep_offset)
    order = np.full((R, N), -1, dtype=np.int64)
    nodes = np.full((R, N), -1, dtype=np.int64)
    counter = np.zeros(R, dtype=np.int64)
    before = policy.table.clamp_count
    decide = _policy_decider(policy, grid, R, N, order, nodes, counter)
    X, I, J, _ = propagate(model, grid, np.broadcast_to(x0, (R, N, d)), np.broadcast_to(i0, (R, N)),
                           noise, decide, with_objective=True, scheme=scheme)
    stop = np.zeros((R, N), dtype=np.int64)
    filled = order >= 0
    rr = np.nonzero(filled)[0]
    stop[rr, order[filled]] = nodes[filled]
    trace = PolicyTrace(order, nodes, i0.copy(), policy.resolved_eta, policy.table.clamp_count - before)
    paths = ParticlePaths(grid, X, I, stop, seed, np.arange(rep_offset, rep_offset + R), sids, objective=J)
    return paths, trace


@dataclass
class PolicyEvaluation:
    J: float
    se: float
    replications: int
    eta: float | None
    clamps: int
    samples: np.ndarray


def evaluate_policy(model: Model, grid: TimeGrid, y0, rule, M: int, seed: int, *, chunk: int = 2000,
                    keep_samples: bool = False, scheme: str = "euler") -> PolicyEvaluation:
    """Monte Carlo mean and standard error of the discrete objective.

    ``rule`` is a :class:`StoppingPolicy` or a simulate stopping rule
    (``Never``, ``FixedTimes``, ``IidSurvival``).  Replications are simulated in
    chunks; replication ``r`` always uses the same random streams.  ``scheme``
    selects Euler steps or the two-point tree (see :func:`propagate`).
    """
    if M < 2:
        raise ValueError("need at least two replications")
    x0, i0 = _as_states(y0)
    N, d = x0.shape
    values, clamps = [], 0
    for start in range(0, M, chunk):
        R = min(chunk, M - start)
        if isinstance(rule, StoppingPolicy):
            paths, trace = run_policy(rule, model, grid, y0, seed, replications=R, rep_offset=start,
                                      scheme=scheme)
            values.append(paths.objective)
            clamps += trace.clamps
            continue
        if isinstance(rule, Never):
            stops = np.full((R, N), NEVER, dtype=np.int64)
        elif isinstance(rule, FixedTimes):
            rule.check(grid)
            stops = np.broadcast_to(rule.nodes, (R, N))
        elif isinstance(rule, IidSurvival):
            stops = np.stack([iid_stopping_rule(rule.law, i0, stream(seed, STOPS, start + r, 0)).nodes
                              for r in range(R)])
        else:
            raise TypeError(f"unsupported rule {rule!r}")
        noise = driving_noise(scheme, seed, grid.n_steps, d, R, np.arange(N), rep_offset=start)
        ib = np.broadcast_to(i0, (R, N))
        _, _, J, _ = propagate(model, grid, np.broadcast_to(x0, (R, N, d)), ib, noise,
                               _fixed_decider(stops, ib), with_objective=True, scheme=scheme)
        values.append(J)
    vals = np.concatenate(values)
    eta = rule.resolved_eta if isinstance(rule, StoppingPolicy) else None
    return PolicyEvaluation(float(vals.mean()), float(vals.std(ddof=1) / np.sqrt(M)), M, eta, clamps,
                            vals if keep_samples else np.empty(0))


def epsilon_optimality(J: float, table: ValueTable, node: int, y0) -> float:
    """Table value at ``(node, y0)`` minus the realised objective."""
    x0, i0 = _as_states(y0)
    return value_at(table, node, (x0, i0)) - J


def refinement_constant(v_coarse: float, v_fine: float, dt: float, factor: int = 2) -> float:
    """``C`` with ``|v(dt) - v(0)| ~ C dt`` from values at ``dt`` and ``dt/factor`` (first order)."""
    return abs(v_coarse - v_fine) / (dt * (1.0 - 1.0 / factor))


def discretization_tolerance(v_coarse: float, v_fine: float, dt: float, h: float, dt_fine: float,
                             h_fine: float) -> float:
    """``C (dt + h^2)`` with ``C`` calibrated from one refinement of the lattice.

    Assumes the lattice error behaves like ``C (dt + h^2)`` so that
    ``|v_coarse - v_fine| = C ((dt + h^2) - (dt_fine + h_fine^2))``.
    """
    coarse, fine = dt + h * h, dt_fine + h_fine * h_fine
    if fine >= coarse:
        raise ValueError("the fine lattice must be finer")
    return abs(v_coarse - v_fine) / (coarse - fine) * coarse


__all__ = [
    "StoppingPolicy",
    "PolicyTrace",
    "PolicyEvaluation",
    "run_policy",
    "evaluate_policy",
    "epsilon_optimality",
    "refinement_constant",
    "discretization_tolerance",
]
