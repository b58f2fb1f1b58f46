"""Euler-Maruyama simulation of stopped particle systems and of the mean-field flow.

Conventions
-----------
* Grid nodes are ``0..n_steps``.  A particle with stopping node ``s`` has
  indicator 0 from node ``s`` onward, so it does not move on ``[s, s+1]`` and
  contributes ``i = 0`` to the empirical measure used for that step.
* Stopped particles stay in the empirical measure (frozen position, ``i = 0``).
* Gaussian increments come from one counter-based stream per
  ``(seed, purpose, replication, particle)``.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .measures import EmpiricalMeasure, MeasureFlow
from .model import Model, _check_finite

NEVER = np.iinfo(np.int64).max

# stream purposes
NOISE, INIT, STOPS, TRAIN = 0, 1, 2, 3


class SimulationError(ArithmeticError):
    pass


class PicardWarning(UserWarning):
    pass


def stream(seed: int, *key: int) -> np.random.Generator:
    """Independent Philox generator keyed by ``seed`` and an integer tuple."""
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.Philox(ss))


def gaussian_increments(seed, n_steps, dim, replications, stream_ids, purpose=NOISE, rep_offset=0):
    """Standard normals of shape (R, n_steps, N, d), one stream per (replication, particle)."""
    stream_ids = np.asarray(stream_ids)
    out = np.empty((replications, n_steps, len(stream_ids), dim))
    for r in range(replications):
        for k, sid in enumerate(stream_ids):
            out[r, :, k, :] = stream(seed, purpose, r + rep_offset, sid).standard_normal((n_steps, dim))
    return out


def uniform_increments(seed, n_steps, dim, replications, stream_ids, purpose=NOISE, rep_offset=0):
    """Uniforms on [0, 1) of shape (R, n_steps, N, d) driving the two-point scheme."""
    stream_ids = np.asarray(stream_ids)
    out = np.empty((replications, n_steps, len(stream_ids), dim))
    for r in range(replications):
        for k, sid in enumerate(stream_ids):
            out[r, :, k, :] = stream(seed, purpose, r + rep_offset, sid).random((n_steps, dim))
    return out


def driving_noise(scheme, seed, n_steps, dim, replications, stream_ids, purpose=NOISE, rep_offset=0):
    """Noise array for ``scheme`` ("euler": standard normals, "two_point": uniforms)."""
    if scheme == "euler":
        return gaussian_increments(seed, n_steps, dim, replications, stream_ids, purpose, rep_offset)
    if scheme == "two_point":
        return uniform_increments(seed, n_steps, dim, replications, stream_ids, purpose, rep_offset)
    raise ValueError(f"unknown scheme {scheme!r}")


def _two_point_step(b, sig, u, dt, alive):
    """Move by ``+/- sigma sqrt(dt)`` with up-probability ``1/2 + b dt / (2 sigma sqrt(dt))`` (d = 1)."""
    if b.shape[-1] != 1:
        raise ValueError("the two-point scheme needs d = 1")
    b, step, u = b[..., 0], sig[..., 0, 0] * np.sqrt(dt), u[..., 0]
    with np.errstate(divide="ignore", invalid="ignore"):
        p_up = np.where(step > 0, 0.5 + b * dt / (2.0 * step), 1.0)
    if np.any(((p_up < 0) | (p_up > 1)) & (alive == 1)):
        raise SimulationError("drift too large for the two-point scheme")
    dx = np.where(step > 0, np.where(u < p_up, step, -step), b * dt)
    return dx[..., None]


@dataclass(frozen=True)
class TimeGrid:
    t0: float
    T: float
    n_steps: int

    def __post_init__(self):
        if not self.t0 < self.T:
            raise ValueError("time grid needs t0 < T")
        if self.n_steps < 1:
            raise ValueError("time grid needs at least one step")

    @property
    def dt(self) -> float:
        return (self.T - self.t0) / self.n_steps

    @property
    def times(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(self.n_steps + 1)

    def refined(self, factor: int = 2) -> "TimeGrid":
        return TimeGrid(self.t0, self.T, self.n_steps * factor)


# -- stopping rules -----------------------------------------------------------

class StoppingRule:
    """Base class; subclasses decide indicators at each node."""


@dataclass(frozen=True)
class Never(StoppingRule):
    pass


@dataclass(frozen=True)
class FixedTimes(StoppingRule):
    """Per-particle stopping nodes; ``NEVER`` for particles that are never stopped."""

    nodes: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "nodes", np.asarray(self.nodes, dtype=np.int64))

    def check(self, grid: TimeGrid) -> None:
        finite = self.nodes[self.nodes != NEVER]
        if np.any(finite < 0) or np.any(finite > grid.n_steps):
            raise ValueError("fixed stopping times must lie on the grid")


@dataclass(frozen=True)
class IidSurvival(StoppingRule):
    """Template: each particle draws its node from ``law`` over nodes ``0..n_steps`` then never."""

    law: np.ndarray

    def __post_init__(self):
        law = np.asarray(self.law, dtype=float)
        if np.any(law < 0) or abs(law.sum() - 1.0) > 1e-12:
            raise ValueError("survival law must be a probability vector")
        object.__setattr__(self, "law", law)


@dataclass(frozen=True)
class PolicyDriven(StoppingRule):
    policy: object


def uniform_survival_law(n_steps: int) -> np.ndarray:
    """Uniform over nodes ``0..n_steps`` and ``never``; half the mass survives node ``n_steps/2``."""
    return np.full(n_steps + 2, 1.0 / (n_steps + 2))


def iid_stopping_rule(survival_law, i0, rng: np.random.Generator) -> FixedTimes:
    """Draw stopping nodes i.i.d. from ``survival_law``; the last entry stands for never.

    Particles that start stopped get node 0.
    """
    law = IidSurvival(survival_law).law
    i0 = np.asarray(i0)
    draws = rng.choice(len(law), size=len(i0), p=law)
    nodes = np.where(draws == len(law) - 1, NEVER, draws).astype(np.int64)
    nodes[i0 == 0] = 0
    return FixedTimes(nodes)


# -- paths --------------------------------------------------------------------

@dataclass
class ParticlePaths:
    """Trajectories on the grid, with a leading replication axis.

    ``X`` has shape (R, n_nodes, N, d), ``I`` (R, n_nodes, N) and
    ``stop_node`` (R, N) with ``NEVER`` for particles alive at T.
    """

    grid: TimeGrid
    X: np.ndarray
    I: np.ndarray
    stop_node: np.ndarray
    seed: int
    replications: np.ndarray
    stream_ids: np.ndarray
    objective: np.ndarray | None = None
    measure_log: list = field(default_factory=list)

    @property
    def n_particles(self) -> int:
        return self.X.shape[2]

    def empirical_measure(self, node: int, rep: int = 0) -> EmpiricalMeasure:
        return EmpiricalMeasure.uniform(self.X[rep, node], self.I[rep, node])

    def flow(self, rep: int = 0) -> MeasureFlow:
        return MeasureFlow(self.grid.times, [self.empirical_measure(s, rep) for s in range(self.X.shape[1])])

    def rows(self):
        """Rows ``(replication, particle, node, x_1..x_d, i)`` for columnar export."""
        R, S, N, d = self.X.shape
        for r in range(R):
            for k in range(N):
                for s in range(S):
                    yield (int(self.replications[r]), k, s, *map(float, self.X[r, s, k]), int(self.I[r, s, k]))


def propagate(
    model: Model,
    grid: TimeGrid,
    x0: np.ndarray,
    i0: np.ndarray,
    noise: np.ndarray,
    decide: Callable,
    *,
    environment: Callable | None = None,
    with_objective: bool = False,
    log_measures: bool = False,
    scheme: str = "euler",
):
    """Step R independent N-particle systems forward together.

    ``decide(s, X, I) -> I`` applies stopping at node ``s``.  ``environment(s,
    X, I)`` returns the measure the coefficients are evaluated against; by
    default it is each system's own empirical measure.  ``scheme`` is
    "euler" (``noise`` standard normals) or "two_point" (``noise`` uniforms;
    the tree used by the brute-force solver).
    Returns ``(X, I, objective, log)``.
    """
    R, N, d = x0.shape
    n, dt = grid.n_steps, grid.dt
    sqdt = np.sqrt(dt)
    X = np.empty((R, n + 1, N, d))
    I = np.empty((R, n + 1, N), dtype=np.int8)
    w = np.full((R, N), 1.0 / N)
    x = x0.astype(float).copy()
    ind = i0.astype(np.int8).copy()
    J = np.zeros(R) if with_objective else None
    log = []
    times = grid.times
    for s in range(n + 1):
        ind = decide(s, x, ind).astype(np.int8)
        X[:, s], I[:, s] = x, ind
        if s == n:
            break
        if environment is None:
            m = EmpiricalMeasure._trusted(x, ind, w)
        else:
            m = environment(s, x, ind)
        if log_measures:
            log.append(m)
        t = times[s]
        if with_objective:
            f = _check_finite(np.asarray(model.running(t, x, m), dtype=float), "running reward")
            J += np.sum(f * ind, axis=-1) * dt / N
        b = model.drift(t, x, m)
        sig = model.diffusion(t, x, m)
        if scheme == "two_point":
            dx = _two_point_step(b, sig, noise[:, s], dt, ind)
        else:
            dx = b * dt + np.einsum("...ij,...j->...i", sig, noise[:, s]) * sqdt
        x = x + ind[..., None] * dx
        if not np.all(np.isfinite(x)):
            raise SimulationError(f"non-finite state after step {s}")
    if with_objective:
        mT = EmpiricalMeasure._trusted(x, ind, w)
        J += _check_finite(np.asarray(model.terminal(mT), dtype=float), "terminal reward")
    return X, I, J, log


def _fixed_decider(nodes: np.ndarray, i0: np.ndarray):
    def decide(s, x, ind):
        return ind * (nodes > s)

    return decide


def _as_states(y0):
    x0, i0 = y0
    x0 = np.asarray(x0, dtype=float)
    if x0.ndim == 1:
        x0 = x0[:, None]
    return x0, np.asarray(i0, dtype=np.int8)


def simulate_system(
    model: Model,
    grid: TimeGrid,
    y0,
    rule: StoppingRule,
    seed: int,
    *,
    replication: int = 0,
    stream_ids=None,
    antithetic: bool = False,
) -> ParticlePaths:
    """Simulate one N-particle system under ``rule``.

    ``y0 = (x0, i0)`` with ``x0`` of shape (N, d) (or (N,) when d = 1).
    """
    x0, i0 = _as_states(y0)
    N = len(i0)
    sids = np.arange(N) if stream_ids is None else np.asarray(stream_ids)
    if isinstance(rule, PolicyDriven):
        from .policy import run_policy

        paths, _ = run_policy(rule.policy, model, grid, y0, seed, replications=1,
                              rep_offset=replication, stream_ids=sids)
        return paths
    if isinstance(rule, Never):
        nodes = np.full(N, NEVER, dtype=np.int64)
    elif isinstance(rule, FixedTimes):
        rule.check(grid)
        nodes = rule.nodes
    elif isinstance(rule, IidSurvival):
        nodes = iid_stopping_rule(rule.law, i0, stream(seed, STOPS, replication, 0)).nodes
    else:
        raise TypeError(f"unsupported stopping rule {rule!r}")
    noise = gaussian_increments(seed, grid.n_steps, x0.shape[1], 1, sids, rep_offset=replication)
    if antithetic:
        noise = -noise
    X, I, _, log = propagate(model, grid, x0[None], i0[None], noise,
                             _fixed_decider(nodes[None], i0[None]), log_measures=True)
    stop = np.where(i0 == 0, 0, nodes)
    return ParticlePaths(grid, X, I, stop[None], seed, np.array([replication]), sids, measure_log=log)


# -- mean-field flow ----------------------------------------------------------

@dataclass
class FlowResult:
    flow: MeasureFlow
    gap: float
    iterations: int
    converged: bool
    gaps: list
    cloud_x0: np.ndarray
    cloud_i0: np.ndarray
    cloud_stop_nodes: np.ndarray
    seed: int

    @property
    def size(self) -> int:
        return len(self.cloud_i0)


def resample(m0: EmpiricalMeasure, size: int, rng: np.random.Generator):
    """``size`` atoms drawn i.i.d. from ``m0`` (returned as arrays x, i)."""
    idx = rng.choice(m0.n_atoms, size=size, p=m0.w / m0.w.sum())
    return m0.x[idx].copy(), m0.i[idx].copy()


def quantile_sample(m0: EmpiricalMeasure, size: int):
    """Deterministic sample: the atoms at mid-quantiles ``(k - 1/2)/size`` of ``m0``.

    Atoms are ordered by (indicator, first coordinate).
    """
    order = np.lexsort((m0.x[:, 0], m0.i))
    cdf = np.cumsum(m0.w[order])
    levels = (np.arange(size) + 0.5) / size
    idx = order[np.minimum(np.searchsorted(cdf, levels * cdf[-1]), m0.n_atoms - 1)]
    return m0.x[idx].copy(), m0.i[idx].copy()


def _rule_nodes(rule, i0, seed, rep):
    N = len(i0)
    if isinstance(rule, Never):
        nodes = np.full(N, NEVER, dtype=np.int64)
    elif isinstance(rule, IidSurvival):
        nodes = iid_stopping_rule(rule.law, i0, stream(seed, STOPS, rep, 0)).nodes
    elif isinstance(rule, FixedTimes):
        nodes = rule.nodes
    else:
        raise TypeError("flow rule must be Never, FixedTimes or IidSurvival")
    return np.where(i0 == 0, 0, nodes)


def mckean_vlasov_flow(
    model: Model,
    m0: EmpiricalMeasure,
    grid: TimeGrid,
    rule: StoppingRule,
    M: int,
    seed: int,
    *,
    k_max: int = 50,
    tol: float = 1e-10,
    indicator_scale: float = 1.0,
) -> FlowResult:
    """Picard iteration for the measure flow of the stopped McKean-Vlasov dynamics.

    ``M`` particles are drawn from ``m0`` (used as is when ``m0`` is already a
    uniform M-atom measure).  Each sweep drives the cloud by coefficients
    frozen at the previous flow, with the same noise and stopping nodes every
    sweep.  The reported gap is the sup over nodes of the identity-coupling
    distance between consecutive flows, an upper bound on their W2 distance.
    """
    if m0.n_atoms == M and m0.is_uniform():
        cx, ci = m0.x.copy(), m0.i.copy()
    else:
        cx, ci = resample(m0, M, stream(seed, INIT, 0, 0))
    nodes = _rule_nodes(rule, ci, seed, 0)
    noise = gaussian_increments(seed, grid.n_steps, cx.shape[1], 1, np.arange(M))
    decide = _fixed_decider(nodes[None], ci[None])
    w = np.full((1, M), 1.0 / M)

    n_nodes = grid.n_steps + 1
    fx = np.broadcast_to(cx, (n_nodes,) + cx.shape).copy()
    fi = np.array([ci * (nodes > s) for s in range(n_nodes)], dtype=np.int8)
    gaps, converged, it = [], False, 0
    for it in range(1, k_max + 1):
        frozen_x, frozen_i = fx, fi

        def env(s, x, ind, frozen_x=frozen_x, frozen_i=frozen_i):
            return EmpiricalMeasure._trusted(frozen_x[s][None], frozen_i[s][None], w)

        X, I, _, _ = propagate(model, grid, cx[None], ci[None], noise, decide, environment=env)
        nx, ni = X[0], I[0]
        diff = np.sum((nx - fx) ** 2, axis=-1) + indicator_scale ** 2 * (ni - fi) ** 2
        gap = float(np.sqrt(np.max(diff.mean(axis=-1))))
        gaps.append(gap)
        fx, fi = nx, ni
        if gap <= tol:
            converged = True
            break
    if not converged:
        warnings.warn(f"Picard iteration stopped at gap {gaps[-1]:.3e} > tol {tol:.1e}", PicardWarning)
    flow = MeasureFlow(grid.times, [EmpiricalMeasure.uniform(fx[s], fi[s]) for s in range(n_nodes)])
    return FlowResult(flow, gaps[-1], it, converged, gaps, cx, ci, nodes, seed)


# -- moment diagnostics -------------------------------------------------------

@dataclass
class MomentSummary:
    p: int
    sup_moment: float
    increments: dict  # window length in time units -> mean sup |X_s - X_a|^p


def moment_check(paths: ParticlePaths, p: int = 2) -> MomentSummary:
    """Averages of ``sup_s |X_s|^p`` and of increment sups over dyadic windows."""
    if p not in (1, 2):
        raise ValueError("p must be 1 or 2")
    X = paths.X
    norms = np.linalg.norm(X, axis=-1) ** p
    sup_moment = float(norms.max(axis=1).mean())
    n = X.shape[1] - 1
    incs = {}
    length = n
    while length >= 1:
        vals = []
        for a in range(0, n - length + 1, length):
            seg = X[:, a:a + length + 1] - X[:, a:a + 1]
            vals.append((np.linalg.norm(seg, axis=-1) ** p).max(axis=1))
        incs[length * paths.grid.dt] = float(np.mean(vals))
        if length == 1:
            break
        length //= 2
    return MomentSummary(p, sup_moment, incs)
