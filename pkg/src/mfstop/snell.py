"""Discrete-time multiple optimal stopping by backward induction over regimes.

A regime ``i`` in {0,1}^N is encoded as the integer ``sum_k i_k 2^k``.  Regimes
are solved in increasing number of alive particles; regime ``i`` is a standard
optimal stopping problem for the unstopped process with obstacle
``max_k u(., i^{-k})`` (dropping one alive index at a time is enough because
values are monotone in the regime).
"""
from __future__ import annotations

import itertools
import json
import warnings
from dataclasses import dataclass, field

import numpy as np

from .measures import EmpiricalMeasure
from .model import Model, _check_finite, single_particle_rewards
from .simulate import TRAIN, TimeGrid, gaussian_increments, stream

FORMAT = "mfstop-valuetable"
FORMAT_VERSION = 1


class LatticeError(ValueError):
    pass


class BoundaryLeakageWarning(UserWarning):
    pass


class ClampWarning(UserWarning):
    pass


class RegressionWarning(UserWarning):
    pass


# -- regimes ------------------------------------------------------------------

def regime_code(i) -> int:
    return int(sum(int(v) << k for k, v in enumerate(i)))


def regime_bits(code: int, N: int) -> np.ndarray:
    return np.array([(code >> k) & 1 for k in range(N)], dtype=np.int8)


def alive_set(code: int, N: int) -> list:
    return [k for k in range(N) if (code >> k) & 1]


def regimes_by_size(N: int, top: int | None = None) -> list:
    """Codes of all regimes below ``top`` (default: all alive), fewest alive first."""
    top = (1 << N) - 1 if top is None else top
    codes = [c for c in range(1 << N) if c & ~top == 0]
    return sorted(codes, key=lambda c: (bin(c).count("1"), c))


def sub_regimes(code: int) -> list:
    """All regimes ``i' <= i`` (including ``i`` itself), fewest alive first."""
    subs, s = [], code
    while True:
        subs.append(s)
        if s == 0:
            break
        s = (s - 1) & code
    return sorted(subs, key=lambda c: (bin(c).count("1"), c))


# -- spatial lattice ----------------------------------------------------------

@dataclass(frozen=True)
class SpatialGrid:
    x_min: float
    x_max: float
    n_x: int

    def __post_init__(self):
        if self.n_x < 2 or not self.x_min < self.x_max:
            raise LatticeError("spatial grid needs x_min < x_max and n_x >= 2")

    @property
    def h(self) -> float:
        return (self.x_max - self.x_min) / (self.n_x - 1)

    @property
    def nodes(self) -> np.ndarray:
        return self.x_min + self.h * np.arange(self.n_x)

    def refined(self, factor: int = 2) -> "SpatialGrid":
        return SpatialGrid(self.x_min, self.x_max, (self.n_x - 1) * factor + 1)


def tree_matched_grid(x0, sigma: float, grid: TimeGrid, margin: int = 0) -> SpatialGrid:
    """Lattice with step ``sigma sqrt(dt)`` that contains every state reachable from ``x0``.

    On this lattice the trinomial has zero middle weight, i.e. it is the
    two-point tree used by :func:`brute_force_value`.  ``margin`` adds extra
    nodes on both sides.
    """
    x0 = np.atleast_1d(np.asarray(x0, dtype=float)).ravel()
    h = sigma * np.sqrt(grid.dt)
    offsets = (x0 - x0.min()) / h
    if np.any(np.abs(offsets - np.round(offsets)) > 1e-9):
        raise LatticeError("initial positions are not on a common tree lattice")
    lo, hi = x0.min() - (grid.n_steps + margin) * h, x0.max() + (grid.n_steps + margin) * h
    return SpatialGrid(lo, hi, int(round((hi - lo) / h)) + 1)


def trinomial(drift, var, h: float, dt: float):
    """Down/middle/up weights matching mean ``drift dt`` and variance ``var dt`` to first order.

    Returns ``(pd, pm, pu, n_clipped)``.  Raises when ``var dt > h^2``.
    """
    a = var * dt / (2.0 * h * h)
    if np.any(2.0 * a > 1.0 + 1e-12):
        raise LatticeError(
            f"step-size guard violated: dt * sigma^2 = {np.max(var) * dt:.3g} > h^2 = {h * h:.3g}"
        )
    c = drift * dt / (2.0 * h)
    pu, pd = a + c, a - c
    clipped = int(np.count_nonzero((pu < 0) | (pd < 0)))
    pu, pd = np.clip(pu, 0.0, 1.0), np.clip(pd, 0.0, 1.0)
    pm = np.clip(1.0 - pu - pd, 0.0, 1.0)
    total = pu + pm + pd
    return pd / total, pm / total, pu / total, clipped


def _shift(u: np.ndarray, axis: int, offset: int) -> np.ndarray:
    n = u.shape[axis]
    idx = np.clip(np.arange(n) + offset, 0, n - 1)
    return np.take(u, idx, axis=axis)


def _expectation(u: np.ndarray, probs: dict) -> np.ndarray:
    """``E[u(next)]`` under independent trinomial moves along the axes in ``probs``.

    Moves past the lattice edge stay on the boundary node.
    """
    axes = sorted(probs)
    out = np.zeros_like(u)
    for offs in itertools.product((-1, 0, 1), repeat=len(axes)):
        weight = 1.0
        shifted = u
        for ax, o in zip(axes, offs):
            weight = weight * probs[ax][o + 1]
            if o:
                shifted = _shift(shifted, ax, o)
        out += weight * shifted
    return out


# -- tables -------------------------------------------------------------------

@dataclass
class ValueTable:
    backend: str
    grid: TimeGrid
    N: int
    model_name: str
    model_params: dict
    warnings: list = field(default_factory=list)
    clamp_count: int = 0

    def value_at_batch(self, node: int, X: np.ndarray, codes: np.ndarray, clamp_tol: float = np.inf):
        raise NotImplementedError

    def drop_values(self, node: int, X: np.ndarray, codes: np.ndarray, clamp_tol: float = np.inf):
        """Values at the current regimes and at every single-index drop.

        Returns ``(current (R,), drops (R, N))``; ``drops[:, k]`` is ``-inf`` when
        particle ``k`` is already stopped.
        """
        R = len(codes)
        cur = self.value_at_batch(node, X, codes, clamp_tol)
        drops = np.full((R, self.N), -np.inf)
        for k in range(self.N):
            has = (codes >> k) & 1 == 1
            if np.any(has):
                drops[has, k] = self.value_at_batch(node, X[has], codes[has] ^ (1 << k), clamp_tol)
        return cur, drops


def _grid_configurations(sgrid: SpatialGrid, N: int) -> np.ndarray:
    mesh = np.meshgrid(*([sgrid.nodes] * N), indexing="ij")
    return np.stack([g.ravel() for g in mesh], axis=-1)[..., None]  # (G, N, 1)


@dataclass
class LatticeTable(ValueTable):
    sgrid: SpatialGrid = None
    values: np.ndarray = None  # (n_nodes, 2^N, n_x, ..., n_x)
    max_exit_prob: float = 0.0

    def value_at_batch(self, node, X, codes, clamp_tol=np.inf):
        X = np.asarray(X, dtype=float)
        if X.ndim == 3:
            X = X[..., 0]
        codes = np.asarray(codes, dtype=np.int64)
        g = self.sgrid
        span = g.x_max - g.x_min
        below, above = g.x_min - X, X - g.x_max
        outside = (below > 1e-12 * span) | (above > 1e-12 * span)
        if np.any(outside):
            excess = float(np.max(np.maximum(below, above)))
            if excess > clamp_tol * span:
                raise LatticeError(f"query {excess:.3g} beyond lattice bounds exceeds clamp tolerance")
            self.clamp_count += int(np.count_nonzero(np.any(outside, axis=-1)))
        u = np.clip((X - g.x_min) / g.h, 0.0, g.n_x - 1)
        j0 = np.minimum(np.floor(u).astype(np.int64), g.n_x - 2)
        lam = u - j0
        table = self.values[node]
        out = np.zeros(len(codes))
        for corner in itertools.product((0, 1), repeat=self.N):
            c = np.array(corner)
            wgt = np.prod(np.where(c == 1, lam, 1.0 - lam), axis=-1)
            idx = (codes,) + tuple(j0[:, k] + c[k] for k in range(self.N))
            out += wgt * table[idx]
        return out

    def interp_error_estimate(self) -> float:
        """Typical linear-interpolation error of the stopping gap ``u(i) - max_k u(i^{-k})``.

        Median over lattice points (where the gap is curved) of
        ``max_axis |second difference| / 8``.
        """
        vals = []
        V = self.values
        for code in range(1, 1 << self.N):
            obst = np.max([V[:-1, code ^ (1 << k)] for k in alive_set(code, self.N)], axis=0)
            gap = V[:-1, code] - obst
            for ax in range(1, self.N + 1):
                d2 = np.abs(np.diff(gap, n=2, axis=ax)) / 8.0
                vals.append(d2[d2 > 1e-14].ravel())
        vals = np.concatenate(vals) if vals else np.zeros(1)
        return float(np.median(vals)) if vals.size else 0.0


def solve_single(model: Model, grid: TimeGrid, sgrid: SpatialGrid):
    """One-particle stopping value on a 1-d lattice.

    Returns ``(alive, stopped)`` with ``alive`` of shape (n_nodes, n_x) and
    ``stopped`` the payoff ``g-bar`` on the lattice.
    """
    if model.coupled:
        raise ValueError("solve_single needs an uncoupled model")
    if model.dim != 1:
        raise ValueError("the lattice backend is one-dimensional")
    x = sgrid.nodes[:, None]
    n, dt, h = grid.n_steps, grid.dt, sgrid.h
    _, gbar = single_particle_rewards(model, grid.t0, x)
    v = np.empty((n + 1, sgrid.n_x))
    v[n] = gbar
    leak = np.zeros(sgrid.n_x)
    mass = np.eye(sgrid.n_x)  # row j: distribution started from node j
    m_alive = EmpiricalMeasure._trusted(x[:, None, :], np.ones((sgrid.n_x, 1), np.int8), np.ones((sgrid.n_x, 1)))
    for t in reversed(range(n)):
        tt = grid.times[t]
        f0 = np.asarray(model.running(tt, m_alive.x, m_alive))[:, 0]
        b = np.asarray(model.drift(tt, m_alive.x, m_alive))[:, 0, 0]
        var = np.asarray(model.diffusion(tt, m_alive.x, m_alive))[:, 0, 0, 0] ** 2
        pd, pm, pu, _ = trinomial(b, var, h, dt)
        cont = f0 * dt + (pd * _shift(v[t + 1], 0, -1) + pm * v[t + 1] + pu * _shift(v[t + 1], 0, 1))
        v[t] = np.maximum(gbar, cont)
    for t in range(n):
        tt = grid.times[t]
        b = np.asarray(model.drift(tt, m_alive.x, m_alive))[:, 0, 0]
        var = np.asarray(model.diffusion(tt, m_alive.x, m_alive))[:, 0, 0, 0] ** 2
        pd, pm, pu, _ = trinomial(b, var, h, dt)
        leak += mass[:, 0] * pd[0] + mass[:, -1] * pu[-1]
        new = mass * pm
        new[:, :-1] += mass[:, 1:] * pd[1:]
        new[:, 1:] += mass[:, :-1] * pu[:-1]
        new[:, 0] += mass[:, 0] * pd[0]
        new[:, -1] += mass[:, -1] * pu[-1]
        mass = new
    core = slice(sgrid.n_x // 4, sgrid.n_x - sgrid.n_x // 4)
    worst = float(leak[core].max()) if sgrid.n_x >= 4 else float(leak.max())
    if worst > 1e-4:
        warnings.warn(f"lattice too narrow: up to {worst:.2e} of the mass started in the central half "
                      "reaches the boundary", BoundaryLeakageWarning)
    return v, gbar


def _solve_lattice(model: Model, N: int, grid: TimeGrid, sgrid: SpatialGrid, memory_budget: float) -> LatticeTable:
    if model.dim != 1:
        raise LatticeError("the lattice backend is one-dimensional")
    size = float(sgrid.n_x) ** N * 2 ** N * (grid.n_steps + 1)
    if size > memory_budget:
        raise LatticeError(f"lattice table of {size:.3g} entries exceeds the budget {memory_budget:.3g}")
    n, dt, h = grid.n_steps, grid.dt, sgrid.h
    shape = (sgrid.n_x,) * N
    X = _grid_configurations(sgrid, N)
    G = X.shape[0]
    w = np.full((G, N), 1.0 / N)
    V = np.empty((n + 1, 1 << N) + shape)
    gN = _check_finite(np.asarray(model.terminal(EmpiricalMeasure._trusted(X, np.zeros((G, N), np.int8), w))),
                       "terminal reward").reshape(shape)
    clipped, exit_prob = 0, 0.0
    for code in regimes_by_size(N):
        V[n, code] = gN
        if code == 0:
            V[:, 0] = gN
            continue
        alive = alive_set(code, N)
        ind = np.broadcast_to(regime_bits(code, N), (G, N))
        m = EmpiricalMeasure._trusted(X, ind, w)
        for t in reversed(range(n)):
            tt = grid.times[t]
            f = _check_finite(np.asarray(model.running(tt, X, m)), "running reward")
            b = np.asarray(model.drift(tt, X, m))[..., 0]
            var = np.asarray(model.diffusion(tt, X, m))[..., 0, 0] ** 2
            run = f[:, alive].sum(axis=-1) * dt / N
            probs = {}
            for k in alive:
                pd, pm, pu, c = trinomial(b[:, k], var[:, k], h, dt)
                clipped += c
                probs[k] = (pd.reshape(shape), pm.reshape(shape), pu.reshape(shape))
                edge_lo = np.take(probs[k][0], 0, axis=k)
                edge_hi = np.take(probs[k][2], sgrid.n_x - 1, axis=k)
                exit_prob = max(exit_prob, float(edge_lo.max()), float(edge_hi.max()))
            cont = run.reshape(shape) + _expectation(V[t + 1, code], probs)
            obstacle = np.max([V[t, code ^ (1 << k)] for k in alive], axis=0)
            V[t, code] = np.maximum(obstacle, cont)
    table = LatticeTable("Lattice", grid, N, model.name, dict(model.params), sgrid=sgrid, values=V,
                         max_exit_prob=exit_prob)
    if clipped:
        table.warnings.append(f"trinomial weights clipped at {clipped} lattice points")
    return table


# -- regression Monte Carlo ---------------------------------------------------

def _base_design(X: np.ndarray, degree: int, payoff: np.ndarray) -> np.ndarray:
    """Regime-independent columns: 1, powers ``1..degree`` of every coordinate, payoff features."""
    M = X.shape[0]
    flat = X.reshape(M, -1)
    return np.concatenate([np.ones((M, 1))] + [flat ** p for p in range(1, degree + 1)] + [payoff], axis=1)


def _mean_column(X: np.ndarray, code: int, N: int) -> np.ndarray | None:
    """``|alive mean|^2`` (mass-weighted, not renormalised) when two or more particles are alive."""
    alive = alive_set(code, N)
    if len(alive) < 2:
        return None
    return np.sum((X[:, alive, :].sum(axis=1) / N) ** 2, axis=-1)


def _basis(X: np.ndarray, code: int, N: int, degree: int, payoff: np.ndarray) -> np.ndarray:
    """Design matrix: :func:`_base_design` plus ``|alive mean|^2``.

    ``X`` has shape (M, N, d); ``payoff`` (M, N) comes from :func:`_payoff_features`.
    """
    base = _base_design(X, degree, payoff)
    extra = _mean_column(X, code, N)
    return base if extra is None else np.concatenate([base, extra[:, None]], axis=1)


def _payoff_features(terminal_fn, X: np.ndarray) -> np.ndarray:
    """Terminal reward of each particle alone, stopped: ``g(delta_(x_k, 0))``.

    Frozen particles contribute exactly this for additive rewards, and its
    kinks are not captured by polynomials.
    """
    M, N, d = X.shape
    single = EmpiricalMeasure._trusted(X.reshape(M * N, 1, d), np.zeros((M * N, 1), np.int8), np.ones((M * N, 1)))
    return np.asarray(terminal_fn(single), dtype=float).reshape(M, N)


def _fit(A: np.ndarray, y: np.ndarray, cond_limit: float, ridge: float):
    """Least squares on standardised columns; ridge when badly conditioned.

    Returns ``(coef, shift, scale, used_ridge)`` for ``pred = ((A - shift)/scale) @ coef``.
    """
    shift = A.mean(axis=0)
    scale = A.std(axis=0)
    shift[0], scale[0] = 0.0, 1.0
    live = scale > 1e-12 * np.maximum(1.0, np.abs(shift))
    live[0] = True
    scale = np.where(live, scale, 1.0)
    Z = (A - shift) / scale
    Z[:, ~live] = 0.0
    Zl = Z[:, live]
    s = np.linalg.svd(Zl, compute_uv=False)
    cond = s[0] / max(s[-1], 1e-300)
    coef = np.zeros(A.shape[1])
    if cond > cond_limit:
        lam = ridge * float(s[0] ** 2)
        coef[live] = np.linalg.solve(Zl.T @ Zl + lam * np.eye(Zl.shape[1]), Zl.T @ y)
        return coef, shift, scale, True
    coef[live] = np.linalg.lstsq(Zl, y, rcond=None)[0]
    return coef, shift, scale, False


@dataclass
class LSMCTable(ValueTable):
    top: int = 0
    degree: int = 2
    coef: dict = field(default_factory=dict)  # (node, code) -> (coef, shift, scale)
    terminal_fn: object = None
    ridge_fits: int = 0

    def continuation(self, node: int, X: np.ndarray, code: int, payoff: np.ndarray | None = None,
                     base: np.ndarray | None = None) -> np.ndarray:
        if base is None:
            base = _base_design(X, self.degree, _payoff_features(self.terminal_fn, X) if payoff is None else payoff)
        c, shift, scale = self.coef[(node, code)]
        w = c / scale
        k = base.shape[1]
        out = base @ w[:k] - shift[:k] @ w[:k]
        extra = _mean_column(X, code, self.N)
        if extra is not None:
            out = out + (extra - shift[k]) * w[k]
        return out

    def regime_values(self, node: int, X: np.ndarray, code: int) -> dict:
        """Values of every regime ``i' <= code`` at the points ``X`` (M, N, d)."""
        M = X.shape[0]
        w = np.full((M, self.N), 1.0 / self.N)
        gN = np.asarray(self.terminal_fn(EmpiricalMeasure._trusted(X, np.zeros((M, self.N), np.int8), w)))
        base = None
        if node < self.grid.n_steps:
            base = _base_design(X, self.degree, _payoff_features(self.terminal_fn, X))
        vals = {}
        for sub in sub_regimes(code):
            if sub == 0 or node == self.grid.n_steps:
                vals[sub] = gN
                continue
            obstacle = np.max([vals[sub ^ (1 << k)] for k in alive_set(sub, self.N)], axis=0)
            vals[sub] = np.maximum(obstacle, self.continuation(node, X, sub, base=base))
        return vals

    def drop_values(self, node, X, codes, clamp_tol=np.inf):
        X = np.asarray(X, dtype=float)
        codes = np.asarray(codes, dtype=np.int64)
        cur = np.empty(len(codes))
        drops = np.full((len(codes), self.N), -np.inf)
        for code in np.unique(codes):
            sel = codes == code
            vals = self.regime_values(node, X[sel], int(code))
            cur[sel] = vals[int(code)]
            for k in alive_set(int(code), self.N):
                drops[sel, k] = vals[int(code) ^ (1 << k)]
        return cur, drops

    def value_at_batch(self, node, X, codes, clamp_tol=np.inf):
        X = np.asarray(X, dtype=float)
        if X.ndim == 2:
            X = X[..., None]
        codes = np.asarray(codes, dtype=np.int64)
        out = np.empty(len(codes))
        for code in np.unique(codes):
            sel = codes == code
            out[sel] = self.regime_values(node, X[sel], int(code))[int(code)]
        return out


def _solve_lsmc(model: Model, N: int, grid: TimeGrid, y0, n_paths: int, seed: int,
                degree: int, cond_limit: float, ridge: float) -> LSMCTable:
    """Regression on cross-sections of the unstopped system started at ``y0``.

    For each node and regime the continuation ``running + u(next, regime)`` is
    sampled by one Euler step from the cross-section and regressed on the
    basis.  Values are rebuilt on demand as ``max(obstacle, continuation)``.
    """
    from .simulate import propagate, _as_states, _fixed_decider, NEVER

    x0, i0 = _as_states(y0)
    if len(i0) != N:
        raise ValueError("y0 must describe N particles")
    d = x0.shape[1]
    top = regime_code(i0)
    noise = gaussian_increments(seed, grid.n_steps, d, n_paths, np.arange(N), purpose=TRAIN)
    nodes = np.full((n_paths, N), NEVER, dtype=np.int64)
    xs, _, _, _ = propagate(model, grid, np.broadcast_to(x0, (n_paths, N, d)),
                            np.broadcast_to(i0, (n_paths, N)), noise, _fixed_decider(nodes, i0))
    table = LSMCTable("LSMC", grid, N, model.name, dict(model.params), top=top, degree=degree,
                      terminal_fn=model.terminal)
    n, dt = grid.n_steps, grid.dt
    w = np.full((n_paths, N), 1.0 / N)
    for t in reversed(range(n)):
        x = xs[:, t]
        xi = stream(seed, TRAIN, 10_000 + t, 0).standard_normal((n_paths, N, d))
        tt = grid.times[t]
        payoff = _payoff_features(model.terminal, x)
        for code in regimes_by_size(N, top):
            if code == 0:
                continue
            ind = np.broadcast_to(regime_bits(code, N), (n_paths, N))
            m = EmpiricalMeasure._trusted(x, ind, w)
            f = _check_finite(np.asarray(model.running(tt, x, m)), "running reward")
            run = np.sum(f * ind, axis=-1) * dt / N
            b = model.drift(tt, x, m)
            sig = model.diffusion(tt, x, m)
            nxt = x + ind[..., None] * (b * dt + np.einsum("...ij,...j->...i", sig, xi) * np.sqrt(dt))
            target = run + table.regime_values(t + 1, nxt, code)[code]
            coef, shift, scale, used_ridge = _fit(_basis(x, code, N, degree, payoff), target, cond_limit, ridge)
            table.coef[(t, code)] = (coef, shift, scale)
            table.ridge_fits += int(used_ridge)
    if table.ridge_fits:
        msg = f"{table.ridge_fits} ill-conditioned regressions solved with ridge fallback"
        table.warnings.append(msg)
        warnings.warn(msg, RegressionWarning)
    return table


def solve_cascade(model: Model, N: int, grid: TimeGrid, backend: str = "Lattice", **params) -> ValueTable:
    """Value of the N-player multiple stopping problem on every regime.

    Lattice parameters: ``sgrid`` (:class:`SpatialGrid`), ``memory_budget``.
    LSMC parameters: ``y0``, ``n_paths``, ``seed``, ``degree``, ``cond_limit``, ``ridge``.
    """
    if backend == "Lattice":
        return _solve_lattice(model, N, grid, params["sgrid"], params.get("memory_budget", 6e7))
    if backend == "LSMC":
        return _solve_lsmc(model, N, grid, params["y0"], params.get("n_paths", 4000), params["seed"],
                           params.get("degree", 2), params.get("cond_limit", 1e8), params.get("ridge", 1e-8))
    raise ValueError(f"unknown backend {backend!r}")


def value_at(table: ValueTable, node: int, y, clamp_tol: float = 0.05) -> float:
    """``v^N(t_node, y)`` for one state ``y = (x, i)``; interpolated on the lattice.

    Queries outside the lattice are clamped (and counted) up to ``clamp_tol``
    times the lattice width; farther queries raise.
    """
    x, i = y
    x = np.asarray(x, dtype=float).reshape(1, table.N, -1)
    before = table.clamp_count
    v = table.value_at_batch(node, x, np.array([regime_code(i)]), clamp_tol)
    if table.clamp_count > before:
        warnings.warn("value query clamped to the lattice", ClampWarning)
    return float(v[0])


# -- brute force oracle -------------------------------------------------------

def brute_force_value(model: Model, grid: TimeGrid, y0, *, max_particles: int = 2, max_steps: int = 4) -> float:
    """Best discrete objective over all history-dependent stopping profiles.

    The noise is a two-point tree: an alive particle moves by ``+/- sigma sqrt(dt)``
    with probabilities ``1/2 +/- b dt / (2 sigma sqrt(dt))`` (deterministically by
    ``b dt`` when ``sigma = 0``).  At each tree node every subset of alive
    particles may be stopped.  Only meant for tiny instances.
    """
    x0, i0 = y0
    x0 = np.asarray(x0, dtype=float).ravel()
    i0 = tuple(int(v) for v in i0)
    N, n, dt = len(i0), grid.n_steps, grid.dt
    if model.dim != 1 or N > max_particles or n > max_steps:
        raise ValueError(f"brute force limited to d=1, N<={max_particles}, n_steps<={max_steps}")
    w = np.full(N, 1.0 / N)

    def measure(x, ind):
        return EmpiricalMeasure._trusted(np.asarray(x)[:, None], np.asarray(ind, np.int8), w)

    def subsets(ind):
        alive = [k for k in range(N) if ind[k]]
        for keep in itertools.product((0, 1), repeat=len(alive)):
            sub = [0] * N
            for k, kk in zip(alive, keep):
                sub[k] = kk
            yield tuple(sub)

    def value(s, x, ind):
        if s == n:
            return float(model.terminal(measure(x, ind)))
        return max(continuation(s, x, sub) for sub in subsets(ind))

    def continuation(s, x, ind):
        t = grid.times[s]
        m = measure(x, ind)
        xa = np.asarray(x)[:, None]
        f = np.asarray(model.running(t, xa, m))
        b = np.asarray(model.drift(t, xa, m))[:, 0]
        sig = np.asarray(model.diffusion(t, xa, m))[:, 0, 0]
        run = sum(f[k] for k in range(N) if ind[k]) * dt / N
        moves = []
        for k in range(N):
            if not ind[k]:
                moves.append([(x[k], 1.0)])
            elif sig[k] == 0.0:
                moves.append([(x[k] + b[k] * dt, 1.0)])
            else:
                step = sig[k] * np.sqrt(dt)
                p_up = 0.5 + b[k] * dt / (2.0 * step)
                if not 0.0 <= p_up <= 1.0:
                    raise ValueError(f"drift too large for the two-point tree at node {s}")
                moves.append([(x[k] + step, p_up), (x[k] - step, 1.0 - p_up)])
        expect = 0.0
        for outcome in itertools.product(*moves):
            prob = float(np.prod([pr for _, pr in outcome]))
            if prob:
                expect += prob * value(s + 1, tuple(v for v, _ in outcome), ind)
        return run + expect

    return value(0, tuple(x0), i0)


# -- serialisation ------------------------------------------------------------

def save_table(table: ValueTable, path) -> None:
    """Binary blob (``.npz``) with a JSON header describing backend, grids and regime map."""
    header = {
        "format": FORMAT,
        "version": FORMAT_VERSION,
        "backend": table.backend,
        "grid": [table.grid.t0, table.grid.T, table.grid.n_steps],
        "N": table.N,
        "regimes": {str(c): regime_bits(c, table.N).tolist() for c in range(1 << table.N)},
        "model": {"name": table.model_name, "params": table.model_params},
    }
    arrays = {}
    if isinstance(table, LatticeTable):
        header["sgrid"] = [table.sgrid.x_min, table.sgrid.x_max, table.sgrid.n_x]
        arrays["values"] = table.values
    else:
        header.update(top=table.top, degree=table.degree)
        keys = sorted(table.coef)
        header["coef_keys"] = [list(k) for k in keys]
        for j, k in enumerate(keys):
            c, sh, sc = table.coef[k]
            arrays[f"coef_{j}"] = np.stack([c, sh, sc])
    arrays["header"] = np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_table(path, model: Model | None = None) -> ValueTable:
    """Inverse of :func:`save_table`.  LSMC tables need the model for terminal rewards."""
    with np.load(path) as data:
        header = json.loads(bytes(data["header"]).decode())
        if header.get("format") != FORMAT or header.get("version") != FORMAT_VERSION:
            raise ValueError(f"unsupported value table format {header.get('format')} v{header.get('version')}")
        grid = TimeGrid(*header["grid"])
        common = dict(grid=grid, N=header["N"], model_name=header["model"]["name"],
                      model_params=header["model"]["params"])
        if model is not None and (model.name != common["model_name"]
                                  or json.loads(json.dumps(model.params)) != common["model_params"]):
            raise ValueError(f"table was solved for {common['model_name']} {common['model_params']}, "
                             f"not {model.name} {model.params}")
        if header["backend"] == "Lattice":
            return LatticeTable("Lattice", sgrid=SpatialGrid(*header["sgrid"]), values=data["values"], **common)
        if model is None:
            raise ValueError("loading an LSMC table requires the model")
        coef = {tuple(k): tuple(data[f"coef_{j}"]) for j, k in enumerate(header["coef_keys"])}
        return LSMCTable("LSMC", top=header["top"], degree=header["degree"], coef=coef,
                         terminal_fn=model.terminal, **common)
