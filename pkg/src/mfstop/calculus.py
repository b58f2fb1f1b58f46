"""Cylinder functionals of measures on S and their derivatives.

A cylinder functional is ``U(t, m) = G(t, z)`` with ``z_j = int h_j dm``.  Its
linear derivative is ``dU(t, m, y) = sum_j dG/dz_j h_j(y)`` and its second
measure derivative (alive/alive block) is
``sum_{j,l} d2G/dz_j dz_l  grad h_j(x, 1) (x) grad h_l(x~, 1)``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .measures import EmpiricalMeasure
from .model import Model, eval_F
from .simulate import INIT, Never, TimeGrid, resample, simulate_system, stream


@dataclass(frozen=True)
class Inner:
    """Test function ``h(x, i)`` with its x-gradient and x-Hessian.

    All three are vectorised over ``x`` of shape (..., d) and ``i`` of shape (...).
    """

    value: Callable
    grad: Callable
    hess: Callable


@dataclass(frozen=True)
class CylinderFunctional:
    """``U(t, m) = G(t, int h_1 dm, ..., int h_p dm)``.

    ``G(t, z)``, ``dG(t, z) -> (p,)``, ``d2G(t, z) -> (p, p)`` and
    ``dGdt(t, z)`` act on a single vector ``z``.
    """

    G: Callable
    dG: Callable
    d2G: Callable
    inners: tuple
    dGdt: Callable | None = None
    name: str = "custom"

    def moments(self, m: EmpiricalMeasure) -> np.ndarray:
        return np.array([m.integral(h.value(m.x, m.i)) for h in self.inners])

    def __call__(self, t: float, m: EmpiricalMeasure) -> float:
        return float(self.G(t, self.moments(m)))

    def time_derivative(self, t: float, m: EmpiricalMeasure) -> float:
        return 0.0 if self.dGdt is None else float(self.dGdt(t, self.moments(m)))

    def linear_derivative(self, t, m, x, i) -> np.ndarray:
        """``dU/dm(t, m, (x, i))`` for points ``x`` (..., d), indicators ``i`` (...)."""
        g = self.dG(t, self.moments(m))
        return sum(g[j] * h.value(x, i) for j, h in enumerate(self.inners))

    def linear_derivative_grad(self, t, m, x, i) -> np.ndarray:
        g = self.dG(t, self.moments(m))
        return sum(g[j] * h.grad(x, i) for j, h in enumerate(self.inners))

    def linear_derivative_hess(self, t, m, x, i) -> np.ndarray:
        g = self.dG(t, self.moments(m))
        return sum(g[j] * h.hess(x, i) for j, h in enumerate(self.inners))

    def measure_hessian(self, t, m, x, i, xt, it) -> np.ndarray:
        """Second measure derivative between ``(x, i)`` and ``(xt, it)``; shape (..., d, d)."""
        H = self.d2G(t, self.moments(m))
        out = 0.0
        for j, hj in enumerate(self.inners):
            gj = hj.grad(x, i)
            for l, hl in enumerate(self.inners):
                if H[j, l] != 0.0:
                    out = out + H[j, l] * gj[..., :, None] * hl.grad(xt, it)[..., None, :]
        if np.isscalar(out):
            d = np.shape(x)[-1]
            out = np.zeros(np.shape(x)[:-1] + (d, d))
        return out


# -- built-in functionals -------------------------------------------------------

def _zeros_like_grad(x):
    return np.zeros(np.shape(x))


def _zeros_like_hess(x):
    d = np.shape(x)[-1]
    return np.zeros(np.shape(x)[:-1] + (d, d))


def _e1(x):
    e = np.zeros(np.shape(x))
    e[..., 0] = 1.0
    return e


ALIVE_X1 = Inner(
    value=lambda x, i: x[..., 0] * i,
    grad=lambda x, i: _e1(x) * np.asarray(i)[..., None],
    hess=lambda x, i: _zeros_like_hess(x),
)

ALIVE_SQUARE = Inner(
    value=lambda x, i: np.sum(x ** 2, axis=-1) * i,
    grad=lambda x, i: 2.0 * x * np.asarray(i)[..., None],
    hess=lambda x, i: 2.0 * np.eye(np.shape(x)[-1]) * np.asarray(i)[..., None, None],
)

ALIVE_COS = Inner(
    value=lambda x, i: np.cos(x[..., 0]) * i,
    grad=lambda x, i: -np.sin(x[..., 0])[..., None] * _e1(x) * np.asarray(i)[..., None],
    hess=lambda x, i: _hess_e1(-np.cos(x[..., 0]) * i, x),
)

GAUSS_BUMP = Inner(
    value=lambda x, i: np.exp(-0.5 * np.sum(x ** 2, axis=-1)),
    grad=lambda x, i: -x * np.exp(-0.5 * np.sum(x ** 2, axis=-1))[..., None],
    hess=lambda x, i: (x[..., :, None] * x[..., None, :] - np.eye(np.shape(x)[-1]))
    * np.exp(-0.5 * np.sum(x ** 2, axis=-1))[..., None, None],
)

CONSTANT_ONE = Inner(
    value=lambda x, i: np.ones(np.shape(x)[:-1]),
    grad=lambda x, i: _zeros_like_grad(x),
    hess=lambda x, i: _zeros_like_hess(x),
)


def _hess_e1(coef, x):
    out = _zeros_like_hess(x)
    out[..., 0, 0] = coef
    return out


def alive_mean() -> CylinderFunctional:
    """``int x_1 m(dx, 1)``."""
    return CylinderFunctional(
        G=lambda t, z: z[0], dG=lambda t, z: np.array([1.0]), d2G=lambda t, z: np.zeros((1, 1)),
        inners=(ALIVE_X1,), name="alive_mean",
    )


def alive_mean_squared() -> CylinderFunctional:
    """``(int x_1 m(dx, 1))^2``."""
    return CylinderFunctional(
        G=lambda t, z: z[0] ** 2, dG=lambda t, z: np.array([2.0 * z[0]]), d2G=lambda t, z: np.array([[2.0]]),
        inners=(ALIVE_X1,), name="alive_mean_squared",
    )


def alive_second_moment() -> CylinderFunctional:
    """``int |x|^2 m(dx, 1)``."""
    return CylinderFunctional(
        G=lambda t, z: z[0], dG=lambda t, z: np.array([1.0]), d2G=lambda t, z: np.zeros((1, 1)),
        inners=(ALIVE_SQUARE,), name="alive_second_moment",
    )


def decaying_product() -> CylinderFunctional:
    """``exp(-t) z1 z2 + sin(z1)`` with ``z1 = int cos(x_1) m(dx, 1)``, ``z2 = int |x|^2 m(dx, 1)``."""

    def G(t, z):
        return np.exp(-t) * z[0] * z[1] + np.sin(z[0])

    def dG(t, z):
        return np.array([np.exp(-t) * z[1] + np.cos(z[0]), np.exp(-t) * z[0]])

    def d2G(t, z):
        c = np.exp(-t)
        return np.array([[-np.sin(z[0]), c], [c, 0.0]])

    return CylinderFunctional(G, dG, d2G, (ALIVE_COS, ALIVE_SQUARE),
                              dGdt=lambda t, z: -np.exp(-t) * z[0] * z[1], name="decaying_product")


def log_bump() -> CylinderFunctional:
    """``log(1 + int exp(-|x|^2/2) dm)``; reads only the x-marginal."""
    return CylinderFunctional(
        G=lambda t, z: np.log1p(z[0]),
        dG=lambda t, z: np.array([1.0 / (1.0 + z[0])]),
        d2G=lambda t, z: np.array([[-1.0 / (1.0 + z[0]) ** 2]]),
        inners=(GAUSS_BUMP,), name="log_bump",
    )


def constant(c: float = 1.0) -> CylinderFunctional:
    return CylinderFunctional(
        G=lambda t, z: c, dG=lambda t, z: np.zeros(1), d2G=lambda t, z: np.zeros((1, 1)),
        inners=(CONSTANT_ONE,), name="constant",
    )


BUILTIN_FUNCTIONALS = {
    "alive_mean": alive_mean,
    "alive_mean_squared": alive_mean_squared,
    "alive_second_moment": alive_second_moment,
    "decaying_product": decaying_product,
    "log_bump": log_bump,
}


# -- projection onto N particles -----------------------------------------------

@dataclass(frozen=True)
class Projection:
    """``phi(t, x, i) = U(t, m^N(x, i))`` with derivatives assembled from ``U``."""

    U: CylinderFunctional
    N: int

    def measure(self, x, i) -> EmpiricalMeasure:
        x = np.asarray(x, dtype=float).reshape(self.N, -1)
        return EmpiricalMeasure.uniform(x, np.asarray(i, dtype=np.int8))

    def __call__(self, t, x, i) -> float:
        return self.U(t, self.measure(x, i))

    def grad(self, t, x, i) -> np.ndarray:
        """``d phi / d x_k = (1/N) grad_x dU/dm(x_k, i_k)``; shape (N, d)."""
        m = self.measure(x, i)
        return self.U.linear_derivative_grad(t, m, m.x, m.i) / self.N

    def hess_blocks(self, t, x, i) -> np.ndarray:
        """Diagonal blocks ``d2 phi / dx_k dx_k``; shape (N, d, d)."""
        m = self.measure(x, i)
        first = self.U.linear_derivative_hess(t, m, m.x, m.i) / self.N
        second = self.U.measure_hessian(t, m, m.x, m.i, m.x, m.i) / self.N ** 2
        return first + second


def project(U: CylinderFunctional, N: int) -> Projection:
    return Projection(U, N)


def check_projection_derivatives(U: CylinderFunctional, N: int, t: float, y, h_fd: float = 1e-4) -> float:
    """Worst relative gap between central differences of the projection and the analytic formulas.

    Relative error is ``|fd - exact| / max(|exact|, 1)``, taken over the
    gradient and the diagonal Hessian block of every alive particle.
    """
    x, i = y
    x = np.asarray(x, dtype=float).reshape(N, -1)
    i = np.asarray(i, dtype=np.int8)
    phi = project(U, N)
    d = x.shape[1]
    grad, hess = phi.grad(t, x, i), phi.hess_blocks(t, x, i)
    worst = 0.0

    def at(k, a, da, b=None, db=0.0):
        z = x.copy()
        z[k, a] += da
        if b is not None:
            z[k, b] += db
        return phi(t, z, i)

    base = phi(t, x, i)
    for k in np.flatnonzero(i == 1):
        for a in range(d):
            fd = (at(k, a, h_fd) - at(k, a, -h_fd)) / (2 * h_fd)
            worst = max(worst, abs(fd - grad[k, a]) / max(abs(grad[k, a]), 1.0))
            for b in range(d):
                if a == b:
                    fd2 = (at(k, a, h_fd) - 2 * base + at(k, a, -h_fd)) / h_fd ** 2
                else:
                    fd2 = (at(k, a, h_fd, b, h_fd) - at(k, a, h_fd, b, -h_fd)
                           - at(k, a, -h_fd, b, h_fd) + at(k, a, -h_fd, b, -h_fd)) / (4 * h_fd ** 2)
                worst = max(worst, abs(fd2 - hess[k, a, b]) / max(abs(hess[k, a, b]), 1.0))
    return float(worst)


def projection_sweep(names, Ns, states: int, seed: int, *, dim: int = 1, h_fd: float = 1e-4,
                     t_range=(0.0, 1.0)) -> list:
    """Worst :func:`check_projection_derivatives` gap per (functional, N) over random all-alive states.

    Returns rows ``(name, N, states, worst)``; state draws are keyed by ``(seed, N, functional)``.
    """
    order = sorted(BUILTIN_FUNCTIONALS)
    rows = []
    for name in names:
        U = BUILTIN_FUNCTIONALS[name]()
        for N in Ns:
            rng = stream(seed, 20, N, order.index(name))
            worst = 0.0
            for _ in range(states):
                x = rng.standard_normal((N, dim))
                t = float(rng.uniform(*t_range))
                worst = max(worst, check_projection_derivatives(U, N, t, (x, np.ones(N, np.int8)), h_fd))
            rows.append((name, int(N), int(states), worst))
    return rows


# -- generator and stopping term ---------------------------------------------

def generator(U: CylinderFunctional, model: Model, t: float, m: EmpiricalMeasure) -> float:
    """``dU/dt + int (b . grad dU + 1/2 sigma sigma^T : hess dU)(x, 1) m(dx, 1)``."""
    xs = m.x
    ones = np.ones(xs.shape[:-1], dtype=np.int8)
    b = np.asarray(model.drift(t, xs, m))
    sig = np.asarray(model.diffusion(t, xs, m))
    a = np.einsum("...ij,...kj->...ik", sig, sig)
    g = U.linear_derivative_grad(t, m, xs, ones)
    H = U.linear_derivative_hess(t, m, xs, ones)
    local = np.sum(b * g, axis=-1) + 0.5 * np.einsum("...ij,...ij->...", a, H)
    return U.time_derivative(t, m) + float(m.alive_integral(local))


def evaluate_generator(U: CylinderFunctional, model: Model, t: float, m: EmpiricalMeasure) -> float:
    """Generator of the measure flow applied to ``U``, plus the running reward ``F(t, m)``."""
    return generator(U, model, t, m) + float(eval_F(model, t, m))


def evaluate_DI(U: CylinderFunctional, t: float, m: EmpiricalMeasure) -> float:
    """Smallest stopping increment ``dU(x, 1) - dU(x, 0)`` over alive atoms (``inf`` if none)."""
    alive = (m.i == 1) & (m.w > 0)
    if not np.any(alive):
        return np.inf
    xs = m.x[alive]
    ones = np.ones(xs.shape[:-1], dtype=np.int8)
    diff = U.linear_derivative(t, m, xs, ones) - U.linear_derivative(t, m, xs, 0 * ones)
    return float(np.min(diff))


def mixture_residual(U: CylinderFunctional, t: float, m: EmpiricalMeasure, mt: EmpiricalMeasure,
                     n_nodes: int = 16) -> float:
    """``U(mt) - U(m) - int_0^1 int dU(l mt + (1-l) m, y) (mt - m)(dy) dl`` by Gauss-Legendre."""
    nodes, weights = np.polynomial.legendre.leggauss(n_nodes)
    ls, ws = 0.5 * (nodes + 1.0), 0.5 * weights
    total = 0.0
    for l, wl in zip(ls, ws):
        mix = m.mixture(mt, float(l))
        on_mt = mt.integral(U.linear_derivative(t, mix, mt.x, mt.i))
        on_m = m.integral(U.linear_derivative(t, mix, m.x, m.i))
        total += wl * (on_mt - on_m)
    return float(U(t, mt) - U(t, m) - total)


@dataclass
class GeneratorCheck:
    drift: float
    generator: float
    discrepancy: float
    M: int
    dt: float


def check_generator_consistency(U: CylinderFunctional, model: Model, grid: TimeGrid, m0: EmpiricalMeasure,
                                M: int, seed: int) -> GeneratorCheck:
    """Compare ``(E U(m_dt) - U(m_0)) / dt`` along an unstopped cloud with the generator.

    The cloud is ``M`` particles resampled from ``m0``; one Euler step of
    length ``grid.dt`` is taken with a Gaussian increment and with its
    negative, and the two outcomes are averaged.
    """
    x, i = resample(m0, M, stream(seed, INIT, 0, 0))
    one = TimeGrid(grid.t0, grid.t0 + grid.dt, 1)
    start = EmpiricalMeasure.uniform(x, i)
    ends = []
    for anti in (False, True):
        paths = simulate_system(model, one, (x, i), Never(), seed, antithetic=anti)
        ends.append(U(one.T, paths.empirical_measure(1)))
    drift = (0.5 * (ends[0] + ends[1]) - U(grid.t0, start)) / grid.dt
    gen = generator(U, model, grid.t0, start)
    return GeneratorCheck(drift, gen, abs(drift - gen), M, grid.dt)
