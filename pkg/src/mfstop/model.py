"""Symmetric coefficient sets (b, sigma, f, g) and built-in example models.

Coefficients are plain callables that receive the full measure.  They are
vectorised: ``x`` has shape ``(..., q, d)`` and ``m`` is an
:class:`~mfstop.measures.EmpiricalMeasure` whose batch shape matches the
leading dimensions of ``x``.

* ``drift(t, x, m)``     -> ``(..., q, d)``
* ``diffusion(t, x, m)`` -> ``(..., q, d, d)``, symmetric PSD
* ``running(t, x, m)``   -> ``(..., q)``
* ``terminal(m)``        -> ``(...)``, reads only ``m.x`` and ``m.w``
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .measures import EmpiricalMeasure


class ModelEvaluationError(ArithmeticError):
    """A coefficient returned a non-finite value."""


@dataclass(frozen=True)
class Model:
    drift: Callable
    diffusion: Callable
    running: Callable
    terminal: Callable
    dim: int = 1
    coupled: bool = True
    name: str = "custom"
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.dim < 1:
            raise ValueError("dimension must be a positive integer")


def _check_finite(values: np.ndarray, what: str) -> np.ndarray:
    if not np.all(np.isfinite(values)):
        bad = np.argwhere(~np.isfinite(np.atleast_1d(values)))[0]
        raise ModelEvaluationError(f"non-finite {what} at atom index {tuple(int(b) for b in bad)}")
    return values


def eval_F(model: Model, t: float, m: EmpiricalMeasure) -> np.ndarray:
    """``F(t, m) = int f(t, x, m) m(dx, 1)``: running reward integrated over alive atoms."""
    f = _check_finite(np.asarray(model.running(t, m.x, m), dtype=float), "running reward")
    return m.alive_integral(f)


def eval_terminal(model: Model, m: EmpiricalMeasure) -> np.ndarray:
    """Terminal reward of the x-marginal; stopped and alive atoms both count."""
    return _check_finite(np.asarray(model.terminal(m), dtype=float), "terminal reward")


def single_atom(x: np.ndarray, alive: bool) -> EmpiricalMeasure:
    """Batch of Dirac measures ``delta_{(x_j, i)}``; ``x`` has shape (n, d)."""
    x = np.asarray(x, dtype=float).reshape(-1, 1, x.shape[-1] if np.ndim(x) > 1 else 1)
    i = np.full(x.shape[:-1], int(alive), dtype=np.int8)
    return EmpiricalMeasure._trusted(x, i, np.ones(x.shape[:-1]))


def single_particle_rewards(model: Model, t: float, x: np.ndarray):
    """Running reward ``f(t, x, delta_(x,1))`` and payoff ``g(delta_x)`` on points ``x`` (n, d).

    For an uncoupled model with additive terminal reward these are the ``f0``
    and ``g-bar`` of the one-particle problem.
    """
    m_alive = single_atom(x, True)
    f0 = np.asarray(model.running(t, m_alive.x, m_alive))[:, 0]
    gbar = np.asarray(model.terminal(m_alive))
    return f0, gbar


def _isotropic(sigma: float, x: np.ndarray) -> np.ndarray:
    d = x.shape[-1]
    return np.broadcast_to(sigma * np.eye(d), x.shape[:-1] + (d, d))


def _put(strike: float, x: np.ndarray) -> np.ndarray:
    return np.maximum(strike - x.mean(axis=-1), 0.0)


def decoupled_additive(
    kappa: float = 1.0,
    theta: float = 1.0,
    sigma: float = 0.3,
    running_rate: float = -0.2,
    strike: float = 1.0,
    dim: int = 1,
) -> Model:
    """Uncoupled OU particles with an additive put payoff.

    ``b = kappa (theta - x)``, ``sigma`` constant, ``f0(x) = running_rate``,
    ``g(mu) = int max(strike - xbar, 0) dmu`` where ``xbar`` is the coordinate
    average.  Growth: ``|b| <= kappa(|theta| + |x|)``, ``|g-bar| <= |strike| + |x|``.
    """

    def drift(t, x, m):
        return kappa * (theta - x)

    def diffusion(t, x, m):
        return _isotropic(sigma, x)

    def running(t, x, m):
        return np.full(x.shape[:-1], float(running_rate))

    def terminal(m):
        return m.integral(_put(strike, m.x))

    params = dict(kappa=kappa, theta=theta, sigma=sigma, running_rate=running_rate, strike=strike, dim=dim)
    return Model(drift, diffusion, running, terminal, dim=dim, coupled=False, name="DecoupledAdditive", params=params)


def mean_reverter_to_mean(
    a: float = 1.0,
    sigma: float = 0.3,
    running_rate: float = 0.0,
    dispersion_cost: float = 0.5,
    strike: float = 1.0,
    dim: int = 1,
) -> Model:
    """Particles pulled towards the alive first moment.

    ``b(t, x, m) = a (xbar_m - x)`` with ``xbar_m = int x m(dx, 1)`` (not
    renormalised by the alive mass, so ``b`` stays W1-Lipschitz in ``m``).
    ``f = running_rate - dispersion_cost |x - xbar_m|``; the payoff is the
    additive put of :func:`decoupled_additive`.  All coefficients grow at most
    linearly in ``|x| + ||m||_1``.
    """

    def drift(t, x, m):
        return a * (m.alive_mean()[..., None, :] - x)

    def diffusion(t, x, m):
        return _isotropic(sigma, x)

    def running(t, x, m):
        gap = np.linalg.norm(x - m.alive_mean()[..., None, :], axis=-1)
        return running_rate - dispersion_cost * gap

    def terminal(m):
        return m.integral(_put(strike, m.x))

    params = dict(a=a, sigma=sigma, running_rate=running_rate, dispersion_cost=dispersion_cost,
                  strike=strike, dim=dim)
    return Model(drift, diffusion, running, terminal, dim=dim, coupled=True, name="MeanReverterToMean", params=params)


def constant_coefficients(
    drift: float = 0.0,
    sigma: float = 0.0,
    running: float = 0.0,
    running_slope: float = 0.0,
    terminal_const: float = 0.0,
    terminal_linear: float = 0.0,
    terminal_quadratic: float = 0.0,
    dim: int = 1,
) -> Model:
    """Constant ``b``, ``sigma``; ``f = running + running_slope * x_1``;
    ``g(mu) = c + l int x_1 dmu + q int |x|^2 dmu``.

    Mostly used for hand-checkable cases.  With ``terminal_quadratic != 0`` the
    payoff grows quadratically, so such instances are kept out of convergence
    runs.
    """
    beta = np.broadcast_to(np.asarray(drift, dtype=float), (dim,))

    def b(t, x, m):
        return np.broadcast_to(beta, x.shape)

    def s(t, x, m):
        return _isotropic(sigma, x)

    def f(t, x, m):
        return running + running_slope * x[..., 0]

    def g(m):
        return (terminal_const + terminal_linear * m.integral(m.x[..., 0])
                + terminal_quadratic * m.integral(np.sum(m.x ** 2, axis=-1)))

    params = dict(drift=drift, sigma=sigma, running=running, running_slope=running_slope,
                  terminal_const=terminal_const, terminal_linear=terminal_linear,
                  terminal_quadratic=terminal_quadratic, dim=dim)
    return Model(b, s, f, g, dim=dim, coupled=False, name="ConstantCoefficients", params=params)


BUILTIN_MODELS = {
    "DecoupledAdditive": decoupled_additive,
    "MeanReverterToMean": mean_reverter_to_mean,
    "ConstantCoefficients": constant_coefficients,
}


def build_model(name: str, **params) -> Model:
    try:
        factory = BUILTIN_MODELS[name]
    except KeyError:
        raise KeyError(f"unknown model {name!r}; choose from {sorted(BUILTIN_MODELS)}") from None
    return factory(**params)
