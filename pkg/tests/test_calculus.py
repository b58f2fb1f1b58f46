import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mfstop.calculus import (
    BUILTIN_FUNCTIONALS,
    alive_mean,
    alive_mean_squared,
    alive_second_moment,
    check_generator_consistency,
    check_projection_derivatives,
    constant,
    evaluate_DI,
    evaluate_generator,
    log_bump,
    mixture_residual,
    project,
)
from mfstop.measures import EmpiricalMeasure
from mfstop.model import constant_coefficients
from mfstop.simulate import TimeGrid

X13 = np.array([[1.0], [3.0]])
ALIVE2 = np.array([1, 1])


def test_projection_examples():
    assert project(alive_mean(), 2)(0.0, X13, ALIVE2) == 2.0
    assert project(alive_mean_squared(), 2)(0.0, X13, ALIVE2) == 4.0
    assert project(constant(3.0), 2)(0.0, X13, ALIVE2) == 3.0


def test_projection_derivative_examples():
    phi = project(alive_mean_squared(), 2)
    assert phi.grad(0.0, X13, ALIVE2)[0, 0] == pytest.approx(2.0, abs=1e-15)
    assert phi.hess_blocks(0.0, X13, ALIVE2)[0, 0, 0] == pytest.approx(0.5, abs=1e-15)
    assert check_projection_derivatives(alive_mean_squared(), 2, 0.0, (X13, ALIVE2)) <= 1e-6


def test_constant_functional_has_zero_derivatives():
    phi = project(constant(2.0), 3)
    x = np.array([[0.1], [0.4], [2.0]])
    i = np.array([1, 0, 1])
    assert np.all(phi.grad(0.0, x, i) == 0) and np.all(phi.hess_blocks(0.0, x, i) == 0)


def test_linear_functional_has_no_measure_hessian():
    U = alive_second_moment()
    m = EmpiricalMeasure.uniform(X13, ALIVE2)
    assert np.all(U.measure_hessian(0.0, m, m.x, m.i, m.x, m.i) == 0)


@pytest.mark.parametrize("name", sorted(BUILTIN_FUNCTIONALS))
@pytest.mark.parametrize("N", [1, 2, 5, 20])
def test_projection_identities_on_random_states(name, N):
    rng = np.random.default_rng(N)
    U = BUILTIN_FUNCTIONALS[name]()
    for _ in range(5):
        x = rng.standard_normal((N, 1))
        i = rng.integers(0, 2, N)
        i[0] = 1
        assert check_projection_derivatives(U, N, float(rng.uniform(0, 1)), (x, i), 1e-4) <= 1e-6


def test_projection_in_two_dimensions():
    rng = np.random.default_rng(3)
    for name in sorted(BUILTIN_FUNCTIONALS):
        x = rng.standard_normal((4, 2))
        assert check_projection_derivatives(BUILTIN_FUNCTIONALS[name](), 4, 0.3, (x, np.ones(4))) <= 1e-6


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from(sorted(BUILTIN_FUNCTIONALS)))
def test_linear_derivative_integrates_along_mixtures(seed, name):
    rng = np.random.default_rng(seed)
    U = BUILTIN_FUNCTIONALS[name]()
    m = EmpiricalMeasure.uniform(rng.normal(size=(4, 1)), rng.integers(0, 2, 4))
    mt = EmpiricalMeasure.uniform(rng.normal(size=(6, 1)), rng.integers(0, 2, 6))
    assert abs(mixture_residual(U, 0.2, m, mt)) <= 1e-10


def test_generator_examples():
    m = EmpiricalMeasure.uniform(np.array([[0.0], [1.0], [5.0]]), np.array([1, 1, 0]))
    model = constant_coefficients(drift=1.5)
    assert evaluate_generator(alive_mean(), model, 0.0, m) == pytest.approx(1.5 * 2 / 3, abs=1e-15)
    assert evaluate_generator(constant(), constant_coefficients(sigma=2.0), 0.0, m) == 0.0
    sq = evaluate_generator(alive_second_moment(), constant_coefficients(sigma=1.0), 0.0, m)
    assert sq == pytest.approx(2 / 3, abs=1e-15)


def test_generator_adds_running_reward():
    m = EmpiricalMeasure.uniform(X13, ALIVE2)
    assert evaluate_generator(constant(), constant_coefficients(running=0.7), 0.0, m) == pytest.approx(0.7)


def test_stopping_increment_examples():
    m = EmpiricalMeasure.uniform(X13, ALIVE2)
    assert evaluate_DI(alive_mean(), 0.0, m) == 1.0
    assert evaluate_DI(log_bump(), 0.0, m) == 0.0
    dead = EmpiricalMeasure.uniform(X13, np.array([0, 0]))
    assert evaluate_DI(alive_mean(), 0.0, dead) == np.inf


def test_generator_matches_one_step_drift_deterministic():
    m0 = EmpiricalMeasure.uniform(np.linspace(0, 1, 8)[:, None], np.array([1, 1, 1, 1, 1, 1, 0, 0]))
    model = constant_coefficients(drift=0.8)
    chk = check_generator_consistency(alive_mean(), model, TimeGrid(0, 0.1, 1), m0, 64, seed=1)
    assert chk.drift == pytest.approx(chk.generator, abs=1e-12)
    assert chk.generator == pytest.approx(0.8 * chk_alive_fraction(m0, 64, 1), abs=1e-12)


def chk_alive_fraction(m0, M, seed):
    from mfstop.simulate import INIT, resample, stream

    _, i = resample(m0, M, stream(seed, INIT, 0, 0))
    return i.mean()


def test_constant_functional_has_zero_drift():
    m0 = EmpiricalMeasure.uniform(np.linspace(0, 1, 8)[:, None])
    chk = check_generator_consistency(constant(), constant_coefficients(sigma=1.0), TimeGrid(0, 0.1, 1), m0, 32, 1)
    assert chk.drift == 0.0 and chk.generator == 0.0


def test_second_moment_drift_within_monte_carlo_error():
    m0 = EmpiricalMeasure.uniform(np.linspace(-1, 1, 16)[:, None], np.r_[np.ones(12), np.zeros(4)].astype(int))
    M = 20_000
    chk = check_generator_consistency(alive_second_moment(), constant_coefficients(sigma=1.0),
                                      TimeGrid(0, 0.01, 1), m0, M, seed=2)
    assert chk.discrepancy <= 3 / np.sqrt(M) + 0.01
