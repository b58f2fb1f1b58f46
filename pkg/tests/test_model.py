import numpy as np
import pytest

from mfstop.measures import EmpiricalMeasure
from mfstop.model import (
    BUILTIN_MODELS,
    Model,
    ModelEvaluationError,
    build_model,
    constant_coefficients,
    eval_F,
    eval_terminal,
)


def measure(xs, ids):
    return EmpiricalMeasure.uniform(np.asarray(xs, float)[:, None], np.asarray(ids))


def custom(running=None, terminal=None):
    zero_b = lambda t, x, m: np.zeros_like(x)
    zero_s = lambda t, x, m: np.zeros(x.shape + (x.shape[-1],))
    return Model(zero_b, zero_s, running or (lambda t, x, m: np.zeros(x.shape[:-1])),
                 terminal or (lambda m: np.zeros(m.batch_shape)))


def test_constant_running_reward_integrates_alive_mass():
    model = custom(running=lambda t, x, m: np.ones(x.shape[:-1]))
    m = measure([0.0, 1.0], [1, 0])
    assert eval_F(model, 0.0, m) == 0.5


def test_running_reward_only_counts_alive_atoms():
    model = custom(running=lambda t, x, m: x[..., 0])
    assert eval_F(model, 0.0, measure([1.0, 2.0], [1, 0])) == 0.5


def test_zero_running_reward():
    assert eval_F(custom(), 0.3, measure([1.0, 2.0], [1, 1])) == 0.0


def test_terminal_uses_whole_marginal():
    model = custom(terminal=lambda m: m.integral(m.x[..., 0]))
    assert eval_terminal(model, measure([1.0, 3.0], [1, 0])) == 2.0


def test_constant_and_quadratic_terminal():
    assert eval_terminal(constant_coefficients(terminal_const=2.5), measure([1.0], [1])) == 2.5
    quad = constant_coefficients(terminal_quadratic=1.0)
    assert eval_terminal(quad, measure([2.0], [0])) == 4.0


def test_non_finite_reward_names_atom():
    model = custom(running=lambda t, x, m: np.where(x[..., 0] > 1.5, np.inf, 0.0))
    with pytest.raises(ModelEvaluationError, match=r"\(1,\)"):
        eval_F(model, 0.0, measure([1.0, 2.0], [1, 1]))


@pytest.mark.parametrize("name", sorted(BUILTIN_MODELS))
def test_diffusion_is_symmetric_psd(name):
    rng = np.random.default_rng(0)
    model = build_model(name, dim=2) if name != "ConstantCoefficients" else build_model(name, sigma=0.4, dim=2)
    x = rng.normal(size=(5, 2))
    m = EmpiricalMeasure.uniform(x, rng.integers(0, 2, 5))
    s = np.asarray(model.diffusion(0.1, x, m))
    assert np.allclose(s, np.swapaxes(s, -1, -2))
    assert np.all(np.linalg.eigvalsh(s) >= -1e-14)


@pytest.mark.parametrize("name", sorted(BUILTIN_MODELS))
def test_uncoupled_models_ignore_measure(name):
    model = build_model(name)
    rng = np.random.default_rng(1)
    x = rng.normal(size=(4, 1))
    m1 = EmpiricalMeasure.uniform(rng.normal(size=(4, 1)), rng.integers(0, 2, 4))
    m2 = EmpiricalMeasure.uniform(rng.normal(size=(4, 1)) + 3.0, rng.integers(0, 2, 4))
    same = all(np.allclose(f(0.2, x, m1), f(0.2, x, m2)) for f in (model.drift, model.diffusion, model.running))
    assert same == (not model.coupled)


def test_running_reward_linear_in_mixture_when_uncoupled():
    model = build_model("DecoupledAdditive", running_rate=-0.7)
    rng = np.random.default_rng(2)
    m1 = EmpiricalMeasure.uniform(rng.normal(size=(3, 1)), [1, 0, 1])
    m2 = EmpiricalMeasure.uniform(rng.normal(size=(5, 1)), [1, 1, 0, 0, 1])
    lam = 0.3
    mix = m1.mixture(m2, lam)
    expected = (1 - lam) * eval_F(model, 0.0, m1) + lam * eval_F(model, 0.0, m2)
    assert eval_F(model, 0.0, mix) == pytest.approx(expected, abs=1e-15)


def test_mean_reverter_drift_points_to_alive_mean():
    model = build_model("MeanReverterToMean", a=2.0)
    m = measure([0.0, 2.0, 10.0], [1, 1, 0])
    b = model.drift(0.0, m.x, m)
    xbar = (0.0 + 2.0) / 3
    assert np.allclose(b[:, 0], 2.0 * (xbar - m.x[:, 0]))


def test_unknown_model_name():
    with pytest.raises(KeyError, match="DecoupledAdditive"):
        build_model("Nope")
