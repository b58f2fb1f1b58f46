import numpy as np
import pytest

from mfstop.measures import EmpiricalMeasure, w2
from mfstop.model import Model, build_model, constant_coefficients
from mfstop.simulate import (
    NEVER,
    FixedTimes,
    IidSurvival,
    Never,
    PicardWarning,
    SimulationError,
    TimeGrid,
    _fixed_decider,
    driving_noise,
    iid_stopping_rule,
    mckean_vlasov_flow,
    moment_check,
    propagate,
    simulate_system,
    stream,
    uniform_survival_law,
)


def linear_model(slope=-1.0, sigma=0.0):
    return Model(lambda t, x, m: slope * x, lambda t, x, m: sigma * np.ones(x.shape + (1,)),
                 lambda t, x, m: np.zeros(x.shape[:-1]), lambda m: np.zeros(m.batch_shape))


Y0 = (np.array([0.5, -0.2, 1.3]), np.array([1, 1, 0]))


def test_zero_coefficients_leave_paths_constant():
    paths = simulate_system(constant_coefficients(), TimeGrid(0, 1, 5), Y0, Never(), seed=1)
    assert np.all(paths.X == Y0[0][None, None, :, None])


def test_stop_all_at_start_freezes_everything():
    model = build_model("MeanReverterToMean")
    paths = simulate_system(model, TimeGrid(0, 1, 5), Y0, FixedTimes([0, 0, 0]), seed=1)
    assert np.all(paths.I == 0)
    assert np.all(paths.X == Y0[0][None, None, :, None])


def test_euler_error_is_first_order():
    errs = []
    for n in (10, 20, 40):
        paths = simulate_system(linear_model(), TimeGrid(0, 1, n), (np.array([1.0]), np.array([1])), Never(), 0)
        errs.append(abs(paths.X[0, -1, 0, 0] - np.exp(-1.0)))
    assert errs[0] <= 0.2 * 0.1
    assert errs[1] / errs[2] == pytest.approx(2.0, rel=0.1)


def test_initially_dead_particles_never_move():
    paths = simulate_system(build_model("DecoupledAdditive"), TimeGrid(0, 1, 8), Y0, Never(), seed=3)
    assert np.all(paths.X[0, :, 2, 0] == 1.3) and np.all(paths.I[0, :, 2] == 0)
    assert paths.stop_node[0, 2] == 0


def test_frozen_after_stop_and_indicator_convention():
    model = build_model("MeanReverterToMean", sigma=0.5)
    paths = simulate_system(model, TimeGrid(0, 1, 10), Y0, FixedTimes([3, NEVER, 0]), seed=4)
    X, I = paths.X[0], paths.I[0]
    assert np.all(I[:3, 0] == 1) and np.all(I[3:, 0] == 0)
    assert np.all(X[3:, 0] == X[3, 0])
    assert np.all(I[:, 1] == 1)


def test_seed_determinism_and_sensitivity():
    model = build_model("MeanReverterToMean")
    grid = TimeGrid(0, 1, 6)
    a = simulate_system(model, grid, Y0, Never(), seed=11)
    b = simulate_system(model, grid, Y0, Never(), seed=11)
    c = simulate_system(model, grid, Y0, Never(), seed=12)
    assert np.array_equal(a.X, b.X) and not np.array_equal(a.X, c.X)


def test_exchangeability_under_permutation():
    model = build_model("MeanReverterToMean", sigma=0.4)
    grid = TimeGrid(0, 1, 6)
    perm = np.array([2, 0, 1])
    x0, i0 = Y0
    a = simulate_system(model, grid, Y0, Never(), seed=5)
    b = simulate_system(model, grid, (x0[perm], i0[perm]), Never(), seed=5, stream_ids=perm)
    assert np.allclose(a.X[0][:, perm], b.X[0], atol=1e-14, rtol=0)


def test_stored_measures_match_paths():
    model = build_model("MeanReverterToMean", sigma=0.4)
    paths = simulate_system(model, TimeGrid(0, 1, 6), Y0, FixedTimes([2, 4, NEVER]), seed=6)
    for s, m in enumerate(paths.measure_log):
        rebuilt = paths.empirical_measure(s)
        assert np.array_equal(m.x[0], rebuilt.x) and np.array_equal(m.i[0], rebuilt.i)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nonfinite_state_reports_step():
    model = Model(lambda t, x, m: np.where(t > 0.25, np.inf, 0.0) * np.ones_like(x),
                  lambda t, x, m: np.zeros(x.shape + (1,)), lambda t, x, m: np.zeros(x.shape[:-1]),
                  lambda m: np.zeros(m.batch_shape))
    with pytest.raises(SimulationError, match="step 2"):
        simulate_system(model, TimeGrid(0, 1, 4), Y0, Never(), seed=0)


def test_path_rows_export():
    paths = simulate_system(constant_coefficients(), TimeGrid(0, 1, 2), Y0, Never(), seed=0)
    rows = list(paths.rows())
    assert len(rows) == 3 * 3 and rows[0] == (0, 0, 0, 0.5, 1)


# -- i.i.d. stopping rules --------------------------------------------------------

def test_survival_point_masses():
    i0 = np.ones(6, dtype=np.int8)
    never = np.zeros(6)
    never[-1] = 1.0
    assert np.all(iid_stopping_rule(never, i0, stream(0, 9)).nodes == NEVER)
    first = np.zeros(6)
    first[0] = 1.0
    assert np.all(iid_stopping_rule(first, i0, stream(0, 9)).nodes == 0)


def test_dead_particles_get_node_zero():
    rule = iid_stopping_rule(uniform_survival_law(4), np.array([0, 1, 0]), stream(1, 9))
    assert rule.nodes[0] == 0 and rule.nodes[2] == 0


def test_uniform_survival_alive_fraction_at_mid_grid():
    n, N = 10, 4000
    rule = iid_stopping_rule(uniform_survival_law(n), np.ones(N, np.int8), stream(3, 9))
    frac = np.mean(rule.nodes > n // 2)
    assert abs(frac - 0.5) <= 3 / np.sqrt(N)


def test_iid_rule_inside_simulation_is_seeded():
    model = build_model("DecoupledAdditive")
    grid = TimeGrid(0, 1, 4)
    rule = IidSurvival(uniform_survival_law(4))
    a = simulate_system(model, grid, Y0, rule, seed=8)
    b = simulate_system(model, grid, Y0, rule, seed=8)
    assert np.array_equal(a.stop_node, b.stop_node)


# -- mean-field flow --------------------------------------------------------------

M0 = EmpiricalMeasure.uniform(np.array([[0.0], [0.5], [1.0], [2.0]]), np.array([1, 1, 1, 0]))


def test_static_flow_converges_in_one_sweep():
    res = mckean_vlasov_flow(constant_coefficients(), M0, TimeGrid(0, 1, 4), Never(), 64, seed=1)
    assert res.converged and res.iterations == 1
    assert all(w2(m, res.flow[0]) == 0.0 for m in res.flow.measures)


def test_uncoupled_fixed_point_after_first_sweep():
    res = mckean_vlasov_flow(build_model("DecoupledAdditive"), M0, TimeGrid(0, 1, 4), Never(), 64, seed=2)
    assert res.converged and res.iterations == 2 and res.gaps[-1] == 0.0


def test_mean_reverter_keeps_alive_mean():
    m0 = EmpiricalMeasure.uniform(np.linspace(-1, 2, 40)[:, None])
    res = mckean_vlasov_flow(build_model("MeanReverterToMean", sigma=0.0), m0, TimeGrid(0, 1, 8), Never(), 40,
                             seed=3)
    means = [m.alive_mean()[0] for m in res.flow.measures]
    assert res.converged
    assert np.allclose(means, means[0], atol=1e-12)


def test_picard_nonconvergence_is_reported():
    model = build_model("MeanReverterToMean", sigma=0.3)
    with pytest.warns(PicardWarning):
        res = mckean_vlasov_flow(model, M0, TimeGrid(0, 1, 6), Never(), 32, seed=4, k_max=2)
    assert not res.converged and res.gap > 0


# -- moments ----------------------------------------------------------------------

def test_moments_of_static_paths():
    paths = simulate_system(constant_coefficients(), TimeGrid(0, 1, 4), Y0, Never(), seed=0)
    summary = moment_check(paths, 2)
    assert summary.sup_moment == pytest.approx(np.mean(Y0[0] ** 2), abs=1e-15)
    assert all(v == 0.0 for v in summary.increments.values())


def _moments(N, seed):
    model = build_model("MeanReverterToMean", sigma=0.5)
    rng = stream(seed, 7)
    x0 = rng.normal(1.0, 0.5, N)
    return moment_check(simulate_system(model, TimeGrid(0, 1, 64), (x0, np.ones(N, np.int8)), Never(), seed), 2)


def test_second_moments_uniform_in_N():
    sups = [_moments(N, 1).sup_moment for N in (16, 32, 64, 128, 256, 512)]
    assert max(sups) <= 2 * min(sups)


def test_increment_moment_scales_with_window():
    inc = _moments(512, 2).increments
    lengths = sorted(inc)
    for small, big in zip(lengths, lengths[2:]):
        ratio = inc[big] / inc[small]
        if big / small == 4:
            assert 2.0 <= ratio <= 8.0


def test_two_point_scheme_stays_on_tree():
    model = constant_coefficients(drift=0.2, sigma=0.5)
    grid = TimeGrid(0, 1, 4)
    u = driving_noise("two_point", 3, 4, 1, 500, np.arange(2))
    x0, i0 = np.zeros((500, 2, 1)), np.ones((500, 2), dtype=np.int8)
    X, _, _, _ = propagate(model, grid, x0, i0, u, _fixed_decider(np.full((500, 2), NEVER), i0),
                           scheme="two_point")
    steps = np.diff(X[..., 0], axis=1) / (0.5 * np.sqrt(grid.dt))
    assert np.allclose(np.abs(steps), 1.0, atol=1e-12, rtol=0)
    # up-probability 1/2 + b dt / (2 sigma sqrt(dt)) = 0.6
    assert abs(np.mean(steps > 0) - 0.6) <= 4 * np.sqrt(0.24 / steps.size)


def test_two_point_scheme_limits():
    grid = TimeGrid(0, 1, 1)
    i0 = np.ones((1, 1), dtype=np.int8)
    never = _fixed_decider(np.full((1, 1), NEVER), i0)
    with pytest.raises(SimulationError):
        propagate(constant_coefficients(drift=5.0, sigma=0.1), grid, np.zeros((1, 1, 1)), i0,
                  np.full((1, 1, 1, 1), 0.5), never, scheme="two_point")
    with pytest.raises(ValueError):
        driving_noise("heun", 1, 1, 1, 1, [0])
