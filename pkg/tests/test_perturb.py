import numpy as np
import pytest

from grushin_homog.control import ControlProblem, catalog_problem
from grushin_homog.dynamics import DynamicsSpec
from grushin_homog.grid import Field, Grid2D
from grushin_homog.grid_pde import discretize, solve_parabolic, stationary_density
from grushin_homog.perturb import (
    CFLError,
    SlowGrid,
    convergence_study,
    solve_effective,
    solve_full,
)

SPEC = DynamicsSpec(2.0)
FAST = Grid2D((4 / np.sqrt(2),) * 2, (31, 31))
SLOW = SlowGrid(half_width=4.0, count=41, horizon=0.25, dt_back=2.5e-3)


@pytest.fixture(scope="module")
def m_fast():
    return stationary_density(discretize(SPEC, FAST))


def _null_problem(terminal, discount=1.0):
    zero = lambda x, y1, y2, u: 0 * x
    return ControlProblem(controls=(0.0,), phi_tilde=zero, sigma_tilde=zero, running_cost=zero,
                          terminal=terminal, discount=discount, horizon=SLOW.horizon)


def test_slow_grid():
    assert SLOW.n_steps == 100
    assert SLOW.times[-1] == pytest.approx(SLOW.horizon)
    assert SLOW.halved().n_steps == 200
    with pytest.raises(ValueError):
        SlowGrid(count=40)


def test_effective_pure_discount(m_fast):
    c, a = 1.7, 1.3
    prob = _null_problem(lambda x, y1, y2: c + 0 * x, discount=a)
    V = solve_effective(prob, m_fast, SLOW)
    exact = c * np.exp(-a * SLOW.horizon)
    np.testing.assert_allclose(V.slice_at(0.0), exact, rtol=2 * a * SLOW.dt)
    np.testing.assert_allclose(V.slice_at(0.0), c * (1 - a * SLOW.dt) ** SLOW.n_steps, rtol=1e-12)


def test_effective_comparison(m_fast):
    prob = catalog_problem("bench-A")
    x = SLOW.x
    g1 = np.arctan(x)
    g2 = g1 + 0.3 * np.exp(-x**2)
    V1 = solve_effective(prob, m_fast, SLOW, terminal=g1).slice_at(0.0)
    V2 = solve_effective(prob, m_fast, SLOW, terminal=g2).slice_at(0.0)
    assert np.all(V2 >= V1 - 1e-14)


def test_effective_self_convergence(m_fast):
    prob = catalog_problem("bench-A")
    coarse = solve_effective(prob, m_fast, SLOW).slice_at(0.0)
    fine_grid = SlowGrid(SLOW.half_width, 2 * SLOW.count - 1, SLOW.horizon, SLOW.dt_back / 4)
    fine = solve_effective(prob, m_fast, fine_grid).slice_at(0.0)[::2]
    inner = np.abs(SLOW.x) <= 2
    assert np.abs(coarse - fine)[inner].max() < SLOW.hx


def test_full_y_free_matches_effective(m_fast):
    prob = catalog_problem("bench-trivial", cost_scale=0.7, terminal_level=0.2)
    eff = solve_effective(prob, m_fast, SLOW).slice_at(0.0)
    for eps in (0.5, 0.05):
        full = solve_full(prob, SPEC, SLOW, FAST, eps).slice_at(0.0)
        spread = np.ptp(full.reshape(full.shape[0], -1), axis=1).max()
        assert spread < 1e-12
        assert np.abs(full[:, 0, 0] - eff).max() < 1e-12


def test_full_decoupled_oracle():
    a, eps = 1.0, 0.1
    prob = _null_problem(lambda x, y1, y2: y1**2 + 0 * x + 0 * y2, discount=a)
    V = solve_full(prob, SPEC, SLOW, FAST, eps, save_times=[0.0])
    k = SLOW.n_steps
    g = FAST.evaluate(lambda y1, y2: y1**2 + 0 * y2)
    expect = solve_parabolic(discretize(SPEC, FAST), g, k * SLOW.dt / eps, SLOW.dt / eps).values
    expect = expect * (1 - a * SLOW.dt) ** k
    got = V.slice_at(0.0)
    assert np.abs(got - expect[None]).max() < 1e-12
    # far from T the profile flattens toward gbar = 1/alpha (damped by the discount)
    eps_small = 0.005
    flat = solve_full(prob, SPEC, SLOW, FAST, eps_small, save_times=[0.0]).slice_at(0.0)[0]
    target = 0.5 * (1 - a * SLOW.dt) ** k
    assert np.abs(flat - target)[FAST.inner_mask()].max() < 0.01


def test_full_sup_bound():
    prob = catalog_problem("bench-A")
    a, T = prob.discount, prob.horizon
    bound = np.exp(a * T) * (prob.C_g * (1 + SLOW.half_width) + T * prob.C_f * (1 + SLOW.half_width))
    V = solve_full(prob, SPEC, SLOW, FAST, 0.1, save_times=SLOW.times[::10])
    assert np.abs(V.values).max() <= bound
    # sharper check with the actual sups of g and f on the grid
    g_sup = np.pi / 2 + np.exp(-1.0)
    f_sup = 3.0
    assert np.abs(V.values).max() <= np.exp(a * T) * (g_sup + T * f_sup)


def test_full_monotone_in_terminal_datum():
    prob = catalog_problem("bench-A")
    X = SLOW.x[:, None, None]
    Y1, Y2 = FAST.mesh
    g = np.arctan(X) + Y1[None] ** 2 * np.exp(-Y1[None] ** 2) + 0 * Y2[None]
    bump = 0.5 * np.exp(-(X**2) - (Y1[None] - 0.5) ** 2 - Y2[None] ** 2)
    lo = solve_full(prob, SPEC, SLOW, FAST, 0.1, save_times=SLOW.times, terminal=g)
    hi = solve_full(prob, SPEC, SLOW, FAST, 0.1, save_times=SLOW.times, terminal=g + bump)
    assert (hi.values - lo.values).min() >= -1e-12


def test_cfl_guard():
    prob = catalog_problem("bench-A")
    with pytest.raises(CFLError):
        solve_full(prob, SPEC, SlowGrid(4.0, 41, 0.25, 0.05), FAST, 0.01)


def test_epsilon_validation():
    with pytest.raises(ValueError):
        solve_full(catalog_problem("bench-A"), SPEC, SLOW, FAST, 0.0)
    with pytest.raises(ValueError):
        convergence_study(catalog_problem("bench-A"), SPEC, SLOW, FAST, epsilons=(0.1, 0.2))


def test_convergence_study_trivial_exact():
    prob = catalog_problem("bench-trivial")
    rep = convergence_study(prob, SPEC, SLOW, FAST, epsilons=(0.5, 0.1))
    assert max(rep.errors) < 1e-12
    assert max(rep.terminal_errors) < 1e-12
    assert rep.terminal_mismatch_sup < 1e-12


def test_convergence_study_bench_a_small(tmp_path):
    prob = catalog_problem("bench-A")
    rep = convergence_study(prob, SPEC, SLOW, FAST, epsilons=(0.5, 0.1, 0.02), threads=2)
    assert rep.errors[0] > rep.errors[1] > rep.errors[2]
    assert rep.osc_V > 0
    path = rep.write_json(tmp_path / "c.json")
    assert path.read_text().endswith("\n")


def test_splitting_consistency_default_grids():
    prob = catalog_problem("bench-A")
    slow = SlowGrid(horizon=prob.horizon)
    fast = Grid2D((4 / np.sqrt(2),) * 2, (61, 61))
    rep = convergence_study(prob, SPEC, slow, fast, epsilons=(0.1,))
    t0, t1 = rep.window["t"]
    times = slow.times[(slow.times >= t0 - 1e-12) & (slow.times <= t1 + 1e-12)]
    a = solve_full(prob, SPEC, slow, fast, 0.1, save_times=times, y_window=1.0)
    b = solve_full(prob, SPEC, slow.halved(), fast, 0.1, save_times=times, y_window=1.0)
    xmask = np.abs(slow.x) <= slow.half_width / 2 + 1e-12
    change = max(np.abs(a.slice_at(t)[xmask] - b.slice_at(t)[xmask]).max() for t in times)
    assert change < rep.errors[0] / 10
