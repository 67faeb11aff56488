import numpy as np
import pytest
from scipy.stats import norm

from grushin_homog.dynamics import DynamicsSpec, Jet2, generator_apply
from grushin_homog.grid import Field, Grid2D, restrict
from grushin_homog.grid_pde import (
    density_moments,
    discretize,
    solve_discounted,
    solve_forced,
    solve_parabolic,
    stationary_density,
)

SPEC = DynamicsSpec(2.0)
GRID = Grid2D.default_for(2.0, n=81)


@pytest.fixture(scope="module")
def gen():
    return discretize(SPEC, GRID)


@pytest.fixture(scope="module")
def density(gen):
    return stationary_density(gen)


def test_constants_in_kernel(gen):
    scale = 3.7 * np.abs(gen.matrix).sum(axis=1).max()
    assert np.abs(gen.apply(Field.constant(GRID, 3.7)).values).max() < 1e-14 * scale


def test_quadratic_matches_generator_at_node():
    g = Grid2D((4.0, 4.0), (81, 81))
    spec = DynamicsSpec(1.0)
    Lu = discretize(spec, g).apply(g.evaluate(lambda a, b: a**2))
    i = int(np.argmin(np.abs(g.y1 - 2.0)))
    j = g.origin_index[1]
    exact = generator_apply(spec, Jet2(4.0, [4.0, 0.0], [[2, 0], [0, 0]]), (2.0, 0.0))
    assert exact == 6.0
    assert Lu.values[i, j] == pytest.approx(6.0, abs=1e-10)


@pytest.mark.parametrize("scheme", ["hybrid", "upwind"])
def test_couplings_nonnegative(scheme):
    gen = discretize(DynamicsSpec(3.0, 0.1), GRID, drift_scheme=scheme)
    assert gen.couplings().data.min() >= 0


def test_unknown_scheme_rejected():
    with pytest.raises(ValueError):
        discretize(SPEC, GRID, drift_scheme="central")


def test_constant_source(gen):
    u = solve_discounted(gen, 0.05, Field.constant(GRID, 2.0))
    np.testing.assert_allclose(u.values, 40.0, rtol=1e-12)


def test_linearity(gen):
    rng = np.random.default_rng(0)
    F1 = Field(GRID, rng.normal(size=GRID.shape))
    F2 = Field(GRID, rng.normal(size=GRID.shape))
    a = solve_discounted(gen, 0.1, F1 + F2)
    b = solve_discounted(gen, 0.1, F1) + solve_discounted(gen, 0.1, F2)
    assert np.abs(a.values - b.values).max() < 1e-10 * a.sup_norm()


def _manufactured_error(n, delta=0.5, alpha=1.0):
    spec = DynamicsSpec(alpha)
    g = Grid2D((4.0, 4.0), (n, n))
    gen = discretize(spec, g, drift_scheme="upwind")
    F = g.evaluate(lambda a, b: (delta + 2 * alpha) * a**2 - 2 + 0 * b)
    u = solve_discounted(gen, delta, F)
    exact = g.evaluate(lambda a, b: a**2 + 0 * b)
    inner = g.inner_mask(0.5)
    return float(np.abs(u.values - exact.values)[inner].max())


def test_manufactured_first_order_refinement():
    errs = [_manufactured_error(n) for n in (41, 81, 161)]
    ratios = [errs[k] / errs[k + 1] for k in range(2)]
    assert errs[-1] < 0.1
    for r in ratios:
        assert 1.7 < r < 2.4


def test_maximum_principle_random_sources(gen):
    rng = np.random.default_rng(3)
    for _ in range(100):
        F = Field(GRID, rng.uniform(0, 1, GRID.shape) * (rng.uniform() < 0.5 or rng.uniform(0, 1, GRID.shape)))
        u = solve_discounted(gen, rng.choice([0.005, 0.1, 1.0]), F)
        assert u.values.min() >= -1e-12 * max(1.0, u.sup_norm())


def test_stationary_mass_and_symmetry(density):
    assert density.integrate() == pytest.approx(1.0, abs=1e-10)
    assert density.values.min() >= 0
    v = density.values
    scale = v.max()
    assert np.abs(v - v[::-1, :]).max() < 1e-10 * scale
    assert np.abs(v - v[:, ::-1]).max() < 1e-10 * scale


def test_stationary_y1_marginal_gaussian():
    errs = []
    for n in (81, 161):
        g = Grid2D.default_for(2.0, n=n)
        m = stationary_density(discretize(SPEC, g))
        marginal = m.values.sum(axis=1) * g.spacings[1]
        errs.append(np.abs(marginal - norm.pdf(g.y1, scale=np.sqrt(0.5))).max())
    assert errs[1] < 2e-3
    assert errs[1] < errs[0] / 3  # second order in h


def test_stationary_moments(density):
    mom = density_moments(density)
    assert mom["E_y1y1"] == pytest.approx(0.5, rel=0.01)
    assert mom["E_y2y2"] == pytest.approx(0.25, rel=0.02)
    assert abs(mom["E_y1y2"]) < 1e-10
    assert abs(mom["mean_y1"]) < 1e-10


def test_adjoint_consistency(gen, density):
    rng = np.random.default_rng(5)
    Y1, Y2 = GRID.mesh
    worst = 0.0
    for _ in range(100):
        c = rng.uniform(-1.5, 1.5, 2)
        k = rng.uniform(0.5, 3.0, 2)
        bump = np.exp(-k[0] * (Y1 - c[0]) ** 2 - k[1] * (Y2 - c[1]) ** 2)
        Lu = gen.apply(bump).values
        worst = max(worst, abs(np.sum(Lu * density.values)) * GRID.cell_area / np.abs(Lu).max())
    assert worst < 1e-10


def test_domain_doubling_inner_insensitive():
    g = Grid2D.default_for(2.0, n=81)
    big = g.scaled(2)
    F = lambda a, b: np.cos(a) + 1 / (1 + b**2)
    u_small = solve_discounted(discretize(SPEC, g), 0.05, g.evaluate(F))
    u_big = restrict(solve_discounted(discretize(SPEC, big), 0.05, big.evaluate(F)), g)
    inner = g.inner_mask()
    rel = np.abs(u_small.values - u_big.values)[inner].max() / np.abs(u_big.values[inner]).max()
    assert rel < 0.01


def test_parabolic_constant_and_max_principle(gen):
    u = solve_parabolic(gen, Field.constant(GRID, 1.5), 2.0, 0.1)
    np.testing.assert_allclose(u.values, 1.5, rtol=1e-12)
    rng = np.random.default_rng(2)
    u0 = Field(GRID, rng.uniform(-1, 2, GRID.shape))
    _, (_, trace) = solve_parabolic(gen, u0, 1.0, 0.05, trace=True)
    assert trace.min() >= -1 - 1e-12 and trace.max() <= 2 + 1e-12
    u1 = solve_parabolic(gen, u0, 1.0, 0.05)
    assert u1.values.min() >= -1 - 1e-12 and u1.values.max() <= 2 + 1e-12


def test_parabolic_long_time_limit(gen, density):
    f = GRID.evaluate(lambda a, b: a**2 + b**2)
    u = solve_parabolic(gen, f, 25.0, 0.05)
    assert u.at_origin() == pytest.approx(f.integrate(density), rel=1e-4)
    assert u.at_origin() == pytest.approx(0.75, rel=0.02)


def test_forced_constant_and_growth(gen):
    v = solve_forced(gen, Field.constant(GRID, 2.0), 3.0, 0.1)
    np.testing.assert_allclose(v.values, 6.0, rtol=1e-12)
    f = GRID.evaluate(lambda a, b: a**2 + b**2)
    t = 50.0
    assert solve_forced(gen, f, t, 0.1).at_origin() / t == pytest.approx(0.75, rel=0.02)


def test_forced_linear_in_source(gen):
    rng = np.random.default_rng(9)
    f1, f2 = Field(GRID, rng.normal(size=GRID.shape)), Field(GRID, rng.normal(size=GRID.shape))
    a = solve_forced(gen, f1 * 2.0 + f2, 1.0, 0.1)
    b = solve_forced(gen, f1, 1.0, 0.1) * 2.0 + solve_forced(gen, f2, 1.0, 0.1)
    assert np.abs(a.values - b.values).max() < 1e-10 * max(1.0, a.sup_norm())
