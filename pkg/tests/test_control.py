import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from grushin_homog.control import (
    CATALOG,
    ControlProblem,
    FrozenArgs,
    HypothesisError,
    audit_regularity,
    catalog_problem,
    effective_datum,
    effective_hamiltonian,
    freeze_F,
    hamiltonian,
    hamiltonian_branches,
    lipschitz_transfer_constant,
)
from grushin_homog.dynamics import DynamicsSpec
from grushin_homog.grid import Grid2D
from grushin_homog.grid_pde import discretize, stationary_density

ALPHA = 2.0


@pytest.fixture(scope="module")
def density():
    return stationary_density(discretize(DynamicsSpec(ALPHA), Grid2D.default_for(ALPHA, n=121)))


def make(controls=(-1.0, 1.0), phi=lambda x, y1, y2, u: u + 0 * x, sigma=lambda x, y1, y2, u: 0 * x,
         cost=lambda x, y1, y2, u: 0 * x, terminal=lambda x, y1, y2: 0 * x):
    return ControlProblem(controls=controls, phi_tilde=phi, sigma_tilde=sigma, running_cost=cost,
                          terminal=terminal, discount=1.0, horizon=1.0)


@given(st.floats(-10, 10))
def test_two_point_minimum(p):
    assert hamiltonian(make(), FrozenArgs(0.0, p, 0.0), 0.3, -0.2) == pytest.approx(-abs(p))


def test_singleton_control():
    prob = make(controls=(0.5,), cost=lambda x, y1, y2, u: y1 + 2 * u)
    assert hamiltonian(prob, FrozenArgs(0.0, 2.0, 0.0), 1.5, 0.0) == pytest.approx(-0.5 * 2 - 1.5 - 1.0)


@given(st.floats(-10, 10))
def test_diffusion_shift(p):
    prob = make(sigma=lambda x, y1, y2, u: 1.0 + 0 * x)
    assert hamiltonian(prob, FrozenArgs(0.0, p, 2.0), 0.0, 0.0) == pytest.approx(-abs(p) - 2)


def test_problem_validation():
    with pytest.raises(ValueError):
        make(controls=())
    with pytest.raises(HypothesisError):
        ControlProblem(controls=(0.0,), phi_tilde=lambda x, y1, y2, u: 0 * x,
                       sigma_tilde=lambda x, y1, y2, u: 0 * x,
                       running_cost=lambda x, y1, y2, u: y2**2, terminal=lambda x, y1, y2: 0 * x,
                       discount=1.0, horizon=1.0, C_f=1.0)


@pytest.mark.parametrize("name", sorted(CATALOG))
def test_minimum_consistency(name):
    prob = catalog_problem(name)
    rng = np.random.default_rng(0)
    y1, y2 = rng.normal(0, 2, (2, 500))
    frozen = FrozenArgs(0.3, -1.2, 0.7)
    br = hamiltonian_branches(prob, frozen, y1, y2)
    H = hamiltonian(prob, frozen, y1, y2)
    assert np.all(H <= br + 1e-15)
    assert np.all(np.isclose(br, H, rtol=0, atol=1e-15).any(axis=0))


def test_y_free_gives_constant_F():
    prob = catalog_problem("bench-trivial")
    assert prob.y_free()
    F = freeze_F(prob, FrozenArgs(0.4, 1.0, 0.5)).on(Grid2D((3.0, 3.0), (11, 11)))
    assert np.ptp(F.values) == 0.0
    assert not catalog_problem("bench-A").y_free()


def test_bench_a_frozen_cost_pointwise():
    prob = catalog_problem("bench-A")
    frozen = FrozenArgs(0.0, 1.0, 0.0)
    F = freeze_F(prob, frozen)
    for y in [(0.0, 0.0), (1.0, -2.0), (-3.0, 0.5)]:
        assert F(*y) == pytest.approx(-hamiltonian(prob, frozen, *y))
    # sigma = 0.2 and the control minimises -u p: H = -|p| - 0.04 X - f
    assert F(0.0, 0.0) == pytest.approx(1.0 + np.sin(0.0) + 1.0 + 1.0)


@pytest.mark.parametrize("name", sorted(CATALOG))
def test_catalog_regularity_audit(name):
    sups = audit_regularity(freeze_F(catalog_problem(name), FrozenArgs(0.5, 1.0, 0.3), audit=False))
    assert all(np.isfinite(v) for v in sups.values())


def test_regularity_audit_rejects_unbounded():
    with pytest.raises(HypothesisError):
        audit_regularity(lambda y1, y2: np.log1p(y2**2) * y2)


def test_effective_hamiltonian_y_free(density):
    prob = catalog_problem("bench-trivial")
    frozen = FrozenArgs(0.2, -0.7, 0.3)
    assert effective_hamiltonian(prob, frozen, density) == pytest.approx(hamiltonian(prob, frozen, 0.0, 0.0))


def test_effective_hamiltonian_moment_shift(density):
    base = make()
    shifted = make(cost=lambda x, y1, y2, u: y1**2)
    frozen = FrozenArgs(0.0, 0.8, 0.0)
    diff = effective_hamiltonian(shifted, frozen, density) - effective_hamiltonian(base, frozen, density)
    assert diff == pytest.approx(-1 / ALPHA, rel=1e-3)


@pytest.mark.parametrize("name", sorted(CATALOG))
def test_effective_hamiltonian_concave_and_degenerate_elliptic(name, density):
    prob = catalog_problem(name)
    rng = np.random.default_rng(1)
    Hbar = lambda p, X: effective_hamiltonian(prob, FrozenArgs(0.3, p, X), density)
    for _ in range(10):
        (p0, X0), (p1, X1) = rng.normal(0, 2, (2, 2))
        mid = Hbar((p0 + p1) / 2, (X0 + X1) / 2)
        assert mid >= (Hbar(p0, X0) + Hbar(p1, X1)) / 2 - 1e-12
        bump = rng.uniform(0, 3)
        assert Hbar(p0, X0 + bump) <= Hbar(p0, X0) + 1e-12


def test_effective_datum_oracles(density):
    gx = effective_datum(make(terminal=lambda x, y1, y2: x + 0 * y1), density)
    np.testing.assert_allclose(gx(np.array([-1.0, 0.5, 2.0])), [-1.0, 0.5, 2.0], rtol=1e-12)
    gq = effective_datum(make(terminal=lambda x, y1, y2: y1**2 + 0 * x), density)
    assert gq(0.3) == pytest.approx(1 / ALPHA, rel=1e-3)
    godd = effective_datum(make(terminal=lambda x, y1, y2: y1 + 0 * x), density)
    assert abs(godd(1.0)) < 1e-12


@settings(max_examples=20, deadline=None)
@given(st.sampled_from(sorted(CATALOG)), st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 2**31))
def test_lipschitz_transfer(name, p, X, seed):
    prob = catalog_problem(name)
    frozen = FrozenArgs(0.1, p, X)
    L = lipschitz_transfer_constant(prob, frozen)
    rng = np.random.default_rng(seed)
    ya, yb = rng.normal(0, 3, (2, 2, 200))
    dH = np.abs(hamiltonian(prob, frozen, *ya) - hamiltonian(prob, frozen, *yb))
    assert np.all(dH <= L * np.hypot(*(ya - yb)) + 1e-12)


def test_catalog_lookup():
    with pytest.raises(KeyError):
        catalog_problem("bench-Z")
    with pytest.raises(TypeError):
        catalog_problem("bench-A", not_a_parameter=1)
    assert catalog_problem("bench-trivial", cost_scale=2.0).params["cost_scale"] == 2.0
