"""Slow-variable control data, the frozen Hamiltonian and its averages
against the invariant measure.

The slow variable is one dimensional.  Its diffusion ``sigma_tilde`` acts on
the first Brownian channel only, the one that also drives y1, so the
mixed-derivative contribution is ``2 * sigma_tilde * Z[0]``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .grid import Field, Grid2D

Coef = Callable[..., np.ndarray]


class HypothesisError(ValueError):
    """A problem entry violates the standing growth/boundedness assumptions."""


@dataclass(frozen=True)
class FrozenArgs:
    x: float
    p: float
    X: float
    Z: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        vals = [self.x, self.p, self.X, *self.Z]
        if not np.all(np.isfinite(vals)):
            raise ValueError("frozen arguments must be finite")


@dataclass(frozen=True, eq=False)
class ControlProblem:
    """Coefficients take ``(x, y1, y2, u)`` (``terminal`` takes ``(x, y1, y2)``) and broadcast."""

    controls: tuple[float, ...]
    phi_tilde: Coef
    sigma_tilde: Coef
    running_cost: Coef
    terminal: Coef
    discount: float
    horizon: float
    catalog_id: str = "custom"
    C_f: float = np.inf
    C_g: float = np.inf
    C_phi: float = np.inf
    C_sigma: float = np.inf
    lip_y: dict = field(default_factory=dict)
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.controls) == 0:
            raise ValueError("control set must be nonempty")
        object.__setattr__(self, "controls", tuple(float(u) for u in self.controls))
        if not self.discount > 0:
            raise ValueError("discount a must be > 0")
        if not self.horizon > 0:
            raise ValueError("horizon T must be > 0")
        audit_problem(self)

    def y_free(self, n: int = 64, seed: int = 3) -> bool:
        """True if no coefficient changes when y moves (randomised probe)."""
        rng = np.random.default_rng(seed)
        x = rng.uniform(-3, 3, n)
        ya, yb = rng.normal(0, 2, (2, n)), rng.normal(0, 2, (2, n))
        for u in self.controls:
            for fn in (self.phi_tilde, self.sigma_tilde, self.running_cost):
                if not np.allclose(_bc(fn(x, *ya, u), n), _bc(fn(x, *yb, u), n), rtol=0, atol=1e-14):
                    return False
        return np.allclose(_bc(self.terminal(x, *ya), n), _bc(self.terminal(x, *yb), n), rtol=0, atol=1e-14)


def _bc(v, n):
    return np.broadcast_to(np.asarray(v, dtype=float), (n,))


def audit_problem(prob: ControlProblem, n: int = 4000, seed: int = 11) -> None:
    """Randomised check of the declared growth and boundedness constants."""
    rng = np.random.default_rng(seed)
    x = rng.uniform(-20, 20, n)
    y1 = rng.normal(0, 5, n)
    y2 = rng.normal(0, 5, n)
    tol = 1e-12
    gv = _bc(prob.terminal(x, y1, y2), n)
    if np.any(np.abs(gv) > prob.C_g * (1 + np.abs(x)) + tol):
        raise HypothesisError(f"{prob.catalog_id}: |g| exceeds C_g (1 + |x|)")
    for u in prob.controls:
        f = _bc(prob.running_cost(x, y1, y2, u), n)
        if np.any(np.abs(f) > prob.C_f * (1 + np.abs(x)) + tol):
            raise HypothesisError(f"{prob.catalog_id}: |f| exceeds C_f (1 + |x|)")
        if np.any(np.abs(_bc(prob.phi_tilde(x, y1, y2, u), n)) > prob.C_phi + tol):
            raise HypothesisError(f"{prob.catalog_id}: phi_tilde exceeds its bound")
        if np.any(np.abs(_bc(prob.sigma_tilde(x, y1, y2, u), n)) > prob.C_sigma + tol):
            raise HypothesisError(f"{prob.catalog_id}: sigma_tilde exceeds its bound")


def _branches(prob, frozen, y1, y2):
    """Per-control expressions -s^2 X - phi p - 2 s Z1 - f, stacked on axis 0."""
    x, p, X, Z = frozen.x, frozen.p, frozen.X, frozen.Z
    out = []
    for u in prob.controls:
        s = np.asarray(prob.sigma_tilde(x, y1, y2, u), dtype=float)
        out.append(-s * s * X - np.asarray(prob.phi_tilde(x, y1, y2, u)) * p - 2 * s * Z[0]
                   - np.asarray(prob.running_cost(x, y1, y2, u)))
    shape = np.broadcast_shapes(*(np.shape(o) for o in out), np.shape(y1), np.shape(y2))
    return np.stack([np.broadcast_to(o, shape) for o in out])


def hamiltonian_branches(prob: ControlProblem, frozen: FrozenArgs, y1, y2) -> np.ndarray:
    return _branches(prob, frozen, np.asarray(y1, dtype=float), np.asarray(y2, dtype=float))


def hamiltonian(prob: ControlProblem, frozen: FrozenArgs, y1, y2):
    """min over the control list; ties resolve to the first listed control."""
    vals = hamiltonian_branches(prob, frozen, y1, y2)
    out = vals.min(axis=0)
    return float(out) if out.ndim == 0 else out


class FrozenCost:
    """y -> F(y) = -H(x, y, p, X, 0) for fixed slow arguments."""

    def __init__(self, prob: ControlProblem, frozen: FrozenArgs):
        if frozen.Z != (0.0, 0.0):
            raise ValueError("frozen cost needs Z = 0")
        self.prob = prob
        self.frozen = frozen

    def __call__(self, y1, y2):
        return -hamiltonian(self.prob, self.frozen, y1, y2)

    def on(self, grid: Grid2D) -> Field:
        return grid.evaluate(self)


def _fd_sups(F, y1, y2, h):
    f0 = F(y1, y2)
    fp, fm = F(y1, y2 + h), F(y1, y2 - h)
    d2 = (fp - fm) / (2 * h)
    d22 = (fp - 2 * f0 + fm) / h**2
    g1 = (F(y1 + h, y2) - F(y1 - h, y2)) / (2 * h)
    # third y2-difference bounds the Lipschitz constant of d22
    d222 = (F(y1, y2 + 2 * h) - 2 * fp + 2 * fm - F(y1, y2 - 2 * h)) / (2 * h**3)
    return np.array([np.abs(f0).max(), np.abs(d2).max(), np.abs(d22).max(),
                     np.hypot(g1, d2).max(), np.abs(d222).max()])


def audit_regularity(F: Callable, radii=(5.0, 10.0, 20.0, 40.0), n: int = 20_000, h: float = 1e-2,
                     seed: int = 5, growth_tol: float = 0.1) -> dict:
    """Finite-difference audit that F, F_y2, F_y2y2 stay bounded and Lipschitz.

    Sups over nested boxes must stop growing: the sup over the largest box may
    exceed the one over the previous box by at most ``growth_tol`` (relative).
    """
    rng = np.random.default_rng(seed)
    sups = []
    for r in radii:
        y1, y2 = rng.uniform(-r, r, (2, n))
        sups.append(_fd_sups(F, y1, y2, h))
    sups = np.maximum.accumulate(np.array(sups), axis=0)
    names = ["F", "F_y2", "F_y2y2", "grad_F", "F_y2y2y2"]
    growth = (sups[-1] - sups[-2]) / np.maximum(sups[-2], 1e-12)
    bad = [nm for nm, g, s in zip(names, growth, sups[-1]) if g > growth_tol or not np.isfinite(s)]
    if bad:
        raise HypothesisError(f"frozen cost fails the boundedness audit for {bad}")
    return dict(zip(names, sups[-1].tolist()))


def freeze_F(prob: ControlProblem, frozen: FrozenArgs, audit: bool = True) -> FrozenCost:
    F = FrozenCost(prob, frozen)
    if audit:
        audit_regularity(F)
    return F


def effective_hamiltonian(prob: ControlProblem, frozen: FrozenArgs, m: Field) -> float:
    """Quadrature of H(x, ., p, X, 0) against the nodal density m."""
    if frozen.Z != (0.0, 0.0):
        raise ValueError("effective Hamiltonian is evaluated at Z = 0")
    Y1, Y2 = m.grid.mesh
    H = hamiltonian(prob, frozen, Y1, Y2)
    return float(np.sum(H * m.values) * m.grid.cell_area)


def effective_datum(prob: ControlProblem, m: Field) -> Callable[[np.ndarray], np.ndarray]:
    Y1, Y2 = (c.ravel() for c in m.grid.mesh)
    w = m.flat() * m.grid.cell_area

    def gbar(x):
        xs = np.atleast_1d(np.asarray(x, dtype=float))
        vals = np.array([np.sum(np.broadcast_to(prob.terminal(xi, Y1, Y2), Y1.shape) * w) for xi in xs])
        return vals.reshape(np.shape(x)) if np.ndim(x) else float(vals[0])

    return gbar


def lipschitz_transfer_constant(prob: ControlProblem, frozen: FrozenArgs) -> float:
    """Lipschitz constant in y of H(x, ., p, X, 0) implied by the declared constants."""
    lip = prob.lip_y
    return (abs(frozen.p) * lip.get("phi", 0.0) + abs(frozen.X) * lip.get("sigma2", 0.0)
            + lip.get("f", 0.0))


# catalog ---------------------------------------------------------------------

DEFAULT_CONTROLS = tuple(np.linspace(-1.0, 1.0, 5))

# sup of |grad (cos y1 + 1/(1+y2^2))| at y1 = pi/2, y2 = 1/sqrt(3)
_LIP_BENCH_A = float(np.hypot(1.0, 2 * (1 / np.sqrt(3)) / (4 / 3) ** 2))


def _bench_a(sigma=0.2, discount=1.0, horizon=0.25, controls=DEFAULT_CONTROLS):
    return ControlProblem(
        controls=tuple(controls),
        phi_tilde=lambda x, y1, y2, u: u + 0 * x,
        sigma_tilde=lambda x, y1, y2, u: sigma + 0 * x,
        running_cost=lambda x, y1, y2, u: np.sin(x) + np.cos(y1) + 1.0 / (1.0 + y2**2),
        terminal=lambda x, y1, y2: np.arctan(x) + y1**2 * np.exp(-(y1**2)),
        discount=discount, horizon=horizon, catalog_id="bench-A",
        C_f=3.0, C_g=np.pi / 2 + np.exp(-1.0), C_phi=max(abs(u) for u in controls), C_sigma=abs(sigma),
        lip_y={"phi": 0.0, "sigma2": 0.0, "f": _LIP_BENCH_A},
        params=dict(sigma=sigma, discount=discount, horizon=horizon),
    )


def _bench_trivial(sigma=0.2, drift_scale=1.0, cost_scale=1.0, terminal_level=0.0, terminal_slope=1.0,
                   discount=1.0, horizon=0.25, controls=DEFAULT_CONTROLS):
    return ControlProblem(
        controls=tuple(controls),
        phi_tilde=lambda x, y1, y2, u: drift_scale * u + 0 * x,
        sigma_tilde=lambda x, y1, y2, u: sigma + 0 * x,
        running_cost=lambda x, y1, y2, u: cost_scale * np.cos(x),
        terminal=lambda x, y1, y2: terminal_level + terminal_slope * np.arctan(x),
        discount=discount, horizon=horizon, catalog_id="bench-trivial",
        C_f=abs(cost_scale), C_g=abs(terminal_level) + abs(terminal_slope) * np.pi / 2,
        C_phi=abs(drift_scale) * max(abs(u) for u in controls), C_sigma=abs(sigma),
        lip_y={"phi": 0.0, "sigma2": 0.0, "f": 0.0},
        params=dict(sigma=sigma, drift_scale=drift_scale, cost_scale=cost_scale,
                    terminal_level=terminal_level, terminal_slope=terminal_slope,
                    discount=discount, horizon=horizon),
    )


def _bench_odd(sigma=0.2, discount=1.0, horizon=0.25, controls=DEFAULT_CONTROLS):
    umax = max(abs(u) for u in controls)
    return ControlProblem(
        controls=tuple(controls),
        phi_tilde=lambda x, y1, y2, u: u * (1.0 + 0.5 * np.tanh(y1)) + 0 * x,
        sigma_tilde=lambda x, y1, y2, u: sigma + 0 * x,
        running_cost=lambda x, y1, y2, u: np.tanh(y1) * (1.0 + 0.5 * np.sin(x)) + 0 * y2,
        terminal=lambda x, y1, y2: np.arctan(x) + 0.5 * np.tanh(y1),
        discount=discount, horizon=horizon, catalog_id="bench-odd",
        C_f=1.5, C_g=np.pi / 2 + 0.5, C_phi=1.5 * umax, C_sigma=abs(sigma),
        lip_y={"phi": 0.5 * umax, "sigma2": 0.0, "f": 1.5},
        params=dict(sigma=sigma, discount=discount, horizon=horizon),
    )


CATALOG = {
    "bench-A": _bench_a,
    "bench-trivial": _bench_trivial,
    "bench-odd": _bench_odd,
}


def catalog_problem(name: str, **overrides) -> ControlProblem:
    try:
        factory = CATALOG[name]
    except KeyError:
        raise KeyError(f"unknown catalog entry {name!r}; choose from {sorted(CATALOG)}") from None
    return factory(**overrides)
