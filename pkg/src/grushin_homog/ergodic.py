"""Approximated cell problems, the ergodic constant, and numerical versions of
the corrector regularity estimates.

Sign convention: for ``delta u_delta + L u_delta = F`` the ergodic constant is
``lam = lim -delta u_delta(0) = -int F dm``; with ``F = -H`` this is
``int H dm``, the effective Hamiltonian.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .dynamics import DynamicsSpec, phi_potential
from .grid import Field, Grid2D
from .grid_pde import DiscreteGenerator, discretize, solve_discounted, solve_forced, solve_parabolic

logger = logging.getLogger(__name__)

DEFAULT_DELTAS = (0.1, 0.05, 0.02, 0.01, 0.005)


class NonCauchyTraceError(RuntimeError):
    pass


@dataclass
class LipschitzDiag:
    emp_lip: float
    bound: float
    per_delta: list[float] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return self.emp_lip <= self.bound


@dataclass
class HolderDiag:
    gamma: float
    M: float
    emp_ratio: float
    per_delta: list[float] = field(default_factory=list)

    def spread(self) -> float:
        """Relative spread (max - min) / max of the ratio across the delta schedule."""
        vals = np.asarray(self.per_delta or [self.emp_ratio])
        top = vals.max()
        return float((top - vals.min()) / top) if top > 0 else 0.0


@dataclass
class LogGrowthDiag:
    emp_C: float
    linear_slope: float = float("nan")
    supersolution_residual: float = float("nan")
    displayed_bound_holds: bool | None = None


@dataclass
class CorrectorResult:
    lam: float
    w: Field
    delta_trace: list[tuple[float, float, float]]
    lipschitz: LipschitzDiag | None = None
    holder: HolderDiag | None = None
    log_growth: LogGrowthDiag | None = None
    u_min: Field | None = field(default=None, repr=False)

    def to_dict(self) -> dict:
        out = {
            "lambda": self.lam,
            "delta_trace": [
                {"delta": d, "minus_delta_u0": v, "sup_gradient": g} for d, v, g in self.delta_trace
            ],
        }
        if self.lipschitz is not None:
            out["lipschitz"] = vars(self.lipschitz)
        if self.holder is not None:
            out["holder"] = vars(self.holder)
        if self.log_growth is not None:
            out["log_growth"] = vars(self.log_growth)
        return out


def _generator(spec, grid, gen):
    if gen is None:
        return discretize(spec, grid)
    if gen.grid != grid or gen.spec != spec:
        raise ValueError("generator does not match spec/grid")
    return gen


def approximate_corrector(spec: DynamicsSpec, grid: Grid2D, F: Field, delta: float,
                          gen: DiscreteGenerator | None = None) -> Field:
    """Solve delta u + L u = F on the truncated grid."""
    return solve_discounted(_generator(spec, grid, gen), delta, F)


def sup_gradient(u: Field) -> float:
    """Max centred-difference gradient magnitude over interior nodes."""
    v = u.values
    h1, h2 = u.grid.spacings
    d1 = (v[2:, 1:-1] - v[:-2, 1:-1]) / (2 * h1)
    d2 = (v[1:-1, 2:] - v[1:-1, :-2]) / (2 * h2)
    return float(np.sqrt(d1**2 + d2**2).max())


def check_lipschitz(u_delta: Field, L: float, alpha: float) -> LipschitzDiag:
    if alpha <= 1:
        raise ValueError("the Lipschitz estimate needs alpha > 1")
    return LipschitzDiag(emp_lip=sup_gradient(u_delta), bound=L / (alpha - 1))


def _random_pairs(grid: Grid2D, n_pairs: int, seed: int):
    rng = np.random.default_rng(seed)
    a = rng.integers(0, grid.size, n_pairs)
    b = rng.integers(0, grid.size - 1, n_pairs)
    b = np.where(b >= a, b + 1, b)  # x != y
    return a, b


def check_holder(u_delta: Field, gamma: float = 1.0, M: float = 1.0, alpha: float | None = None,
                 n_pairs: int = 100_000, seed: int = 12345) -> HolderDiag:
    """sup |u(x)-u(y)| / (|x-y|^gamma (Phi(x)+Phi(y))) over random node pairs."""
    if not 0 < gamma <= 1:
        raise ValueError("gamma must lie in (0, 1]")
    if M < 1:
        raise ValueError("M must be >= 1")
    if alpha is not None and alpha <= 1:
        raise ValueError("the Holder estimate needs alpha > 1")
    grid = u_delta.grid
    Y1, Y2 = (c.ravel() for c in grid.mesh)
    a, b = _random_pairs(grid, n_pairs, seed)
    u = u_delta.flat()
    dist = np.hypot(Y1[a] - Y1[b], Y2[a] - Y2[b])
    phi = phi_potential((Y1[a], Y2[a]), M) + phi_potential((Y1[b], Y2[b]), M)
    ratio = np.abs(u[a] - u[b]) / (dist**gamma * phi)
    return HolderDiag(gamma=gamma, M=M, emp_ratio=float(ratio.max()))


def log_weight(y1, y2):
    return 1.0 + np.log(y1**4 + y2**2 + 1.0)


def log_supersolution_terms(spec: DynamicsSpec, y1, y2, C1: float = 1.0):
    """Return ``(-tr(sigma sigma^T D^2 g) + alpha y.Dg, closed_form, displayed_bound)``.

    ``g = C1 log(y1^4 + y2^2)``.  The left value uses the explicit first and
    second derivatives of g; ``closed_form`` is
    C1[(2y1^6 - 10 y1^2 y2^2)/D^2 + alpha (4 y1^4 + 2 y2^2)/D] with
    D = y1^4 + y2^2, and ``displayed_bound`` replaces 2 y2^2 by y2^2, which
    is a lower bound of the closed form.  rho is ignored (degenerate process).
    """
    D = y1**4 + y2**2
    g1 = C1 * 4 * y1**3 / D
    g2 = C1 * 2 * y2 / D
    g11 = C1 * (12 * y1**2 / D - 16 * y1**6 / D**2)
    g22 = C1 * (2 / D - 4 * y2**2 / D**2)
    lhs = -(g11 + y1**2 * g22) + spec.alpha * (y1 * g1 + y2 * g2)
    rational = (2 * y1**6 - 10 * y1**2 * y2**2) / D**2
    closed = C1 * (rational + spec.alpha * (4 * y1**4 + 2 * y2**2) / D)
    displayed = C1 * (rational + spec.alpha * (4 * y1**4 + y2**2) / D)
    return lhs, closed, displayed


def supersolution_audit(spec: DynamicsSpec, n_points: int = 10_000, r_min: float = 2.0,
                        r_max: float = 50.0, seed: int = 7, C1: float = 1.0) -> tuple[float, bool]:
    """Relative residual of the closed form and whether the displayed bound holds."""
    rng = np.random.default_rng(seed)
    r = rng.uniform(r_min, r_max, n_points)
    th = rng.uniform(0, 2 * np.pi, n_points)
    y1, y2 = r * np.cos(th), r * np.sin(th)
    lhs, closed, displayed = log_supersolution_terms(spec, y1, y2, C1)
    scale = np.abs(C1) * (1.0 + spec.alpha)
    resid = float(np.max(np.abs(lhs - closed)) / scale)
    holds = bool(np.all(lhs >= displayed - 1e-12 * scale))
    return resid, holds


def linear_growth_slope(w: Field, mask: np.ndarray | None = None) -> float:
    """Slope of the least-squares affine fit |w(y)| ~ a + c |y| over the nodes."""
    Y1, Y2 = w.grid.mesh
    r = np.hypot(Y1, Y2)
    v = np.abs(w.values)
    if mask is not None:
        r, v = r[mask], v[mask]
    c, _ = np.polyfit(r.ravel(), v.ravel(), 1)
    return float(c)


def check_log_growth(w: Field, spec: DynamicsSpec | None = None, mask: np.ndarray | None = None) -> LogGrowthDiag:
    if abs(w.at_origin()) > 1e-12 * max(1.0, w.sup_norm()):
        raise ValueError("corrector must be normalised with w(0) = 0")
    Y1, Y2 = w.grid.mesh
    ratio = np.abs(w.values) / log_weight(Y1, Y2)
    if mask is not None:
        ratio = ratio[mask]
    diag = LogGrowthDiag(emp_C=float(ratio.max()), linear_slope=linear_growth_slope(w, mask))
    if spec is not None:
        diag.supersolution_residual, diag.displayed_bound_holds = supersolution_audit(spec)
    return diag


def richardson_intercept(deltas, values, n_last: int = 3) -> float:
    """Intercept of the least-squares line through the last ``n_last`` points."""
    d = np.asarray(deltas[-n_last:], dtype=float)
    v = np.asarray(values[-n_last:], dtype=float)
    _, intercept = np.polyfit(d, v, 1)
    return float(intercept)


def _check_schedule(delta_schedule):
    ds = [float(d) for d in delta_schedule]
    if len(ds) < 3 or any(d <= 0 for d in ds) or any(b >= a for a, b in zip(ds, ds[1:])):
        raise ValueError("delta schedule must be strictly decreasing, positive, with >= 3 entries")
    return ds


def _check_cauchy(deltas, values):
    vals = np.asarray(values)
    diffs = np.abs(np.diff(vals))
    slopes = diffs / np.abs(np.diff(deltas))
    tol = 1e-9 * max(1.0, np.abs(vals).max())
    # the trace is close to affine in delta: per-unit-delta slope must not blow up
    if diffs[-1] > tol and slopes[-1] > 2.0 * slopes[0] + tol:
        raise NonCauchyTraceError(
            f"-delta*u_delta(0) trace does not contract: slopes {slopes.tolist()} (grid too small?)")


def extract_lambda_w(spec: DynamicsSpec, grid: Grid2D, F: Field, delta_schedule=DEFAULT_DELTAS,
                     gen: DiscreteGenerator | None = None, holder_gamma: float = 1.0, holder_M: float = 1.0,
                     diagnostics: bool = True) -> CorrectorResult:
    """Vanishing-discount limit: lam from -delta u_delta(0), w = u_min - u_min(0)."""
    ds = _check_schedule(delta_schedule)
    gen = _generator(spec, grid, gen)
    trace, lips, holders = [], [], []
    u = None
    for d in ds:
        u = solve_discounted(gen, d, F)
        grad = sup_gradient(u)
        trace.append((d, -d * u.at_origin(), grad))
        lips.append(grad)
        if diagnostics:
            holders.append(check_holder(u, holder_gamma, holder_M).emp_ratio)
    values = [t[1] for t in trace]
    _check_cauchy(ds, values)
    lam = richardson_intercept(ds, values)
    w = Field(grid, u.values - u.at_origin())
    res = CorrectorResult(lam=lam, w=w, delta_trace=trace, u_min=u)
    if diagnostics:
        inner = grid.inner_mask()
        if spec.alpha > 1:
            L = sup_gradient(F)
            res.lipschitz = LipschitzDiag(emp_lip=max(lips), bound=L / (spec.alpha - 1), per_delta=lips)
        res.holder = HolderDiag(gamma=holder_gamma, M=holder_M, emp_ratio=holders[-1], per_delta=holders)
        res.log_growth = check_log_growth(w, spec, inner)
    return res


def cell_residual(gen: DiscreteGenerator, result: CorrectorResult, F: Field, fraction: float = 0.5) -> float:
    """sup over the inner region of |L_h w - F - lam|."""
    r = gen.apply(result.w).values - F.values - result.lam
    return float(np.abs(r[gen.grid.inner_mask(fraction)]).max())


def ergodic_three_ways(spec: DynamicsSpec, grid: Grid2D, f: Field, t_end: float | None = None,
                       dt: float | None = None, delta_schedule=DEFAULT_DELTAS,
                       gen: DiscreteGenerator | None = None) -> tuple[float, float, float]:
    """Three long-run averages of f: vanishing discount, parabolic limit, forced growth rate."""
    gen = _generator(spec, grid, gen)
    ds = _check_schedule(delta_schedule)
    t_end = 100.0 / spec.alpha if t_end is None else t_end
    dt = t_end / 500 if dt is None else dt
    vals = [d * solve_discounted(gen, d, f).at_origin() for d in ds]
    via_delta = richardson_intercept(ds, vals)
    via_parabolic = solve_parabolic(gen, f, t_end, dt).at_origin()
    via_forced = solve_forced(gen, f, t_end, dt).at_origin() / t_end
    return via_delta, via_parabolic, via_forced
