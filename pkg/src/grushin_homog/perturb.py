"""Backward solvers for the epsilon-HJB problem and its effective limit, and
the epsilon -> 0 convergence study.

Both solvers march from t = T down to t = 0 on the same time grid.  The slow
block (Hamiltonian in x, discount) is explicit and monotone: the x-drift is
upwinded per control branch inside the max, the x-diffusion is central, and
the x-ends use a reflecting ghost.  The full problem adds the stiff fast
block ``(1/eps) L_h`` implicitly, one sparse LU per epsilon reused for every
time step and every x node (Lie splitting: explicit slow, then implicit fast).

The mixed term ``2 sigma_tilde V_{x y1} / sqrt(eps)`` is differenced centrally
inside the explicit block.  That stencil is not monotone; it vanishes
identically on grid functions of the form A(x) + B(y).
"""

from __future__ import annotations

import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .control import ControlProblem
from .dynamics import DynamicsSpec
from .grid import Field, Grid2D
from .grid_pde import discretize, stationary_density

logger = logging.getLogger(__name__)


class CFLError(ValueError):
    pass


@dataclass(frozen=True)
class SlowGrid:
    half_width: float = 4.0
    count: int = 81
    horizon: float = 0.25
    dt_back: float = 1.25e-3

    def __post_init__(self):
        if self.count < 3 or self.count % 2 == 0:
            raise ValueError("slow grid count must be odd and >= 3")
        if not (self.half_width > 0 and self.horizon > 0 and self.dt_back > 0):
            raise ValueError("half_width, horizon and dt_back must be positive")

    @property
    def x(self) -> np.ndarray:
        return np.linspace(-self.half_width, self.half_width, self.count)

    @property
    def hx(self) -> float:
        return 2 * self.half_width / (self.count - 1)

    @property
    def n_steps(self) -> int:
        return int(np.ceil(self.horizon / self.dt_back - 1e-9))

    @property
    def dt(self) -> float:
        return self.horizon / self.n_steps

    @property
    def times(self) -> np.ndarray:
        return np.linspace(0.0, self.horizon, self.n_steps + 1)

    def halved(self) -> "SlowGrid":
        return SlowGrid(self.half_width, self.count, self.horizon, self.dt_back / 2)


@dataclass
class ValueTensor:
    """Saved time slices; ``values[k]`` has shape (nx,) or (nx, n1w, n2w)."""

    times: np.ndarray
    x: np.ndarray
    values: np.ndarray
    y1: np.ndarray | None = None
    y2: np.ndarray | None = None

    def slice_at(self, t: float) -> np.ndarray:
        k = int(np.argmin(np.abs(self.times - t)))
        if abs(self.times[k] - t) > 1e-9 * max(1.0, abs(t)):
            raise KeyError(f"time {t} was not saved")
        return self.values[k]


@dataclass
class ConvergenceReport:
    epsilons: list[float]
    errors: list[float]
    terminal_errors: list[float]
    runtimes: list[float]
    osc_V: float
    terminal_mismatch_sup: float
    terminal_mismatch_osc: float
    terminal_mismatch_abs_osc: float = float("nan")
    window: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "epsilons": self.epsilons,
            "errors": self.errors,
            "terminal_errors": self.terminal_errors,
            "runtimes": self.runtimes,
            "osc_V": self.osc_V,
            "terminal_mismatch_sup": self.terminal_mismatch_sup,
            "terminal_mismatch_osc": self.terminal_mismatch_osc,
            "terminal_mismatch_abs_osc": self.terminal_mismatch_abs_osc,
            "window": self.window,
        }

    def write_json(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return path


# slow block --------------------------------------------------------------------

def _x_differences(V, hx):
    """Forward/backward/second differences along axis 0 with reflecting ends."""
    fwd = np.zeros_like(V)
    bwd = np.zeros_like(V)
    fwd[:-1] = (V[1:] - V[:-1]) / hx
    bwd[1:] = fwd[:-1]
    second = (fwd - bwd) / hx
    return fwd, bwd, second


def _mixed_x_y1(V, hx, h1):
    """Central d2/dx dy1 with zero normal derivative at x- and y1-ends."""
    dx = np.zeros_like(V)
    dx[1:-1] = (V[2:] - V[:-2]) / (2 * hx)
    out = np.zeros_like(V)
    out[:, 1:-1] = (dx[:, 2:] - dx[:, :-2]) / (2 * h1)
    return out


def _coefficients(prob, X, Y1, Y2):
    """Per-control (phi, sigma, f) evaluated and broadcast on the node array."""
    shape = np.broadcast_shapes(np.shape(X), np.shape(Y1))
    out = []
    for u in prob.controls:
        out.append(tuple(np.broadcast_to(np.asarray(fn(X, Y1, Y2, u), dtype=float), shape)
                         for fn in (prob.phi_tilde, prob.sigma_tilde, prob.running_cost)))
    return out


def _slow_increment(V, coefs, hx, mixed=None, mixed_scale=0.0):
    """max_u {s^2 V_xx + phi V_x (upwinded) + 2 s mixed_scale V_xy1 + f}."""
    fwd, bwd, second = _x_differences(V, hx)
    best = None
    for phi, s, f in coefs:
        val = s * s * second + np.maximum(phi, 0) * fwd + np.minimum(phi, 0) * bwd + f
        if mixed is not None:
            val = val + 2 * s * mixed_scale * mixed
        best = val if best is None else np.maximum(best, val)
    return best


def _cfl_number(coefs, prob, hx, dt, h1=None, eps=None):
    rate = 0.0
    for phi, s, _ in coefs:
        r = 2 * s * s / hx**2 + np.abs(phi) / hx
        if eps is not None:
            r = r + 2 * np.abs(s) / (np.sqrt(eps) * hx * h1)
        rate = max(rate, float(np.max(r)))
    return dt * (rate + prob.discount)


def _check_cfl(number):
    if number > 1.0:
        raise CFLError(f"explicit slow block violates the CFL bound (dt * rate = {number:.3f} > 1)")


def _effective_coefficients(prob, x, m: Field):
    """Per-control coefficient arrays of shape (nx, ny) and quadrature weights."""
    Y1, Y2 = (c.ravel() for c in m.grid.mesh)
    coefs = _coefficients(prob, x[:, None], Y1[None, :], Y2[None, :])
    return coefs, m.flat() * m.grid.cell_area


def solve_effective(prob: ControlProblem, m: Field, slow: SlowGrid, save_times=None,
                    terminal=None) -> ValueTensor:
    """-V_t + Hbar(x, V_x, V_xx) + a V = 0, V(T) = gbar, by an explicit monotone march.

    Hbar is applied as the m-average of the per-y maximum, so a y-dependent
    optimal control is averaged correctly.
    """
    x = slow.x
    hx, dt, a = slow.hx, slow.dt, prob.discount
    coefs, w = _effective_coefficients(prob, x, m)
    _check_cfl(_cfl_number(coefs, prob, hx, dt))
    Y1, Y2 = (c.ravel() for c in m.grid.mesh)
    if terminal is None:
        gy = np.broadcast_to(prob.terminal(x[:, None], Y1[None, :], Y2[None, :]), (x.size, Y1.size))
        V = gy @ w
    else:
        V = np.asarray(terminal, dtype=float).copy()
    times = slow.times
    save = _save_indices(times, save_times)
    saved = {slow.n_steps: V.copy()} if slow.n_steps in save else {}
    for n in range(slow.n_steps - 1, -1, -1):
        Vb = np.broadcast_to(V[:, None], (x.size, Y1.size))
        V = V + dt * (_slow_increment(Vb, coefs, hx) @ w) - dt * a * V
        if n in save:
            saved[n] = V.copy()
    idx = sorted(saved)
    return ValueTensor(times[idx], x, np.array([saved[k] for k in idx]))


def _save_indices(times, save_times):
    if save_times is None:
        return {0, times.size - 1}
    out = set()
    for t in np.atleast_1d(save_times):
        k = int(np.argmin(np.abs(times - t)))
        out.add(k)
    return out


def _window_slices(fast: Grid2D, y_window):
    if y_window is None:
        return slice(None), slice(None)
    m1 = np.nonzero(np.abs(fast.y1) <= y_window + 1e-12)[0]
    m2 = np.nonzero(np.abs(fast.y2) <= y_window + 1e-12)[0]
    return slice(m1[0], m1[-1] + 1), slice(m2[0], m2[-1] + 1)


def solve_full(prob: ControlProblem, spec: DynamicsSpec, slow: SlowGrid, fast: Grid2D, epsilon: float,
               save_times=None, y_window: float | None = None, terminal=None) -> ValueTensor:
    """Backward march of the epsilon-problem on (t, x, y1, y2)."""
    if not epsilon > 0:
        raise ValueError("epsilon must be positive")
    x = slow.x
    hx, dt, a = slow.hx, slow.dt, prob.discount
    h1 = fast.spacings[0]
    Y1, Y2 = fast.mesh
    X3 = x[:, None, None]
    coefs = _coefficients(prob, X3, Y1[None], Y2[None])
    _check_cfl(_cfl_number(coefs, prob, hx, dt, h1, epsilon))
    gen = discretize(spec, fast)
    A = (sp.identity(fast.size, format="csr") + (dt / epsilon) * gen.matrix).tocsc()
    lu = spla.splu(A)
    nx, N = x.size, fast.size
    if terminal is None:
        V = np.broadcast_to(prob.terminal(X3, Y1[None], Y2[None]), (nx,) + fast.shape).astype(float).copy()
    else:
        V = np.asarray(terminal, dtype=float).reshape((nx,) + fast.shape).copy()
    mixed_scale = 1.0 / np.sqrt(epsilon)
    s1, s2 = _window_slices(fast, y_window)
    times = slow.times
    save = _save_indices(times, save_times)
    saved = {}
    if slow.n_steps in save:
        saved[slow.n_steps] = V[:, s1, s2].copy()
    for n in range(slow.n_steps - 1, -1, -1):
        mixed = _mixed_x_y1(V, hx, h1)
        star = V + dt * _slow_increment(V, coefs, hx, mixed, mixed_scale) - dt * a * V
        V = lu.solve(np.ascontiguousarray(star.reshape(nx, N).T)).T.reshape(V.shape)
        if n in save:
            saved[n] = V[:, s1, s2].copy()
    idx = sorted(saved)
    return ValueTensor(times[idx], x, np.array([saved[k] for k in idx]),
                       fast.y1[s1], fast.y2[s2])


def _window_times(slow: SlowGrid, lo=0.5, hi=0.9):
    t = slow.times
    return t[(t >= lo * slow.horizon - 1e-12) & (t <= hi * slow.horizon + 1e-12)]


def convergence_study(prob: ControlProblem, spec: DynamicsSpec, slow: SlowGrid, fast: Grid2D,
                      epsilons=(0.5, 0.2, 0.1, 0.05), y_window: float = 1.0, threads: int = 1,
                      terminal_fraction: float = 0.99) -> ConvergenceReport:
    """sup of |V^eps - V| on K = [0.5T, 0.9T] x [-Rx/2, Rx/2] x [-1, 1]^2 for each epsilon."""
    eps = [float(e) for e in epsilons]
    if any(b >= a for a, b in zip(eps, eps[1:])):
        raise ValueError("epsilons must be strictly decreasing")
    m = stationary_density(discretize(spec, fast))
    tK = _window_times(slow)
    t_term = slow.times[int(np.argmin(np.abs(slow.times - terminal_fraction * slow.horizon)))]
    save = np.concatenate([tK, [t_term, slow.horizon]])
    eff = solve_effective(prob, m, slow, save_times=save)
    xmask = np.abs(slow.x) <= slow.half_width / 2 + 1e-12

    VK = np.array([eff.slice_at(t)[xmask] for t in tK])
    osc_V = float(VK.max() - VK.min())

    def one(e):
        t0 = time.perf_counter()
        full = solve_full(prob, spec, slow, fast, e, save_times=save, y_window=y_window)
        err = max(float(np.abs(full.slice_at(t)[xmask] - eff.slice_at(t)[xmask][:, None, None]).max())
                  for t in tK)
        term = float(np.abs(full.slice_at(t_term)[xmask]
                            - eff.slice_at(t_term)[xmask][:, None, None]).max())
        return err, term, time.perf_counter() - t0, full

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(one, eps))
    else:
        results = [one(e) for e in eps]

    # terminal mismatch g(x, y) - gbar(x) on the same window
    g_full = results[0][3].slice_at(slow.horizon)[xmask]
    gbar = eff.slice_at(slow.horizon)[xmask][:, None, None]
    diff = g_full - gbar
    report = ConvergenceReport(
        epsilons=eps,
        errors=[r[0] for r in results],
        terminal_errors=[r[1] for r in results],
        runtimes=[r[2] for r in results],
        osc_V=osc_V,
        terminal_mismatch_sup=float(np.abs(diff).max()),
        terminal_mismatch_osc=float(diff.max() - diff.min()),
        terminal_mismatch_abs_osc=float(np.abs(diff).max() - np.abs(diff).min()),
        window={"t": [float(tK[0]), float(tK[-1])], "x": [-slow.half_width / 2, slow.half_width / 2],
                "y": [-y_window, y_window], "t_terminal": float(t_term)},
    )
    for e, err, term in zip(eps, report.errors, report.terminal_errors):
        logger.info("eps=%g  sup_K|V^eps - V|=%.4g  terminal=%.4g", e, err, term)
    return report
