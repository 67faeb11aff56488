"""Coefficients of the fast process dZ = b(Z) dt + sqrt(2) sigma(Z) dW.

sigma(y) = [[1, 0], [0, y1]] is of Grushin type and b(y) = -alpha * y is an
Ornstein-Uhlenbeck drift.  A regularisation parameter ``rho`` adds a third
noise channel acting on y2, so that sigma_rho sigma_rho^T = diag(1, y1^2 + rho^2);
``rho = 0`` recovers the degenerate process.

All functions broadcast over array-valued coordinates.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import brentq, minimize_scalar


@dataclass(frozen=True)
class DynamicsSpec:
    alpha: float
    rho: float = 0.0

    def __post_init__(self):
        if not (np.isfinite(self.alpha) and self.alpha > 0):
            raise ValueError(f"alpha must be > 0, got {self.alpha}")
        if not (np.isfinite(self.rho) and self.rho >= 0):
            raise ValueError(f"rho must be >= 0, got {self.rho}")


@dataclass(frozen=True)
class Jet2:
    """Value, gradient and Hessian of a function at a point."""

    value: float
    grad: np.ndarray
    hess: np.ndarray

    def __post_init__(self):
        grad = np.asarray(self.grad, dtype=float).reshape(2)
        hess = np.asarray(self.hess, dtype=float).reshape(2, 2)
        if not np.allclose(hess, hess.T, rtol=0, atol=1e-12 * (1 + np.abs(hess).max())):
            raise ValueError("Hessian must be symmetric")
        object.__setattr__(self, "grad", grad)
        object.__setattr__(self, "hess", hess)


def diffusion_product(spec: DynamicsSpec, y) -> np.ndarray:
    """Return sigma_rho(y) sigma_rho(y)^T = diag(1, y1^2 + rho^2)."""
    y1, _ = y
    out = np.zeros((2, 2))
    out[0, 0] = 1.0
    out[1, 1] = float(y1) ** 2 + spec.rho**2
    return out


def drift(spec: DynamicsSpec, y) -> np.ndarray:
    y1, y2 = y
    return np.array([-spec.alpha * y1, -spec.alpha * y2], dtype=float)


def generator_apply(spec: DynamicsSpec, jet: Jet2, y) -> float:
    """Apply L u = -tr(sigma sigma^T D^2 u) - b . Du to a jet at ``y``."""
    y1, y2 = y
    q, Y = jet.grad, jet.hess
    return float(
        -Y[0, 0]
        - (y1**2 + spec.rho**2) * Y[1, 1]
        + spec.alpha * (y1 * q[0] + y2 * q[1])
    )


def lyapunov_W(y):
    y1, y2 = y
    return np.asarray(y1) ** 4 / 12.0 + np.asarray(y2) ** 2 / 2.0


def lyapunov_residual(spec: DynamicsSpec, y):
    """L_rho W for W = y1^4/12 + y2^2/2."""
    y1, y2 = (np.asarray(c, dtype=float) for c in y)
    a = spec.alpha
    return -2.0 * y1**2 - spec.rho**2 + (a / 3.0) * y1**4 + a * y2**2


def _worst_residual_on_circle(spec: DynamicsSpec, radius: float, n_angles: int = 721) -> float:
    theta = np.linspace(0.0, np.pi / 2, n_angles)
    vals = lyapunov_residual(spec, (radius * np.cos(theta), radius * np.sin(theta)))
    k = int(np.argmin(vals))
    lo, hi = theta[max(k - 1, 0)], theta[min(k + 1, n_angles - 1)]
    if hi <= lo:
        return float(vals[k])
    res = minimize_scalar(
        lambda t: float(lyapunov_residual(spec, (radius * np.cos(t), radius * np.sin(t)))),
        bounds=(lo, hi),
        method="bounded",
        options={"xatol": 1e-12},
    )
    return float(min(res.fun, vals[k]))


def lyapunov_radius(spec: DynamicsSpec, r_max: float = 1e3, n_scan: int = 4000) -> float:
    """Radius R0 beyond which L_rho W >= 1 everywhere.

    The residual is even in both coordinates, so the worst direction is
    searched on a quarter circle.  A radial scan locates the last radius with
    a violation and ``brentq`` refines the crossing; a small outward nudge
    makes the returned value a certificate rather than an estimate.
    """
    radii = np.linspace(0.0, r_max, n_scan + 1)[1:]
    # geometric refinement near the origin where the interesting crossing lives
    radii = np.union1d(radii, np.geomspace(1e-3, 50.0, 4000))
    worst = np.array([_worst_residual_on_circle(spec, r, 91) for r in radii]) - 1.0
    bad = np.nonzero(worst < 0)[0]
    if bad.size == 0:
        return float(radii[0])
    k = bad[-1]
    if k == radii.size - 1:
        raise RuntimeError("Lyapunov inequality still violated at r_max")
    f = lambda r: _worst_residual_on_circle(spec, r) - 1.0
    r0 = brentq(f, radii[k], radii[k + 1], xtol=1e-14)
    r0 *= 1.0 + 1e-9
    while f(r0) < 0:
        r0 *= 1.0 + 1e-9
    return float(r0)


def phi_potential(z, M: float = 1.0):
    z1, z2 = z
    return np.asarray(z1) ** 4 + np.asarray(z2) ** 2 + M


def phi_theta_lhs(spec: DynamicsSpec, z, M: float = 1.0):
    """-Delta_G Phi + alpha z . D Phi for Phi = z1^4 + z2^2 + M."""
    z1, z2 = (np.asarray(c, dtype=float) for c in z)
    lap_g = 12.0 * z1**2 + 2.0 * (z1**2 + spec.rho**2)
    return -lap_g + spec.alpha * (4.0 * z1**4 + 2.0 * z2**2)


def phi_theta_constant(spec: DynamicsSpec, M: float = 1.0, scan_radius: float = 50.0,
                       n_scan: int = 200_001) -> float:
    """Smallest L with -Delta_G Phi + alpha z.DPhi >= 2 alpha Phi - L on the scan box.

    The gap ``lhs - 2 alpha Phi`` does not depend on z2, so the scan is one
    dimensional in z1 and polished with a bounded scalar minimisation.
    """
    if spec.alpha <= 1:
        raise ValueError("phi_theta_constant requires alpha > 1")
    if M < 1:
        raise ValueError("M must be >= 1")

    def gap(z1):
        return phi_theta_lhs(spec, (z1, 0.0), M) - 2 * spec.alpha * phi_potential((z1, 0.0), M)

    zs = np.linspace(0.0, scan_radius, n_scan)
    g = gap(zs)
    k = int(np.argmin(g))
    lo, hi = zs[max(k - 1, 0)], zs[min(k + 1, n_scan - 1)]
    res = minimize_scalar(lambda s: float(gap(s)), bounds=(lo, hi), method="bounded",
                          options={"xatol": 1e-14})
    return float(-min(res.fun, g[k]))
