"""Euler-Maruyama simulation of the fast process and Monte Carlo estimates of
its invariant measure.

Paths are split into fixed-size chunks; chunk ``k`` draws its noise from a
Philox stream keyed by ``(seed, k)``.  Results are merged in chunk order, so
the output depends only on the configuration and never on the number of
worker threads.
"""

from __future__ import annotations

import json
import logging
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import ndtr

from .dynamics import DynamicsSpec
from .grid import Field, Grid2D, write_field_csv

logger = logging.getLogger(__name__)


class GridEscapeWarning(UserWarning):
    pass


@dataclass(frozen=True)
class SimConfig:
    dt: float
    n_steps: int
    n_paths: int
    burn_in: int
    seed: int = 0
    initial: tuple[float, float] = (0.0, 0.0)
    chunk_size: int = 16384

    @classmethod
    def default_for(cls, alpha: float, n_paths: int = 10_000, record_time: float | None = None,
                    seed: int = 0, dt: float | None = None) -> "SimConfig":
        """dt = 1e-3/alpha and a burn-in of ten relaxation times."""
        dt = 1e-3 / alpha if dt is None else dt
        burn_in = int(np.ceil(10.0 / (alpha * dt)))
        record_time = 20.0 / alpha if record_time is None else record_time
        return cls(dt=dt, n_steps=burn_in + int(np.ceil(record_time / dt)), n_paths=n_paths,
                   burn_in=burn_in, seed=seed)

    def validate(self, spec: DynamicsSpec) -> list[str]:
        problems = []
        if not self.dt > 0:
            problems.append("dt must be > 0")
        elif self.dt * spec.alpha >= 1:
            problems.append("dt*alpha must be < 1 for a stable explicit drift step")
        if self.n_steps < 1:
            problems.append("n_steps must be a positive integer")
        if self.n_paths < 1:
            problems.append("n_paths must be a positive integer")
        if not 0 <= self.burn_in < self.n_steps:
            problems.append("burn_in must satisfy 0 <= burn_in < n_steps")
        if self.chunk_size < 1:
            problems.append("chunk_size must be positive")
        if not np.all(np.isfinite(self.initial)):
            problems.append("initial point must be finite")
        return problems

    @property
    def n_recorded(self) -> int:
        return self.n_steps - self.burn_in


@dataclass
class MomentEstimates:
    mean: np.ndarray
    second: np.ndarray
    n_samples: int
    std_err: dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "mean": [float(v) for v in self.mean],
            "second": [[float(v) for v in row] for row in self.second],
            "n_samples": int(self.n_samples),
            "std_err": {k: float(v) for k, v in sorted(self.std_err.items())},
        }


@dataclass
class Histogram2D:
    """Occupation density: ``mass`` is per unit area on cells centred at grid nodes."""

    grid: Grid2D
    mass: np.ndarray
    n_outside: int
    n_samples: int

    @property
    def outside_fraction(self) -> float:
        return self.n_outside / self.n_samples

    def total(self) -> float:
        """Recorded mass plus escaped fraction; 1 by construction."""
        return float(self.mass.sum() * self.grid.cell_area + self.outside_fraction)

    def as_field(self) -> Field:
        return Field(self.grid, self.mass)

    def cell_probabilities(self) -> np.ndarray:
        return self.mass * self.grid.cell_area


def euler_step(spec: DynamicsSpec, y, dt: float, dW):
    """One Euler-Maruyama step y + b(y) dt + sqrt(2) sigma_rho(y) dW.

    ``dW`` carries two or three Brownian increments; the third channel is the
    rho-regularisation acting on y2 and is ignored when rho = 0.
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    y1, y2 = y
    dW = list(dW)
    noise2 = y1 * dW[1]
    if spec.rho > 0 and len(dW) > 2:
        noise2 = noise2 + spec.rho * dW[2]
    s2 = np.sqrt(2.0)
    return (y1 - spec.alpha * y1 * dt + s2 * dW[0], y2 - spec.alpha * y2 * dt + s2 * noise2)


def _chunk_rng(seed: int, chunk: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy=seed, spawn_key=(chunk,))))


def _run_chunk(spec: DynamicsSpec, cfg: SimConfig, chunk: int, n: int, grid: Grid2D | None):
    rng = _chunk_rng(cfg.seed, chunk)
    n_ch = 3 if spec.rho > 0 else 2
    sqdt = np.sqrt(cfg.dt)
    y1 = np.full(n, float(cfg.initial[0]))
    y2 = np.full(n, float(cfg.initial[1]))
    sums = np.zeros((5, n))
    counts = None
    if grid is not None:
        n1, n2 = grid.shape
        h1, h2 = grid.spacings
        r1, r2 = grid.half_widths
        counts = np.zeros(n1 * n2 + 1, dtype=np.int64)
    for step in range(cfg.n_steps):
        dW = rng.standard_normal((n_ch, n)) * sqdt
        y1, y2 = euler_step(spec, (y1, y2), cfg.dt, dW)
        if step < cfg.burn_in:
            continue
        sums[0] += y1
        sums[1] += y2
        sums[2] += y1 * y1
        sums[3] += y2 * y2
        sums[4] += y1 * y2
        if counts is not None:
            i1 = np.floor((y1 + r1) / h1 + 0.5)
            i2 = np.floor((y2 + r2) / h2 + 0.5)
            inside = (i1 >= 0) & (i1 < n1) & (i2 >= 0) & (i2 < n2)
            flat = np.where(inside, i1 * n2 + i2, n1 * n2).astype(np.int64)
            counts += np.bincount(flat, minlength=n1 * n2 + 1)
    return counts, sums / cfg.n_recorded


def _simulate(spec: DynamicsSpec, cfg: SimConfig, grid: Grid2D | None, threads: int = 1):
    problems = cfg.validate(spec)
    if problems:
        raise ValueError("; ".join(problems))
    sizes = [min(cfg.chunk_size, cfg.n_paths - k) for k in range(0, cfg.n_paths, cfg.chunk_size)]
    jobs = list(enumerate(sizes))
    run = lambda job: _run_chunk(spec, cfg, job[0], job[1], grid)
    if threads > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run, jobs))
    else:
        results = [run(j) for j in jobs]
    counts = None
    if grid is not None:
        counts = np.zeros(grid.size + 1, dtype=np.int64)
        for c, _ in results:
            counts += c
    path_means = np.concatenate([s for _, s in results], axis=1)
    return counts, path_means


def _moments_from_path_means(path_means: np.ndarray, n_samples: int) -> MomentEstimates:
    # per-path time averages are independent batches
    est = path_means.mean(axis=1)
    n_paths = path_means.shape[1]
    se = path_means.std(axis=1, ddof=1) / np.sqrt(n_paths) if n_paths > 1 else np.full(5, np.nan)
    second = np.array([[est[2], est[4]], [est[4], est[3]]])
    names = ["y1", "y2", "y1y1", "y2y2", "y1y2"]
    return MomentEstimates(mean=est[:2].copy(), second=second, n_samples=n_samples,
                           std_err=dict(zip(names, se)))


def _histogram(grid: Grid2D, counts: np.ndarray) -> Histogram2D:
    n_samples = int(counts.sum())
    mass = counts[:-1].reshape(grid.shape) / (n_samples * grid.cell_area)
    hist = Histogram2D(grid, mass, int(counts[-1]), n_samples)
    if hist.outside_fraction > 0.01:
        warnings.warn(f"{hist.outside_fraction:.2%} of samples fell outside the grid; enlarge it",
                      GridEscapeWarning, stacklevel=3)
    return hist


def simulate_occupation(spec: DynamicsSpec, cfg: SimConfig, grid: Grid2D, threads: int = 1) -> Histogram2D:
    """Time-averaged occupation histogram of all paths after burn-in."""
    counts, _ = _simulate(spec, cfg, grid, threads)
    return _histogram(grid, counts)


def estimate_moments(spec: DynamicsSpec, cfg: SimConfig, threads: int = 1) -> MomentEstimates:
    _, path_means = _simulate(spec, cfg, None, threads)
    return _moments_from_path_means(path_means, cfg.n_paths * cfg.n_recorded)


def simulate_measure(spec: DynamicsSpec, cfg: SimConfig, grid: Grid2D,
                     threads: int = 1) -> tuple[Histogram2D, MomentEstimates]:
    """Histogram and moments from one set of paths."""
    counts, path_means = _simulate(spec, cfg, grid, threads)
    return _histogram(grid, counts), _moments_from_path_means(path_means, cfg.n_paths * cfg.n_recorded)


def y1_marginal_cdf(hist: Histogram2D) -> tuple[np.ndarray, np.ndarray]:
    """Empirical y1 CDF at the right edges of the y1 cells (escaped samples excluded)."""
    p = hist.cell_probabilities().sum(axis=1)
    total = p.sum()
    if total <= 0:
        raise ValueError("histogram is empty")
    edges = hist.grid.y1 + hist.grid.spacings[0] / 2
    return edges, np.cumsum(p) / total


def ks_distance_y1_marginal(hist: Histogram2D, spec: DynamicsSpec) -> float:
    """Kolmogorov-Smirnov distance of the y1 marginal to N(0, 1/alpha)."""
    edges, cdf = y1_marginal_cdf(hist)
    left = hist.grid.y1[0] - hist.grid.spacings[0] / 2
    exact = ndtr(np.sqrt(spec.alpha) * np.concatenate([[left], edges]))
    emp = np.concatenate([[0.0], cdf])
    return float(np.abs(emp - exact).max())


def coarsen(probabilities: np.ndarray, factor: int) -> np.ndarray:
    """Sum cell probabilities over ``factor x factor`` blocks (ragged edge kept)."""
    n1, n2 = probabilities.shape
    b1 = np.arange(n1) // factor
    b2 = np.arange(n2) // factor
    out = np.zeros((b1[-1] + 1, b2[-1] + 1))
    np.add.at(out, (b1[:, None], b2[None, :]), probabilities)
    return out


def total_variation(p: np.ndarray, q: np.ndarray) -> float:
    return 0.5 * float(np.abs(np.asarray(p) / np.sum(p) - np.asarray(q) / np.sum(q)).sum())


def write_histogram_csv(path, hist: Histogram2D) -> Path:
    return write_field_csv(path, hist.as_field(), column="density")


def write_moments_json(path, est: MomentEstimates, spec: DynamicsSpec, cfg: SimConfig) -> Path:
    path = Path(path)
    doc = {"moments": est.to_dict(), "config": {"dynamics": asdict(spec), "sim": asdict(cfg)}}
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path
