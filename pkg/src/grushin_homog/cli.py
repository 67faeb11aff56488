"""Config-driven experiment runner.

Stages run in dependency order and write plain CSV/JSON artifacts plus a
``manifest.json`` that records content hashes, per-stage wall-clock and the
full config.  Artifacts carry no timestamps, so identical configs reproduce
identical bytes.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .config import COMMANDS, DEFAULT_CONFIG, load_config, reference_config_json, validate, with_defaults
from .control import FrozenArgs, catalog_problem, effective_datum, effective_hamiltonian, freeze_F
from .dynamics import DynamicsSpec
from .ergodic import ergodic_three_ways, extract_lambda_w
from .grid import Field, Grid2D, read_field_csv, write_field_csv
from .grid_pde import density_moments, discretize, stationary_density
from .perturb import SlowGrid, convergence_study, solve_effective
from .simulate import SimConfig, simulate_measure, write_histogram_csv

logger = logging.getLogger(__name__)

THREADS_ENV = "GRUSHIN_HOMOG_THREADS"
STAGE_ORDER = ("simulate", "measure", "ergodic", "cell", "effective", "perturb")
STAGE_FILES = {
    "simulate": ("histogram.csv", "sim_moments.json"),
    "measure": ("density.csv", "density_moments.json"),
    "ergodic": ("ergodic.json",),
    "cell": ("cell.json", "corrector.csv"),
    "effective": ("effective.json", "effective_V.csv"),
    "perturb": ("convergence.json",),
}
MANIFEST = "manifest.json"


class ConfigError(ValueError):
    def __init__(self, diagnostics):
        self.diagnostics = diagnostics
        super().__init__("; ".join(str(d) for d in diagnostics))


class OutputCollisionError(FileExistsError):
    pass


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        self.stage = stage
        super().__init__(f"stage {stage!r} failed: {type(cause).__name__}: {cause}")


@dataclass
class RunManifest:
    config: dict
    files: dict[str, str]
    stage_seconds: dict[str, float]
    checks: dict[str, dict]
    version: str = __version__
    output_dir: str = ""

    @property
    def passed(self) -> bool:
        return all(c["passed"] for c in self.checks.values())

    def to_dict(self) -> dict:
        d = asdict(self)
        d["passed"] = self.passed
        d.pop("output_dir")
        return d

    def verify(self) -> list[str]:
        """Names of listed files that are missing or whose hash does not match."""
        bad = []
        for name, digest in self.files.items():
            p = Path(self.output_dir) / name
            if not p.is_file() or sha256_file(p) != digest:
                bad.append(name)
        return bad


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _dump_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def default_threads() -> int:
    try:
        return max(1, int(os.environ.get(THREADS_ENV, "1")))
    except ValueError:
        return 1


def stages_for(command: str) -> tuple[str, ...]:
    return STAGE_ORDER if command == "all" else (command,)


# --- building objects from a config --------------------------------------------

@dataclass
class _Context:
    cfg: dict
    out: Path
    threads: int
    spec: DynamicsSpec = field(init=False)

    def __post_init__(self):
        d = self.cfg["dynamics"]
        self.spec = DynamicsSpec(alpha=float(d["alpha"]), rho=float(d["rho"]))

    def sim_config(self) -> SimConfig:
        s = self.cfg["sim"]
        base = SimConfig.default_for(self.spec.alpha, n_paths=s["n_paths"], seed=s["seed"], dt=s["dt"])
        burn_in = base.burn_in if s["burn_in"] is None else s["burn_in"]
        n_steps = base.n_steps if s["n_steps"] is None else s["n_steps"]
        return SimConfig(dt=base.dt, n_steps=n_steps, n_paths=s["n_paths"], burn_in=burn_in, seed=s["seed"],
                         initial=tuple(float(v) for v in s["initial"]), chunk_size=s["chunk_size"])

    def _grid(self, name, default_width):
        g = self.cfg["grids"][name]
        r = default_width / np.sqrt(self.spec.alpha) if g["half_width"] is None else float(g["half_width"])
        return Grid2D((r, r), (g["count"], g["count"]))

    def measure_grid(self) -> Grid2D:
        return self._grid("measure", 6.0)

    def fast_grid(self) -> Grid2D:
        return self._grid("fast", 4.0)

    def problem(self):
        p = self.cfg["problem"]
        return catalog_problem(p["catalog_id"], **p["overrides"])

    def frozen(self) -> FrozenArgs:
        f = self.cfg["problem"]["frozen"]
        return FrozenArgs(x=f["x"], p=f["p"], X=f["X"])

    def slow_grid(self, horizon) -> SlowGrid:
        s = self.cfg["grids"]["slow"]
        return SlowGrid(half_width=s["half_width"], count=s["count"], horizon=horizon, dt_back=s["dt_back"])

    def density_path(self) -> Path:
        p = self.cfg["density_path"]
        return self.out / "density.csv" if p is None else Path(p)

    def oracle_moments(self) -> dict[str, float]:
        a, r = self.spec.alpha, self.spec.rho
        return {"y1y1": 1 / a, "y2y2": (1 / a + r**2) / a, "y1y2": 0.0}


def _check(value, threshold, passed) -> dict:
    return {"value": float(value), "threshold": float(threshold), "passed": bool(passed)}


# --- stages ------------------------------------------------------------------------

def _stage_simulate(ctx: _Context) -> dict:
    sim = ctx.sim_config()
    problems = sim.validate(ctx.spec)
    if problems:
        raise ValueError("; ".join(problems))
    hist, est = simulate_measure(ctx.spec, sim, ctx.measure_grid(), threads=ctx.threads)
    write_histogram_csv(ctx.out / "histogram.csv", hist)
    _dump_json(ctx.out / "sim_moments.json", {
        "moments": est.to_dict(), "outside_fraction": hist.outside_fraction,
        "sim": {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(sim).items()},
    })
    k = ctx.cfg["checks"]["moment_sigmas"]
    got = {"y1y1": est.second[0, 0], "y2y2": est.second[1, 1], "y1y2": est.second[0, 1]}
    checks = {}
    for name, exact in ctx.oracle_moments().items():
        z = abs(got[name] - exact) / est.std_err[name]
        checks[f"simulate.E_{name}"] = _check(z, k, z <= k)
    return checks


def _stage_measure(ctx: _Context) -> dict:
    m = stationary_density(discretize(ctx.spec, ctx.measure_grid()))
    write_field_csv(ctx.out / "density.csv", m)
    mom = density_moments(m)
    _dump_json(ctx.out / "density_moments.json", {"moments": mom, "mass": m.integrate()})
    rel1, rel2 = ctx.cfg["checks"]["measure_rel_tol"]
    tol = ctx.cfg["checks"]["measure_abs_tol"]
    exact = ctx.oracle_moments()
    e1 = abs(mom["E_y1y1"] / exact["y1y1"] - 1)
    e2 = abs(mom["E_y2y2"] / exact["y2y2"] - 1)
    return {
        "measure.E_y1y1": _check(e1, rel1, e1 <= rel1),
        "measure.E_y2y2": _check(e2, rel2, e2 <= rel2),
        "measure.E_y1y2": _check(abs(mom["E_y1y2"]), tol, abs(mom["E_y1y2"]) <= tol),
    }


_ERGODIC_F = {
    "quadratic": (lambda y1, y2: y1**2 + y2**2, lambda ctx: sum(ctx.oracle_moments()[k] for k in ("y1y1", "y2y2"))),
    "odd": (lambda y1, y2: np.tanh(y1) + 0 * y2, lambda ctx: 0.0),
    "constant": (lambda y1, y2: 1.0 + 0 * y1, lambda ctx: 1.0),
}


def _stage_ergodic(ctx: _Context) -> dict:
    grid = ctx.measure_grid()
    fn, oracle = _ERGODIC_F[ctx.cfg["ergodic_function"]]
    f = grid.evaluate(fn)
    vals = ergodic_three_ways(ctx.spec, grid, f, delta_schedule=ctx.cfg["delta_schedule"])
    exact = oracle(ctx)
    _dump_json(ctx.out / "ergodic.json", {
        "function": ctx.cfg["ergodic_function"], "oracle": exact,
        "via_discount": vals[0], "via_parabolic": vals[1], "via_forced": vals[2],
    })
    tol = ctx.cfg["checks"]["ergodic_rel_tol"]
    scale = max(abs(exact), 1.0)
    spread = (max(vals) - min(vals)) / scale
    return {"ergodic.spread": _check(spread, tol, spread <= tol)}


def _stage_cell(ctx: _Context) -> dict:
    grid = ctx.measure_grid()
    prob, frozen = ctx.problem(), ctx.frozen()
    F = freeze_F(prob, frozen).on(grid)
    gen = discretize(ctx.spec, grid)
    res = extract_lambda_w(ctx.spec, grid, F, ctx.cfg["delta_schedule"], gen=gen)
    m = stationary_density(gen)
    lam_measure = -F.integrate(m)
    doc = res.to_dict()
    doc["lambda_from_measure"] = lam_measure
    doc["frozen"] = {"x": frozen.x, "p": frozen.p, "X": frozen.X}
    _dump_json(ctx.out / "cell.json", doc)
    write_field_csv(ctx.out / "corrector.csv", res.w, column="w")
    c = ctx.cfg["checks"]
    diff = abs(res.lam - lam_measure)
    thr = max(c["lambda_rel_tol"] * abs(lam_measure), c["lambda_abs_tol"])
    return {"cell.lambda_consistency": _check(diff, thr, diff <= thr)}


def _stage_effective(ctx: _Context) -> dict:
    path = ctx.density_path()
    if not path.is_file():
        raise FileNotFoundError(f"density file {path} not found; run the measure stage first or set density_path")
    m = read_field_csv(path)
    prob, frozen = ctx.problem(), ctx.frozen()
    hbar = effective_hamiltonian(prob, frozen, m)
    slow = ctx.slow_grid(prob.horizon)
    gbar = effective_datum(prob, m)(slow.x)
    save = slow.times[:: max(1, slow.n_steps // 10)]
    V = solve_effective(prob, m, slow, save_times=save)
    _dump_json(ctx.out / "effective.json", {
        "density_file": str(path), "density_sha256": sha256_file(path), "mass": m.integrate(),
        "Hbar": hbar, "frozen": {"x": frozen.x, "p": frozen.p, "X": frozen.X},
        "x": slow.x.tolist(), "gbar": np.asarray(gbar).tolist(),
    })
    lines = ["t,x,V"]
    for t, row in zip(V.times, V.values):
        lines.extend(f"{t:.17g},{x:.17g},{v:.17g}" for x, v in zip(V.x, row))
    (ctx.out / "effective_V.csv").write_bytes(("\n".join(lines) + "\n").encode("utf-8"))
    mass_err = abs(m.integrate() - 1.0)
    return {"effective.density_mass": _check(mass_err, 1e-6, mass_err <= 1e-6)}


def _stage_perturb(ctx: _Context) -> dict:
    prob = ctx.problem()
    rep = convergence_study(prob, ctx.spec, ctx.slow_grid(prob.horizon), ctx.fast_grid(),
                            epsilons=ctx.cfg["epsilons"], threads=ctx.threads)
    doc = rep.to_dict()
    doc.pop("runtimes")  # wall-clock goes to the manifest, artifacts stay reproducible
    _dump_json(ctx.out / "convergence.json", doc)
    errs = rep.errors
    frac = ctx.cfg["checks"]["perturb_final_fraction"]
    decreasing = all(b < a for a, b in zip(errs, errs[1:]))
    final = errs[-1] / rep.osc_V if rep.osc_V > 0 else errs[-1]
    return {
        "perturb.monotone_decrease": _check(float(decreasing), 1.0, decreasing),
        "perturb.final_error": _check(final, frac, final <= frac),
    }


STAGES = {
    "simulate": _stage_simulate, "measure": _stage_measure, "ergodic": _stage_ergodic,
    "cell": _stage_cell, "effective": _stage_effective, "perturb": _stage_perturb,
}


# --- driver ------------------------------------------------------------------------

def run(config: dict, overwrite: bool = False, threads: int | None = None) -> RunManifest:
    """Execute the configured stage(s) and write artifacts and the manifest."""
    diags = validate(config)
    errors = [d for d in diags if d.level == "error"]
    if errors:
        raise ConfigError(errors)
    for d in diags:
        logger.warning("%s", d)
    cfg = with_defaults(config)
    out = Path(cfg["output_dir"])
    stages = stages_for(cfg["command"])
    planned = [f for s in stages for f in STAGE_FILES[s]] + [MANIFEST]
    if not overwrite:
        clash = [f for f in planned if (out / f).exists()]
        if clash:
            raise OutputCollisionError(f"{out}: would overwrite {clash}; pass --overwrite")
    out.mkdir(parents=True, exist_ok=True)
    ctx = _Context(cfg, out, default_threads() if threads is None else threads)

    seconds, checks = {}, {}
    enabled = cfg["checks"]["enabled"]
    for name in stages:
        logger.info("stage %s", name)
        t0 = time.perf_counter()
        try:
            result = STAGES[name](ctx)
        except Exception as exc:
            raise StageError(name, exc) from exc
        seconds[name] = time.perf_counter() - t0
        if enabled:
            checks.update(result)
        for key, c in result.items():
            logger.info("%s %s: %.4g (threshold %.4g)", "PASS" if c["passed"] else "FAIL",
                        key, c["value"], c["threshold"])

    files = {f: sha256_file(out / f) for s in stages for f in STAGE_FILES[s]}
    manifest = RunManifest(config=cfg, files=files, stage_seconds=seconds, checks=checks,
                           output_dir=str(out))
    _dump_json(out / MANIFEST, manifest.to_dict())
    return manifest


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="grushin-homog", description=__doc__.splitlines()[0])
    p.add_argument("--config", type=Path, help="experiment config (JSON); defaults are used when omitted")
    p.add_argument("--output", help="output directory (overrides output_dir)")
    p.add_argument("--overwrite", action="store_true", help="allow replacing existing artifacts")
    p.add_argument("--threads", type=int, default=None,
                   help=f"worker threads (default: ${THREADS_ENV} or 1)")
    p.add_argument("--stage", choices=COMMANDS, help="run this stage instead of the configured command")
    p.add_argument("--validate-only", action="store_true", help="print diagnostics and exit")
    p.add_argument("--write-reference-config", type=Path, metavar="PATH",
                   help="write the fully-defaulted reference config and exit")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.write_reference_config is not None:
        args.write_reference_config.write_text(reference_config_json(), encoding="utf-8")
        return 0
    config = load_config(args.config) if args.config else json.loads(json.dumps(DEFAULT_CONFIG))
    if args.output is not None:
        config["output_dir"] = args.output
    if args.stage is not None:
        config["command"] = args.stage
    diags = validate(config)
    for d in diags:
        print(d, file=sys.stderr)
    if any(d.level == "error" for d in diags):
        return 2
    if args.validate_only:
        return 0
    try:
        manifest = run(config, overwrite=args.overwrite, threads=args.threads)
    except (OutputCollisionError, StageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    for key, c in sorted(manifest.checks.items()):
        print(f"{'PASS' if c['passed'] else 'FAIL'} {key}: {c['value']:.4g} (threshold {c['threshold']:.4g})")
    print(f"manifest: {Path(manifest.output_dir) / MANIFEST}")
    return 0 if manifest.passed else 1


if __name__ == "__main__":
    sys.exit(main())
