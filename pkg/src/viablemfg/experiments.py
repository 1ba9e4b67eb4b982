"""Experiment configuration, orchestration and persistence.

A configuration is a small tree (TOML or JSON) with a strict schema::

    kind = "solve-mfg"
    seed = 0

    [domain]
    kind = "interval"   # or "disk"
    size = 1.0          # length or radius
    nodes = 128         # nodes (interval) or nodes per axis (disk)

    [model]
    name = "viable"
    params = {}

    [solver]
    dt = 0.02

    [study]             # kind-specific options, see STUDY_DEFAULTS

Every run writes its artifacts and, last and atomically, ``manifest.json``
listing each file with its SHA-256.
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
import sys
import tempfile
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .geometry import ConfigurationError, build_disk_domain, build_interval_domain, check_invariance_condition
from .mfg import ConvergenceError, SolverConfig, cascade_differences, save_solution, solve_mfg
from .model import MODELS, build_model, default_initial_density, random_initial_density, validate_model

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

KINDS = ("solve-mfg", "eval-master", "residual", "linearized", "nash-study", "particle-study", "check-hypotheses")

STUDY_DEFAULTS = {
    "solve-mfg": {"t0": 0.0},
    "eval-master": {"t0": 0.0, "points": [0.3, 0.5, 0.7], "kernel": True},
    "residual": {"t0": 0.3},
    "linearized": {"t0": 0.0},
    "nash-study": {"N_list": [2, 3, 4], "samples": 2000},
    "particle-study": {"N_list": [2, 3, 4], "n_paths": 10000, "dt_sde": 1.0 / 256, "slope_band": [-2.8, -1.2]},
    "check-hypotheses": {"C_margin": 15.0, "p_range": 3.0, "n_pairs": 20},
}
SOLVER_KEYS = {"dt", "picard_damping", "picard_tol", "max_iters", "newton_tol", "newton_max", "eps_levels"}

EXIT_OK, EXIT_CHECK_FAILED, EXIT_CONFIG, EXIT_CONVERGENCE, EXIT_IO = 0, 1, 2, 3, 4


@dataclass
class ExperimentConfig:
    kind: str
    domain: dict
    model: dict = field(default_factory=lambda: {"name": "viable", "params": {}})
    solver: dict = field(default_factory=dict)
    study: dict = field(default_factory=dict)
    seed: int = 0
    out: str | None = None

    def __post_init__(self):
        self.validate()

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        if not isinstance(data, dict):
            raise ConfigurationError("configuration must be a table")
        unknown = set(data) - {"kind", "domain", "model", "solver", "study", "seed", "out"}
        if unknown:
            raise ConfigurationError(f"unknown configuration keys: {sorted(unknown)}")
        if "kind" not in data or "domain" not in data:
            raise ConfigurationError("configuration needs 'kind' and 'domain'")
        return cls(**{k: (dict(v) if isinstance(v, dict) else v) for k, v in data.items()})

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        p = Path(path)
        try:
            text = p.read_text()
        except OSError as exc:
            raise ConfigurationError(f"cannot read configuration {p}: {exc}") from exc
        try:
            data = json.loads(text) if p.suffix == ".json" else tomllib.loads(text)
        except (ValueError, tomllib.TOMLDecodeError) as exc:
            raise ConfigurationError(f"malformed configuration {p}: {exc}") from exc
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def hash(self) -> str:
        d = self.to_dict()
        d.pop("out", None)
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()

    def validate(self):
        if self.kind not in KINDS:
            raise ConfigurationError(f"unknown experiment kind {self.kind!r}; choose from {KINDS}")
        dom = self.domain
        if set(dom) - {"kind", "size", "nodes"} or dom.get("kind") not in ("interval", "disk"):
            raise ConfigurationError("domain needs kind in {interval, disk} and only size, nodes")
        if not float(dom.get("size", 1.0)) > 0 or int(dom.get("nodes", 64)) < 16:
            raise ConfigurationError("domain size must be positive and nodes >= 16")
        if set(self.model) - {"name", "params"} or self.model.get("name") not in MODELS:
            raise ConfigurationError(f"model needs name in {sorted(MODELS)} and optional params")
        if set(self.solver) - SOLVER_KEYS:
            raise ConfigurationError(f"unknown solver keys {sorted(set(self.solver) - SOLVER_KEYS)}")
        self.solver_config()
        allowed = STUDY_DEFAULTS[self.kind]
        if set(self.study) - set(allowed):
            raise ConfigurationError(f"unknown study keys for {self.kind}: {sorted(set(self.study) - set(allowed))}")
        if not isinstance(self.seed, int) or not 0 <= self.seed < 2**64:
            raise ConfigurationError("seed must be an unsigned 64-bit integer")
        if self.kind in ("nash-study", "particle-study") and dom["kind"] != "interval":
            raise ConfigurationError("Nash and particle studies run on intervals")
        opts = self.options()
        if self.kind in ("nash-study", "particle-study") and not set(opts["N_list"]) <= {2, 3, 4}:
            raise ConfigurationError("N_list must be a subset of {2, 3, 4}")

    def solver_config(self) -> SolverConfig:
        kw = dict(self.solver)
        if kw.get("eps_levels") is not None:
            kw["eps_levels"] = tuple(kw["eps_levels"])
        try:
            return SolverConfig(**kw)
        except TypeError as exc:
            raise ConfigurationError(str(exc)) from exc

    def options(self) -> dict:
        return {**STUDY_DEFAULTS[self.kind], **self.study}

    def build(self):
        dom = self.domain
        if dom["kind"] == "interval":
            grid = build_interval_domain(float(dom.get("size", 1.0)), int(dom.get("nodes", 64)))
        else:
            grid = build_disk_domain(float(dom.get("size", 1.0)), int(dom.get("nodes", 32)))
        try:
            model = build_model(grid, self.model["name"], **self.model.get("params", {}))
        except TypeError as exc:
            raise ConfigurationError(f"bad model parameters: {exc}") from exc
        return grid, model


@dataclass
class RunManifest:
    config_hash: str
    version: str
    kind: str
    seed: int
    wall_clock: float
    tolerances: dict
    files: dict
    results: dict
    checks: dict

    @property
    def passed(self) -> bool:
        return all(self.checks.values())

    def to_json(self) -> str:
        return _dump(asdict(self))

    @classmethod
    def load(cls, directory) -> "RunManifest":
        path = Path(directory) / "manifest.json"
        try:
            data = json.loads(path.read_text())
        except (OSError, ValueError) as exc:
            raise ConfigurationError(f"no readable manifest in {directory}") from exc
        return cls(**data)


def _jsonable(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer, np.bool_)):
        return obj.item()
    raise TypeError(f"not serialisable: {type(obj)}")


def _clean(obj):
    """JSON-ready copy: string keys, plain numbers."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (np.ndarray, np.floating, np.integer, np.bool_)):
        return _clean(_jsonable(obj))
    return obj


def _dump(obj) -> str:
    return json.dumps(_clean(obj), indent=2, sort_keys=True)


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_csv(path: Path, header, rows):
    with path.open("w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(header)
        for row in rows:
            wr.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])


def _atomic_write(path: Path, text: str):
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".manifest-")
    with os.fdopen(fd, "w") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _initial(grid):
    return default_initial_density(grid) * grid.quad_weights


# -- pipelines ----------------------------------------------------------------

def _run_solve_mfg(cfg, grid, model, out):
    opts = cfg.options()
    sol = solve_mfg(grid, model, float(opts["t0"]), _initial(grid), cfg.solver_config())
    save_solution(sol, out)
    diffs = cascade_differences(sol)
    _write_csv(out / "cascade.csv", ["eps", "sup_diff"], [(e, d) for (e, *_), d in zip(sol.cascade, diffs)])
    mass = sol.M.sum(axis=1)
    res = {"picard_iters": sol.picard_iters, "eps": sol.eps, "mass_drift": float(np.max(np.abs(mass - mass[0]))),
           "cascade_differences": diffs}
    checks = {"mass_conserved": res["mass_drift"] <= 1e-10,
              "cascade_nonincreasing": bool(np.all(np.diff(diffs) <= 1e-12)) if len(diffs) > 1 else True}
    return res, checks


def _run_eval_master(cfg, grid, model, out):
    from .master import compute_K, interpolate, save_kernel

    opts = cfg.options()
    sol = solve_mfg(grid, model, float(opts["t0"]), _initial(grid), cfg.solver_config())
    pts = np.asarray(opts["points"], float).reshape(-1, grid.dim)
    vals = interpolate(grid, sol.u[0], pts, sol.eps)
    _write_csv(out / "U.csv", ["x", "y"][: grid.dim] + ["U"],
               [tuple(p) + (v,) for p, v in zip(pts, vals)])
    if opts["kernel"]:
        save_kernel(compute_K(grid, model, sol), out)
    return {"U": vals.tolist()}, {}


def _run_residual(cfg, grid, model, out):
    from .master import master_equation_residual

    opts = cfg.options()
    rep = master_equation_residual(grid, model, float(opts["t0"]), _initial(grid), cfg.solver_config())
    ok = np.isfinite(rep.residual)
    _write_csv(out / "residual.csv", ["x", "y"][: grid.dim] + ["residual"],
               [tuple(grid.nodes[i]) + (rep.residual[i],) for i in np.flatnonzero(ok)])
    return {"sup_residual": float(np.max(np.abs(rep.residual[ok]))), "h": grid.h, "dt": rep.dt}, {}


def _run_linearized(cfg, grid, model, out):
    from .master import build_linearized_system, compute_K, solve_linearized

    opts = cfg.options()
    sol = solve_mfg(grid, model, float(opts["t0"]), _initial(grid), cfg.solver_config())
    rng = np.random.default_rng(cfg.seed)
    mu0 = (random_initial_density(grid, rng) * grid.quad_weights - _initial(grid)) * sol.mask
    system = build_linearized_system(sol)
    lin = solve_linearized(grid, model, sol, mu0, system=system)
    K = compute_K(grid, model, sol, system=system)
    v0 = lin.v[0][sol.mask]
    rel = float(np.max(np.abs(K.pair(mu0)[sol.mask] - v0)) / max(np.max(np.abs(v0)), 1e-300))
    cols = ["t"] + ["x", "y"][: grid.dim]
    _write_csv(out / "v.csv", cols + ["v"], [(t,) + tuple(grid.nodes[i]) + (lin.v[k, i],)
                                             for k, t in enumerate(sol.times) for i in np.flatnonzero(sol.mask)])
    _write_csv(out / "mu.csv", cols + ["mu"], [(t,) + tuple(grid.nodes[i]) + (lin.mu[k, i],)
                                               for k, t in enumerate(sol.times) for i in np.flatnonzero(sol.mask)])
    return {"representation_error": rel}, {"representation": rel <= 1e-5}


def _run_nash_study(cfg, grid, model, out):
    from .nash import convergence_study

    opts = cfg.options()
    study = convergence_study(grid, model, opts["N_list"], _initial(grid), int(opts["samples"]),
                              cfg.seed, cfg.solver_config())
    _write_csv(out / "convergence.csv", ["N", "sup_gap", "w_gap", "slope_fit"],
               [(r["N"], r["sup_gap"], r["w_gap"], study["slope_sup_gap"]) for r in study["rows"]])
    (out / "study.json").write_text(_dump(study))
    checks = {"sup_gap_slope": -1.5 <= study["slope_sup_gap"] <= -0.5,
              "remainder_decreasing": bool(np.all(np.diff([r["remainder"] for r in study["rows"]]) < 0))}
    return {k: v for k, v in study.items() if k != "rows"} | {"rows": study["rows"]}, checks


def _run_particle_study(cfg, grid, model, out):
    from .nash import project_master, solve_nash
    from .particles import save_path_summary, simulate_pair

    opts = cfg.options()
    config = cfg.solver_config()
    m0 = _initial(grid)
    rows, summary_rows = [], []
    for N in opts["N_list"]:
        nash = solve_nash(grid, model, N, config)
        n_slices = nash.values.shape[0] - 1
        proj = project_master(grid, model, N, range(n_slices), config, with_remainder=False)
        res = simulate_pair(grid, model, nash, proj, m0, int(opts["n_paths"]), float(opts["dt_sde"]), cfg.seed)
        save_path_summary(out / f"paths_N{N}.csv", res["times"], res["summary_Y"])
        rows.append((N, res["sup_gap"], res["sup_gap_se"], res["sup_gap"] - 2 * res["sup_gap_se"],
                     res["sup_gap"] + 2 * res["sup_gap_se"]))
        step = max(1, len(res["curve"]) // 64)
        for s in range(0, len(res["curve"]), step):
            summary_rows.append((N, s * float(opts["dt_sde"]), res["curve"][s]))
    _write_csv(out / "gap.csv", ["N", "sup_gap", "se", "lo_2se", "hi_2se"], rows)
    _write_csv(out / "gap_curve.csv", ["N", "t", "mean_square_gap"], summary_rows)
    Ns = np.log([r[0] for r in rows])
    slope = float(np.polyfit(Ns, np.log([r[1] for r in rows]), 1)[0]) if len(rows) > 1 else float("nan")
    lo, hi = opts["slope_band"]
    return {"rows": rows, "slope": slope}, {"gap_slope": bool(lo <= slope <= hi)}


def _run_check_hypotheses(cfg, grid, model, out):
    opts = cfg.options()
    p = np.linspace(-opts["p_range"], opts["p_range"], 13)
    samples = p[:, None] if grid.dim == 1 else np.array([[a, b] for a in p for b in p])
    inv = check_invariance_condition(grid, model, samples, float(opts["C_margin"]))
    rep = validate_model(model, n_pairs=int(opts["n_pairs"]), seed=cfg.seed, p_range=float(opts["p_range"]))
    inv_d = {"holds": inv.holds, "worst_slack": inv.worst_slack, "worst_node": inv.worst_node,
             "C_margin": float(opts["C_margin"])}
    (out / "invariance.json").write_text(_dump(inv_d))
    (out / "validation.json").write_text(_dump(rep.as_dict()))
    return {"invariance": inv_d, "validation": rep.as_dict()}, {"invariance": inv.holds, "model": rep.ok}


PIPELINES = {
    "solve-mfg": _run_solve_mfg, "eval-master": _run_eval_master, "residual": _run_residual,
    "linearized": _run_linearized, "nash-study": _run_nash_study, "particle-study": _run_particle_study,
    "check-hypotheses": _run_check_hypotheses,
}


def run(config: ExperimentConfig, out=None) -> RunManifest:
    """Run one experiment into ``out`` (or ``config.out``) and write the manifest last."""
    target = out or config.out
    if target is None:
        raise ConfigurationError("no output directory given")
    out = Path(target)
    grid, model = config.build()
    try:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(config.to_json())
    except OSError as exc:
        raise OSError(f"cannot write to {out}: {exc}") from exc
    start = time.perf_counter()
    results, checks = PIPELINES[config.kind](config, grid, model, out)
    wall = time.perf_counter() - start
    files = {p.name: _sha256(p) for p in sorted(out.iterdir())
             if p.is_file() and p.name != "manifest.json" and not p.name.startswith(".")}
    sc = config.solver_config()
    manifest = RunManifest(config.hash(), __version__, config.kind, config.seed, wall,
                           {"picard_tol": sc.picard_tol, "newton_tol": sc.newton_tol, "dt": sc.dt},
                           files, results, {k: bool(v) for k, v in checks.items()})
    _atomic_write(out / "manifest.json", manifest.to_json())
    return manifest


def exit_code_for(exc: BaseException) -> int:
    if isinstance(exc, (ConfigurationError, ValueError)):
        return EXIT_CONFIG
    if isinstance(exc, ConvergenceError):
        return EXIT_CONVERGENCE
    if isinstance(exc, OSError):
        return EXIT_IO
    raise exc


def _slope_comment(xs, ys):
    slope, icpt = map(float, np.polyfit(np.log(xs), np.log(ys), 1))
    return f"# fit: log(gap) = {slope!r} * log(N) + {icpt!r}\n"


def emit_plot_data(directory, which: str) -> list:
    """Write gnuplot-ready series for a finished study; returns the paths."""
    d = Path(directory)
    man = RunManifest.load(d)
    if man.kind != which:
        raise ConfigurationError(f"manifest in {d} is a {man.kind!r} run, not {which!r}")
    if which == "nash-study":
        rows = man.results.get("rows") or []
        if not rows:
            raise ConfigurationError("empty study")
        Ns = [r["N"] for r in rows]
        gaps = [r["sup_gap"] for r in rows]
        path = d / "plot_nash.dat"
        lines = ["# logN log_sup_gap log_w_gap\n", _slope_comment(Ns, gaps)]
        lines += [f"{np.log(r['N'])!r} {np.log(r['sup_gap'])!r} {np.log(r['w_gap'])!r}\n" for r in rows]
    elif which == "particle-study":
        rows = man.results.get("rows") or []
        if not rows:
            raise ConfigurationError("empty study")
        path = d / "plot_particles.dat"
        lines = ["# N sup_gap lo_2se hi_2se\n", _slope_comment([r[0] for r in rows], [r[1] for r in rows])]
        lines += [f"{r[0]} {r[1]!r} {r[3]!r} {r[4]!r}\n" for r in rows]
    else:
        raise ConfigurationError(f"no plot data defined for {which!r}")
    path.write_text("".join(lines))
    return [path]
