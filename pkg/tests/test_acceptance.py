"""Acceptance suite: one test per criterion, each recording a PASS/FAIL line."""

import numpy as np
import pytest

from conftest import record_criterion
from viablemfg.geometry import build_interval_domain
from viablemfg.master import (build_linearized_system, compute_K, master_equation_residual,
                              second_order_expansion_check, solve_linearized)
from viablemfg.measures import MeasureField, wasserstein1_dual_lp, wasserstein1_eps, wasserstein1_masses
from viablemfg.mfg import SolverConfig, cascade_differences, lasry_lions_gap, solve_mfg, stability_constants
from viablemfg.model import (decoupled_model, default_initial_density, elliptic_control_model,
                             random_initial_density, viable_model)
from viablemfg.nash import convergence_study, project_master, solve_nash, sup_gap
from viablemfg.ops import GridOperators
from viablemfg.particles import simulate_pair, viability_run

pytestmark = pytest.mark.acceptance


def _grid(n):
    return build_interval_domain(1.0, n)


def _m0(grid, **kw):
    return default_initial_density(grid, **kw) * grid.quad_weights


def _random(grid, rng):
    return random_initial_density(grid, rng) * grid.quad_weights


def _slope(x, y):
    return float(np.polyfit(np.log(x), np.log(y), 1)[0])


# -- 1, 2, 12: the MFG solver --------------------------------------------------

def test_criterion_01_mass_conservation():
    grid = _grid(128)
    model = viable_model(grid)
    rng = np.random.default_rng(1)
    worst = 0.0
    for m0 in (_m0(grid), _random(grid, rng), _random(grid, rng)):
        sol = solve_mfg(grid, model, 0.0, m0, SolverConfig(dt=0.02))
        for _, _, M, _ in sol.cascade:
            worst = max(worst, float(np.max(np.abs(M.sum(axis=1) - M[0].sum()))))
    assert record_criterion(1, worst <= 1e-10, f"max mass drift {worst:.2e} (tol 1e-10)")


def test_criterion_02_discrete_duality():
    grid = _grid(64)
    model = viable_model(grid)
    cfg = SolverConfig(dt=1 / 32)
    rng = np.random.default_rng(2)
    exact = True
    gaps = []
    for _ in range(20):
        s1 = solve_mfg(grid, model, 0.0, _random(grid, rng), cfg)
        s2 = solve_mfg(grid, model, 0.0, _random(grid, rng), cfg)
        ops = GridOperators.build(grid, model, s1.eps)
        for k in (0, s1.n_steps // 2, s1.n_steps - 1):
            u = s1.u[k, ops.idx]
            exact &= (ops.fokker_planck(u) != ops.transport(u).T).nnz == 0
        gaps.append(lasry_lions_gap(s1, s2, model))
    ok = exact and min(gaps) >= -1e-8
    assert record_criterion(2, ok, f"bit-exact transpose {exact}; min monotonicity gap {min(gaps):.3e} (>= -1e-8)")


def test_criterion_12_cascade():
    grid = _grid(128)
    sol = solve_mfg(grid, viable_model(grid), 0.0, _m0(grid), SolverConfig(dt=0.02))
    diffs = cascade_differences(sol)
    ok = bool(np.all(np.diff(diffs) <= 0))
    assert record_criterion(12, ok, "cascade differences " + ", ".join(f"{d:.3e}" for d in diffs))


# -- 3: stability constants ----------------------------------------------------

def test_criterion_03_stability_constants():
    out = {}
    for n, dt in ((64, 1 / 32), (128, 1 / 64)):
        grid = _grid(n)
        # same seed at both resolutions: the same continuous bump mixtures
        rng = np.random.default_rng(5)
        pairs = [(_random(grid, rng), _random(grid, rng)) for _ in range(10)]
        out[n] = stability_constants(grid, viable_model(grid), pairs, SolverConfig(dt=dt))
    rm = out[128]["ratio_m"] / out[64]["ratio_m"]
    ru = out[128]["ratio_u"] / out[64]["ratio_u"]
    finite = all(np.isfinite([out[n][k] for n in out for k in ("ratio_m", "ratio_u")]))
    ok = finite and abs(rm - 1) <= 0.25 and abs(ru - 1) <= 0.25
    assert record_criterion(3, ok, f"ratio_m {out[64]['ratio_m']:.3f} -> {out[128]['ratio_m']:.3f}, "
                                   f"ratio_u {out[64]['ratio_u']:.1f} -> {out[128]['ratio_u']:.1f} (within 25%)")


# -- 4, 5, 6: measure derivative and master equation ---------------------------

def test_criterion_04_expansion_slope():
    grid = _grid(64)
    model = viable_model(grid)
    m0 = _m0(grid)
    cfg = SolverConfig(dt=1 / 32, picard_tol=1e-12)
    base_mask = grid.mask(cfg.levels(grid)[-1])
    rng = np.random.default_rng(4)
    g = rng.standard_normal(grid.n_nodes)
    mu = np.where(base_mask, m0 * (g - g @ m0), 0.0)
    out = second_order_expansion_check(grid, model, 0.0, m0, mu, [0.04, 0.02, 0.01], cfg)
    ok = 1.8 <= out["slope"] <= 2.2 and not out["floor_limited"]
    assert record_criterion(4, ok, f"slope {out['slope']:.4f} in [1.8, 2.2]; defects "
                                   + ", ".join(f"{d:.2e}" for d in out["defects"]))


def test_criterion_05_representation():
    grid = _grid(64)
    model = viable_model(grid)
    base = solve_mfg(grid, model, 0.0, _m0(grid), SolverConfig(dt=1 / 32))
    system = build_linearized_system(base)
    mder = compute_K(grid, model, base, system=system)
    rng = np.random.default_rng(6)
    worst = 0.0
    for _ in range(20):
        mu0 = np.where(base.mask, rng.standard_normal(grid.n_nodes), 0.0) * grid.quad_weights
        v0 = solve_linearized(grid, model, base, mu0, system=system).v[0][base.mask]
        worst = max(worst, float(np.max(np.abs(mder.pair(mu0)[base.mask] - v0)) / np.max(np.abs(v0))))
    assert record_criterion(5, worst <= 1e-5, f"max relative error {worst:.2e} over 20 directions (tol 1e-5)")


def test_criterion_06_master_equation_residual():
    pts = np.array([[0.4], [0.45], [0.5], [0.55]])
    ratios = []
    for kw in ({}, {"center": np.array([0.45]), "width": 0.1}):
        vals = []
        for n in (128, 256):
            grid = _grid(n)
            rep = master_equation_residual(grid, viable_model(grid), 0.3, _m0(grid, **kw), SolverConfig(dt=2 / n))
            vals.append(np.abs(rep.at(grid, pts, grid.eps_levels[-1])))
        ratios.extend(vals[0] / vals[1])
    ratios = np.array(ratios)
    ok = len(ratios) == 8 and bool(np.all(ratios >= 1.8))
    assert record_criterion(6, ok, f"residual ratios under (h, dt) halving: min {ratios.min():.3f}, "
                                   f"max {ratios.max():.3f} at 8 points (>= 1.8)")


# -- 7, 8: Nash system -----------------------------------------------------------

NASH_CFG = SolverConfig(dt=1 / 16, picard_tol=1e-11)


@pytest.fixture(scope="module")
def nash_study():
    grid = _grid(24)
    return convergence_study(grid, viable_model(grid), [2, 3, 4], _m0(grid), 2000, 0, NASH_CFG)


def test_criterion_07_nash_convergence(nash_study):
    grid = _grid(24)
    model = decoupled_model(grid)
    gaps = []
    for N in (2, 3):
        nash = solve_nash(grid, model, N, NASH_CFG)
        gaps.append(sup_gap(nash, project_master(grid, model, N, [0, 8], NASH_CFG, with_remainder=False)))
    slope = nash_study["slope_sup_gap"]
    ok = -1.5 <= slope <= -0.5 and max(gaps) <= 2 * NASH_CFG.picard_tol
    rows = ", ".join(f"N={r['N']}: {r['sup_gap']:.4f}" for r in nash_study["rows"])
    assert record_criterion(7, ok, f"sup-gap slope {slope:.3f} in [-1.5, -0.5] ({rows}); "
                                   f"decoupled gap {max(gaps):.1e} <= {2 * NASH_CFG.picard_tol:.0e}")


def test_criterion_08_remainder(nash_study):
    r = [row["remainder"] for row in nash_study["rows"]]
    ok = bool(np.all(np.diff(r) < 0))
    assert record_criterion(8, ok, "max |r| for N = 2, 3, 4: " + ", ".join(f"{v:.4f}" for v in r))


# -- 9, 10: particles --------------------------------------------------------------

def test_criterion_09_trajectory_gap():
    grid = _grid(24)
    model = viable_model(grid)
    m0 = _m0(grid)
    Ns, gaps, ses = [2, 3, 4], [], []
    zero = None
    for N in Ns:
        nash = solve_nash(grid, model, N, NASH_CFG)
        n_slices = nash.values.shape[0] - 1
        proj = project_master(grid, model, N, range(n_slices), NASH_CFG, with_remainder=False)
        res = simulate_pair(grid, model, nash, proj, m0, 10_000, 1 / 256, 3)
        gaps.append(res["sup_gap"])
        ses.append(res["sup_gap_se"])
        if N == 2:
            same = type(proj)(N, grid, proj.t0, proj.dt, {k: nash.values[k] for k in range(n_slices)}, {})
            zero = simulate_pair(grid, model, nash, same, m0, 10_000, 1 / 256, 3)["sup_gap"]
    gaps, ses = np.array(gaps), np.array(ses)
    slope = _slope(Ns, gaps)
    lo, hi = _slope(Ns, np.maximum(gaps - 2 * ses, 1e-300)), _slope(Ns, gaps + 2 * ses)
    resolved = bool(np.all(gaps - 2 * ses > 0))
    ok = -2.8 <= slope <= -1.2 and resolved and zero == 0.0
    bands = ", ".join(f"N={N}: {g:.5f} +- {2 * s:.5f}" for N, g, s in zip(Ns, gaps, ses))
    assert record_criterion(9, ok, f"slope {slope:.3f} in [-2.8, -1.2] (2 SE band slopes {lo:.2f}, {hi:.2f}; "
                                   f"{bands}); identical feedback gap {zero}")


def test_criterion_10_viability():
    grid = _grid(64)
    m0 = _m0(grid)
    sol = solve_mfg(grid, viable_model(grid), 0.0, m0, SolverConfig(dt=1 / 32))
    u = np.nan_to_num(sol.u[:-1])
    viable = viability_run(grid, viable_model(grid), u, sol.dt, m0, 1000, 1e-4, 7)
    ctrl = viability_run(grid, elliptic_control_model(grid), np.zeros_like(u), sol.dt, m0, 1000, 1e-4, 7)
    ok = viable["exit_fraction"] <= 1e-4 and ctrl["exit_attempts"] > viable["exit_attempts"]
    assert record_criterion(10, ok, f"activations {viable['exit_attempts']} / {viable['steps']} steps "
                                    f"(fraction {viable['exit_fraction']:.1e} <= 1e-4); "
                                    f"elliptic control {ctrl['exit_attempts']}")


# -- 11: distances -------------------------------------------------------------------

def test_criterion_11_wasserstein():
    grid = _grid(64)
    rng = np.random.default_rng(11)

    def sub():
        w = rng.random(grid.n_nodes) ** 3
        return w / w.sum() * rng.uniform(0.2, 1.0)

    lp_err = 0.0
    for _ in range(50):
        a, b = _random(grid, rng), _random(grid, rng)
        lp_err = max(lp_err, abs(wasserstein1_masses(grid, a, b) - wasserstein1_dual_lp(grid, a, b)))
    worst = -np.inf
    for _ in range(100):
        a, b = sub(), sub()
        d = wasserstein1_masses(grid, a, b)
        ma, mb = MeasureField.from_masses(grid, a), MeasureField.from_masses(grid, b)
        for eps in grid.eps_levels:
            slack = d + grid.diam * (a + b)[~grid.mask(eps)].sum() - wasserstein1_eps(ma, mb, eps)
            worst = max(worst, -slack)
    ok = lp_err <= 1e-8 and worst <= 0
    assert record_criterion(11, ok, f"CDF vs dual LP {lp_err:.1e} (tol 1e-8); "
                                    f"restricted bound violated by at most {worst:.2e} (<= 0)")
