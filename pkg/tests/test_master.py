import json

import numpy as np
import pytest

from viablemfg.geometry import build_interval_domain
from viablemfg.master import (build_linearized_system, compute_K, flow_consistency_check, interpolate,
                              linearized_estimate, master_equation_residual, save_kernel,
                              second_order_expansion_check, solve_linearized)
from viablemfg.measures import splat
from viablemfg.mfg import SolverConfig, solve_mfg
from viablemfg.model import decoupled_model, default_initial_density, viable_model

CFG = SolverConfig(dt=1 / 16, picard_tol=1e-12)


@pytest.fixture(scope="module")
def setup():
    grid = build_interval_domain(1.0, 32)
    model = viable_model(grid)
    M0 = default_initial_density(grid) * grid.quad_weights
    base = solve_mfg(grid, model, 0.0, M0, CFG)
    mask = base.mask
    x = grid.nodes[:, 0]
    g = np.sin(2 * np.pi * x)
    mu = np.where(mask, M0 * (g - g @ M0), 0.0)
    return grid, model, M0, base, mu, build_linearized_system(base)


def test_linearisation_matches_finite_difference(setup):
    grid, model, M0, base, mu, sys_ = setup
    lin = solve_linearized(grid, model, base, mu, system=sys_)
    s = 1e-4
    up = solve_mfg(grid, model, 0.0, M0 + s * mu, CFG).u[0]
    dn = solve_mfg(grid, model, 0.0, M0 - s * mu, CFG).u[0]
    fd = (up - dn) / (2 * s)
    m = base.mask
    assert np.abs(fd[m] - lin.v[0][m]).max() <= 1e-6 * max(1.0, np.abs(fd[m]).max())


def test_linearised_measure_keeps_its_mass(setup):
    grid, model, M0, base, mu, sys_ = setup
    lin = solve_linearized(grid, model, base, mu, system=sys_)
    assert np.abs(lin.mu.sum(axis=1) - mu.sum()).max() < 1e-14


def test_sources_keep_mass_and_solution_is_linear(setup):
    grid, model, M0, base, mu, sys_ = setup
    n_t = base.n_steps + 1
    rng = np.random.default_rng(0)
    c = rng.standard_normal((n_t, grid.n_nodes, 1)) * 1e-3
    h = rng.standard_normal((n_t - 1, grid.n_nodes))
    vT = rng.standard_normal(grid.n_nodes)
    a = solve_linearized(grid, model, base, mu, system=sys_)
    b = solve_linearized(grid, model, base, 0 * mu, h_src=h, c_src=c, v_T=vT, system=sys_)
    ab = solve_linearized(grid, model, base, 2 * mu, h_src=-h, c_src=-c, v_T=-vT, system=sys_)
    assert np.abs(b.mu.sum(axis=1)).max() < 1e-14
    m = base.mask
    assert np.allclose(ab.v[:, m], 2 * a.v[:, m] - b.v[:, m], atol=1e-12)
    assert np.allclose(ab.mu, 2 * a.mu - b.mu, atol=1e-14)


def test_kernel_represents_the_linearisation(setup):
    grid, model, M0, base, mu, sys_ = setup
    mder = compute_K(grid, model, base, system=sys_)
    lin = solve_linearized(grid, model, base, mu, system=sys_)
    m = base.mask
    assert np.abs(mder.pair(mu)[m] - lin.v[0][m]).max() <= 1e-5
    assert np.all(np.isnan(mder.K[~m]))


def test_decoupled_kernel_vanishes():
    grid = build_interval_domain(1.0, 32)
    model = decoupled_model(grid)
    M0 = default_initial_density(grid) * grid.quad_weights
    base = solve_mfg(grid, model, 0.0, M0, CFG)
    mder = compute_K(grid, model, base)
    assert np.nanmax(np.abs(mder.K)) < 1e-13


def test_expansion_is_second_order(setup):
    grid, model, M0, base, mu, _ = setup
    out = second_order_expansion_check(grid, model, 0.0, M0, mu, [0.04, 0.02, 0.01], CFG)
    assert 1.8 <= out["slope"] <= 2.2
    assert not out["floor_limited"]


def test_master_residual_decreases_under_refinement():
    sups = []
    for n, dt in ((32, 1 / 16), (64, 1 / 32)):
        grid = build_interval_domain(1.0, n)
        model = viable_model(grid)
        M0 = default_initial_density(grid) * grid.quad_weights
        rep = master_equation_residual(grid, model, 0.3, M0, SolverConfig(dt=dt))
        sups.append(np.nanmax(np.abs(rep.at(grid, np.array([[0.4], [0.5], [0.55]]), rep_eps(grid)))))
    assert sups[1] < sups[0]


def rep_eps(grid):
    return grid.eps_levels[-1]


def test_interpolation_is_the_transpose_of_the_splat(interval, rng):
    pts = rng.uniform(0.05, 0.95, (7, 1))
    w = rng.random(7)
    vals = rng.standard_normal(interval.n_nodes)
    assert interpolate(interval, vals, pts) @ w == pytest.approx(vals @ splat(interval, pts, w), abs=1e-13)


def test_flow_consistency(setup):
    grid, model, M0, base, mu, _ = setup
    gaps = flow_consistency_check(base, CFG, steps=[4, 8])
    for g in gaps.values():
        assert g["u"] < 1e-8 and g["m"] < 1e-8


def test_linearised_estimate_is_finite(setup):
    grid, model, M0, base, mu, sys_ = setup
    est = linearized_estimate(solve_linearized(grid, model, base, mu, system=sys_), model)
    assert np.isfinite(est["constant"]) and est["constant"] > 0


def test_kernel_files(tmp_path, setup):
    grid, model, M0, base, mu, sys_ = setup
    save_kernel(compute_K(grid, model, base, system=sys_), tmp_path)
    assert (tmp_path / "K.csv").read_text().splitlines()[0] == "x,y,value"
    assert json.loads((tmp_path / "K.json").read_text())
