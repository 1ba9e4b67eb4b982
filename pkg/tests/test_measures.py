import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from viablemfg.geometry import ConfigurationError, build_interval_domain
from viablemfg.measures import (DomainError, EmpiricalConfig, MeasureField, d1_interval, empirical_measure,
                                load_empirical_json, load_measure_csv, save_empirical_json, save_measure_csv,
                                signed_dual_norm, splat, wasserstein1, wasserstein1_dual_lp, wasserstein1_eps,
                                wasserstein1_masses)

GRID = build_interval_domain(1.0, 32)


def _sub(rng, grid, mass=None):
    w = rng.random(grid.n_nodes) ** 3
    return w / w.sum() * (rng.uniform(0.3, 1.0) if mass is None else mass)


def test_dirac_distance_is_the_node_spacing(interval):
    M1, M2 = np.zeros(interval.n_nodes), np.zeros(interval.n_nodes)
    M1[10], M2[17] = 1.0, 1.0
    assert wasserstein1_masses(interval, M1, M2) == pytest.approx(7 * interval.h, abs=1e-14)


def test_cdf_distance_matches_dual_lp():
    rng = np.random.default_rng(0)
    for _ in range(10):
        M1, M2 = _sub(rng, GRID), _sub(rng, GRID)
        assert abs(wasserstein1_masses(GRID, M1, M2) - wasserstein1_dual_lp(GRID, M1, M2)) <= 1e-8


def _sparse(rng, grid, k=8, mass=None):
    M = np.zeros(grid.n_nodes)
    M[rng.choice(grid.n_nodes, k, replace=False)] = rng.random(k)
    return M / M.sum() * (rng.uniform(0.3, 1.0) if mass is None else mass)


def _support_dual(grid, M1, M2):
    """Dual LP on the support nodes and the centre; McShane extension makes this exact."""
    from scipy.optimize import linprog
    idx = np.union1d(np.flatnonzero((M1 != 0) | (M2 != 0)), [grid.center_node])
    X, D, n = grid.nodes[idx], (M1 - M2)[idx], len(idx)
    rows = []
    for i in range(n):
        for j in range(n):
            if i != j:
                r = np.zeros(n)
                r[i], r[j] = 1, -1
                rows.append(r)
    b = [np.linalg.norm(X[i] - X[j]) for i in range(n) for j in range(n) if i != j]
    bounds = [(0, 0) if k == int(np.searchsorted(idx, grid.center_node)) else (None, None) for k in range(n)]
    return -linprog(-D, A_ub=np.array(rows), b_ub=b, bounds=bounds, method="highs").fun


def test_disk_primal_matches_dual(disk):
    rng = np.random.default_rng(1)
    for _ in range(5):
        M1, M2 = _sparse(rng, disk), _sparse(rng, disk)
        assert wasserstein1_masses(disk, M1, M2) == pytest.approx(_support_dual(disk, M1, M2), abs=1e-8)


def test_potential_is_lipschitz_and_optimal(disk):
    rng = np.random.default_rng(2)
    M1, M2 = _sparse(rng, disk, mass=1.0), _sparse(rng, disk, mass=1.0)
    val, phi = wasserstein1(MeasureField.from_masses(disk, M1), MeasureField.from_masses(disk, M2), True)
    assert phi @ (M1 - M2) == pytest.approx(val, abs=1e-8)
    dist = np.linalg.norm(disk.nodes[:, None] - disk.nodes[None], axis=2)
    assert np.all(np.abs(phi[:, None] - phi[None]) <= dist + 1e-9)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_metric_axioms(seed):
    rng = np.random.default_rng(seed)
    A, B, C = (_sub(rng, GRID) for _ in range(3))
    d = lambda x, y: wasserstein1_masses(GRID, x, y)
    assert d(A, A) == 0.0
    assert d(A, B) == pytest.approx(d(B, A), abs=1e-15)
    assert d(A, C) <= d(A, B) + d(B, C) + 1e-14


def test_batched_interval_distance(interval, rng):
    M1 = np.stack([_sub(rng, interval) for _ in range(4)])
    M2 = _sub(rng, interval)
    batch = d1_interval(interval, M1, M2)
    assert batch.shape == (4,)
    assert np.allclose(batch, [wasserstein1_masses(interval, m, M2) for m in M1], atol=0)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_restricted_distance_bound(seed):
    rng = np.random.default_rng(seed)
    M1, M2 = _sub(rng, GRID), _sub(rng, GRID)
    d = wasserstein1_masses(GRID, M1, M2)
    m1, m2 = MeasureField.from_masses(GRID, M1), MeasureField.from_masses(GRID, M2)
    for eps in GRID.eps_levels:
        outside = (M1 + M2)[~GRID.mask(eps)].sum()
        assert wasserstein1_eps(m1, m2, eps) <= d + GRID.diam * outside + 1e-12


def test_eps_must_be_a_grid_level(interval, m0):
    m = MeasureField.from_masses(interval, m0)
    with pytest.raises(ConfigurationError):
        wasserstein1_eps(m, m, 0.0123)


def test_measure_validation(interval):
    with pytest.raises(ValueError):
        MeasureField(interval, -np.ones(interval.n_nodes))
    with pytest.raises(ValueError):
        MeasureField(interval, 2 * np.ones(interval.n_nodes))
    MeasureField(interval, -np.ones(interval.n_nodes), signed=True)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(0.001, 0.999), min_size=1, max_size=6))
def test_splat_preserves_mass_and_first_moment(xs):
    M = splat(GRID, np.array(xs)[:, None])
    assert M.sum() == pytest.approx(1.0, abs=1e-14)
    inner = [x for x in xs if GRID.nodes[0, 0] <= x <= GRID.nodes[-1, 0]]
    if len(inner) == len(xs):
        assert M @ GRID.nodes[:, 0] == pytest.approx(np.mean(xs), abs=1e-12)


def test_splat_rejects_points_outside(interval):
    with pytest.raises(DomainError):
        splat(interval, np.array([[1.2]]))


def test_splat_on_disk_preserves_mass(disk, rng):
    r = 0.99 * np.sqrt(rng.random(50))
    th = 2 * np.pi * rng.random(50)
    M = splat(disk, np.c_[r * np.cos(th), r * np.sin(th)])
    assert M.sum() == pytest.approx(1.0, abs=1e-13)
    assert M.min() >= 0


def test_empirical_measure_excludes_a_player(interval):
    cfg = EmpiricalConfig(np.array([0.2, 0.5, 0.8]), exclude=1)
    m = empirical_measure(cfg, interval)
    assert m.mass == pytest.approx(1.0)
    assert m.masses @ interval.nodes[:, 0] == pytest.approx(0.5)
    with pytest.raises(ValueError):
        EmpiricalConfig(np.array([0.2]), exclude=3)


def test_dual_norm_is_weaker_than_mass(interval, m0):
    mu = MeasureField.from_masses(interval, m0 - np.roll(m0, 3), signed=True)
    assert 0 < signed_dual_norm(mu, 1.5) <= np.abs(mu.masses).sum()


def test_io_round_trip(tmp_path, interval, m0):
    m = MeasureField.from_masses(interval, m0)
    back = load_measure_csv(save_measure_csv(tmp_path / "m.csv", m), interval)
    assert np.array_equal(back.density, m.density)
    cfg = EmpiricalConfig(np.array([[0.1], [0.7]]), exclude=0)
    back = load_empirical_json(save_empirical_json(tmp_path / "e.json", cfg))
    assert np.array_equal(back.points, cfg.points) and back.exclude == 0
