import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from viablemfg.geometry import (ConfigurationError, DomainGrid, build_interval_domain,
                                check_invariance_condition, collar_ramp, neumann_extension, smooth_distance)
from viablemfg.model import elliptic_control_model, viable_model


def test_interval_nodes_are_cell_centres(interval):
    h = interval.h
    assert np.allclose(interval.nodes[:, 0], (np.arange(64) + 0.5) * h)
    assert np.allclose(interval.quad_weights, h)
    assert np.isclose(interval.quad_weights.sum(), 1.0)


def test_disk_quadrature_approximates_area(disk):
    assert np.all(disk.raw_dist > 0)
    assert abs(disk.quad_weights.sum() - np.pi) < 0.05


def test_levels_are_nested(interval, disk):
    for grid in (interval, disk):
        masks = [grid.mask(e) for e in grid.eps_levels]
        for coarse, fine in zip(masks[:-1], masks[1:]):
            assert np.all(fine[coarse])
            assert fine.sum() > coarse.sum()


def test_unknown_level_rejected(interval):
    with pytest.raises(ConfigurationError):
        interval.mask(0.07)


def test_too_coarse_grid_rejected():
    with pytest.raises(ConfigurationError):
        build_interval_domain(1.0, 8)


@settings(max_examples=60, deadline=None)
@given(st.floats(0.0, 0.5), st.floats(0.05, 0.3), st.floats(0.05, 0.3))
def test_smooth_distance_matches_raw_on_collar_and_is_monotone(r, eps0, width):
    d = smooth_distance(np.array([r, r + 1e-6]), eps0, width)
    if r <= eps0:
        assert d[0] == pytest.approx(r)
    assert d[1] >= d[0] - 1e-15
    assert d[0] <= r + 1e-15


def test_smooth_distance_is_flat_beyond_plateau():
    r = np.linspace(0.35, 0.5, 7)
    d = smooth_distance(r, 0.1, 0.2)
    assert np.ptp(d) < 1e-14


def test_collar_ramp_slope_one_at_zero():
    s = 1e-7
    assert collar_ramp(s, 0.1) / s == pytest.approx(1.0, rel=1e-5)
    assert collar_ramp(0.2, 0.1) == 0.0


@pytest.mark.parametrize("eps_index", [0, 2])
def test_neumann_extension_has_prescribed_conormal_derivative(eps_index):
    grid = build_interval_domain(1.0, 512)
    eps = grid.eps_levels[eps_index]
    g = neumann_extension(grid, eps, lambda p: np.full(len(p), 2.0), a=lambda p: np.full(len(p), 4.0))
    left = np.flatnonzero(grid.mask(eps))[:2]
    # outward normal is -x on the left end: a * (-g') should equal 2
    slope = (g[left[1]] - g[left[0]]) / grid.h
    assert 4.0 * (-slope) == pytest.approx(2.0, rel=0.02)


def test_neumann_extension_array_data_matches_callable(disk):
    eps = disk.eps_levels[1]
    bn = disk.boundary_nodes(eps)
    f = lambda p: p[:, 0] ** 2  # noqa: E731
    g1 = neumann_extension(disk, eps, f)
    g2 = neumann_extension(disk, eps, f(disk.project_to_level(disk.nodes[bn], eps)))
    assert np.max(np.abs(g1 - g2)) < 0.1 * np.max(np.abs(g1))


def test_gradient_exact_for_linear_fields(disk):
    f = 2 * disk.nodes[:, 0] - 3 * disk.nodes[:, 1]
    g = disk.gradient(f)
    assert np.allclose(g, [2, -3])


def test_second_derivatives_exact_for_quadratics(interval):
    f = interval.nodes[:, 0] ** 2
    assert np.allclose(interval.second_derivatives(f), 2.0)


def test_descriptor_round_trip(disk, tmp_path):
    back = DomainGrid.from_json(disk.to_json())
    assert back.descriptor() == disk.descriptor()
    assert np.array_equal(back.nodes, disk.nodes)
    path = disk.export_csv(tmp_path / "g.csv", dist=disk.dist)
    assert path.read_text().splitlines()[0].startswith("x")


def test_invariance_condition_shipped_model(interval):
    rep = check_invariance_condition(interval, viable_model(interval), np.linspace(-3, 3, 13)[:, None], 15.0)
    assert rep.holds and rep.worst_slack >= 0


def test_invariance_condition_fails_for_elliptic_control(interval):
    rep = check_invariance_condition(interval, elliptic_control_model(interval), [[0.0]], 15.0)
    assert not rep.holds


def test_invariance_condition_on_disk(disk):
    rep = check_invariance_condition(disk, viable_model(disk), [[0.0, 0.0], [2.0, -1.0]], 15.0)
    assert rep.holds
