import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from viablemfg.geometry import build_interval_domain
from viablemfg.model import (LogCoshHamiltonian, build_model, decoupled_model, default_initial_density, logcosh,
                             random_initial_density, validate_model, viable_model)


def test_logcosh_is_overflow_safe():
    assert logcosh(np.array([1e4]))[0] == pytest.approx(1e4 - np.log(2.0))
    assert logcosh(np.array([0.0]))[0] == 0.0


@settings(max_examples=50, deadline=None)
@given(st.floats(-20, 20))
def test_hamiltonian_component_derivatives(q):
    h = 1e-5
    assert LogCoshHamiltonian.hp(q) == pytest.approx((logcosh(q + h) - logcosh(q - h)) / (2 * h), abs=1e-8)
    assert LogCoshHamiltonian.hpp(q) == pytest.approx(
        (LogCoshHamiltonian.hp(q + h) - LogCoshHamiltonian.hp(q - h)) / (2 * h), abs=1e-7)


def test_kappa_and_sigma_vanish_at_the_boundary(interval, viable):
    x = np.array([[1e-9], [0.5], [1 - 1e-9]])
    assert viable.a(x)[[0, 2]] == pytest.approx(0.0, abs=1e-12)
    assert viable.a(x)[1] == pytest.approx(0.05, rel=2e-3)
    k = viable.hamiltonian.kappa(x)
    assert k[0] < 1e-6 and k[1] == pytest.approx(1.0, rel=2e-3)


@settings(max_examples=40, deadline=None)
@given(arrays(float, 64, elements=st.floats(0, 1)), arrays(float, 64, elements=st.floats(0, 1)))
def test_couplings_are_monotone(w1, w2):
    grid = build_interval_domain(1.0, 64)
    model = viable_model(grid)
    if w1.sum() == 0 or w2.sum() == 0:
        return
    M1, M2 = w1 / w1.sum(), w2 / w2.sum()
    for c in (model.F, model.G):
        assert (c.nodal(grid, M1) - c.nodal(grid, M2)) @ (M1 - M2) >= -1e-12


def test_kernel_is_symmetric_positive_semidefinite(interval, viable):
    K = viable.F.kernel_matrix(interval)
    assert np.allclose(K, K.T)
    assert np.linalg.eigvalsh(K).min() > -1e-12


def test_flat_derivative_matches_finite_difference(interval, viable, m0):
    y = 40
    s = 1e-6
    dM = np.zeros(interval.n_nodes)
    dM[y] = 1.0
    fd = (viable.F.nodal(interval, m0 + s * dM) - viable.F.nodal(interval, m0 - s * dM)) / (2 * s)
    exact = viable.F.flat_derivative(interval.nodes, interval.nodes[y])[:, 0]
    assert np.allclose(fd, exact, atol=1e-8)


def test_value_supports_batches(interval, viable, m0):
    M = np.stack([m0, m0[::-1]])
    out = viable.F.nodal(interval, M)
    assert out.shape == (2, interval.n_nodes)
    assert np.allclose(out[0], viable.F.nodal(interval, m0))


def test_decoupled_couplings_ignore_the_measure(interval, decoupled, m0, rng):
    other = random_initial_density(interval, rng) * interval.quad_weights
    assert np.array_equal(decoupled.G.nodal(interval, m0), decoupled.G.nodal(interval, other))
    assert not decoupled.coupled


def test_features_are_flat_near_the_boundary(interval, viable):
    pts = np.array([[0.01], [0.05], [0.1]])
    assert np.all(viable.G.features(pts) == 0.0)


def test_validation_of_shipped_models(interval, disk):
    assert validate_model(viable_model(interval)).ok
    rep = validate_model(viable_model(disk))
    assert rep.ok, rep.as_dict()
    assert rep.monotone_F >= 0 and rep.boundary_compat == 0.0


def test_ellipticity_only_degenerates_at_the_boundary(interval, viable):
    rep = validate_model(viable)
    positive = [v for k, v in rep.ellipticity.items() if k != "omega"]
    assert min(positive) > 0
    assert rep.ellipticity["omega"] < min(positive)


def test_build_model_rejects_unknown_id(interval):
    with pytest.raises(ValueError):
        build_model(interval, "nope")


def test_fingerprint_tracks_parameters(interval):
    assert viable_model(interval).fingerprint() == viable_model(interval).fingerprint()
    assert viable_model(interval).fingerprint() != viable_model(interval, gamma_F=2.0).fingerprint()
    assert decoupled_model(interval).fingerprint() != viable_model(interval).fingerprint()


def test_initial_densities_are_probabilities(interval, disk, rng):
    for grid in (interval, disk):
        for dens in (default_initial_density(grid), random_initial_density(grid, rng)):
            assert np.sum(dens * grid.quad_weights) == pytest.approx(1.0)
            assert dens.min() >= 0
            assert np.all(dens[grid.raw_dist < 0.1 * (grid.size if grid.kind == "interval" else 2 * grid.size)]
                          == 0)
