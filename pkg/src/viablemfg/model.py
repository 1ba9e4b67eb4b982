"""Problem data: diffusion, Hamiltonian and couplings, plus hypothesis checks.

Diffusion is isotropic, ``a(x) = sigma(x)**2 * I``; the Hamiltonian is a
sum of one-dimensional even convex functions of the gradient components, so
that the upwind numerical Hamiltonian in :mod:`viablemfg.ops` is separable.
Couplings are linear in the measure through a finite feature family,
``F(x, m) = f0(x) + gamma * sum_r e_r(x) <e_r, m>``, which makes them monotone
and gives the flat derivative in closed form.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .geometry import DomainGrid, smoothstep5

FD_STEP = 1e-6


def logcosh(p):
    """Overflow-safe ``log(cosh(p))``."""
    p = np.abs(p)
    return p + np.log1p(np.exp(-2.0 * p)) - np.log(2.0)


@dataclass(frozen=True)
class LogCoshHamiltonian:
    """``H(x, p) = kappa(x) * sum_k log cosh(p_k)``.

    ``kappa`` is a nonnegative weight on the domain; letting it vanish at the
    boundary keeps ``|H_p . Dd|`` below ``C d``. The component functions
    ``h``, ``hp``, ``hpp`` act on one gradient component and are scaled by
    ``kappa`` by the callers that work component-wise.
    """

    kappa: Callable

    @staticmethod
    def h(q):
        return logcosh(q)

    @staticmethod
    def hp(q):
        return np.tanh(q)

    @staticmethod
    def hpp(q):
        return 1.0 / np.cosh(np.clip(q, -350, 350)) ** 2

    def H(self, x, p):
        p = np.atleast_2d(p)
        return self.kappa(x) * logcosh(p).sum(axis=1)

    def Hp(self, x, p):
        p = np.atleast_2d(p)
        return self.kappa(x)[:, None] * np.tanh(p)

    def Hpp(self, x, p):
        """Diagonal of the Hessian in ``p``, shape (n, dim)."""
        p = np.atleast_2d(p)
        return self.kappa(x)[:, None] * self.hpp(p)


@dataclass(frozen=True)
class FeatureSet:
    """Gaussian bumps ``chi(d(x)) exp(-|x - c_r|^2 / (2 s^2))`` cut off near the boundary.

    ``chi`` vanishes identically where ``d <= flat_below`` so every feature
    has zero gradient on the boundary collar.
    """

    centers: np.ndarray
    width: float
    distance: Callable
    flat_below: float
    ramp: float

    def __call__(self, points) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        chi = smoothstep5((self.distance(pts) - self.flat_below) / self.ramp)
        sq = ((pts[:, None, :] - self.centers[None, :, :]) ** 2).sum(axis=2)
        return chi[:, None] * np.exp(-sq / (2.0 * self.width**2))

    @property
    def size(self) -> int:
        return len(self.centers)


@dataclass(frozen=True)
class FeatureCoupling:
    """Monotone coupling ``f0(x) + gamma * sum_r e_r(x) <e_r, m>``.

    Measures enter through their node masses ``M`` (density times quadrature
    weight); the flat derivative ``gamma * sum_r e_r(x) e_r(y)`` does not
    depend on ``m``.
    """

    potential: Callable | None
    gamma: float
    features: FeatureSet | None

    @property
    def depends_on_measure(self) -> bool:
        return self.features is not None and self.gamma != 0.0

    def _f0(self, pts):
        return np.zeros(len(pts)) if self.potential is None else np.asarray(self.potential(pts), float)

    def value(self, points, grid: DomainGrid, M) -> np.ndarray:
        """Coupling at arbitrary points; ``M`` may carry a leading batch axis."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        out = self._f0(pts)
        if not self.depends_on_measure:
            return np.broadcast_to(out, np.shape(M)[:-1] + out.shape).copy()
        E_pts = self.features(pts)
        z = np.asarray(M) @ self.node_features(grid)
        return out + self.gamma * z @ E_pts.T

    def nodal(self, grid: DomainGrid, M) -> np.ndarray:
        """Coupling at the grid nodes, ``M`` of shape (..., n_nodes)."""
        out = self._f0(grid.nodes)
        if not self.depends_on_measure:
            return np.broadcast_to(out, np.shape(M)).copy()
        return out + np.asarray(M) @ self.kernel_matrix(grid).T

    def node_features(self, grid: DomainGrid) -> np.ndarray:
        cache = _grid_cache(grid)
        key = ("features", id(self))
        if key not in cache:
            cache[key] = (self, self.features(grid.nodes))
        return cache[key][1]

    def kernel_matrix(self, grid: DomainGrid) -> np.ndarray:
        """``K[i, j] = dF/dm(x_i, y_j)``; symmetric positive semidefinite."""
        if not self.depends_on_measure:
            return np.zeros((grid.n_nodes, grid.n_nodes))
        cache = _grid_cache(grid)
        key = ("kernel", id(self))
        if key not in cache:
            E = self.node_features(grid)
            cache[key] = (self, self.gamma * E @ E.T)
        return cache[key][1]

    def flat_derivative(self, x, y) -> np.ndarray:
        """Kernel ``dF/dm(x, y)`` for point arrays ``x`` (p, dim) and ``y`` (q, dim)."""
        x, y = np.atleast_2d(x), np.atleast_2d(y)
        if not self.depends_on_measure:
            return np.zeros((len(x), len(y)))
        return self.gamma * self.features(x) @ self.features(y).T

    def gradient(self, points, grid: DomainGrid, M) -> np.ndarray:
        """Spatial gradient by central differences, shape (p, dim)."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        g = np.zeros_like(pts)
        for k in range(pts.shape[1]):
            e = np.zeros(pts.shape[1])
            e[k] = FD_STEP
            g[:, k] = (self.value(pts + e, grid, M) - self.value(pts - e, grid, M)) / (2 * FD_STEP)
        return g


_CACHES: dict = {}


def _grid_cache(grid) -> dict:
    return _CACHES.setdefault(id(grid), {"grid": grid})


@dataclass(frozen=True)
class ModelSpec:
    """Full problem data for one domain.

    ``sigma`` returns the scalar diffusion amplitude at points, so that
    ``a = sigma**2``. ``params`` records the constructor arguments and feeds
    :meth:`fingerprint`.
    """

    name: str
    grid: DomainGrid
    sigma: Callable
    hamiltonian: LogCoshHamiltonian
    F: FeatureCoupling
    G: FeatureCoupling
    alpha: float = 0.5
    T: float = 1.0
    params: dict = field(default_factory=dict)

    def a(self, points) -> np.ndarray:
        return np.asarray(self.sigma(np.atleast_2d(points)), dtype=float) ** 2

    def H(self, x, p):
        return self.hamiltonian.H(x, p)

    def Hp(self, x, p):
        return self.hamiltonian.Hp(x, p)

    def Hpp(self, x, p):
        return self.hamiltonian.Hpp(x, p)

    def b_tilde(self, points) -> np.ndarray:
        """Row divergence of ``a I``, i.e. the gradient of ``a``."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        g = np.zeros_like(pts)
        for k in range(pts.shape[1]):
            e = np.zeros(pts.shape[1])
            e[k] = FD_STEP
            g[:, k] = (self.a(pts + e) - self.a(pts - e)) / (2 * FD_STEP)
        return g

    @property
    def coupled(self) -> bool:
        return self.F.depends_on_measure or self.G.depends_on_measure

    def fingerprint(self) -> str:
        blob = json.dumps({"name": self.name, "grid": self.grid.descriptor(), "params": self.params},
                          sort_keys=True, default=float)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _interval_centers(grid, n_features, lo=0.2, hi=0.8):
    return (np.linspace(lo, hi, n_features) * grid.size)[:, None]


def _disk_centers(grid, n_features):
    r = 0.45 * grid.size
    ang = 2 * np.pi * np.arange(n_features - 1) / max(n_features - 1, 1)
    ring = np.column_stack([r * np.cos(ang), r * np.sin(ang)])
    return np.vstack([np.zeros((1, 2)), ring])


def _features(grid, n_features, width):
    centers = _interval_centers(grid, n_features) if grid.kind == "interval" else _disk_centers(grid, n_features)
    rmax = 0.5 * grid.size if grid.kind == "interval" else grid.size
    return FeatureSet(centers=centers, width=width * rmax * 2, distance=grid.raw_distance,
                      flat_below=0.12 * rmax * 2, ramp=0.1 * rmax * 2)


def viable_model(grid: DomainGrid, nu0: float = 0.05, ell: float = 0.1, kappa0: float = 1.0,
                 beta: float = 1.0, gamma_F: float = 1.0, gamma_G: float = 1.0,
                 n_features: int = 7, width: float = 0.08, T: float = 1.0, alpha: float = 0.5,
                 name: str = "viable") -> ModelSpec:
    """Shipped model satisfying the invariance condition.

    Diffusion and Hamiltonian both degenerate linearly at the boundary:
    ``sigma = sqrt(nu0) tanh(d/ell)`` and ``kappa = kappa0 tanh(d/ell)``, so the
    condition holds with ``C >= nu0/ell**2 + kappa0/ell``. ``ell`` is measured
    in units of the domain scale (interval length or disk diameter).
    """
    scale = grid.size if grid.kind == "interval" else 2 * grid.size
    ell_abs = ell * scale
    center = grid.center

    def sigma(x):
        return np.sqrt(nu0) * np.tanh(grid.distance(x) / ell_abs)

    def kappa(x):
        return kappa0 * np.tanh(grid.distance(x) / ell_abs)

    def f0(x):
        return beta * np.sum((np.atleast_2d(x) - center) ** 2, axis=1) / scale**2

    feats = _features(grid, n_features, width)
    params = dict(nu0=nu0, ell=ell, kappa0=kappa0, beta=beta, gamma_F=gamma_F, gamma_G=gamma_G,
                  n_features=n_features, width=width, T=T, alpha=alpha)
    return ModelSpec(name=name, grid=grid, sigma=sigma, hamiltonian=LogCoshHamiltonian(kappa),
                     F=FeatureCoupling(f0, gamma_F, feats), G=FeatureCoupling(None, gamma_G, feats),
                     alpha=alpha, T=T, params=params)


def decoupled_model(grid: DomainGrid, **kw) -> ModelSpec:
    """Viable model with measure-independent couplings and a nonzero terminal cost."""
    model = viable_model(grid, gamma_F=0.0, gamma_G=0.0, name="decoupled", **kw)
    scale = grid.size if grid.kind == "interval" else 2 * grid.size
    feats = model.F.features

    def g0(x):
        return 0.5 * feats(x)[:, len(feats.centers) // 2] * scale

    return ModelSpec(name=model.name, grid=grid, sigma=model.sigma, hamiltonian=model.hamiltonian,
                     F=model.F, G=FeatureCoupling(g0, 0.0, None), alpha=model.alpha, T=model.T,
                     params=dict(model.params, terminal="bump"))


def elliptic_control_model(grid: DomainGrid, a0: float = 0.05, T: float = 1.0) -> ModelSpec:
    """Uniformly elliptic negative control: constant diffusion, ``H = 0``, no coupling."""
    return ModelSpec(name="elliptic-control", grid=grid,
                     sigma=lambda x: np.full(len(np.atleast_2d(x)), np.sqrt(a0)),
                     hamiltonian=LogCoshHamiltonian(lambda x: np.zeros(len(np.atleast_2d(x)))),
                     F=FeatureCoupling(None, 0.0, None), G=FeatureCoupling(None, 0.0, None),
                     T=T, params=dict(a0=a0, T=T))


MODELS = {"viable": viable_model, "decoupled": decoupled_model, "elliptic-control": elliptic_control_model}


def build_model(grid: DomainGrid, model_id: str, **params) -> ModelSpec:
    try:
        factory = MODELS[model_id]
    except KeyError:
        raise ValueError(f"unknown model id {model_id!r}; choose from {sorted(MODELS)}") from None
    return factory(grid, **params)


def default_initial_density(grid: DomainGrid, center=None, width: float = 0.08) -> np.ndarray:
    """Smooth bump supported away from the boundary, normalised to mass 1."""
    rmax = 0.5 * grid.size if grid.kind == "interval" else grid.size
    c = grid.center if center is None else np.asarray(center, dtype=float)
    chi = smoothstep5((grid.raw_dist - 0.2 * rmax * 2) / (0.1 * rmax * 2))
    dens = chi * np.exp(-np.sum((grid.nodes - c) ** 2, axis=1) / (2 * (width * 2 * rmax) ** 2))
    return dens / np.sum(dens * grid.quad_weights)


def random_initial_density(grid: DomainGrid, rng: np.random.Generator, n_bumps: int = 3) -> np.ndarray:
    """Random mixture of bumps inside the region where the default density lives."""
    rmax = 0.5 * grid.size if grid.kind == "interval" else grid.size
    dens = np.zeros(grid.n_nodes)
    for _ in range(n_bumps):
        if grid.kind == "interval":
            c = np.array([rng.uniform(0.35, 0.65) * grid.size])
        else:
            r, th = 0.3 * grid.size * np.sqrt(rng.uniform()), rng.uniform(0, 2 * np.pi)
            c = np.array([r * np.cos(th), r * np.sin(th)])
        dens += rng.uniform(0.2, 1.0) * default_initial_density(grid, c, width=rng.uniform(0.04, 0.08))
    chi = smoothstep5((grid.raw_dist - 0.2 * rmax * 2) / (0.1 * rmax * 2))
    dens *= chi
    return dens / np.sum(dens * grid.quad_weights)


@dataclass
class ValidationReport:
    ellipticity: dict
    monotone_F: float
    monotone_G: float
    boundary_compat: float
    b_tilde_error: float
    b_tilde_tol: float
    hpp_lower: dict
    ok: bool

    def as_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


def validate_model(model: ModelSpec, n_pairs: int = 20, seed: int = 0, p_range: float = 3.0) -> ValidationReport:
    """Check ellipticity on each ``Omega_eps``, monotonicity, boundary compatibility
    of ``G``, the ``b_tilde`` consistency and the ``H_pp`` lower bound on a
    gradient range. Violations are reported, not raised."""
    grid = model.grid
    rng = np.random.default_rng(seed)
    a = model.a(grid.nodes)
    ell = {float(e): float(a[grid.mask(e)].min()) for e in grid.eps_levels}
    ell["omega"] = float(a.min())

    def worst(coupling):
        w = np.inf
        for _ in range(n_pairs):
            M1, M2 = rng.dirichlet(np.ones(grid.n_nodes)), rng.dirichlet(np.ones(grid.n_nodes))
            w = min(w, float((coupling.nodal(grid, M1) - coupling.nodal(grid, M2)) @ (M1 - M2)))
        return w

    mono_F, mono_G = worst(model.F), worst(model.G)
    collar = np.flatnonzero(grid.raw_dist < grid.collar.interior_ball_radius)
    M = rng.dirichlet(np.ones(grid.n_nodes))
    gG = model.G.gradient(grid.nodes[collar], grid, M)
    compat = float(np.max(np.abs(model.a(grid.nodes[collar]) * np.sum(gG * grid.normal[collar], axis=1)),
                          initial=0.0))
    bt = model.b_tilde(grid.nodes)
    inner = grid.raw_dist > 2 * grid.h
    bt_err = float(np.max(np.abs(bt - grid.gradient(a))[inner]))
    # central differences err by h^2 |a'''|/6; scale the tolerance accordingly
    a3 = np.abs(grid.gradient(grid.second_derivatives(a).sum(axis=1)))[inner].max()
    bt_tol = 10 * grid.h**2 * max(1.0, float(a3))
    p = np.linspace(-p_range, p_range, 61)
    hpp = np.array([model.Hpp(grid.nodes, np.full((grid.n_nodes, grid.dim), q)).min(axis=1) for q in p])
    bound = hpp.min(axis=0) * (1 + np.abs(p_range))
    hpp_lower = {"p_range": p_range, "min_over_Omega_delta": {float(e): float(bound[grid.mask(e)].min())
                                                             for e in grid.eps_levels}}
    ok = mono_F >= -1e-10 and mono_G >= -1e-10 and compat <= 10 * grid.h and bt_err <= bt_tol
    return ValidationReport(ell, mono_F, mono_G, compat, bt_err, bt_tol, hpp_lower, ok)
