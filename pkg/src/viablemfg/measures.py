"""Discrete (sub)probability measures and generalized Wasserstein-1 distances.

Measures live on the nodes of a :class:`~viablemfg.geometry.DomainGrid`.
``MeasureField.density`` is a density with respect to the quadrature
weights; solvers work with node masses ``M = density * quad_weights``.

The generalized distance between measures of unequal mass is the supremum of
``<phi, m1 - m2>`` over 1-Lipschitz ``phi`` normalised by ``phi(x_c) = 0``
at the centre node ``x_c``. Without a normalisation the supremum is infinite
whenever the masses differ. It coincides with the ordinary W1 distance after
the mass deficit is placed at ``x_c``.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import sparse
from scipy.optimize import linprog

from .geometry import ConfigurationError, DomainGrid


class DomainError(ValueError):
    """A point lies outside the domain."""


@dataclass(frozen=True, eq=False)
class MeasureField:
    grid: DomainGrid
    density: np.ndarray
    signed: bool = False

    def __post_init__(self):
        dens = np.asarray(self.density, dtype=float)
        if dens.shape != (self.grid.n_nodes,):
            raise ValueError("density must have one value per node")
        if not np.all(np.isfinite(dens)):
            raise ValueError("density must be finite")
        if not self.signed:
            if dens.min() < 0:
                raise ValueError("density must be nonnegative")
            if dens @ self.grid.quad_weights > 1 + 1e-12:
                raise ValueError("a subprobability has mass at most 1")
        object.__setattr__(self, "density", dens)

    @classmethod
    def from_masses(cls, grid: DomainGrid, masses, signed: bool = False) -> "MeasureField":
        return cls(grid, np.asarray(masses, dtype=float) / grid.quad_weights, signed)

    @property
    def masses(self) -> np.ndarray:
        return self.density * self.grid.quad_weights

    @property
    def mass(self) -> float:
        return float(self.masses.sum())

    def restrict(self, eps: float) -> "MeasureField":
        """Zero the density outside ``Omega_eps`` (no renormalisation)."""
        return MeasureField(self.grid, np.where(self.grid.mask(eps), self.density, 0.0), self.signed)


@dataclass(frozen=True)
class EmpiricalConfig:
    points: np.ndarray
    exclude: int | None = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim == 1:
            pts = pts[:, None]
        object.__setattr__(self, "points", pts)
        if self.exclude is not None and not 0 <= self.exclude < len(pts):
            raise ValueError("exclude must index one of the players")

    @property
    def N(self) -> int:
        return len(self.points)


def splat(grid: DomainGrid, points, weights=None) -> np.ndarray:
    """Linear hat-function splat of weighted Dirac masses onto node masses.

    Weights that would land on lattice positions outside the grid are given
    back to the remaining corners, so total mass is preserved exactly.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    if pts.shape[1] != grid.dim:
        pts = pts.reshape(-1, grid.dim)
    if np.any(grid.raw_distance(pts) <= 0):
        raise DomainError("all points must lie inside the domain")
    w = np.full(len(pts), 1.0 / len(pts)) if weights is None else np.asarray(weights, dtype=float)
    origin = grid.nodes.min(axis=0) - grid.lattice.min(axis=0) * grid.h
    s = (pts - origin) / grid.h
    base = np.floor(s).astype(np.int64)
    frac = s - base
    shape = np.array(grid.lattice_shape)
    corner_idx, corner_w = [], []
    for corner in range(2**grid.dim):
        bits = np.array([(corner >> k) & 1 for k in range(grid.dim)])
        lat = base + bits
        cw = np.prod(np.where(bits, frac, 1 - frac), axis=1)
        ok = np.all((lat >= 0) & (lat < shape), axis=1)
        node = -np.ones(len(pts), dtype=np.int64)
        node[ok] = grid.full_index[np.ravel_multi_index(tuple(lat[ok].T), grid.lattice_shape)]
        corner_idx.append(node)
        corner_w.append(np.where(node >= 0, cw, 0.0))
    corner_idx, corner_w = np.array(corner_idx), np.array(corner_w)
    total = corner_w.sum(axis=0)
    if np.any(total <= 0):
        # point in a boundary cell with no active corner: nearest node takes all
        far = total <= 0
        nearest = np.argmin(((grid.nodes[None] - pts[far][:, None]) ** 2).sum(-1), axis=1)
        corner_idx[0, far], corner_w[0, far], total[far] = nearest, 1.0, 1.0
    corner_w /= total
    M = np.zeros(grid.n_nodes)
    ok = corner_idx >= 0
    np.add.at(M, corner_idx[ok], (corner_w * w)[ok])
    return M


def empirical_measure(config: EmpiricalConfig, grid: DomainGrid) -> MeasureField:
    """Uniform measure on the players, optionally leaving out ``config.exclude``."""
    pts = config.points
    if config.exclude is not None:
        if config.N < 2:
            raise ValueError("need N >= 2 when a player is excluded")
        pts = np.delete(pts, config.exclude, axis=0)
    return MeasureField.from_masses(grid, splat(grid, pts))


def _check_same_grid(m1: MeasureField, m2: MeasureField):
    if m1.grid is not m2.grid and m1.grid.to_json() != m2.grid.to_json():
        raise ValueError("measures live on different grids")


def d1_interval(grid: DomainGrid, M1, M2, eps: float = 0.0) -> np.ndarray:
    """Vectorised generalized W1 on an interval grid; leading axes are batch axes."""
    mask = grid.mask(eps)
    D = (np.asarray(M1) - np.asarray(M2))[..., mask]
    c = int(np.searchsorted(np.flatnonzero(mask), grid.center_node))
    C = np.cumsum(D, axis=-1)
    S = C[..., -1:]
    left = np.abs(C[..., :c]).sum(axis=-1)
    right = np.abs(S - C[..., c:-1]).sum(axis=-1)
    return grid.h * (left + right)


def _transport_lp(nodes, D, center, return_potential=False):
    """W1 between the positive and negative parts of ``D`` after moving the
    mass defect to ``center``; Kantorovich LP with Euclidean cost."""
    D = D.copy()
    D[center] -= D.sum()
    P, Q = np.flatnonzero(D > 1e-300), np.flatnonzero(D < -1e-300)
    if len(P) == 0 or len(Q) == 0:
        return (0.0, np.zeros(len(nodes))) if return_potential else 0.0
    cost = np.linalg.norm(nodes[P][:, None] - nodes[Q][None], axis=2).ravel()
    nP, nQ = len(P), len(Q)
    rows = np.concatenate([np.repeat(np.arange(nP), nQ), nP + np.tile(np.arange(nQ), nP)])
    cols = np.concatenate([np.arange(nP * nQ), np.arange(nP * nQ)])
    A = sparse.csr_matrix((np.ones(2 * nP * nQ), (rows, cols)), shape=(nP + nQ, nP * nQ))
    b = np.concatenate([D[P], -D[Q]])
    # the two marginal blocks are linearly dependent; drop one row
    res = linprog(cost, A_eq=A[:-1], b_eq=b[:-1], bounds=(0, None), method="highs")
    if res.status != 0:
        raise RuntimeError(f"transport LP failed: {res.message}")
    if not return_potential:
        return float(res.fun)
    dual = np.concatenate([res.eqlin.marginals, [0.0]])
    # extend the potentials of P and Q to a 1-Lipschitz field on all nodes
    sup_nodes = np.concatenate([P, Q])
    vals = np.concatenate([dual[:nP], -dual[nP:]])
    dist = np.linalg.norm(nodes[:, None] - nodes[sup_nodes][None], axis=2)
    phi = np.min(vals[None] + dist, axis=1)
    return float(res.fun), phi - phi[center]


def wasserstein1_masses(grid: DomainGrid, M1, M2, eps: float = 0.0, return_potential: bool = False):
    """Generalized d1 between node-mass vectors, restricted to ``Omega_eps``."""
    if grid.dim == 1 and not return_potential:
        return float(d1_interval(grid, M1, M2, eps))
    mask = grid.mask(eps)
    idx = np.flatnonzero(mask)
    c = int(np.searchsorted(idx, grid.center_node))
    D = np.asarray(M1, dtype=float)[idx] - np.asarray(M2, dtype=float)[idx]
    out = _transport_lp(grid.nodes[idx], D, c, return_potential)
    if not return_potential:
        return out
    val, phi_sub = out
    phi = np.zeros(grid.n_nodes)
    phi[idx] = phi_sub
    return val, phi


def wasserstein1(m1: MeasureField, m2: MeasureField, return_potential: bool = False):
    """Generalized Wasserstein-1 distance over the whole grid.

    One-dimensional grids use cumulative sums, planar grids the Kantorovich
    LP. With ``return_potential`` the optimal 1-Lipschitz test field (pinned
    to zero at the centre node) is returned as well.
    """
    _check_same_grid(m1, m2)
    return wasserstein1_masses(m1.grid, m1.masses, m2.masses, 0.0, return_potential)


def wasserstein1_eps(m1: MeasureField, m2: MeasureField, eps: float) -> float:
    """d1 on ``Omega_eps`` between the restrictions of the two measures."""
    _check_same_grid(m1, m2)
    eps = m1.grid.check_level(eps)
    if eps == 0.0:
        raise ConfigurationError("eps must be one of the positive grid levels")
    return wasserstein1_masses(m1.grid, m1.masses, m2.masses, eps)


def wasserstein1_dual_lp(grid: DomainGrid, M1, M2, eps: float = 0.0) -> float:
    """Reference value from the dual LP with every pairwise Lipschitz constraint."""
    idx = np.flatnonzero(grid.mask(eps))
    X = grid.nodes[idx]
    D = np.asarray(M1, float)[idx] - np.asarray(M2, float)[idx]
    n = len(idx)
    I, J = np.nonzero(~np.eye(n, dtype=bool))
    A = sparse.csr_matrix((np.r_[np.ones(len(I)), -np.ones(len(I))],
                           (np.r_[np.arange(len(I)), np.arange(len(I))], np.r_[I, J])), shape=(len(I), n))
    b = np.linalg.norm(X[I] - X[J], axis=1)
    c = int(np.searchsorted(idx, grid.center_node))
    bounds = [(None, None)] * n
    bounds[c] = (0.0, 0.0)
    res = linprog(-D, A_ub=A, b_ub=b, bounds=bounds, method="highs")
    if res.status != 0:
        raise RuntimeError(res.message)
    return float(-res.fun)


# -- dual Holder norms --------------------------------------------------------

def holder_norm(grid: DomainGrid, phi, order: float, eps: float = 0.0, n_anchor: int = 256) -> float:
    """Grid surrogate of the ``C^{order}`` norm on ``Omega_eps``, ``order`` in (1, 3).

    Sums sup norms of the field and its discrete derivatives up to
    ``floor(order)`` and the Holder quotient of the top derivative over node
    pairs at distance at least ``2h``; large grids use a fixed subset of
    anchor nodes for the quotient.
    """
    k = int(np.floor(order))
    alpha = order - k
    mask = grid.mask(eps)
    phi = np.where(mask, np.asarray(phi, dtype=float), 0.0)
    top = grid.gradient(phi, eps)
    norm = np.abs(phi[mask]).max() + np.abs(top[mask]).max()
    if k >= 2:
        top = grid.second_derivatives(phi, eps)
        norm += np.abs(top[mask]).max()
    nodes = np.flatnonzero(mask)
    anchors = nodes
    if len(nodes) > n_anchor:
        anchors = np.random.default_rng(0).choice(nodes, n_anchor, replace=False)
    r = np.linalg.norm(grid.nodes[anchors][:, None] - grid.nodes[nodes][None], axis=2)
    far = r >= 2 * grid.h
    diff = np.abs(top[anchors][:, None, :] - top[nodes][None]).max(axis=2)
    norm += np.max(np.where(far, diff / np.where(far, r, 1.0) ** alpha, 0.0))
    return float(norm)


def _test_family(grid: DomainGrid):
    scale = grid.size if grid.kind == "interval" else 2 * grid.size
    if grid.kind == "interval":
        centers = (np.arange(16) + 0.5)[:, None] * grid.size / 16
    else:
        c = (np.arange(4) - 1.5) * 0.4 * grid.size
        centers = np.array([(x, y) for x in c for y in c])
    degrees = [(i,) for i in range(4)] if grid.dim == 1 else [(i, j) for i in range(4) for j in range(4 - i)]
    fields = []
    for w in (0.05, 0.1, 0.2, 0.4):
        for cen in centers:
            z = (grid.nodes - cen) / (w * scale)
            bump = np.exp(-0.5 * np.sum(z * z, axis=1))
            for deg in degrees:
                fields.append(bump * np.prod(z ** np.array(deg), axis=1))
    return np.array(fields)


_FAMILY_CACHE: dict = {}


def _normalised_family(grid: DomainGrid, order: float) -> np.ndarray:
    key = (grid.to_json(), round(order, 12))
    if key not in _FAMILY_CACHE:
        fam = _test_family(grid)
        norms = np.array([holder_norm(grid, f, order) for f in fam])
        _FAMILY_CACHE[key] = fam / norms[:, None]
    return _FAMILY_CACHE[key]


def signed_dual_norm(mu: MeasureField, order: float) -> float:
    """Lower-bound surrogate of the ``C^{-order}`` dual norm.

    Maximises ``|<mu, phi>|`` over a fixed family of Gaussian bumps times
    polynomials of degree at most 3, each scaled to unit grid
    ``C^{order}`` norm.
    """
    fam = _normalised_family(mu.grid, order)
    return float(np.max(np.abs(fam @ mu.masses)))


def signed_dual_norm_masses(grid: DomainGrid, masses, order: float) -> np.ndarray:
    """Batch version of :func:`signed_dual_norm` on node masses (..., n)."""
    fam = _normalised_family(grid, order)
    return np.max(np.abs(np.asarray(masses) @ fam.T), axis=-1)


# -- I/O -------------------------------------------------------------------------

def save_measure_csv(path, m: MeasureField) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["node", "density"])
        for i, v in enumerate(m.density):
            wr.writerow([i, repr(float(v))])
    return path


def load_measure_csv(path, grid: DomainGrid, signed: bool = False) -> MeasureField:
    dens = np.zeros(grid.n_nodes)
    with Path(path).open() as fh:
        for row in csv.DictReader(fh):
            dens[int(row["node"])] = float(row["density"])
    return MeasureField(grid, dens, signed)


def save_empirical_json(path, config: EmpiricalConfig) -> Path:
    path = Path(path)
    path.write_text(json.dumps({"points": config.points.tolist(), "exclude": config.exclude}))
    return path


def load_empirical_json(path) -> EmpiricalConfig:
    data = json.loads(Path(path).read_text())
    return EmpiricalConfig(np.asarray(data["points"], dtype=float), data.get("exclude"))
