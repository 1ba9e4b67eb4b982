"""Bounded domains, oriented distance, the subdomains ``{d > eps}`` and the
Neumann extension operator used to make terminal data compatible.

Grids are cell-centred lattices: every node sits strictly inside the domain,
so ``dist > 0`` everywhere and the quadrature weight of a node is the volume
``h**dim`` of its cell.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import TYPE_CHECKING, Callable

import numpy as np
from scipy.spatial import cKDTree

if TYPE_CHECKING:
    from numpy.typing import NDArray


class ConfigurationError(ValueError):
    """Raised when a grid, level or solver setting is not admissible."""


def smoothstep5(t):
    """Quintic smoothstep ``6t^5 - 15t^4 + 10t^3`` clipped to [0, 1]."""
    t = np.clip(t, 0.0, 1.0)
    return t * t * t * (10.0 + t * (-15.0 + 6.0 * t))


def smooth_distance(raw, eps0: float, width: float):
    """Blend the raw distance into a plateau beyond ``eps0``.

    The slope is ``1 - smoothstep5((r - eps0)/width)``, so the profile equals
    ``r`` on the collar ``r <= eps0`` and is flat (to second order) once
    ``r >= eps0 + width``.
    """
    raw = np.asarray(raw, dtype=float)
    t = np.clip((raw - eps0) / width, 0.0, 1.0)
    integral = t - (t**6 - 3.0 * t**5 + 2.5 * t**4)
    return np.where(raw <= eps0, raw, eps0 + width * integral)


def collar_ramp(s, width: float):
    """C^2 cutoff ``s (1 - smoothstep5(s/width))``: slope 1 at 0, zero beyond ``width``."""
    s = np.asarray(s, dtype=float)
    return np.where((s >= 0) & (s < width), s * (1.0 - smoothstep5(s / width)), 0.0)


@dataclass(frozen=True)
class CollarParams:
    eps0: float
    delta0: float
    interior_ball_radius: float

    def __post_init__(self):
        if not (0 < self.delta0 <= self.eps0):
            raise ConfigurationError("need 0 < delta0 <= eps0")


@dataclass(frozen=True, eq=False)
class DomainGrid:
    """Immutable cell-centred lattice clipped to an interval or a disk.

    ``nodes`` holds the coordinates of the active cells, ``lattice`` their
    integer lattice indices. Neighbour lookups go through ``full_index``,
    which maps flat lattice positions to active node numbers (-1 outside).
    """

    kind: str
    size: float
    n: int
    h: float
    lattice_shape: tuple
    lattice: NDArray
    nodes: NDArray
    raw_dist: NDArray
    dist: NDArray
    normal: NDArray
    quad_weights: NDArray
    eps_levels: tuple
    collar: CollarParams
    full_index: NDArray = field(repr=False)

    @property
    def dim(self) -> int:
        return self.nodes.shape[1]

    @property
    def n_nodes(self) -> int:
        return self.nodes.shape[0]

    @property
    def diam(self) -> float:
        return float(self.size) if self.kind == "interval" else 2.0 * self.size

    @property
    def measure(self) -> float:
        return float(self.size) if self.kind == "interval" else np.pi * self.size**2

    @property
    def center(self) -> NDArray:
        if self.kind == "interval":
            return np.array([0.5 * self.size])
        return np.zeros(2)

    @cached_property
    def center_node(self) -> int:
        return int(np.argmin(np.linalg.norm(self.nodes - self.center, axis=1)))

    # -- distance ---------------------------------------------------------
    def raw_distance(self, points) -> NDArray:
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        if self.kind == "interval":
            x = pts[:, 0]
            return np.minimum(x, self.size - x)
        return self.size - np.linalg.norm(pts, axis=1)

    def distance(self, points) -> NDArray:
        """Smoothed oriented distance at arbitrary points (analytic)."""
        return smooth_distance(self.raw_distance(points), self.collar.eps0, self._plateau_width)

    @property
    def _plateau_width(self) -> float:
        rmax = 0.5 * self.size if self.kind == "interval" else self.size
        return rmax - self.collar.eps0

    def contains(self, points) -> NDArray:
        return self.raw_distance(points) > 0

    # -- subdomains -------------------------------------------------------
    def check_level(self, eps: float) -> float:
        eps = float(eps)
        if eps == 0.0:
            return eps
        for level in self.eps_levels:
            if np.isclose(level, eps, rtol=1e-12, atol=0.0):
                return level
        raise ConfigurationError(f"eps={eps} is not one of the grid levels {self.eps_levels}")

    def mask(self, eps: float) -> NDArray:
        """Boolean node mask of ``{raw_dist > eps}``; ``eps=0`` is the whole domain."""
        eps = self.check_level(eps)
        return self.raw_dist > eps

    def neighbours(self, axis: int, side: int, eps: float = 0.0) -> NDArray:
        """Active neighbour index along ``axis`` (side +1/-1), -1 if the
        neighbour is outside ``Omega_eps``."""
        shifted = self.lattice.copy()
        shifted[:, axis] += side
        ok = np.all((shifted >= 0) & (shifted < np.array(self.lattice_shape)), axis=1)
        flat = np.zeros(self.n_nodes, dtype=np.int64)
        flat[ok] = np.ravel_multi_index(tuple(shifted[ok].T), self.lattice_shape)
        nb = np.where(ok, self.full_index[flat], -1)
        if eps:
            m = self.mask(eps)
            nb = np.where((nb >= 0) & m[np.maximum(nb, 0)], nb, -1)
        return nb

    def boundary_nodes(self, eps: float) -> NDArray:
        """Nodes of ``Omega_eps`` with at least one lattice neighbour outside it."""
        m = self.mask(eps)
        edge = np.zeros(self.n_nodes, dtype=bool)
        for axis in range(self.dim):
            for side in (-1, 1):
                edge |= self.neighbours(axis, side, eps) < 0
        return np.flatnonzero(m & edge)

    def project_to_level(self, points, eps: float) -> NDArray:
        """Closest point of the level set ``{d = eps}`` (valid inside the collar)."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        if self.kind == "interval":
            x = pts[:, 0]
            return np.where(x < 0.5 * self.size, eps, self.size - eps)[:, None]
        r = np.linalg.norm(pts, axis=1)
        r = np.where(r > 0, r, 1.0)
        return pts * ((self.size - eps) / r)[:, None]

    def outward_normal(self, points) -> NDArray:
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        if self.kind == "interval":
            return np.where(pts[:, :1] < 0.5 * self.size, -1.0, 1.0)
        r = np.linalg.norm(pts, axis=1, keepdims=True)
        return pts / np.where(r > 0, r, 1.0)

    # -- discrete derivatives of a nodal field ---------------------------
    def gradient(self, f, eps: float = 0.0) -> NDArray:
        """Central differences, one-sided where a neighbour is missing."""
        f = np.asarray(f, dtype=float)
        g = np.zeros((self.n_nodes, self.dim))
        idx = np.arange(self.n_nodes)
        for k in range(self.dim):
            up, dn = self.neighbours(k, 1, eps), self.neighbours(k, -1, eps)
            both = (up >= 0) & (dn >= 0)
            g[both, k] = (f[up[both]] - f[dn[both]]) / (2 * self.h)
            only_up = (up >= 0) & (dn < 0)
            g[only_up, k] = (f[up[only_up]] - f[idx[only_up]]) / self.h
            only_dn = (dn >= 0) & (up < 0)
            g[only_dn, k] = (f[idx[only_dn]] - f[dn[only_dn]]) / self.h
        return g

    def second_derivatives(self, f, eps: float = 0.0) -> NDArray:
        """Pure second differences per axis; shifted stencil on the outer layer."""
        f = np.asarray(f, dtype=float)
        out = np.zeros((self.n_nodes, self.dim))
        idx = np.arange(self.n_nodes)
        for k in range(self.dim):
            up, dn = self.neighbours(k, 1, eps), self.neighbours(k, -1, eps)
            both = (up >= 0) & (dn >= 0)
            out[both, k] = (f[up[both]] - 2 * f[both] + f[dn[both]]) / self.h**2
            for near, step in ((up, 1), (dn, -1)):
                edge = (near >= 0) & ~both
                far = self.neighbours(k, step, eps)[np.maximum(near, 0)]
                ok = edge & (far >= 0)
                out[ok, k] = (f[idx[ok]] - 2 * f[near[ok]] + f[far[ok]]) / self.h**2
        return out

    @cached_property
    def grad_dist(self) -> NDArray:
        return self.gradient(self.dist)

    @cached_property
    def lap_dist(self) -> NDArray:
        return self.second_derivatives(self.dist).sum(axis=1)

    # -- serialisation ----------------------------------------------------
    def descriptor(self) -> dict:
        key = "L" if self.kind == "interval" else "R"
        return {
            "dim": self.dim,
            "kind": self.kind,
            key: self.size,
            "n": self.n,
            "eps0": self.collar.eps0,
            "delta0": self.collar.delta0,
            "eps_levels": list(self.eps_levels),
        }

    def to_json(self) -> str:
        return json.dumps(self.descriptor(), sort_keys=True)

    @classmethod
    def from_descriptor(cls, desc: dict) -> "DomainGrid":
        kw = dict(eps0=desc.get("eps0"), delta0=desc.get("delta0"), eps_levels=desc.get("eps_levels"))
        if desc["kind"] == "interval":
            return build_interval_domain(desc["L"], desc["n"], **kw)
        return build_disk_domain(desc["R"], desc["n"], **kw)

    @classmethod
    def from_json(cls, text: str) -> "DomainGrid":
        return cls.from_descriptor(json.loads(text))

    def export_csv(self, path, **columns) -> Path:
        """Write node coordinates followed by one column per named nodal field."""
        path = Path(path)
        coords = ["x", "y"][: self.dim]
        names = list(columns)
        data = np.column_stack([self.nodes] + [np.asarray(columns[c], dtype=float) for c in names])
        header = ",".join(coords + names)
        np.savetxt(path, data, delimiter=",", header=header, comments="", fmt="%.17g")
        return path


def _default_levels(eps0: float) -> tuple:
    return tuple(eps0 / 3.0 / 2**k for k in range(4))


def _finish(kind, size, n, h, shape, lattice, nodes, grid_raw, eps0, delta0, eps_levels, width_rmax):
    if eps0 is None:
        eps0 = 0.3 * width_rmax / 0.5 if kind == "interval" else 0.3 * size
    delta0 = eps0 if delta0 is None else delta0
    collar = CollarParams(eps0=eps0, delta0=delta0, interior_ball_radius=eps0 / 3.0)
    levels = _default_levels(eps0) if eps_levels is None else tuple(sorted(eps_levels, reverse=True))
    if any(e <= 0 or e > eps0 / 3.0 * (1 + 1e-12) for e in levels):
        raise ConfigurationError("eps levels must lie in (0, eps0/3]")
    full_index = -np.ones(int(np.prod(shape)), dtype=np.int64)
    full_index[np.ravel_multi_index(tuple(lattice.T), shape)] = np.arange(len(nodes))
    dist = smooth_distance(grid_raw, eps0, width_rmax - eps0)
    proto = DomainGrid(
        kind=kind, size=float(size), n=int(n), h=float(h), lattice_shape=shape, lattice=lattice,
        nodes=nodes, raw_dist=grid_raw, dist=dist, normal=np.zeros_like(nodes),
        quad_weights=np.full(len(nodes), h ** nodes.shape[1]), eps_levels=levels,
        collar=collar, full_index=full_index,
    )
    object.__setattr__(proto, "normal", proto.outward_normal(nodes))
    for arr in (lattice, nodes, grid_raw, dist, proto.normal, proto.quad_weights, full_index):
        arr.setflags(write=False)
    return proto


def build_interval_domain(length: float, n_nodes: int, eps0: float | None = None,
                          delta0: float | None = None, eps_levels=None) -> DomainGrid:
    """Cell-centred grid on ``(0, length)``.

    The default collar width is ``eps0 = 0.3 * length``, which puts the
    largest subdomain level at ``0.1 * length``.
    """
    if n_nodes < 16:
        raise ConfigurationError("n_nodes must be >= 16 to resolve the collar")
    if length <= 0:
        raise ConfigurationError("length must be positive")
    h = length / n_nodes
    x = (np.arange(n_nodes) + 0.5) * h
    raw = np.minimum(x, length - x)
    lattice = np.arange(n_nodes)[:, None]
    eps0 = 0.3 * length if eps0 is None else eps0
    if eps0 >= 0.5 * length:
        raise ConfigurationError("eps0 must be smaller than half the interval")
    return _finish("interval", length, n_nodes, h, (n_nodes,), lattice, x[:, None], raw,
                   eps0, delta0, eps_levels, 0.5 * length)


def build_disk_domain(radius: float, n_per_axis: int, eps0: float | None = None,
                      delta0: float | None = None, eps_levels=None) -> DomainGrid:
    """Cell-centred lattice on ``[-R, R]^2`` clipped to the open disk."""
    if n_per_axis < 32:
        raise ConfigurationError("n_per_axis must be >= 32")
    if radius <= 0:
        raise ConfigurationError("radius must be positive")
    h = 2.0 * radius / n_per_axis
    c = -radius + (np.arange(n_per_axis) + 0.5) * h
    I, J = np.meshgrid(np.arange(n_per_axis), np.arange(n_per_axis), indexing="ij")
    X, Y = c[I], c[J]
    inside = X**2 + Y**2 < radius**2
    lattice = np.column_stack([I[inside], J[inside]])
    nodes = np.column_stack([X[inside], Y[inside]])
    raw = radius - np.linalg.norm(nodes, axis=1)
    eps0 = 0.3 * radius if eps0 is None else eps0
    if eps0 >= radius:
        raise ConfigurationError("eps0 must be smaller than the radius")
    return _finish("disk", radius, n_per_axis, h, (n_per_axis, n_per_axis), lattice, nodes, raw,
                   eps0, delta0, eps_levels, radius)


def neumann_extension(grid: DomainGrid, eps: float, boundary_data, a: Callable | None = None,
                      width: float | None = None) -> NDArray:
    """Field on ``Omega_eps`` whose co-normal derivative on ``{d = eps}`` is ``boundary_data``.

    ``g(x) = -ramp(d(x) - eps) * f(pi(x)) / a(pi(x))`` with ``pi`` the closest
    point on the level set; ``a`` is the (isotropic) diffusion coefficient,
    identity when omitted. ``boundary_data`` is either a callable of points or
    an array over ``grid.boundary_nodes(eps)``. Nodes outside ``Omega_eps``
    get 0.
    """
    eps = grid.check_level(eps)
    width = grid.collar.interior_ball_radius if width is None else width
    mask = grid.mask(eps)
    pts = grid.nodes[mask]
    proj = grid.project_to_level(pts, eps)
    if callable(boundary_data):
        f = np.asarray(boundary_data(proj), dtype=float)
    else:
        data = np.asarray(boundary_data, dtype=float)
        bnodes = grid.boundary_nodes(eps)
        if data.shape != (len(bnodes),):
            raise ConfigurationError("boundary_data must have one value per boundary node")
        anchor = grid.project_to_level(grid.nodes[bnodes], eps)
        _, nearest = cKDTree(anchor).query(proj)
        f = data[nearest]
    coef = np.ones(len(pts)) if a is None else np.asarray(a(proj), dtype=float)
    g = np.zeros(grid.n_nodes)
    g[mask] = -collar_ramp(grid.raw_dist[mask] - eps, width) * f / coef
    return g


@dataclass
class InvarianceReport:
    holds: bool
    worst_node: int
    worst_slack: float
    slack: NDArray
    nodes: NDArray


def check_invariance_condition(grid: DomainGrid, model, p_samples, C_margin: float) -> InvarianceReport:
    """Evaluate ``tr(a D^2 d) - H_p.Dd - (a Dd.Dd/d - C d)`` on the collar
    ``0 < d < delta0`` for every gradient sample; never raises."""
    p_samples = np.atleast_2d(np.asarray(p_samples, dtype=float))
    if p_samples.shape[1] != grid.dim:
        p_samples = p_samples.reshape(-1, grid.dim)
    sel = np.flatnonzero((grid.dist > 0) & (grid.dist < grid.collar.delta0))
    x = grid.nodes[sel]
    d = grid.dist[sel]
    Dd = grid.grad_dist[sel]
    a = model.a(x)
    lhs0 = a * grid.lap_dist[sel]
    rhs = a * np.sum(Dd * Dd, axis=1) / d - C_margin * d
    worst = np.full(len(sel), np.inf)
    for p in p_samples:
        P = np.broadcast_to(p, x.shape)
        slack = lhs0 - np.sum(model.Hp(x, P) * Dd, axis=1) - rhs
        worst = np.minimum(worst, slack)
    if len(sel) == 0:
        return InvarianceReport(True, -1, np.inf, worst, sel)
    k = int(np.argmin(worst))
    return InvarianceReport(bool(worst[k] >= 0), int(sel[k]), float(worst[k]), worst, sel)
