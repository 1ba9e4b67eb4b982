"""Finite-difference operators on ``Omega_eps`` shared by every solver.

Notation, for active nodes of ``Omega_eps`` and each axis ``k``:

* ``Dp[k]``, ``Dm[k]``: forward and backward differences, with a zero row
  where the neighbour is missing (reflection, i.e. zero flux through the
  cell face);
* ``L = diag(a) sum_k (Dp[k] - Dm[k]) / h``: the generator ``a Laplacian``;
* upwind Hamiltonian ``H_h(u) = kappa sum_k [h(p+) + h(p-) - h(0)]`` with
  ``p+ = max(Dm u, 0)`` and ``p- = min(Dp u, 0)``;
* its Jacobian ``J(u) = sum_k diag(kappa h'(p+)) Dm + diag(kappa h'(p-)) Dp``.

``L - J(u)`` is the backward transport operator of the linearised HJB
equation and its transpose is the Fokker-Planck operator, which is how the
two equations stay in exact duality.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import sparse
from scipy.linalg import solve_banded
from scipy.sparse.linalg import splu

from .geometry import DomainGrid


def _diff_matrices(grid: DomainGrid, eps: float, idx: np.ndarray):
    n = len(idx)
    local = -np.ones(grid.n_nodes, dtype=np.int64)
    local[idx] = np.arange(n)
    Dp, Dm = [], []
    rows = np.arange(n)
    for k in range(grid.dim):
        mats = []
        for side in (1, -1):
            nb = grid.neighbours(k, side, eps)[idx]
            has = nb >= 0
            j = local[nb[has]]
            i = rows[has]
            sgn = 1.0 if side == 1 else -1.0
            data = np.r_[np.full(has.sum(), sgn), np.full(has.sum(), -sgn)] / grid.h
            mats.append(sparse.csr_matrix((data, (np.r_[i, i], np.r_[j, i])), shape=(n, n)))
        Dp.append(mats[0])
        Dm.append(mats[1])
    return Dp, Dm


@dataclass(eq=False)
class GridOperators:
    """Operators of one model on one subdomain ``Omega_eps``.

    Fields on ``Omega_eps`` are vectors over ``idx`` (the active nodes); a
    leading batch axis is accepted by the nonlinear maps.
    """

    grid: DomainGrid
    eps: float
    idx: np.ndarray
    a: np.ndarray
    kappa: np.ndarray
    Dp: list
    Dm: list
    L: sparse.csr_matrix
    hamiltonian: object

    @classmethod
    def build(cls, grid: DomainGrid, model, eps: float = 0.0) -> "GridOperators":
        eps = grid.check_level(eps)
        idx = np.flatnonzero(grid.mask(eps))
        Dp, Dm = _diff_matrices(grid, eps, idx)
        x = grid.nodes[idx]
        a = model.a(x)
        lap = sum((Dp[k] - Dm[k]) for k in range(grid.dim)) / grid.h
        L = sparse.diags(a) @ lap
        kappa = np.asarray(model.hamiltonian.kappa(x), dtype=float)
        return cls(grid, eps, idx, a, kappa, Dp, Dm, L.tocsr(), model.hamiltonian)

    @property
    def n(self) -> int:
        return len(self.idx)

    @property
    def weights(self) -> np.ndarray:
        return self.grid.quad_weights[self.idx]

    @staticmethod
    def _apply(D, u):
        return (D @ np.asarray(u).T).T

    def upwind(self, u):
        """Per-axis ``(p+, p-)`` arrays of shape (..., n)."""
        return [(np.maximum(self._apply(self.Dm[k], u), 0.0), np.minimum(self._apply(self.Dp[k], u), 0.0))
                for k in range(self.grid.dim)]

    def hamiltonian_h(self, u) -> np.ndarray:
        hm = self.hamiltonian
        out = 0.0
        for pp, pm in self.upwind(u):
            out = out + hm.h(pp) + hm.h(pm) - hm.h(0.0)
        return self.kappa * out

    def jacobian(self, u) -> sparse.csr_matrix:
        """``J(u)``: derivative of the upwind Hamiltonian, one field at a time."""
        hp = self.hamiltonian.hp
        J = sparse.csr_matrix((self.n, self.n))
        for k, (pp, pm) in enumerate(self.upwind(u)):
            J = J + sparse.diags(self.kappa * hp(pp)) @ self.Dm[k] + sparse.diags(self.kappa * hp(pm)) @ self.Dp[k]
        return J.tocsr()

    def transport(self, u) -> sparse.csr_matrix:
        """Backward operator ``L - J(u)`` of the linearised HJB equation."""
        return (self.L - self.jacobian(u)).tocsr()

    def fokker_planck(self, u) -> sparse.csr_matrix:
        """Forward operator acting on node masses: the transpose of :meth:`transport`."""
        return self.transport(u).T.tocsr()

    def second_variation(self, u, M) -> sparse.csr_matrix:
        """``B(u, M)``: derivative of ``J(u)^T M`` with respect to ``u``.

        A difference that vanishes up to rounding (a tie between the two
        upwind sides, e.g. at a symmetric extremum) gives weight 1/2 to each
        side, which is the exact derivative when the tie is symmetric.
        """
        hpp = self.hamiltonian.hpp
        B = sparse.csr_matrix((self.n, self.n))
        tol = 1e-10 * max(1.0, float(np.max(np.abs(u)))) / self.grid.h
        side = lambda d: np.where(np.abs(d) <= tol, 0.5, (d > 0).astype(float))  # noqa: E731
        for k, (pp, pm) in enumerate(self.upwind(u)):
            dm = self._apply(self.Dm[k], u)
            dp = self._apply(self.Dp[k], u)
            cm = M * self.kappa * hpp(pp) * side(dm)
            cp = M * self.kappa * hpp(pm) * side(-dp)
            B = B + self.Dm[k].T @ sparse.diags(cm) @ self.Dm[k] + self.Dp[k].T @ sparse.diags(cp) @ self.Dp[k]
        return B.tocsr()

    def step_matrix(self, u, dt: float) -> sparse.csr_matrix:
        """``I - dt (L - J(u))``; its transpose advances the masses one step."""
        return (sparse.identity(self.n, format="csr") - dt * self.transport(u)).tocsr()

    def factor(self, A) -> "SparseFactor":
        return SparseFactor(A)


class SparseFactor:
    """SuperLU factor of a step matrix, reusable for transposed solves."""

    def __init__(self, A):
        self.A = A
        self._lu = splu(sparse.csc_matrix(A))

    def solve(self, b, trans: bool = False):
        return self._lu.solve(np.asarray(b, dtype=float), trans="T" if trans else "N")

    def matrix(self):
        return self.A


# -- batched tridiagonal machinery (1D, many fields at once) ----------------

def thomas(lo, di, up, rhs):
    """Solve tridiagonal systems along the last axis.

    ``lo[..., i]`` multiplies ``x[i-1]`` and ``up[..., i]`` multiplies
    ``x[i+1]``; entries ``lo[..., 0]`` and ``up[..., -1]`` are ignored. All
    arguments broadcast against each other. The batch is laid end to end as
    one block-diagonal banded system and handed to LAPACK.
    """
    lo, di, up, rhs = np.broadcast_arrays(lo, di, up, rhs)
    shape = rhs.shape
    n = shape[-1]
    ab = np.empty((3, rhs.size))
    up_ = np.array(up, dtype=float)
    lo_ = np.array(lo, dtype=float)
    up_[..., -1] = 0.0
    lo_[..., 0] = 0.0
    ab[0, 1:] = up_.reshape(-1)[:-1]
    ab[0, 0] = 0.0
    ab[1] = np.ascontiguousarray(di).reshape(-1)
    ab[2, :-1] = lo_.reshape(-1)[1:]
    ab[2, -1] = 0.0
    if n == 1:
        return rhs / di
    x = solve_banded((1, 1), ab, np.ascontiguousarray(rhs, dtype=float).reshape(-1),
                     overwrite_ab=True, check_finite=False)
    return x.reshape(shape)


def tri_transpose(lo, di, up):
    """Bands of the transposed tridiagonal matrix."""
    loT = np.zeros(np.broadcast_shapes(np.shape(lo), np.shape(up)))
    upT = np.zeros_like(loT)
    loT[..., 1:] = np.broadcast_to(up, loT.shape)[..., :-1]
    upT[..., :-1] = np.broadcast_to(lo, upT.shape)[..., 1:]
    return loT, di, upT


def tri_matvec(lo, di, up, x):
    out = di * x
    out[..., 1:] += lo[..., 1:] * x[..., :-1]
    out[..., :-1] += up[..., :-1] * x[..., 1:]
    return out


@dataclass(frozen=True)
class Line1D:
    """Tridiagonal description of the 1D operators on a contiguous node line.

    ``a`` and ``kappa`` broadcast against the fields (last axis = the line),
    so the same object serves single fields, batches and tensor axes.
    """

    h: float
    a: np.ndarray
    kappa: np.ndarray
    hamiltonian: object

    @classmethod
    def from_ops(cls, ops: GridOperators) -> "Line1D":
        if ops.grid.dim != 1:
            raise ValueError("Line1D needs a one-dimensional grid")
        return cls(ops.grid.h, ops.a, ops.kappa, ops.hamiltonian)

    def diffs(self, u):
        dm = np.zeros_like(u)
        dp = np.zeros_like(u)
        dm[..., 1:] = (u[..., 1:] - u[..., :-1]) / self.h
        dp[..., :-1] = dm[..., 1:]
        return dm, dp

    def hamiltonian_h(self, u):
        hm = self.hamiltonian
        dm, dp = self.diffs(u)
        return self.kappa * (hm.h(np.maximum(dm, 0.0)) + hm.h(np.minimum(dp, 0.0)) - hm.h(0.0))

    def drift_bands(self, u):
        """Bands of ``J(u)``."""
        hp = self.hamiltonian.hp
        dm, dp = self.diffs(u)
        cm = self.kappa * hp(np.maximum(dm, 0.0)) / self.h
        cp = self.kappa * hp(np.minimum(dp, 0.0)) / self.h
        cm[..., 0] = 0.0
        cp[..., -1] = 0.0
        return -cm, cm - cp, cp

    def laplacian_bands(self, n):
        memo = self.__dict__.setdefault("_lap_memo", {})
        if n not in memo:
            memo[n] = self._laplacian_bands(n)
        return memo[n]

    def _laplacian_bands(self, n):
        a = np.asarray(self.a, dtype=float)
        lo = np.broadcast_to(a / self.h**2, np.broadcast_shapes(a.shape, (n,))).copy()
        up = lo.copy()
        lo[..., 0] = 0.0
        up[..., -1] = 0.0
        return lo, -(lo + up), up

    def transport_bands(self, u, with_drift: bool = True):
        """Bands of ``L - J(u)``."""
        lo, di, up = self.laplacian_bands(u.shape[-1])
        if with_drift:
            jlo, jdi, jup = self.drift_bands(u)
            lo, di, up = lo - jlo, di - jdi, up - jup
        return lo, di, up

    def step_bands(self, u, dt, with_drift: bool = True):
        """Bands of ``I - dt (L - J(u))``."""
        lo, di, up = self.transport_bands(u, with_drift)
        return np.broadcast_arrays(-dt * lo, 1.0 - dt * di, -dt * up)

    def implicit_operator(self, v, dt):
        """``(I - dt L) v + dt H_h(v)``."""
        lo, di, up = self.laplacian_bands(v.shape[-1])
        out = v - dt * (di * v) + dt * self.hamiltonian_h(v)
        out[..., 1:] -= dt * lo[..., 1:] * v[..., :-1]
        out[..., :-1] -= dt * up[..., :-1] * v[..., 1:]
        return out

    def solve_hjb(self, rhs, dt, guess=None, tol=1e-13, max_iter=50):
        """Newton for ``(I - dt L) v + dt H_h(v) = rhs`` on every line at once.

        Returns ``v`` and the bands of the Newton matrix at ``v``.
        """
        v = np.array(rhs if guess is None else guess, dtype=float)
        scale = tol * max(1.0, float(np.abs(rhs).max()))
        for _ in range(max_iter + 1):
            bands = self.step_bands(v, dt)
            res = self.implicit_operator(v, dt) - rhs
            if np.abs(res).max() <= scale:
                return v, bands
            v = v - thomas(*bands, res)
        raise RuntimeError("Newton failed on the HJB lines")


def bands_to_sparse(lo, di, up):
    n = len(di)
    return sparse.diags([lo[1:], di, up[:-1]], [-1, 0, 1], shape=(n, n), format="csr")


class BandedFactor:
    """Tridiagonal step matrix stored by bands; solves with LAPACK."""

    def __init__(self, lo, di, up):
        self.bands = (lo, di, up)
        n = len(di)
        self._ab = np.zeros((3, n))
        self._ab[0, 1:] = up[:-1]
        self._ab[1] = di
        self._ab[2, :-1] = lo[1:]
        loT, diT, upT = tri_transpose(lo, di, up)
        self._abT = np.zeros((3, n))
        self._abT[0, 1:] = upT[:-1]
        self._abT[1] = diT
        self._abT[2, :-1] = loT[1:]

    def solve(self, b, trans: bool = False):
        return solve_banded((1, 1), self._abT if trans else self._ab, b, check_finite=False)

    def matrix(self):
        return bands_to_sparse(*self.bands)
