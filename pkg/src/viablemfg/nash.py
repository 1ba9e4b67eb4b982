"""N-player Nash system on the tensor grid of an interval, its projection
from the master equation and the convergence study.

Player ``i`` has value ``v_i(t, x_1, ..., x_N)``. Exchangeability gives
``v_i = v_0`` with coordinates ``0`` and ``i`` swapped, so only the tensor of
player 0 (axis 0 = own position) is stored. One backward step, with
``w = v^{n+1} + dt F(x_0, m_x^{N,0})``, is

* for every other player ``j``: an implicit step ``(I - dt Q_j)^{-1}`` along
  axis ``j``, where ``Q_j = a(x_j) D_jj - (upwind drift of v_j) D_j`` is the
  one-player transport operator of the MFG scheme built from ``v_j^n``;
* the implicit HJB step of player 0 along axis 0 (Newton).

The drifts ``v_j^n`` are iterated to a fixed point within each step, and the
right-hand side of the HJB step is symmetrised over the axes of the other
players.

Every row of ``(I - dt Q_j)^{-1}`` is a probability vector, so the other
players move as independent one-step Markov chains with exactly the
transition matrix of the MFG Fokker-Planck step. This is what makes the
projection ``u_0(t, x) = U(t, x_0, m_x^{N,0})`` solve the same scheme up to an
``O(1/N)`` remainder.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .geometry import ConfigurationError, DomainGrid
from .mfg import ConvergenceError, SolverConfig, solve_mfg, solve_mfg_batch_1d, time_grid
from .ops import GridOperators, Line1D, thomas

MAX_TENSOR_NODES = 2_000_000


@dataclass(frozen=True)
class Multisets:
    """Unordered positions of the ``N - 1`` other players.

    ``combos[b]`` is a sorted tuple of node indices and ``lookup`` maps each
    ordered tuple (a tensor index over ``N - 1`` axes) to its multiset id.
    """

    n: int
    k: int
    combos: np.ndarray
    lookup: np.ndarray

    @classmethod
    def build(cls, n: int, k: int) -> "Multisets":
        combos = np.array(list(itertools.combinations_with_replacement(range(n), k)), dtype=np.int64)
        flat = np.full(n**k, -1, dtype=np.int64)
        flat[np.ravel_multi_index(combos.T, (n,) * k)] = np.arange(len(combos))
        grid_idx = np.sort(np.indices((n,) * k).reshape(k, -1), axis=0)
        lookup = flat[np.ravel_multi_index(grid_idx, (n,) * k)].reshape((n,) * k)
        return cls(n, k, combos, lookup)

    def masses(self) -> np.ndarray:
        """Empirical measures as node masses, shape (n_multisets, n)."""
        M = np.zeros((len(self.combos), self.n))
        rows = np.repeat(np.arange(len(self.combos)), self.k)
        np.add.at(M, (rows, self.combos.ravel()), 1.0 / self.k)
        return M

    def to_tensor(self, per_multiset: np.ndarray) -> np.ndarray:
        """``(n_multisets, n)`` values ``f(x_0; m)`` to a tensor with axis 0 = ``x_0``."""
        return np.moveaxis(per_multiset[self.lookup], -1, 0)


def _symmetrise(v: np.ndarray) -> np.ndarray:
    """Average over permutations of axes ``1..N-1``."""
    N = v.ndim
    if N <= 2:
        return v
    perms = list(itertools.permutations(range(1, N)))
    return sum(np.transpose(v, (0,) + p) for p in perms) / len(perms)


def exchangeability_defect(v: np.ndarray) -> float:
    N = v.ndim
    return max((float(np.max(np.abs(v - np.transpose(v, (0,) + p))))
                for p in itertools.permutations(range(1, N))), default=0.0)


def _apply_along(fn, arr, axis):
    return np.moveaxis(fn(np.moveaxis(arr, axis, -1)), -1, axis)


def _other_player_step(line: Line1D, v_player0: np.ndarray, z: np.ndarray, dt: float, j: int) -> np.ndarray:
    """``(I - dt Q_j)^{-1} z`` along axis ``j`` with drifts from ``v_j``."""
    vj = np.moveaxis(np.swapaxes(v_player0, 0, j), j, -1)
    bands = line.step_bands(np.ascontiguousarray(vj), dt)
    return _apply_along(lambda a: thomas(*bands, a), z, j)


@dataclass(eq=False)
class NashTensor:
    """Value of player 0 on the tensor grid, ``values[k]`` at time ``t0 + k dt``."""

    N: int
    grid: DomainGrid
    model: object
    t0: float
    dt: float
    values: np.ndarray
    picard_iters: list = field(default_factory=list)

    @property
    def grid_per_axis(self) -> int:
        return self.grid.n_nodes

    @property
    def times(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(self.values.shape[0])

    def player(self, i: int, k: int) -> np.ndarray:
        return np.swapaxes(self.values[k], 0, i)

    def exchangeability_defect(self) -> float:
        return max(exchangeability_defect(v) for v in self.values)

    def own_gradient(self, k: int) -> np.ndarray:
        """Centred ``D_{x_0} v_0`` at time slice ``k`` (one-sided at the ends)."""
        return np.gradient(self.values[k], self.grid.h, axis=0)


def _tensor_nodes_check(n: int, N: int):
    if N < 2:
        raise ConfigurationError("N must be at least 2")
    if n**N > MAX_TENSOR_NODES:
        raise ConfigurationError(f"tensor grid {n}^{N} exceeds the budget of {MAX_TENSOR_NODES} nodes")


def coupling_tensors(grid: DomainGrid, model, N: int):
    """``F(x_0, m_x^{N,0})`` and ``G(x_0, m_x^{N,0})`` on the tensor grid."""
    ms = Multisets.build(grid.n_nodes, N - 1)
    M = ms.masses()
    return ms, ms.to_tensor(model.F.nodal(grid, M)), ms.to_tensor(model.G.nodal(grid, M))


def nash_step(line: Line1D, v_next, F_ten, dt, guess=None, tol=1e-11, max_iter=50, newton_tol=1e-13):
    """One backward step of the split Nash scheme; returns ``(v, iterations)``."""
    N = v_next.ndim
    w = v_next + dt * F_ten
    v = v_next if guess is None else guess
    for it in range(1, max_iter + 1):
        z = w
        for j in range(1, N):
            z = _other_player_step(line, v, z, dt, j)
        # symmetrise before the nonlinear solve so the step is exactly the one
        # measured by ``remainder``; the HJB lines then come out symmetric
        z = _symmetrise(z)
        v_new, _ = line.solve_hjb(np.ascontiguousarray(np.moveaxis(z, 0, -1)), dt,
                                  np.ascontiguousarray(np.moveaxis(v, 0, -1)), newton_tol)
        v_new = _symmetrise(np.moveaxis(v_new, -1, 0))
        change = float(np.max(np.abs(v_new - v)))
        v = v_new
        if change < tol:
            return v, it
    raise ConvergenceError("drift iteration of the Nash step did not converge", [change])


def solve_nash(grid: DomainGrid, model, N: int, config: SolverConfig, t0: float = 0.0) -> NashTensor:
    """Backward solve of the Nash system of ``N`` players on an interval grid."""
    if grid.dim != 1:
        raise ConfigurationError("Nash solves are implemented for d = 1 only")
    _tensor_nodes_check(grid.n_nodes, N)
    line = Line1D.from_ops(GridOperators.build(grid, model, 0.0))
    _, F_ten, G_ten = coupling_tensors(grid, model, N)
    n_steps, dt = time_grid(t0, model.T, config.dt)
    values = np.empty((n_steps + 1,) + (grid.n_nodes,) * N)
    values[-1] = G_ten
    iters = []
    for k in range(n_steps - 1, -1, -1):
        values[k], it = nash_step(line, values[k + 1], F_ten, dt, tol=config.picard_tol,
                                  newton_tol=config.newton_tol)
        iters.append(it)
    return NashTensor(N, grid, model, t0, dt, values, iters[::-1])


@dataclass(eq=False)
class ProjectionTensor:
    """``u_0(t_k, x) = U(t_k, x_0, m_x^{N,0})`` at the listed time slices."""

    N: int
    grid: DomainGrid
    t0: float
    dt: float
    values: dict
    source: dict
    remainder: dict = field(default_factory=dict)

    def slices(self):
        return sorted(self.values)

    def remainder_norm(self) -> float:
        return max((float(np.max(np.abs(r))) for r in self.remainder.values()), default=np.nan)


def project_master(grid: DomainGrid, model, N: int, t_nodes, config: SolverConfig, t0: float = 0.0,
                   with_remainder: bool = True) -> ProjectionTensor:
    """Projection of the discrete master field onto the tensor grid.

    ``t_nodes`` are time-slice indices on the Nash time grid. Each slice costs
    one batched MFG solve over every multiset of the other players, which is
    the cache of ``U`` keyed by the empirical measure. With
    ``with_remainder`` the slices ``k + 1`` are added and ``r_0`` is returned
    for every requested ``k < n_steps``.
    """
    if grid.dim != 1:
        raise ConfigurationError("projections are implemented for d = 1 only")
    _tensor_nodes_check(grid.n_nodes, N)
    n_steps, dt = time_grid(t0, model.T, config.dt)
    want = sorted({int(k) for k in t_nodes})
    if any(k < 0 or k > n_steps for k in want):
        raise ConfigurationError("time slice outside the Nash time grid")
    need = set(want)
    if with_remainder:
        need |= {k + 1 for k in want if k < n_steps}
    ms, F_ten, _ = coupling_tensors(grid, model, N)
    M = ms.masses()
    cfg = replace(config, dt=dt, eps_levels=(0.0,))
    values = {}
    for k in sorted(need):
        sol = solve_mfg_batch_1d(grid, model, t0 + k * dt, M, cfg, eps=0.0)
        values[k] = ms.to_tensor(sol.u[0])
    proj = ProjectionTensor(N, grid, t0, dt, values,
                            {"t0": t0, "dt": dt, "model": model.fingerprint(), "eps": 0.0,
                             "n_multisets": int(len(ms.combos))})
    if with_remainder:
        line = Line1D.from_ops(GridOperators.build(grid, model, 0.0))
        for k in want:
            if k < n_steps:
                proj.remainder[k] = remainder(line, values[k], values[k + 1], F_ten, dt)
    return proj


def remainder(line: Line1D, u_k, u_next, F_ten, dt) -> np.ndarray:
    """Defect of ``u`` in one step of the Nash scheme, divided by ``dt``.

    The other-player steps are followed by the same symmetrisation as in
    :func:`nash_step`; it commutes with the HJB operator along axis 0.
    """
    z = u_next + dt * F_ten
    for j in range(1, u_k.ndim):
        z = _other_player_step(line, u_k, z, dt, j)
    z = _symmetrise(z)
    lhs = np.moveaxis(line.implicit_operator(np.ascontiguousarray(np.moveaxis(u_k, 0, -1)), dt), -1, 0)
    return (lhs - z) / dt


def sup_gap(nash: NashTensor, proj: ProjectionTensor, slices=None) -> float:
    ks = [k for k in (proj.slices() if slices is None else slices) if k in proj.values]
    return max(float(np.max(np.abs(nash.values[k] - proj.values[k]))) for k in ks)


def weighted_gap(nash: NashTensor, proj: ProjectionTensor, m0_masses, slices=None) -> float:
    """``sup_k E|v - u|`` with all coordinates drawn independently from ``m0``."""
    ks = [k for k in (proj.slices() if slices is None else slices) if k in proj.values]
    w = np.asarray(m0_masses, float)
    out = 0.0
    for k in ks:
        d = np.abs(nash.values[k] - proj.values[k])
        for _ in range(nash.N):
            d = np.tensordot(d, w, axes=([0], [0]))
        out = max(out, float(d))
    return out


def derivative_check(grid: DomainGrid, model, proj: ProjectionTensor, k: int, n_samples: int, seed: int,
                     config: SolverConfig) -> dict:
    """Compare ``D_{x_j} u_0`` (finite differences of the projection) with
    ``D_m U(t, x_0, m_x, x_j) / (N - 1)`` from the linearised system at
    random interior tensor nodes."""
    from .master import compute_K

    rng = np.random.default_rng(seed)
    N, n = proj.N, grid.n_nodes
    U = proj.values[k]
    cfg = replace(config, dt=proj.dt, eps_levels=(0.0,))
    fds, exacts = [], []
    for _ in range(n_samples):
        x = rng.integers(1, n - 1, size=N)
        j = int(rng.integers(1, N))
        up, dn = x.copy(), x.copy()
        up[j] += 1
        dn[j] -= 1
        fd = (U[tuple(up)] - U[tuple(dn)]) / (2 * grid.h)
        M = np.zeros(n)
        np.add.at(M, x[1:], 1.0 / (N - 1))
        sol = solve_mfg(grid, model, proj.t0 + k * proj.dt, M, cfg)
        K = compute_K(grid, model, sol)
        exact = K.DmK[x[0], x[j], 0] / (N - 1)
        fds.append(fd)
        exacts.append(exact)
    fds, exacts = np.array(fds), np.array(exacts)
    # pointwise ratios blow up where the derivative crosses zero; the
    # headline figure is relative to the largest derivative sampled
    return {"finite_difference": fds, "formula": exacts,
            "relative_gap": float(np.max(np.abs(fds - exacts)) / np.max(np.abs(exacts)))}


def _slope(Ns, vals):
    Ns, vals = np.asarray(Ns, float), np.asarray(vals, float)
    ok = vals > 0
    if ok.sum() < 2:
        return float("nan")
    return float(np.polyfit(np.log(Ns[ok]), np.log(vals[ok]), 1)[0])


def default_slices(n_steps: int) -> list:
    return sorted({0, n_steps // 4, n_steps // 2, (3 * n_steps) // 4})


def convergence_study(grid: DomainGrid, model, N_list, m0, samples: int, seed: int,
                      config: SolverConfig, slices=None) -> dict:
    """Gap between Nash values and projected master values for each ``N``.

    Reports the sup gap over the tensor grid at the sampled slices, the
    ``m0``-weighted gap, ``max |r_0|`` and the Monte Carlo ``L^1(m0)`` gap of
    ``w_0(t0, x_0, m0) = E[v_0(t0, x_0, Z)]``, ``Z_j ~ m0`` i.i.d.
    """
    if samples < 1000:
        raise ConfigurationError("the w-gap needs at least 1000 samples")
    rng = np.random.default_rng(seed)
    M0 = np.asarray(m0, float)
    n_steps, dt = time_grid(0.0, model.T, config.dt)
    ks = default_slices(n_steps) if slices is None else list(slices)
    U0 = solve_mfg(grid, model, 0.0, M0, replace(config, dt=dt, eps_levels=(0.0,))).u[0]
    rows = []
    for N in N_list:
        nash = solve_nash(grid, model, N, config)
        proj = project_master(grid, model, N, ks, config)
        draws = rng.choice(grid.n_nodes, size=(samples, N - 1), p=M0 / M0.sum())
        vals = nash.values[0][(slice(None),) + tuple(draws.T)]
        w = vals.mean(axis=1)
        se = vals.std(axis=1, ddof=1) / math.sqrt(samples)
        rows.append({
            "N": int(N),
            "sup_gap": sup_gap(nash, proj, ks),
            "weighted_gap": weighted_gap(nash, proj, M0, ks),
            "remainder": proj.remainder_norm(),
            "w_gap": float(np.sum(M0 * np.abs(w - U0))),
            "w_gap_se": float(np.sum(M0 * se)),
            "exchangeability": nash.exchangeability_defect(),
        })
    Ns = [r["N"] for r in rows]
    return {
        "rows": rows,
        "slope_sup_gap": _slope(Ns, [r["sup_gap"] for r in rows]),
        "slope_w_gap": _slope(Ns, [r["w_gap"] for r in rows]),
        "slope_remainder": _slope(Ns, [r["remainder"] for r in rows]),
        "slices": ks,
        "seed": seed,
        "grid_per_axis": grid.n_nodes,
        "dt": dt,
    }
