"""Forward-backward MFG solver on the subdomains ``Omega_eps``.

Time stepping, with ``A_k = I - dt L + dt J(u^k)``:

* HJB, backward and fully implicit (Newton at every step)::

      (I - dt L) u^k + dt H_h(u^k) = u^{k+1} + dt F(M^{k+1})

* Fokker-Planck on node masses ``M``, forward::

      A_k^T M^{k+1} = M^k

* terminal layer ``u^N = G(M^N) - N_eps(a grad G . nu)``.

The forward matrix is the transpose of the Newton matrix of the backward
step, so mass is conserved by construction (``A_k 1 = 1``) and the discrete
Lasry-Lions identity holds exactly. The coupled system is solved by damped
Picard iteration on the measure flow, level by level through ``eps_levels``
(coarsest first).
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import ConfigurationError, DomainGrid, neumann_extension
from .measures import MeasureField, d1_interval, holder_norm, wasserstein1_masses
from .ops import BandedFactor, GridOperators, Line1D, thomas, tri_transpose


class ConvergenceError(RuntimeError):
    """Picard or Newton iteration failed; ``history`` holds the residuals."""

    def __init__(self, message, history=None):
        super().__init__(message)
        self.history = list(history or [])


@dataclass(frozen=True)
class SolverConfig:
    dt: float = 0.02
    theta_scheme: float = 1.0
    picard_damping: float = 0.5
    picard_tol: float = 1e-10
    max_iters: int = 300
    newton_tol: float = 1e-13
    newton_max: int = 50
    eps_levels: tuple | None = None

    def __post_init__(self):
        if not self.dt > 0:
            raise ConfigurationError("dt must be positive")
        if self.theta_scheme < 0.5:
            raise ConfigurationError("theta_scheme < 1/2 needs an explicit CFL bound and is not supported")
        if self.theta_scheme != 1.0:
            raise ConfigurationError("only the fully implicit scheme (theta_scheme = 1) keeps the exact duality")
        if not 0 < self.picard_damping <= 1:
            raise ConfigurationError("picard_damping must lie in (0, 1]")
        if not self.picard_tol > 0 or self.max_iters < 1:
            raise ConfigurationError("picard_tol must be positive and max_iters >= 1")
        if self.eps_levels is not None:
            object.__setattr__(self, "eps_levels", tuple(float(e) for e in self.eps_levels))

    @staticmethod
    def p_exponent(dim: int, alpha: float) -> float:
        """Integrability exponent ``(d + 2) / (d + 1 + alpha)`` of the density estimates."""
        return (dim + 2) / (dim + 1 + alpha)

    def levels(self, grid: DomainGrid) -> tuple:
        return grid.eps_levels if self.eps_levels is None else self.eps_levels


def time_grid(t0: float, T: float, dt: float):
    """Number of steps and the step actually used (``T - t0`` split evenly)."""
    if t0 > T:
        raise ConfigurationError("t0 must not exceed T")
    n = int(np.ceil((T - t0) / dt - 1e-9))
    if n == 0:
        return 0, dt
    return n, (T - t0) / n


def _as_masses(grid, m):
    if isinstance(m, MeasureField):
        return m.masses
    m = np.asarray(m, dtype=float)
    if m.shape[-1] != grid.n_nodes:
        raise ValueError("measure must have one value per grid node")
    return m


def terminal_value(grid: DomainGrid, model, eps: float, M_full) -> np.ndarray:
    """``G(., M) - N_eps(a grad_x G(., M) . nu)`` on all nodes (full length)."""
    G = model.G.nodal(grid, M_full)
    if eps == 0.0:
        return G

    def conormal(points):
        nu = grid.outward_normal(points)
        return model.a(points) * np.sum(model.G.gradient(points, grid, M_full) * nu, axis=1)

    return G - neumann_extension(grid, eps, conormal, a=model.a)


class _Stepper:
    """Backward and forward steps on one subdomain."""

    def __init__(self, grid, model, eps, config):
        self.grid, self.model, self.eps, self.config = grid, model, eps, config
        self.ops = GridOperators.build(grid, model, eps)
        self.idx = self.ops.idx
        self.line = Line1D.from_ops(self.ops) if grid.dim == 1 else None

    def step_factor(self, u, dt):
        """Factor of ``I - dt (L - J(u))``: banded in 1D, SuperLU in 2D."""
        if self.line is not None:
            return BandedFactor(*self.line.step_bands(u, dt))
        return self.ops.factor(self.ops.step_matrix(u, dt))

    def residual(self, u, rhs, dt):
        if self.line is not None:
            lo, di, up = self.line.laplacian_bands(len(u))
            Lu = di * u
            Lu[1:] += lo[1:] * u[:-1]
            Lu[:-1] += up[:-1] * u[1:]
            return u - dt * Lu + dt * self.line.hamiltonian_h(u) - rhs
        return u - dt * (self.ops.L @ u) + dt * self.ops.hamiltonian_h(u) - rhs

    def embed(self, v, fill=0.0):
        if len(self.idx) == self.grid.n_nodes:
            return np.array(v, dtype=float)
        out = np.full(v.shape[:-1] + (self.grid.n_nodes,), fill, dtype=float)
        out[..., self.idx] = v
        return out

    def F(self, M_act):
        return self.model.F.nodal(self.grid, self.embed(M_act))[..., self.idx]

    def hjb_step(self, u_next, rhs, dt):
        """Newton for ``(I - dt L) u + dt H_h(u) = rhs``; returns ``u`` and the
        factor of the Newton matrix at the solution."""
        cfg = self.config
        u = u_next.copy()
        scale = max(1.0, np.abs(rhs).max())
        for _ in range(cfg.newton_max):
            fac = self.step_factor(u, dt)
            res = self.residual(u, rhs, dt)
            if np.abs(res).max() <= cfg.newton_tol * scale:
                return u, fac
            u = u - fac.solve(res)
        fac = self.step_factor(u, dt)
        res = self.residual(u, rhs, dt)
        if np.abs(res).max() > 1e3 * cfg.newton_tol * scale:
            raise ConvergenceError("Newton failed in the HJB step", [float(np.abs(res).max())])
        return u, fac

    def backward(self, M_act, dt, terminal_act):
        n_steps = M_act.shape[0] - 1
        u = np.empty_like(M_act)
        u[-1] = terminal_act
        Fk = self.F(M_act)
        mats = [None] * n_steps
        for k in range(n_steps - 1, -1, -1):
            u[k], mats[k] = self.hjb_step(u[k + 1], u[k + 1] + dt * Fk[k + 1], dt)
        return u, mats

    def forward(self, M0_act, mats):
        M = np.empty((len(mats) + 1, len(M0_act)))
        M[0] = M0_act
        for k, fac in enumerate(mats):
            M[k + 1] = fac.solve(M[k], trans=True)
        return M

    def terminal(self, M_last_act):
        return terminal_value(self.grid, self.model, self.eps, self.embed(M_last_act))[self.idx]

    def gap(self, Ma, Mb):
        if self.grid.dim == 1:
            return float(np.max(d1_interval(self.grid, self.embed(Ma), self.embed(Mb), self.eps)))
        # planar grids: cheap upper bound diam * total variation for the stopping test
        return float(self.grid.diam * np.max(np.abs(Ma - Mb).sum(axis=-1)))


def solve_hjb_neumann(grid: DomainGrid, eps: float, model, m_flow, terminal, config: SolverConfig,
                      t0: float = 0.0) -> np.ndarray:
    """Backward HJB solve on ``Omega_eps`` for a prescribed measure flow.

    ``m_flow`` holds node masses of shape (n_steps + 1, n_nodes) and
    ``terminal`` the final value on all nodes. Returns ``u`` of the same shape
    with NaN outside ``Omega_eps``.
    """
    eps = grid.check_level(eps)
    st = _Stepper(grid, model, eps, config)
    n_steps, dt = time_grid(t0, model.T, config.dt)
    M = _as_masses(grid, m_flow)
    if M.ndim == 1:
        M = np.broadcast_to(M, (n_steps + 1, grid.n_nodes))
    if M.shape[0] != n_steps + 1:
        raise ConfigurationError(f"m_flow must have {n_steps + 1} time slices")
    term = np.asarray(terminal, dtype=float)[st.idx]
    u, _ = st.backward(M[:, st.idx], dt, term)
    return st.embed(u, np.nan)


def solve_fp_neumann(grid: DomainGrid, eps: float, model, u_flow, m0, config: SolverConfig,
                     t0: float = 0.0) -> np.ndarray:
    """Forward mass transport driven by the feedback of ``u_flow``.

    ``u_flow`` (n_steps + 1, n_nodes) supplies the upwind drift at each step;
    ``m0`` is restricted to ``Omega_eps`` without renormalisation. Returns node
    masses of shape (n_steps + 1, n_nodes).
    """
    eps = grid.check_level(eps)
    st = _Stepper(grid, model, eps, config)
    n_steps, dt = time_grid(t0, model.T, config.dt)
    u = np.asarray(u_flow, dtype=float)[:, st.idx]
    if u.shape[0] != n_steps + 1:
        raise ConfigurationError(f"u_flow must have {n_steps + 1} time slices")
    mats = [st.step_factor(u[k], dt) for k in range(n_steps)]
    return st.embed(st.forward(_as_masses(grid, m0)[st.idx], mats))


@dataclass(eq=False)
class MFGSolution:
    grid: DomainGrid
    model: object
    eps: float
    t0: float
    dt: float
    u: np.ndarray
    M: np.ndarray
    eps_used: list
    picard_iters: int
    residuals: list
    cascade: list = field(default_factory=list)
    factors: list = field(default_factory=list, repr=False)

    @property
    def times(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(self.u.shape[0])

    @property
    def n_steps(self) -> int:
        return self.u.shape[0] - 1

    @property
    def mask(self) -> np.ndarray:
        return self.grid.mask(self.eps)

    @property
    def m(self) -> np.ndarray:
        """Densities per time slice."""
        return self.M / self.grid.quad_weights

    @property
    def residuals_monotone(self) -> bool:
        r = np.asarray(self.residuals[2:])
        return bool(np.all(np.diff(r) <= 1e-14 + 1e-9 * r[:-1])) if len(r) > 1 else True

    def measure(self, k: int) -> MeasureField:
        return MeasureField.from_masses(self.grid, np.clip(self.M[k], 0.0, None))


def _picard(st: _Stepper, M0_act, n_steps, dt, config, M_init=None):
    M_bar = np.broadcast_to(M0_act, (n_steps + 1, len(M0_act))).copy() if M_init is None else M_init.copy()
    M_prev = M_bar.copy()
    residuals = []
    theta = config.picard_damping
    for it in range(1, config.max_iters + 1):
        u, mats = st.backward(M_bar, dt, st.terminal(M_bar[-1]))
        M_hat = st.forward(M0_act, mats)
        residuals.append(st.gap(M_hat, M_prev))
        if residuals[-1] < config.picard_tol:
            return u, M_hat, mats, it, residuals
        M_prev = M_hat
        M_bar = (1 - theta) * M_bar + theta * M_hat
    raise ConvergenceError(f"Picard did not reach {config.picard_tol} in {config.max_iters} iterations",
                           residuals)


def solve_mfg(grid: DomainGrid, model, t0: float, m0, config: SolverConfig) -> MFGSolution:
    """Solve the MFG system through the cascade of Neumann problems.

    Each level ``eps`` of ``config.levels(grid)`` (coarsest first) is solved
    by damped Picard iteration on the measure flow, warm-started from the
    previous level. The finest level is returned; earlier levels are kept in
    ``cascade`` as ``(eps, u, M, picard_iters)``. A level list ``(0.0,)``
    solves directly on the whole grid.
    """
    M0 = _as_masses(grid, m0)
    if abs(M0.sum() - 1.0) > 1e-10 or M0.min() < -1e-15:
        raise ValueError("m0 must be a probability measure")
    levels = [grid.check_level(e) for e in config.levels(grid)]
    n_steps, dt = time_grid(t0, model.T, config.dt)
    cascade, prev = [], None
    for eps in levels:
        st = _Stepper(grid, model, eps, config)
        M0_act = M0[st.idx]
        M_init = None if prev is None else prev[:, st.idx]
        if n_steps == 0:
            M_hat = M0_act[None]
            u = st.terminal(M0_act)[None]
            mats, iters, res = [], 0, []
        else:
            u, M_hat, mats, iters, res = _picard(st, M0_act, n_steps, dt, config, M_init)
        u_full, M_full = st.embed(u, np.nan), st.embed(M_hat)
        cascade.append((eps, u_full, M_full, iters))
        prev = M_full
    eps_fin = levels[-1]
    return MFGSolution(grid, model, eps_fin, t0, dt, u_full, M_full, levels, iters, res,
                       cascade, mats)


@dataclass(eq=False)
class BatchSolution:
    """Many 1D MFG solutions on one level; arrays are (n_steps + 1, batch, n_nodes)."""

    grid: DomainGrid
    eps: float
    t0: float
    dt: float
    u: np.ndarray
    M: np.ndarray
    picard_iters: int


def solve_mfg_batch_1d(grid: DomainGrid, model, t0: float, M0, config: SolverConfig,
                       eps: float = 0.0) -> BatchSolution:
    """Solve the MFG system for a batch of initial masses ``M0`` (batch, n_nodes)
    on a single level of an interval grid.

    Same scheme as :func:`solve_mfg`, vectorised with batched tridiagonal
    solves; the Picard iteration stops when every member has converged.
    """
    if grid.dim != 1:
        raise ValueError("batched solver needs an interval grid")
    eps = grid.check_level(eps)
    st = _Stepper(grid, model, eps, config)
    idx, line = st.idx, st.line
    M0 = np.atleast_2d(_as_masses(grid, M0))
    n_steps, dt = time_grid(t0, model.T, config.dt)

    def terminal(M_last):
        if eps == 0.0:
            return model.G.nodal(grid, st.embed(M_last))[..., idx]
        return np.array([st.terminal(m) for m in M_last])

    M0_act = M0[:, idx]
    if n_steps == 0:
        return BatchSolution(grid, eps, t0, dt, st.embed(terminal(M0_act), np.nan)[None], st.embed(M0_act)[None], 0)

    def backward(M_bar, guess):
        u = np.empty_like(M_bar)
        u[-1] = terminal(M_bar[-1])
        Fk = st.F(M_bar)
        bands = [None] * n_steps
        for k in range(n_steps - 1, -1, -1):
            rhs = u[k + 1] + dt * Fk[k + 1]
            try:
                u[k], bands[k] = line.solve_hjb(rhs, dt, u[k + 1] if guess is None else guess[k],
                                                config.newton_tol, config.newton_max)
            except RuntimeError as exc:
                raise ConvergenceError(str(exc)) from exc
        return u, bands

    def forward(bands):
        M = np.empty((n_steps + 1,) + M0_act.shape)
        M[0] = M0_act
        for k, b in enumerate(bands):
            M[k + 1] = thomas(*tri_transpose(*b), M[k])
        return M

    M_bar = np.broadcast_to(M0_act, (n_steps + 1,) + M0_act.shape).copy()
    M_prev = M_bar.copy()
    theta = config.picard_damping
    history = []
    u = None
    for it in range(1, config.max_iters + 1):
        u, bands = backward(M_bar, u)
        M_hat = forward(bands)
        history.append(float(np.max(d1_interval(grid, st.embed(M_hat), st.embed(M_prev), eps))))
        if history[-1] < config.picard_tol:
            return BatchSolution(grid, eps, t0, dt, st.embed(u, np.nan), st.embed(M_hat), it)
        M_prev = M_hat
        M_bar = (1 - theta) * M_bar + theta * M_hat
    raise ConvergenceError(f"batched Picard did not reach {config.picard_tol}", history)


def cascade_differences(sol: MFGSolution) -> list:
    """``sup |u^eps - u^{eps'}|`` on ``Omega_eps`` over all times, for
    consecutive levels ``eps > eps'``."""
    out = []
    for (e1, u1, _, _), (_, u2, _, _) in zip(sol.cascade[:-1], sol.cascade[1:]):
        mask = sol.grid.mask(e1)
        out.append(float(np.max(np.abs(u1[:, mask] - u2[:, mask]))))
    return out


def lasry_lions_gap(sol1: MFGSolution, sol2: MFGSolution, model, details: bool = False):
    """``RHS - LHS`` of the monotonicity identity for two solutions.

    ``LHS`` sums the two convexity cross terms of the upwind Hamiltonian
    against the respective measures, ``RHS`` pairs ``u1 - u2`` at the initial
    time with ``m01 - m02``. The difference equals the coupling terms, which
    are nonnegative for monotone ``F`` and ``G``.
    """
    if sol1.grid is not sol2.grid or sol1.eps != sol2.eps or sol1.u.shape != sol2.u.shape:
        raise ValueError("solutions must share grid, level and time grid")
    ops = GridOperators.build(sol1.grid, model, sol1.eps)
    idx = ops.idx
    u1, u2 = sol1.u[:, idx], sol2.u[:, idx]
    M1, M2 = sol1.M[:, idx], sol2.M[:, idx]
    dt = sol1.dt
    lhs = 0.0
    cross = []
    for k in range(sol1.n_steps):
        H1, H2 = ops.hamiltonian_h(u1[k]), ops.hamiltonian_h(u2[k])
        e12 = H2 - H1 - ops.jacobian(u1[k]) @ (u2[k] - u1[k])
        e21 = H1 - H2 - ops.jacobian(u2[k]) @ (u1[k] - u2[k])
        c = dt * (e12 @ M1[k + 1]), dt * (e21 @ M2[k + 1])
        cross.append(c)
        lhs += c[0] + c[1]
    rhs = float((u1[0] - u2[0]) @ (M1[0] - M2[0]))
    gap = rhs - lhs
    if details:
        return {"gap": gap, "lhs": lhs, "rhs": rhs, "cross_terms": np.array(cross)}
    return gap


def holder_norm_on(grid: DomainGrid, field_full, order: float, eps: float) -> float:
    return holder_norm(grid, np.nan_to_num(field_full), order, eps)


def stability_constants(grid: DomainGrid, model, pairs, config: SolverConfig, t0: float = 0.0) -> dict:
    """Empirical constants of the two stability estimates over pairs of
    initial measures.

    ``ratio_m = sup_t d1(m1, m2) / d1(m01, m02)`` and
    ``ratio_u = sup_t |u1 - u2|_{2+alpha} / sup_t d1(m1, m2)``, with the grid
    surrogate of the ``2 + alpha`` norm. Pairs at distance zero are skipped.
    """
    order = 2.0 + model.alpha
    per_pair, degenerate = [], 0
    for m01, m02 in pairs:
        M01, M02 = _as_masses(grid, m01), _as_masses(grid, m02)
        d0 = wasserstein1_masses(grid, M01, M02)
        if d0 <= 1e-14:
            degenerate += 1
            continue
        s1 = solve_mfg(grid, model, t0, M01, config)
        s2 = solve_mfg(grid, model, t0, M02, config)
        if grid.dim == 1:
            dm = float(np.max(d1_interval(grid, s1.M, s2.M)))
        else:
            dm = max(wasserstein1_masses(grid, a, b) for a, b in zip(s1.M, s2.M))
        du = max(holder_norm_on(grid, a - b, order, s1.eps) for a, b in zip(s1.u, s2.u))
        per_pair.append({"d1_initial": d0, "sup_d1": dm, "sup_u": du,
                         "ratio_m": dm / d0, "ratio_u": du / dm if dm > 0 else np.inf})
    return {
        "ratio_m": max((p["ratio_m"] for p in per_pair), default=np.nan),
        "ratio_u": max((p["ratio_u"] for p in per_pair), default=np.nan),
        "per_pair": per_pair,
        "degenerate": degenerate,
    }


def lp_stability_ratio(grid: DomainGrid, model, m01, m02, config: SolverConfig, t0: float = 0.0) -> float:
    """``|m1 - m2|_{L^p(Q_T)} / d1(m01, m02)`` with ``p = (d+2)/(d+1+alpha)``."""
    M01, M02 = _as_masses(grid, m01), _as_masses(grid, m02)
    s1 = solve_mfg(grid, model, t0, M01, config)
    s2 = solve_mfg(grid, model, t0, M02, config)
    p = SolverConfig.p_exponent(grid.dim, model.alpha)
    dens = np.abs(s1.m - s2.m)
    lp = (np.sum(dens**p * grid.quad_weights) * s1.dt) ** (1 / p)
    return float(lp / wasserstein1_masses(grid, M01, M02))


# -- persistence -------------------------------------------------------------------

def save_solution(sol: MFGSolution, directory) -> Path:
    """Write ``meta.json``, ``u.csv`` and ``m.csv`` (columns t, coordinates, value)."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    coords = ["x", "y"][: sol.grid.dim]
    mask = sol.mask
    for name, arr in (("u.csv", sol.u), ("m.csv", sol.m)):
        with (d / name).open("w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["t"] + coords + ["value"])
            for t, row in zip(sol.times, arr):
                for x, v in zip(sol.grid.nodes[mask], row[mask]):
                    wr.writerow([repr(float(t))] + [repr(float(c)) for c in x] + [repr(float(v))])
    meta = {
        "grid": sol.grid.descriptor(),
        "model": sol.model.name,
        "model_hash": sol.model.fingerprint(),
        "eps": sol.eps,
        "eps_levels": list(sol.eps_used),
        "t0": sol.t0,
        "dt": sol.dt,
        "n_steps": sol.n_steps,
        "picard_iters": sol.picard_iters,
        "residuals": sol.residuals,
    }
    (d / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    return d


def load_solution(directory, model) -> MFGSolution:
    """Inverse of :func:`save_solution`; ``model`` must be built on a grid
    matching the stored descriptor."""
    d = Path(directory)
    meta = json.loads((d / "meta.json").read_text())
    grid = model.grid
    if grid.descriptor() != meta["grid"]:
        raise ValueError("stored grid does not match the model grid")
    mask = grid.mask(meta["eps"])
    n_t = meta["n_steps"] + 1

    def read(name, fill):
        vals = np.loadtxt(d / name, delimiter=",", skiprows=1)[:, -1].reshape(n_t, -1)
        out = np.full((n_t, grid.n_nodes), fill)
        out[:, mask] = vals
        return out

    u = read("u.csv", np.nan)
    M = read("m.csv", 0.0) * grid.quad_weights
    return MFGSolution(grid, model, meta["eps"], meta["t0"], meta["dt"], u, M, meta["eps_levels"],
                       meta["picard_iters"], meta["residuals"])
