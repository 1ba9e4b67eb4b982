"""Linearised MFG system, the measure derivative ``K = dU/dm`` and
master-equation diagnostics.

The linearised system is the exact derivative of the discrete MFG scheme in
:mod:`viablemfg.mfg`. With ``A_k = I - dt (L - J(u^k))`` and
``B_k = B(u^k, M^{k+1})`` from :meth:`GridOperators.second_variation`::

    A_k v^k - v^{k+1} - dt dF(mu^{k+1})           = dt h^k
    v^N - dG(mu^N) + N_eps(a grad dG(mu^N) . nu)   = v_T - N_eps(a grad v_T . nu)
    A_k^T mu^{k+1} + dt B_k v^k + dt Dp^T c^{k+1}  = mu^k

Feature couplings make ``dF`` and ``dG`` low rank, so the feature
coordinates ``z = E^T mu`` are carried as extra unknowns and the whole
space-time system stays sparse. It is solved with one sparse LU, which
also serves every right-hand side of :func:`compute_K`.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import splu

from .geometry import DomainGrid, neumann_extension
from .measures import splat, wasserstein1_masses
from .mfg import MFGSolution, SolverConfig, solve_mfg
from .ops import GridOperators


def _feature_parts(grid, coupling, idx):
    """``(E, gamma)`` with ``dF(mu) = gamma E (E^T mu)`` on active nodes, or ``None``."""
    if not coupling.depends_on_measure:
        return None
    return coupling.node_features(grid)[idx], coupling.gamma


def _terminal_correction(grid, model, eps, idx):
    """Columns ``N_eps(a grad e_r . nu)`` for every feature of ``G``."""
    parts = _feature_parts(grid, model.G, idx)
    if parts is None or eps == 0.0:
        return None
    feats = model.G.features
    cols = []
    for r in range(feats.size):
        def conormal(points, r=r):
            nu = grid.outward_normal(points)
            g = np.zeros_like(points)
            for k in range(grid.dim):
                e = np.zeros(grid.dim)
                e[k] = 1e-6
                g[:, k] = (feats(points + e)[:, r] - feats(points - e)[:, r]) / 2e-6
            return model.a(points) * np.sum(g * nu, axis=1)
        cols.append(neumann_extension(grid, eps, conormal, a=model.a)[idx])
    C = np.array(cols).T
    return None if not np.any(C) else C


@dataclass(eq=False)
class LinearizedSystem:
    """Factorised space-time system around one MFG solution."""

    base: MFGSolution
    ops: GridOperators
    lu: object
    n_steps: int
    n: int
    rF: int
    rG: int

    @property
    def size(self) -> int:
        return (2 * self.n_steps + 1) * self.n + self.n_steps * self.rF + self.rG

    def rhs(self, mu0, h_src=None, c_src=None, v_T=None):
        """Right-hand side(s); arrays may carry a trailing column axis."""
        n, N = self.n, self.n_steps
        ops, base = self.ops, self.base
        dt = base.dt
        mu0 = np.asarray(mu0, dtype=float)
        cols = mu0.shape[1:] if mu0.ndim == 2 else ()
        b = np.zeros((self.size,) + cols)
        if h_src is not None:
            h = np.asarray(h_src, dtype=float)
            for k in range(N):
                b[k * n:(k + 1) * n] = dt * h[k]
        if v_T is not None:
            vT = np.asarray(v_T, dtype=float)
            corr = 0.0
            if base.eps != 0.0:
                vT_full = np.zeros(base.grid.n_nodes)
                vT_full[ops.idx] = vT
                g = base.grid.gradient(vT_full, base.eps)
                bnodes = base.grid.boundary_nodes(base.eps)
                f = ops.a[np.searchsorted(ops.idx, bnodes)] * np.sum(g[bnodes] * base.grid.normal[bnodes], axis=1)
                corr = neumann_extension(base.grid, base.eps, f, a=base.model.a)[ops.idx]
            b[N * n:(N + 1) * n] = vT - corr
        off = (N + 1) * n
        b[off:off + n] = mu0
        if c_src is not None:
            c = np.asarray(c_src, dtype=float)
            for k in range(N):
                flux = sum(ops.Dp[j].T @ c[k + 1][..., j] for j in range(base.grid.dim))
                b[off + k * n:off + (k + 1) * n] -= dt * flux
        return b

    def solve(self, mu0, h_src=None, c_src=None, v_T=None):
        x = self.lu.solve(self.rhs(mu0, h_src, c_src, v_T))
        n, N = self.n, self.n_steps
        v = x[:(N + 1) * n].reshape((N + 1, n) + x.shape[1:])
        mu_rest = x[(N + 1) * n:(2 * N + 1) * n].reshape((N, n) + x.shape[1:])
        mu = np.concatenate([np.asarray(mu0, dtype=float)[None], mu_rest], axis=0)
        return v, mu


def build_linearized_system(base: MFGSolution) -> LinearizedSystem:
    """Assemble and factor the linearised system around ``base``."""
    grid, model, eps = base.grid, base.model, base.eps
    ops = GridOperators.build(grid, model, eps)
    idx, n, N, dt = ops.idx, ops.n, base.n_steps, base.dt
    u = base.u[:, idx]
    M = base.M[:, idx]
    Fp = _feature_parts(grid, model.F, idx)
    Gp = _feature_parts(grid, model.G, idx)
    rF = 0 if Fp is None else Fp[0].shape[1]
    rG = 0 if Gp is None else Gp[0].shape[1]
    corr = _terminal_correction(grid, model, eps, idx)
    I = sparse.identity(n, format="csr")
    v_off = lambda k: k * n  # noqa: E731
    mu_off = lambda k: (N + 1) * n + (k - 1) * n  # noqa: E731, mu^k for k >= 1
    zF_off = lambda k: (2 * N + 1) * n + (k - 1) * rF  # noqa: E731
    zG_off = (2 * N + 1) * n + N * rF
    size = zG_off + rG
    blocks = []

    def put(r0, c0, mat):
        mat = sparse.coo_matrix(mat)
        blocks.append((mat.row + r0, mat.col + c0, mat.data))

    for k in range(N):
        A = ops.step_matrix(u[k], dt)
        put(v_off(k), v_off(k), A)
        put(v_off(k), v_off(k + 1), -I)
        if Fp is not None:
            E, gam = Fp
            put(v_off(k), zF_off(k + 1), -dt * gam * E)
        put(mu_off(k + 1), mu_off(k + 1), A.T)
        put(mu_off(k + 1), v_off(k), dt * ops.second_variation(u[k], M[k + 1]))
        if k > 0:
            put(mu_off(k + 1), mu_off(k), -I)
    put(v_off(N), v_off(N), I)
    if Gp is not None:
        E, gam = Gp
        term = gam * E if corr is None else gam * (E - corr)
        put(v_off(N), zG_off, -term)
        put(zG_off, zG_off, np.eye(rG))
        put(zG_off, mu_off(N), -E.T)
    if Fp is not None:
        E, _ = Fp
        for k in range(1, N + 1):
            put(zF_off(k), zF_off(k), np.eye(rF))
            put(zF_off(k), mu_off(k), -E.T)
    rows = np.concatenate([b[0] for b in blocks])
    cols = np.concatenate([b[1] for b in blocks])
    data = np.concatenate([b[2] for b in blocks])
    S = sparse.csc_matrix((data, (rows, cols)), shape=(size, size))
    return LinearizedSystem(base, ops, splu(S, permc_spec="COLAMD"), N, n, rF, rG)


@dataclass(eq=False)
class LinearizedSolution:
    v: np.ndarray
    mu: np.ndarray
    base: MFGSolution
    inputs: dict = field(default_factory=dict)


def _embed(grid, idx, arr, fill):
    out = np.full(arr.shape[:-1] + (grid.n_nodes,), fill)
    out[..., idx] = arr
    return out


def solve_linearized(grid: DomainGrid, model, base: MFGSolution, mu0, h_src=None, c_src=None, v_T=None,
                     config: SolverConfig | None = None, system: LinearizedSystem | None = None
                     ) -> LinearizedSolution:
    """Solve the linearised system around ``base``.

    ``mu0`` are signed node masses (n_nodes,), ``h_src`` has shape
    (n_steps, n_nodes), ``c_src`` node-mass fluxes (n_steps + 1, n_nodes, dim)
    and ``v_T`` (n_nodes,). Everything is restricted to the level of ``base``.
    Returns ``v`` with NaN outside ``Omega_eps`` and ``mu`` as node masses.
    """
    if base.grid is not grid or base.model is not model:
        raise ValueError("base must be solved on the same grid and model")
    sys_ = system or build_linearized_system(base)
    idx = sys_.ops.idx
    take = lambda a: None if a is None else np.asarray(a, dtype=float)[..., idx]  # noqa: E731
    c_act = None if c_src is None else np.asarray(c_src, dtype=float)[:, idx, :]
    v, mu = sys_.solve(np.asarray(mu0, dtype=float)[idx], take(h_src), c_act, take(v_T))
    return LinearizedSolution(_embed(grid, idx, v, np.nan), _embed(grid, idx, mu, 0.0), base,
                              {"mu0": mu0, "h": h_src, "c": c_src, "v_T": v_T})


@dataclass(eq=False)
class MeasureDerivative:
    """``K[x, y] = dU/dm(t0, x, m0, y)`` on active nodes and its ``y`` gradient."""

    K: np.ndarray
    DmK: np.ndarray
    y_nodes: np.ndarray
    t0: float
    base: MFGSolution

    def pair(self, mu0) -> np.ndarray:
        """``<mu0, K(t0, x, m0, .)>`` for node masses ``mu0``."""
        return self.K @ np.asarray(mu0, dtype=float)[self.y_nodes]


def compute_K(grid: DomainGrid, model, base: MFGSolution, t0: float | None = None, y_nodes=None,
              system: LinearizedSystem | None = None) -> MeasureDerivative:
    """Measure derivative at the initial time of ``base`` by linearised solves
    with ``mu0`` a unit mass at each node ``y``.

    ``K`` has shape (n_nodes, len(y_nodes)) with NaN rows outside
    ``Omega_eps``; ``DmK`` holds centred ``y`` differences on ``Omega_eps``.
    """
    t0 = base.t0 if t0 is None else t0
    if not np.isclose(t0, base.t0):
        raise ValueError("base must start at t0")
    sys_ = system or build_linearized_system(base)
    idx = sys_.ops.idx
    Kact, _ = sys_.solve(np.eye(len(idx)))
    K0 = Kact[0]  # rows: x on active nodes, cols: y on active nodes
    Kfull = np.zeros((grid.n_nodes, grid.n_nodes))
    Kfull[np.ix_(idx, idx)] = K0
    D = np.stack([grid.gradient(row, base.eps)[:, k] for row in Kfull for k in range(grid.dim)]
                 ).reshape(grid.n_nodes, grid.dim, grid.n_nodes).transpose(0, 2, 1)
    y = idx if y_nodes is None else np.asarray(y_nodes)
    if not np.all(grid.mask(base.eps)[y]):
        raise ValueError("y_nodes must lie in Omega_eps")
    K = np.full((grid.n_nodes, len(y)), np.nan)
    K[idx] = Kfull[np.ix_(idx, y)]
    DmK = np.full((grid.n_nodes, len(y), grid.dim), np.nan)
    DmK[idx] = D[idx][:, y]
    return MeasureDerivative(K, DmK, y, t0, base)


def save_kernel(mder: MeasureDerivative, directory) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    grid = mder.base.grid
    with (d / "K.csv").open("w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["x", "y", "value"] if grid.dim == 1 else ["x1", "x2", "y1", "y2", "value"])
        for i in np.flatnonzero(grid.mask(mder.base.eps)):
            for jj, j in enumerate(mder.y_nodes):
                wr.writerow([repr(float(c)) for c in grid.nodes[i]] + [repr(float(c)) for c in grid.nodes[j]]
                            + [repr(float(mder.K[i, jj]))])
    meta = {"t0": mder.t0, "eps": mder.base.eps, "grid": grid.descriptor(),
            "model_hash": mder.base.model.fingerprint(), "n_y": int(len(mder.y_nodes))}
    (d / "K.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    return d


def interpolate(grid: DomainGrid, values, points, eps: float = 0.0) -> np.ndarray:
    """Linear interpolation of nodal values (the transpose of the splat)."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    if pts.shape[1] != grid.dim:
        pts = pts.reshape(-1, grid.dim)
    mask = grid.mask(eps)
    vals = np.where(mask, np.nan_to_num(np.asarray(values, dtype=float)), 0.0)
    out = np.empty(len(pts))
    for i, p in enumerate(pts):
        w = splat(grid, p[None], [1.0]) * mask
        out[i] = w @ vals / w.sum()
    return out


def evaluate_U(grid: DomainGrid, model, t0: float, x, m0, config: SolverConfig) -> np.ndarray:
    """``U(t0, x, m0)``: value at ``t0`` of the MFG solution started from ``m0``."""
    sol = solve_mfg(grid, model, t0, m0, config)
    return interpolate(grid, sol.u[0], x, sol.eps)


def _masses(grid, m):
    return m.masses if hasattr(m, "masses") else np.asarray(m, dtype=float)


def second_order_expansion_check(grid: DomainGrid, model, t0: float, m0, direction, s_values,
                                 config: SolverConfig, norm: str = "sup", floor: float = 1e-11) -> dict:
    """Defect ``|U(m0 + s mu) - U(m0) - s <mu, K>|`` for each ``s`` and the
    fitted log-log slope (2 for a twice differentiable ``U``)."""
    M0, mu = _masses(grid, m0), _masses(grid, direction)
    base = solve_mfg(grid, model, t0, M0, config)
    lin = solve_linearized(grid, model, base, mu)
    mask = base.mask
    defects = []
    for s in s_values:
        if s == 0:
            defects.append(0.0)
            continue
        sol = solve_mfg(grid, model, t0, M0 + s * mu, config)
        diff = (sol.u[0] - base.u[0] - s * lin.v[0])[mask]
        defects.append(float(np.abs(diff).max() if norm == "sup" else np.sqrt(diff @ diff * grid.h**grid.dim)))
    s_arr, d_arr = np.asarray(s_values, float), np.asarray(defects)
    pos = (s_arr > 0) & (d_arr > 0)
    slope = float(np.polyfit(np.log(s_arr[pos]), np.log(d_arr[pos]), 1)[0]) if pos.sum() >= 2 else np.nan
    return {"s": list(map(float, s_values)), "defects": defects, "slope": slope,
            "floor_limited": bool(np.any(d_arr[pos] < floor)) or pos.sum() < 2}


@dataclass
class ResidualReport:
    residual: np.ndarray
    terms: dict
    t0: float
    dt: float
    h: float

    def at(self, grid, points, eps):
        return interpolate(grid, self.residual, points, eps)


def master_equation_residual(grid: DomainGrid, model, t0: float, m0, config: SolverConfig,
                             x_nodes=None) -> ResidualReport:
    """Residual of the master equation for the discrete ``U`` at ``(t0, ., m0)``.

    Time derivative by the symmetric quotient over ``t0 +- 2 dt``, space
    derivatives by centred differences, the measure terms by quadrature of
    ``K`` against ``m0``. Returns the residual on all nodes (NaN outside the
    level and on its outer layer), restricted to ``x_nodes`` when given.
    """
    M0 = _masses(grid, m0)
    base = solve_mfg(grid, model, t0, M0, config)
    dt, eps = base.dt, base.eps
    probe = replace(config, dt=dt)
    up = solve_mfg(grid, model, t0 + 2 * dt, M0, probe).u[0]
    dn = solve_mfg(grid, model, t0 - 2 * dt, M0, probe).u[0]
    dtU = (up - dn) / (4 * dt)
    U = np.nan_to_num(base.u[0])
    x = grid.nodes
    gradU = grid.gradient(U, eps)
    lapU = grid.second_derivatives(U, eps).sum(axis=1)
    mder = compute_K(grid, model, base)
    idx = mder.y_nodes
    a = model.a(x)
    Kfull = np.zeros((grid.n_nodes, grid.n_nodes))
    Kfull[:, idx] = np.nan_to_num(mder.K)
    lapK = np.array([grid.second_derivatives(row, eps).sum(axis=1) for row in Kfull])
    w = M0[idx]
    diff_term = (lapK[:, idx] * a[idx]) @ w
    hp = model.Hp(x[idx], gradU[idx])
    drift_term = np.einsum("xyd,yd,y->x", np.nan_to_num(mder.DmK), hp, w)
    Fm = model.F.nodal(grid, M0)
    res = -dtU - a * lapU + model.H(x, gradU) - diff_term + drift_term - Fm
    interior = grid.mask(eps).copy()
    for k in range(grid.dim):
        for side in (1, -1):
            interior &= grid.neighbours(k, side, eps) >= 0
    res = np.where(interior, res, np.nan)
    if x_nodes is not None:
        res = np.where(np.isin(np.arange(grid.n_nodes), x_nodes), res, np.nan)
    terms = {"dtU": dtU, "diffusion": a * lapU, "H": model.H(x, gradU), "measure_diffusion": diff_term,
             "measure_drift": drift_term, "F": Fm}
    return ResidualReport(res, terms, t0, dt, grid.h)


def lipschitz_in_measure_of_K(grid: DomainGrid, model, t0: float, pairs, config: SolverConfig) -> dict:
    """``max |K(m1) - K(m2)| / d1(m1, m2)`` over pairs, using the sup of the
    kernel and of its ``y`` gradient on ``Omega_eps``."""
    ratios, skipped = [], 0
    for m1, m2 in pairs:
        M1, M2 = _masses(grid, m1), _masses(grid, m2)
        d = wasserstein1_masses(grid, M1, M2)
        if d <= 1e-14:
            skipped += 1
            continue
        k1 = compute_K(grid, model, solve_mfg(grid, model, t0, M1, config))
        k2 = compute_K(grid, model, solve_mfg(grid, model, t0, M2, config))
        diff = np.nanmax(np.abs(k1.K - k2.K)) + np.nanmax(np.abs(k1.DmK - k2.DmK))
        ratios.append(float(diff / d))
    return {"ratio": max(ratios, default=0.0), "ratios": ratios, "skipped": skipped}


def flow_consistency_check(base: MFGSolution, config: SolverConfig, steps=None) -> dict:
    """Restarting the MFG solve at ``(t_k, m(t_k))`` must reproduce ``u(t_k)``:
    the measure flow driven by ``D_x U(t, ., m(t))`` is the original one."""
    grid, model = base.grid, base.model
    steps = range(1, base.n_steps, max(1, base.n_steps // 4)) if steps is None else steps
    probe = replace(config, dt=base.dt, eps_levels=(base.eps,))
    gaps = {}
    for k in steps:
        sol = solve_mfg(grid, model, base.times[k], base.M[k] / base.M[k].sum(), probe)
        scale = base.M[k].sum()
        gaps[int(k)] = {
            "u": float(np.nanmax(np.abs(sol.u[0] - base.u[k]))) if np.isclose(scale, 1.0) else np.nan,
            "m": float(np.max(np.abs(sol.M * scale - base.M[k:]))) if np.isclose(scale, 1.0) else np.nan,
        }
    return gaps


def linearized_estimate(lin: LinearizedSolution, model, order: float | None = None) -> dict:
    """Norms entering the a priori bound of the linearised system; the
    empirical constant is ``lhs / data``."""
    from .measures import signed_dual_norm_masses

    grid, base = lin.base.grid, lin.base
    order = 1.0 + model.alpha if order is None else order
    p = SolverConfig.p_exponent(grid.dim, model.alpha)
    v_sup = float(np.nanmax(np.abs(lin.v)))
    dens = np.abs(lin.mu) / grid.quad_weights
    mu_lp = float((np.sum(dens**p * grid.quad_weights) * base.dt) ** (1 / p))
    mu_dual = float(np.max(signed_dual_norm_masses(grid, lin.mu, order)))
    inp = lin.inputs
    data = float(signed_dual_norm_masses(grid, np.asarray(inp["mu0"], float)[None], order)[0])
    for key in ("h", "c", "v_T"):
        if inp.get(key) is not None:
            data += float(np.max(np.abs(inp[key])))
    lhs = v_sup + mu_lp + mu_dual
    return {"lhs": lhs, "data": data, "constant": lhs / data if data > 0 else np.nan}
