"""Euler-Maruyama simulation of controlled particles with a viability
safeguard, and the Nash versus master-feedback trajectory gap.

Positions have shape (paths, players, dim). Noise comes from counter-based
Philox streams keyed by ``(seed, player)`` with the step index in the
counter, and uniforms are mapped to normals by the inverse CDF, so the first
``n`` paths do not change when more paths are requested.

Safeguard: when a proposed step leaves the domain it is replayed as ``2^k``
substeps carrying equal shares of the same Brownian increment, with
coefficients re-evaluated at every substep (``k = 1..6``). If every replay
exits, the proposal is projected onto the level set ``{d = h/2}`` and the
event is counted.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.interpolate import RegularGridInterpolator
from scipy.special import ndtri

from .geometry import ConfigurationError, DomainGrid

NOISE, INITIAL, JITTER = 0, 1, 2
MAX_HALVINGS = 6


def uniforms(seed: int, player: int, step: int, purpose: int, size) -> np.ndarray:
    """Open-interval uniforms from the stream ``(seed, player)`` at ``(step, purpose)``."""
    bg = np.random.Philox(key=[int(seed) & (2**64 - 1), int(player)], counter=[0, 0, int(step), int(purpose)])
    u = np.random.Generator(bg).random(size)
    return np.where(u > 0.0, u, np.nextafter(0.0, 1.0))


def normals(seed: int, player: int, step: int, size) -> np.ndarray:
    return ndtri(uniforms(seed, player, step, NOISE, size))


def brownian_increments(seed: int, step: int, n_paths: int, n_players: int, dim: int, dt: float) -> np.ndarray:
    out = np.empty((n_paths, n_players, dim))
    for i in range(n_players):
        out[:, i, :] = normals(seed, i, step, n_paths * dim).reshape(dim, n_paths).T
    return math.sqrt(dt) * out


def sample_initial(grid: DomainGrid, m0_masses, n_paths: int, n_players: int, seed: int) -> np.ndarray:
    """i.i.d. draws from the piecewise-constant density of ``m0`` on the cells."""
    M = np.asarray(m0_masses, float)
    cdf = np.cumsum(M) / M.sum()
    out = np.empty((n_paths, n_players, grid.dim))
    for i in range(n_players):
        u = uniforms(seed, i, 0, INITIAL, n_paths)
        node = np.minimum(np.searchsorted(cdf, u, side="right"), len(cdf) - 1)
        jit = uniforms(seed, i, 0, JITTER, n_paths * grid.dim).reshape(grid.dim, n_paths).T - 0.5
        out[:, i, :] = grid.nodes[node] + grid.h * jit
    bad = grid.raw_distance(out.reshape(-1, grid.dim)) <= 0
    if np.any(bad):
        raise ConfigurationError("initial law charges cells that leave the domain")
    return out


@dataclass
class SafeguardStats:
    steps: int = 0
    exit_attempts: int = 0
    clamped: int = 0
    min_dist: float = np.inf

    def merge_min(self, d):
        self.min_dist = min(self.min_dist, float(np.min(d)))


class Stepper:
    """One Euler-Maruyama step with the viability safeguard.

    ``drift(k, x)`` returns the drift for positions ``x`` (paths, players, dim)
    on solver slice ``k``; ``sigma(points)`` the scalar diffusion amplitude.
    """

    def __init__(self, grid: DomainGrid, drift, sigma):
        self.grid, self.drift, self.sigma = grid, drift, sigma
        self.stats = SafeguardStats()

    def _dist(self, x):
        return self.grid.raw_distance(x.reshape(-1, self.grid.dim)).reshape(x.shape[:-1])

    def _increment(self, k, x, dt, dW):
        s = self.sigma(x.reshape(-1, self.grid.dim)).reshape(x.shape[:-1])[..., None]
        return self.drift(k, x) * dt + math.sqrt(2.0) * s * dW

    def step(self, k, x, dt, dW):
        prop = x + self._increment(k, x, dt, dW)
        out = self._dist(prop) <= 0
        self.stats.steps += out.size
        if np.any(out):
            rows = np.flatnonzero(out.any(axis=1))
            self.stats.exit_attempts += int(out.sum())
            prop[rows] = self._replay(k, x[rows], dt, dW[rows], out[rows])
        self.stats.merge_min(self._dist(prop))
        return prop

    def _replay(self, k, x, dt, dW, out):
        """Substep replay for the coordinates in ``out``; others keep their proposal."""
        final = x + self._increment(k, x, dt, dW)
        pending = out.copy()
        for level in range(1, MAX_HALVINGS + 1):
            if not pending.any():
                break
            n_sub = 2**level
            y = x.copy()
            ok = np.ones(pending.shape, dtype=bool)
            for _ in range(n_sub):
                y = y + self._increment(k, y, dt / n_sub, dW / n_sub)
                ok &= self._dist(y) > 0
                y = np.where(ok[..., None], y, x)
            done = pending & ok
            final[done] = y[done]
            pending &= ~ok
        if pending.any():
            self.stats.clamped += int(pending.sum())
            pts = final[pending]
            final[pending] = self.grid.project_to_level(pts, 0.5 * self.grid.h)
        return final


@dataclass(eq=False)
class ParticleEnsemble:
    N: int
    dt_sde: float
    seed: int
    times: np.ndarray
    summary: dict
    stats: SafeguardStats
    paths: np.ndarray | None = None
    extra: dict = field(default_factory=dict)

    @property
    def exit_attempts(self) -> int:
        return self.stats.exit_attempts


def _n_sde_steps(t0, T, dt_sde):
    n = int(round((T - t0) / dt_sde))
    if n < 1 or not np.isclose(n * dt_sde, T - t0, rtol=1e-9):
        raise ConfigurationError("dt_sde must divide the horizon")
    return n


def _solver_slice(t, t0, dt_solver, n_slices):
    k = int(np.floor((t - t0) / dt_solver + 1e-9))
    if k < 0 or k >= n_slices:
        raise ConfigurationError("feedback requested outside its time range")
    return k


def simulate(grid: DomainGrid, model, drift, X0, t0: float, dt_solver: float, n_slices: int, dt_sde: float,
             seed: int, keep_paths: bool = False) -> ParticleEnsemble:
    """Simulate one controlled system from ``X0`` (paths, players, dim)."""
    n_steps = _n_sde_steps(t0, model.T, dt_sde)
    stepper = Stepper(grid, drift, model.sigma)
    x = np.array(X0, dtype=float)
    P, N, dim = x.shape
    times = t0 + dt_sde * np.arange(n_steps + 1)
    means = np.empty((n_steps + 1, N))
    varis = np.empty((n_steps + 1, N))
    mind = np.empty((n_steps + 1, N))
    paths = np.empty((n_steps + 1,) + x.shape) if keep_paths else None

    def record(s):
        means[s] = x[..., 0].mean(axis=0)
        varis[s] = x[..., 0].var(axis=0)
        mind[s] = stepper._dist(x).min(axis=0)
        if keep_paths:
            paths[s] = x

    record(0)
    for s in range(n_steps):
        k = _solver_slice(times[s], t0, dt_solver, n_slices)
        x = stepper.step(k, x, dt_sde, brownian_increments(seed, s + 1, P, N, dim, dt_sde))
        record(s + 1)
    return ParticleEnsemble(N, dt_sde, seed, times, {"mean": means, "var": varis, "min_dist": mind},
                            stepper.stats, paths)


def save_path_summary(path, times, summary) -> Path:
    """CSV with columns ``t, player, mean, var, min_dist`` (first coordinate)."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["t", "player", "mean", "var", "min_dist"])
        for s, t in enumerate(times):
            for i in range(summary["mean"].shape[1]):
                wr.writerow([repr(float(t)), i] + [repr(float(summary[k][s, i])) for k in ("mean", "var", "min_dist")])
    return path


def viability_report(ensemble: ParticleEnsemble, grid: DomainGrid = None) -> dict:
    """Minimum distance visited and safeguard counts of an ensemble."""
    return viability_report_stats(ensemble.stats)


def viability_report_stats(st: SafeguardStats) -> dict:
    return {
        "min_dist": float(st.min_dist),
        "exit_attempts": int(st.exit_attempts),
        "clamped": int(st.clamped),
        "steps": int(st.steps),
        "exit_fraction": st.exit_attempts / max(st.steps, 1),
        "fraction_clamped": st.clamped / max(st.steps, 1),
    }


# -- feedback fields --------------------------------------------------------

def _hp_at(model, pts, p):
    """``H_p(x, p)`` at actual positions; ``pts`` and ``p`` share a shape."""
    kap = np.asarray(model.hamiltonian.kappa(pts.reshape(-1, 1)), float).reshape(pts.shape)
    return kap * model.hamiltonian.hp(p)


def mfg_feedback(grid: DomainGrid, model, u_slices):
    """Drift ``-H_p(x, D u(t_k, x))`` of a single-agent value on an interval.

    The gradient is interpolated and ``H_p`` is evaluated at the position
    itself, so the drift inherits the boundary behaviour of the Hamiltonian.
    """
    if grid.dim != 1:
        raise ConfigurationError("tabulated feedback is implemented on intervals")
    x = grid.nodes[:, 0]
    grads = [np.gradient(np.nan_to_num(u), grid.h) for u in np.asarray(u_slices)]

    def drift(k, X):
        pts = X[..., 0]
        p = np.interp(np.clip(pts, x[0], x[-1]), x, grads[k])
        return -_hp_at(model, pts, p)[..., None]

    return drift


def tensor_feedback(grid: DomainGrid, model, slices):
    """Drift of every player from tensors ``V_k`` of player 0 (axis 0 = own)."""
    x = grid.nodes[:, 0]
    interps = [RegularGridInterpolator((x,) * V.ndim, np.gradient(V, grid.h, axis=0), method="linear",
                                       bounds_error=False, fill_value=None) for V in slices]

    def drift(k, X):
        pts = X[..., 0]
        pos = np.clip(pts, x[0], x[-1])
        P, N = pos.shape
        p = np.empty((P, N))
        for i in range(N):
            order = [i] + [j for j in range(N) if j != i]
            p[:, i] = interps[k](pos[:, order])
        return -_hp_at(model, pts, p)[..., None]

    return drift


def simulate_pair(grid: DomainGrid, model, nash, proj, m0, n_paths: int, dt_sde: float, seed: int) -> dict:
    """Shared-noise Nash (``Y``) and master-feedback (``X``) systems.

    ``proj`` must hold every slice ``0..n_steps-1`` of the Nash time grid.
    Returns ``sup_t E|X - Y|^2`` averaged over players, its standard error
    at the maximising time, per-player curves and the per-player path
    summary of the Nash system.
    """
    n_slices = nash.values.shape[0] - 1
    missing = [k for k in range(n_slices) if k not in proj.values]
    if missing:
        raise ConfigurationError(f"projection lacks slices {missing[:5]}")
    if not np.isclose(proj.dt, nash.dt):
        raise ConfigurationError("Nash and projection time grids differ")
    N = nash.N
    Z = sample_initial(grid, m0, n_paths, N, seed)
    n_steps = _n_sde_steps(nash.t0, model.T, dt_sde)
    drift_Y = tensor_feedback(grid, model, [nash.values[k] for k in range(n_slices)])
    drift_X = tensor_feedback(grid, model, [proj.values[k] for k in range(n_slices)])
    sY, sX = Stepper(grid, drift_Y, model.sigma), Stepper(grid, drift_X, model.sigma)
    X, Y = Z.copy(), Z.copy()
    msq = np.zeros((n_steps + 1, N))
    se = np.zeros(n_steps + 1)
    summary = {key: np.empty((n_steps + 1, N)) for key in ("mean", "var", "min_dist")}

    def record(s):
        summary["mean"][s] = Y[..., 0].mean(axis=0)
        summary["var"][s] = Y[..., 0].var(axis=0)
        summary["min_dist"][s] = sY._dist(Y).min(axis=0)

    record(0)
    identical = True
    for s in range(n_steps):
        t = nash.t0 + s * dt_sde
        k = _solver_slice(t, nash.t0, nash.dt, n_slices)
        dW = brownian_increments(seed, s + 1, n_paths, N, grid.dim, dt_sde)
        Y = sY.step(k, Y, dt_sde, dW)
        X = sX.step(k, X, dt_sde, dW)
        d2 = np.sum((X - Y) ** 2, axis=-1)
        identical &= bool(np.all(d2 == 0.0))
        msq[s + 1] = d2.mean(axis=0)
        avg = d2.mean(axis=1)
        se[s + 1] = avg.std(ddof=1) / math.sqrt(n_paths)
        record(s + 1)
    avg_curve = msq.mean(axis=1)
    s_max = int(np.argmax(avg_curve))
    return {
        "N": N,
        "sup_gap": float(avg_curve[s_max]),
        "sup_gap_se": float(se[s_max]),
        "t_max": float(nash.t0 + s_max * dt_sde),
        "curve": avg_curve,
        "per_player": msq,
        "times": nash.t0 + dt_sde * np.arange(n_steps + 1),
        "summary_Y": summary,
        "identical_paths": identical,
        "viability_X": viability_report_stats(sX.stats),
        "viability_Y": viability_report_stats(sY.stats),
    }


def viability_run(grid: DomainGrid, model, u_slices, dt_solver: float, m0, n_paths: int, dt_sde: float,
                  seed: int, t0: float = 0.0) -> dict:
    """Single-agent paths under the MFG feedback of ``u_slices``; safeguard report."""
    drift = mfg_feedback(grid, model, u_slices)
    X0 = sample_initial(grid, m0, n_paths, 1, seed)
    ens = simulate(grid, model, drift, X0, t0, dt_solver, len(u_slices), dt_sde, seed)
    return viability_report(ens, grid)
