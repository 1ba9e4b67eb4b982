"""
The master field and its measure derivative
===========================================

``U(t0, x, m0)`` is the initial value of the MFG solution started from
``m0``. Its derivative in the measure comes from one linearised solve per
grid node, which gives a kernel ``K(x, y)``.
"""

import numpy as np

from viablemfg.geometry import build_interval_domain
from viablemfg.master import (compute_K, master_equation_residual, second_order_expansion_check,
                              solve_linearized)
from viablemfg.mfg import SolverConfig, solve_mfg
from viablemfg.model import default_initial_density, viable_model

grid = build_interval_domain(1.0, 64)
model = viable_model(grid)
m0 = default_initial_density(grid) * grid.quad_weights
cfg = SolverConfig(dt=1 / 32)

base = solve_mfg(grid, model, 0.0, m0, cfg)
K = compute_K(grid, model, base)

# Pairing the kernel with a signed direction reproduces a direct linearised
# solve in that direction.
rng = np.random.default_rng(0)
g = rng.standard_normal(grid.n_nodes)
mu = np.where(base.mask, m0 * (g - g @ m0), 0.0)
direct = solve_linearized(grid, model, base, mu).v[0]
print("kernel vs direct solve:", np.nanmax(np.abs(K.pair(mu) - direct)))

# The first-order expansion leaves a defect that shrinks like s^2.
out = second_order_expansion_check(grid, model, 0.0, m0, mu, [0.04, 0.02, 0.01], cfg)
print("expansion defects:", ["%.2e" % d for d in out["defects"]], "slope %.3f" % out["slope"])

# The discrete U solves the master equation up to a truncation error that
# halves with h and dt.
for n in (64, 128):
    g_n = build_interval_domain(1.0, n)
    rep = master_equation_residual(g_n, viable_model(g_n), 0.3,
                                   default_initial_density(g_n) * g_n.quad_weights, SolverConfig(dt=2 / n))
    print(f"n = {n}: residual at x = 0.5 is {rep.at(g_n, [[0.5]], g_n.eps_levels[-1])[0]:.4f}")
