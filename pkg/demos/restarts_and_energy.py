"""
Restarting the drivers and the energy inequality
================================================

The Wick norms of the driver grow with time, so the analysis restarts the
driver whenever one of them reaches a barrier eta, or after at most theta
units of time.  Along such a path the tangent flow J obeys an explicit
energy inequality, checked here interval by interval.
"""

import numpy as np

from phi4flow import NoiseStream, Phi4Model, StoppingConfig, TorusGrid, simulate
from phi4flow.estimators import choose_lambda, verify_energy_inequality
from phi4flow.stopping import calibrate_eta, simulate_restarts, tail_estimate

grid = TorusGrid(16, 1.0)
alpha, theta = 0.3, 0.5

# Barrier: exceeded by the sup over [0, 1] of the Wick norms with
# probability below 1/4, certified at one-sided 95% confidence.
cal = calibrate_eta(grid, 1.0, alpha, 400, dt=0.02)
print(f"eta = {cal.eta:.2f}  (p_hat {cal.p_hat:.3f}, upper bound {cal.ci_upper:.3f})")
stop = StoppingConfig(cal.eta, theta, alpha)

# Counting process N(t) against its exponential tail bound.  Forced
# restarts every theta already give N(2) >= 4, so the barrier shows up beyond that.
recs = simulate_restarts(grid, 1.0, 2.6, 0.02, stop, [NoiseStream(3, r) for r in range(300)])
for n in range(4, 9):
    te = tail_estimate(recs, 2.0, n, theta)
    print(f"P(N(2) >= {n}) = {te.p_hat:.3f}   bound {te.bound:.3f}")

# Energy inequality along four restarted paths.
lc = choose_lambda(alpha)
tr = simulate(grid, Phi4Model(1.0), np.zeros((16, 16)), 0.5, 1e-3,
              [NoiseStream(4, r) for r in range(4)], stopping=stop)
h = grid.fwd(np.random.default_rng(0).standard_normal((16, 16)))
ec = verify_energy_inequality(tr, h, lc.lam, alpha)
print(f"lambda = {lc.lam:.4f}, c(alpha) = {lc.c_alpha:.2f}")
print("interval margins:", np.round(ec.interval_margin, 4), " violations:", ec.violations)
