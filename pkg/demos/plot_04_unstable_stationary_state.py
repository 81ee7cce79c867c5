"""
An unstable stationary state
============================

Minimizing a cut-off functional gives a pressure from which an exactly
stationary conductance can be built on a chosen set, here the region above a
hyperbola.  A perturbation of size 1/1000 moves the solution away from it for
good.
"""

import numpy as np

from netmorph import dynamics, fem, mesh as meshlib, stationary

mesh = meshlib.diamond_with_triangles(1000)
res = stationary.f_alpha_minimize(mesh, 1.0, stationary.hyperbola_set, gamma=0.5, c=50.0, r=1.0)
print(f"alpha = {res.alpha:.5f}, {res.iterations} descent steps, "
      f"{int(res.active_set.sum())} active triangles, residual {res.stationarity_residual:.1e}")

###############################################################################
# Evolve the perturbed state without diffusion and watch its distance from m0.
m_eta = stationary.perturb(mesh, res.m0, 1e-3, seed=1)
sim = dynamics.Simulator(mesh, dynamics.ModelParams(D=0.0, c=50.0, gamma=0.5, r=1.0))
d0 = fem.l2_norm_p0(mesh, m_eta - res.m0)
dist = []
sim.run(sim.initial_state(m_eta), dynamics.StopRule(T=0.005),
        lambda s: dist.append((s.t, fem.l2_norm_p0(mesh, s.m - res.m0) / d0)))
for t, ratio in dist[:: max(1, len(dist) // 8)] + dist[-1:]:
    print(f"t = {t:.5f}  |m - m0| / |m_eta - m0| = {ratio:.3g}")
print("never back below the start:", np.min([r for _, r in dist]) >= 1)
