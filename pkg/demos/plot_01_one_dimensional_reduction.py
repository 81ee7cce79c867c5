"""
The one-dimensional reduction
=============================

On (0, 1) the pressure gradient is explicit and the conductance obeys a
scalar reaction-diffusion equation.  Whether a network survives depends on
``c B(x)`` relative to the critical constant ``Z_gamma``.
"""

import numpy as np

from netmorph import oned

###############################################################################
# The critical constant is the infimum of ``sqrt(h_gamma)``.  It equals 2 for
# gamma = 0 and tends to 1 at both ends of [-1, 1].
for gamma in (-1.0, -0.5, 0.0, 0.5, 1.0):
    print(f"Z_{gamma:+.1f} = {oned.z_constant(gamma):.6f}")

###############################################################################
# With D = 0 every point evolves on its own.  Sweep cB through Z_{1/2}: one
# stationary point below, a merged pair at the boundary, five above.
Z = oned.z_constant(0.5)
for cB in (1.0, Z, 2.5):
    print(oned.classify_stationary(cB, 0.5).format())

###############################################################################
# Below the threshold the network dies.  For gamma < 1/2 it vanishes in finite
# time, and the decay margin bounds that time.
prof = oned.Profile1D.uniform(200, S=1.0, m=0.5)
traj = oned.integrate_1d(prof, D=0.1, c=1.0, gamma=0.25, T=20.0)
margin = oned.breakdown_margin(0.25, 1.0, 1.0, 0.5)
print(f"gamma = 1/4: extinct at t = {traj.T_ex:.4f}, bound {prof.l1_norm() / margin:.4f}")

# for 1/2 <= gamma < 1 the L1 norm decays at least at rate delta
traj = oned.integrate_1d(prof, D=0.1, c=1.0, gamma=0.75, T=20.0)
delta = oned.breakdown_margin(0.75, 1.0, 1.0, 0.5)
print(f"gamma = 3/4: fitted rate {traj.decay_rate():.3f} >= delta = {delta:.3f}")

###############################################################################
# Above the threshold a nonzero stable state survives where cB is large.
prof = oned.Profile1D.uniform(200, S=3.0, m=1.0)
traj = oned.integrate_1d(prof, D=0.0, c=1.0, gamma=0.5, T=100.0, extinction=None)
alive = np.abs(traj.final) > 1e-3
print(f"surviving for x > {prof.x[alive].min():.3f} (cB = Z there: x = {Z / 3:.3f})")
