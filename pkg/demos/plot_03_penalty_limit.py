"""
Gradient-constrained limit by penalization
==========================================

As the penalty parameter shrinks, the pressure approaches the solution of a
problem with ``|grad p| <= 1/c``.  The multiplier ``a`` marks where the
constraint is active, and its L2 norm stays bounded.
"""

from netmorph import mesh as meshlib, stationary

mesh = meshlib.generate_diamond(0.1)
schedule = [10.0**-k for k in range(1, 9)]
runs = stationary.penalty_continuation(mesh, S=1.0, c=50.0, eps_schedule=schedule)

print(f"{'eps':>8} {'violation':>11} {'eps a^2':>11} {'|a|_L2':>8} {'Newton':>6}")
for r in runs:
    print(f"{r.eps:8.0e} {r.violation_l1:11.3e} {r.complementarity:11.3e} {r.a_l2:8.3f} {r.newton_iterations:6d}")

###############################################################################
# First-order optimality of the limit problem: PDE residual, feasibility and
# complementarity.
last = runs[-1]
print("KKT residuals:", ", ".join(f"{v:.1e}" for v in stationary.kkt_residuals(mesh, last.p, last.a, 50.0, 1.0)))
print(f"active on {(last.a > 0).sum()} of {mesh.n_triangles} triangles")
