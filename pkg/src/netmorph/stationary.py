"""Stationary states without diffusion.

Two constructions are provided:

* ``gamma = 1``: the gradient constrained problem ``c |grad p| <= 1`` through a
  penalty formulation solved by damped Newton with an epsilon continuation,
  together with KKT residuals and the constrained energy ``J``.
* ``1/2 <= gamma < 1``: pressure from minimizing the cut-off functional
  ``F_alpha`` by H1 gradient descent with Armijo steps, conductance from the
  pointwise stationarity relation.

Also here: the branch structure of ``c|u| = z^{gamma-1}(1 + z^2)`` and the
random perturbation used to probe stability.
"""

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse.linalg as spla

from . import fem
from .oned import positive_log_roots

ARMIJO_SIGMA = 1e-4
# relative H1 changes below this are treated as round-off once they stop shrinking
ROUNDOFF_REL = 1e-13
STALL_ITERATIONS = 10


class LineSearchError(RuntimeError):
    """Armijo backtracking found no admissible step; carries the last iterate."""

    def __init__(self, message, p=None, history=None):
        super().__init__(message)
        self.p = p
        self.history = history or []


# -- roots of the algebraic stationarity equation -------------------------------------


@dataclass(frozen=True)
class RootSet:
    """Positive roots ``z`` of ``c|u| = z^{gamma-1} (1 + z^2)``.

    ``labels`` are ``"z1"`` (branch decreasing in ``|u|``) and ``"z2"``
    (increasing) for ``gamma < 1``, ``"z*"`` at the branch point and ``"z"``
    for ``gamma >= 1``.  ``log_roots`` keeps roots that underflow in ``z``.
    """

    u_norm: float
    gamma: float
    c: float
    roots: tuple
    labels: tuple
    log_roots: tuple = ()

    def __len__(self):
        return len(self.roots)

    def residuals(self):
        """Relative residuals ``z^{gamma-1}(1+z^2) / (c|u|) - 1``, evaluated in log form."""
        cu = self.c * self.u_norm
        return tuple(
            math.expm1((self.gamma - 1) * s + float(np.logaddexp(0.0, 2 * s)) - math.log(cu))
            for s in self.log_roots
        )


def solve_z(u_norm, gamma, c=1.0):
    """Roots of ``c|u| = z^{gamma-1} (1 + z^2)`` for ``gamma >= 1/2``."""
    if gamma < 0.5:
        raise ValueError("gamma below 1/2 is not covered")
    if u_norm < 0 or c <= 0:
        raise ValueError("need |u| >= 0 and c > 0")
    logs = positive_log_roots(c * u_norm, gamma)
    roots = tuple(math.exp(s) for s in logs)
    if gamma >= 1:
        labels = ("z",) * len(roots)
    elif len(roots) == 1:
        labels = ("z*",)
    else:
        labels = ("z1", "z2")[: len(roots)]
    return RootSet(float(u_norm), float(gamma), float(c), roots, labels, tuple(logs))


# -- helpers ---------------------------------------------------------------------------


def hyperbola_set(x1, x2):
    """Indicator of ``{(x1 - 1)^2 - x2^2 < 1/4}``."""
    return (x1 - 1.0) ** 2 - x2**2 < 0.25


def active_triangles(mesh, A):
    """Boolean mask from ``None``, an index list, a mask or an indicator on centroids."""
    if A is None:
        return np.zeros(mesh.n_triangles, dtype=bool)
    if callable(A):
        c = mesh.centroids
        return np.asarray(A(c[:, 0], c[:, 1]), dtype=bool)
    A = np.asarray(A)
    if A.dtype == bool:
        if A.shape != (mesh.n_triangles,):
            raise ValueError("mask length must equal the triangle count")
        return A.copy()
    mask = np.zeros(mesh.n_triangles, dtype=bool)
    mask[A.astype(int)] = True
    return mask


def _grad_norm(g):
    return np.sqrt(np.sum(g * g, axis=1))


# -- cut-off functional (1/2 <= gamma < 1) ---------------------------------------------------


def threshold_alpha(gamma, c=1.0):
    """``c^{-1/4} ((1-gamma)/(1+gamma))^{(gamma-1)/2}``: the cut-off used in the experiment."""
    if not 0.5 <= gamma < 1:
        raise ValueError("threshold_alpha needs 1/2 <= gamma < 1")
    if c <= 0:
        raise ValueError("c must be positive")
    return c**-0.25 * ((1 - gamma) / (1 + gamma)) ** ((gamma - 1) / 2)


def convexity_threshold(gamma, c=1.0, r=1.0):
    """Smallest cut-off for which ``F_alpha`` is convex.

    The integrand ``r s^2/2 + K (gamma-1)/(2 gamma) s^{2 gamma/(gamma-1)}`` with
    ``K = c^{2/(gamma-1)}`` has nonnegative second derivative for ``s > alpha``
    exactly when ``alpha >= c^{-1} r^{(gamma-1)/2} ((1-gamma)/(1+gamma))^{(gamma-1)/2}``.
    """
    if not 0.5 <= gamma < 1:
        raise ValueError("needs 1/2 <= gamma < 1")
    return r ** ((gamma - 1) / 2) * ((1 - gamma) / (1 + gamma)) ** ((gamma - 1) / 2) / c


class FAlpha:
    """Discrete cut-off functional on P1 pressures vanishing on the Dirichlet part.

    ``F[p] = sum_T |T| (r |xi|^2 / 2 + chi_A K (gamma-1)/(2 gamma)
    min(|xi|^{2 gamma/(gamma-1)} - alpha^{2 gamma/(gamma-1)}, 0)) - b . p``
    with ``xi = grad p`` on ``T`` and ``K = c^{2/(gamma-1)}``; the cut-off term
    is nonzero where ``|xi| > alpha``.  ``c = r = 1`` gives the unscaled form.
    """

    def __init__(self, mesh, S, A, alpha, gamma, c=1.0, r=1.0, check=True):
        if not 0.5 <= gamma < 1:
            raise ValueError("F_alpha needs 1/2 <= gamma < 1")
        if check and not alpha > convexity_threshold(gamma, c, r):
            raise ValueError(
                f"alpha = {alpha!r} is not above the convexity threshold "
                f"{convexity_threshold(gamma, c, r)!r}"
            )
        self.mesh, self.alpha, self.gamma, self.c, self.r = mesh, float(alpha), float(gamma), float(c), float(r)
        self.K = c ** (2 / (gamma - 1))
        self.active = active_triangles(mesh, A)
        self.asm = fem.P1Assembler(mesh)
        self.load = self.asm.load(S)
        self._e = 2 * gamma / (gamma - 1)

    def _cut(self, s):
        on = self.active & (s > self.alpha)
        return on

    def value(self, p):
        xi = fem.gradient_per_triangle(self.mesh, p)
        s = _grad_norm(xi)
        on = self._cut(s)
        dens = 0.5 * self.r * s * s
        extra = np.zeros_like(s)
        extra[on] = s[on] ** self._e - self.alpha**self._e
        dens += self.K * (self.gamma - 1) / (2 * self.gamma) * extra
        return float(np.sum(self.mesh.areas * dens) - self.load @ p[self.asm.free])

    def coefficient(self, p):
        """Per-triangle ``r + chi K |grad p|^{2/(gamma-1)}``."""
        s = _grad_norm(fem.gradient_per_triangle(self.mesh, p))
        on = self._cut(s)
        k = np.full_like(s, self.r)
        k[on] += self.K * s[on] ** (2 / (self.gamma - 1))
        return k

    def gradient(self, p):
        """Gradient on the free DOFs (the P1 dual vector)."""
        A = self.asm.stiffness(self.coefficient(p))
        return A @ p[self.asm.free] - self.load

    def value_and_gradient(self, p):
        return self.value(p), self.gradient(p)


def f_alpha_value_and_gradient(mesh, p, A, alpha, gamma, S, c=1.0, r=1.0):
    """Value and free-DOF gradient of the cut-off functional at ``p``."""
    return FAlpha(mesh, S, A, alpha, gamma, c, r).value_and_gradient(np.asarray(p, dtype=float))


@dataclass
class VariationalResult:
    p0: np.ndarray
    m0: np.ndarray
    active_set: np.ndarray
    stationarity_residual: float
    alpha: float
    iterations: int
    converged: bool
    stagnated: bool = False
    history: list = field(default_factory=list, repr=False)


def f_alpha_minimize(mesh, S, A, alpha=None, gamma=0.5, c=50.0, r=1.0, p_init=None, tol=1e-15,
                     max_iter=20000, check=True):
    """Minimize ``F_alpha`` by gradient descent in the H1 metric with Armijo steps.

    The search direction is ``-K^{-1} grad F`` with ``K`` the stiffness matrix
    scaled by ``r``.  Iteration stops once the relative H1 change of two
    iterates drops below ``tol``, or when it has settled below ``1e-13`` and
    failed to improve for 10 iterations (``stagnated`` in the result): in
    double precision the change often bottoms out a few ulps above 1e-15.  The Armijo test allows a slack of a few
    ulps of ``|F|`` so round-off does not stall the final iterations.

    Raises
    ------
    LineSearchError
        No step above 1e-18 satisfies the Armijo condition.
    """
    if alpha is None:
        alpha = threshold_alpha(gamma, c)
    F = FAlpha(mesh, S, A, alpha, gamma, c, r, check=check)
    asm = F.asm
    K = asm.stiffness() * r
    lu = spla.splu(K.tocsc(), permc_spec="MMD_AT_PLUS_A")
    H1 = K / r + asm.mass()
    p = np.zeros(mesh.n_vertices) if p_init is None else np.array(p_init, dtype=float)
    p[asm.constrained] = 0.0
    x = p[asm.free]
    history = []
    f_val, g = F.value_and_gradient(p)
    t = 1.0
    converged = stagnated = False
    best_rel, stalled = math.inf, 0
    it = 0
    if not np.any(F.load) and not np.any(x):
        converged = True
    while not converged and it < max_iter:
        it += 1
        d = -lu.solve(g)
        slope = g @ d
        if slope >= 0:
            converged = True
            break
        t = min(1.0, 2 * t)
        slack = 8 * np.finfo(float).eps * abs(f_val)
        while True:
            trial = p.copy()
            trial[asm.free] = x + t * d
            f_new = F.value(trial)
            if f_new <= f_val + ARMIJO_SIGMA * t * slope + slack:
                break
            t *= 0.5
            if t < 1e-18:
                raise LineSearchError("Armijo backtracking failed", p=p, history=history)
        step = t * d
        nx = math.sqrt(max(x @ (H1 @ x), 0.0))
        rel = math.sqrt(max(step @ (H1 @ step), 0.0)) / nx if nx > 0 else math.inf
        p, x, f_val = trial, x + step, f_new
        g = F.gradient(p)
        history.append((f_val, rel, t))
        if rel < tol:
            converged = True
        elif rel < ROUNDOFF_REL:
            if rel < best_rel:
                best_rel, stalled = rel, 0
            else:
                stalled += 1
            if stalled >= STALL_ITERATIONS:
                converged = stagnated = True
    m0 = construct_m0(mesh, p, A, alpha, gamma, c)
    active = F.active & (_grad_norm(fem.gradient_per_triangle(mesh, p)) > alpha)
    res = stationarity_residual(mesh, m0, p, gamma, c)
    return VariationalResult(p, m0, active, res, float(alpha), it, converged, stagnated, history)


def construct_m0(mesh, p0, A, alpha, gamma, c=1.0):
    """``c^{1/(gamma-1)} |grad p|^{(2-gamma)/(gamma-1)} grad p`` on ``A`` where ``|grad p| > alpha``."""
    if not alpha > 0:
        raise ValueError("alpha must be positive")
    g = fem.gradient_per_triangle(mesh, p0)
    s = _grad_norm(g)
    on = active_triangles(mesh, A) & (s > alpha)
    m = np.zeros_like(g)
    m[on] = (c ** (1 / (gamma - 1)) * s[on] ** ((2 - gamma) / (gamma - 1)))[:, None] * g[on]
    return m


def stationarity_residual(mesh, m0, p0, gamma, c=1.0):
    """``|| c^2 (grad p . m) grad p - |m|^{2(gamma-1)} m ||_{L2}``, zero where ``m = 0``."""
    g = fem.gradient_per_triangle(mesh, p0)
    m0 = np.asarray(m0, dtype=float)
    nrm = _grad_norm(m0)
    nz = nrm > 0
    d = np.zeros_like(m0)
    proj = np.sum(m0[nz] * g[nz], axis=1)
    d[nz] = c**2 * proj[:, None] * g[nz] - (nrm[nz] ** (2 * (gamma - 1)))[:, None] * m0[nz]
    return fem.l2_norm_p0(mesh, d)


def perturb(mesh, m0, amplitude=1e-3, seed=0):
    """``(1 + amplitude * eta) m0`` with per-triangle ``eta`` uniform on [-1/2, 1/2], ``||eta||_{L2} = 1``."""
    m0 = np.asarray(m0, dtype=float)
    if not np.any(m0):
        warnings.warn("perturbing a zero conductance leaves it unchanged", stacklevel=2)
        return m0.copy()
    eta = np.random.default_rng(seed).uniform(-0.5, 0.5, mesh.n_triangles)
    eta /= fem.l2_norm_p0(mesh, eta)
    return (1 + amplitude * eta)[:, None] * m0


# -- penalty problem (gamma = 1) ---------------------------------------------------------------


@dataclass
class PenaltyResult:
    eps: float
    p: np.ndarray
    a: np.ndarray
    violation_l1: float
    violation_l2: float
    complementarity: float
    a_l2: float
    value: float
    newton_iterations: int
    stagnated: bool = False


def _penalty_assembler(mesh, boundary):
    if boundary == "full":
        free = np.setdiff1d(np.arange(mesh.n_vertices), mesh.boundary_vertices)
    elif boundary == "markers":
        free = None
    else:
        raise ValueError("boundary must be 'full' or 'markers'")
    return fem.P1Assembler(mesh, free)


class PenaltyProblem:
    """``F_eps[p] = 1/2 int |grad p|^2 + 1/(4 eps) int (|grad p|^2 - 1/c^2)_+^2 - int S p``.

    ``boundary="full"`` imposes ``p = 0`` on the whole boundary, ``"markers"``
    only on the mesh's Dirichlet edges.
    """

    def __init__(self, mesh, S, c, boundary="full"):
        if c <= 0:
            raise ValueError("c must be positive")
        self.mesh, self.c = mesh, float(c)
        self.asm = _penalty_assembler(mesh, boundary)
        self.load = self.asm.load(S)
        self._laplace = None

    def expand(self, x):
        p = np.zeros(self.mesh.n_vertices)
        p[self.asm.free] = x
        return p

    def excess(self, p):
        g = fem.gradient_per_triangle(self.mesh, p)
        return g, np.sum(g * g, axis=1) - 1 / self.c**2

    def value(self, p, eps):
        g, e = self.excess(p)
        dens = 0.5 * np.sum(g * g, axis=1) + np.maximum(e, 0) ** 2 / (4 * eps)
        return float(np.sum(self.mesh.areas * dens) - self.load @ p[self.asm.free])

    def multiplier(self, p, eps):
        return np.maximum(self.excess(p)[1], 0) / eps

    def gradient(self, p, eps):
        a = self.multiplier(p, eps)
        return self.asm.stiffness(1 + a) @ p[self.asm.free] - self.load

    def hessian(self, p, eps):
        g, e = self.excess(p)
        a = np.maximum(e, 0) / eps
        T = np.zeros((self.mesh.n_triangles, 2, 2))
        T[:, 0, 0] = T[:, 1, 1] = 1 + a
        on = e > 0
        T[on] += (2 / eps) * np.einsum("ti,tj->tij", g[on], g[on])
        return self.asm.stiffness(T)

    def laplace_lu(self):
        if self._laplace is None:
            self._laplace = spla.splu(self.asm.stiffness().tocsc(), permc_spec="MMD_AT_PLUS_A")
        return self._laplace

    def dual_norm(self, residual):
        """``sqrt(r^T K^{-1} r)`` with the Laplace stiffness ``K``: the H^{-1} norm."""
        if not np.any(residual):
            return 0.0
        return math.sqrt(max(residual @ self.laplace_lu().solve(residual), 0.0))


def penalty_solve(mesh, S, c, eps, p_init=None, boundary="full", tol=1e-10, max_iter=200, problem=None):
    """Minimize ``F_eps`` by damped Newton with Armijo backtracking.

    Converges when the H^{-1} norm of the gradient is at most ``tol`` times
    that of the load.  For very small ``eps`` round-off in the gradient grows
    like ``1/eps``; the iteration then also stops (``stagnated``) once the
    gradient is below ``sqrt(tol)`` relative and has stopped improving.

    Raises
    ------
    LineSearchError
        Backtracking failed; the exception carries the last iterate.
    """
    if not eps > 0:
        raise ValueError("eps must be positive")
    prob = problem or PenaltyProblem(mesh, S, c, boundary)
    p = np.zeros(mesh.n_vertices) if p_init is None else np.array(p_init, dtype=float)
    p[prob.asm.constrained] = 0.0
    scale = prob.dual_norm(prob.load)
    f_val = prob.value(p, eps)
    it = 0
    best, stalled, stagnated = math.inf, 0, False
    while True:
        g = prob.gradient(p, eps)
        gn = prob.dual_norm(g)
        if gn <= tol * max(scale, np.finfo(float).tiny):
            break
        # the gradient carries round-off amplified by 1/eps; stop once it no
        # longer improves and is already small
        if gn < 0.5 * best:
            best, stalled = gn, 0
        else:
            stalled += 1
        if stalled >= STALL_ITERATIONS // 2 and best <= math.sqrt(tol) * scale:
            stagnated = True
            break
        if it >= max_iter:
            raise LineSearchError(f"Newton did not converge in {max_iter} iterations", p=p)
        it += 1
        H = prob.hessian(p, eps)
        d = spla.splu(H.tocsc(), permc_spec="MMD_AT_PLUS_A").solve(-g)
        slope = g @ d
        if slope >= 0:  # numerically flat; fall back to the preconditioned gradient
            d = -prob.laplace_lu().solve(g)
            slope = g @ d
        t = 1.0
        slack = 8 * np.finfo(float).eps * abs(f_val)
        while True:
            trial = p.copy()
            trial[prob.asm.free] += t * d
            f_new = prob.value(trial, eps)
            if f_new <= f_val + ARMIJO_SIGMA * t * slope + slack:
                break
            t *= 0.5
            if t < 1e-14:
                if gn <= math.sqrt(tol) * scale:
                    # round-off floor reached above the tolerance
                    return _penalty_result(prob, p, eps, f_val, it, True)
                raise LineSearchError(f"line search failed at eps={eps:g}", p=p)
        if f_new > f_val + slack:
            raise LineSearchError("penalty functional increased across an accepted step", p=p)
        p, f_val = trial, f_new
    return _penalty_result(prob, p, eps, f_val, it, stagnated)


def _penalty_result(prob, p, eps, f_val, it, stagnated=False):
    mesh = prob.mesh
    g, e = prob.excess(p)
    viol = np.maximum(e, 0)
    a = viol / eps
    return PenaltyResult(
        eps=float(eps),
        p=p,
        a=a,
        violation_l1=float(np.sum(mesh.areas * viol)),
        violation_l2=fem.l2_norm_p0(mesh, viol),
        complementarity=float(np.sum(mesh.areas * eps * a * a)),
        a_l2=fem.l2_norm_p0(mesh, a),
        value=f_val,
        newton_iterations=it,
        stagnated=stagnated,
    )


def penalty_continuation(mesh, S, c, eps_schedule=None, boundary="full", tol=1e-10):
    """Solve along a decreasing ``eps`` schedule, warm-starting each solve."""
    if eps_schedule is None:
        eps_schedule = [10.0**-k for k in range(1, 7)]
    prob = PenaltyProblem(mesh, S, c, boundary)
    out, p = [], None
    for eps in eps_schedule:
        res = penalty_solve(mesh, S, c, eps, p_init=p, tol=tol, problem=prob)
        out.append(res)
        p = res.p
    return out


def kkt_residuals(mesh, p, a_sq, c, S, boundary="full", problem=None):
    """``(r_pde, r_feas, r_comp)`` for ``-div((1 + a^2) grad p) = S``, ``c|grad p| <= 1``.

    ``r_pde`` is the H^{-1} norm of the discrete residual, ``r_feas`` the L1
    norm of ``(c^2 |grad p|^2 - 1)_+`` and ``r_comp`` that of
    ``a^2 (c^2 |grad p|^2 - 1)``.
    """
    a_sq = np.asarray(a_sq, dtype=float)
    if np.any(a_sq < 0):
        raise ValueError("multiplier must be non-negative")
    prob = problem or PenaltyProblem(mesh, S, c, boundary)
    p = np.asarray(p, dtype=float)
    res = prob.asm.stiffness(1 + a_sq) @ p[prob.asm.free] - prob.load
    g = fem.gradient_per_triangle(mesh, p)
    q = c**2 * np.sum(g * g, axis=1) - 1
    return (
        prob.dual_norm(res),
        float(np.sum(mesh.areas * np.maximum(q, 0))),
        float(np.sum(mesh.areas * np.abs(a_sq * q))),
    )


def j_functional(mesh, p, S, c, tol=1e-12):
    """``J[p] = int |grad p|^2/2 - S p`` and whether ``c^2 |grad p|^2 <= 1 + tol`` everywhere."""
    p = np.asarray(p, dtype=float)
    g = fem.gradient_per_triangle(mesh, p)
    asm = fem.P1Assembler(mesh, free=np.arange(mesh.n_vertices))
    val = 0.5 * float(np.sum(mesh.areas * np.sum(g * g, axis=1))) - float(asm.load(S) @ p)
    feasible = bool(np.all(c**2 * np.sum(g * g, axis=1) <= 1 + tol))
    return val, feasible


def nodal_average(mesh, values):
    """Area-weighted average of per-triangle values at the vertices."""
    w = np.zeros(mesh.n_vertices)
    acc = np.zeros(mesh.n_vertices)
    for i in range(3):
        np.add.at(w, mesh.triangles[:, i], mesh.areas)
        np.add.at(acc, mesh.triangles[:, i], mesh.areas * values)
    return acc / w


def transport_diagnostic(mesh, p, a):
    """``|| grad p . grad a_bar ||_{L2}`` with ``a_bar`` the nodal average of ``a``."""
    ga = fem.gradient_per_triangle(mesh, nodal_average(mesh, a))
    gp = fem.gradient_per_triangle(mesh, p)
    return fem.l2_norm_p0(mesh, np.sum(ga * gp, axis=1))
