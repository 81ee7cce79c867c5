"""Finite element spaces, assembly and linear solves.

Pressure lives in continuous P1 (zero on the Dirichlet vertices), the
conductance vector in P0 (one 2-vector per triangle) and the flux
``sigma = grad m`` in lowest order Raviart-Thomas, one RT0 field per
conductance component.
"""

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

# Dunavant degree-5 rule on the reference triangle (barycentric, weights sum to 1).
_A1, _B1 = 0.059715871789770, 0.470142064105115
_A2, _B2 = 0.797426985353087, 0.101286507323456
DUNAVANT5_POINTS = np.array(
    [
        [1 / 3, 1 / 3, 1 / 3],
        [_A1, _B1, _B1],
        [_B1, _A1, _B1],
        [_B1, _B1, _A1],
        [_A2, _B2, _B2],
        [_B2, _A2, _B2],
        [_B2, _B2, _A2],
    ]
)
DUNAVANT5_WEIGHTS = np.array(
    [0.225] + [0.132394152788506] * 3 + [0.125939180544827] * 3
)


class SolverError(RuntimeError):
    """Iterative solve did not reach the requested tolerance."""

    def __init__(self, message, residual=None, iterations=None):
        super().__init__(message)
        self.residual = residual
        self.iterations = iterations


class IndefiniteMatrixError(SolverError):
    pass


@dataclass
class SparseSystem:
    """Symmetric system restricted to the free degrees of freedom.

    ``matrix`` and ``rhs`` only cover ``free``; the constrained entries of the
    full vector are fixed at ``constrained_values`` (zero throughout).
    """

    matrix: sp.csr_matrix
    rhs: np.ndarray
    free: np.ndarray
    n_total: int
    constrained: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    constrained_values: float = 0.0

    def expand(self, x_free):
        x = np.full(self.n_total, float(self.constrained_values))
        x[self.free] = x_free
        return x


# -- quadrature helpers ----------------------------------------------------------


def triangle_midpoints(mesh):
    """Edge midpoints per triangle, (M, 3, 2); entry i is opposite local vertex i."""
    P = mesh.vertices[mesh.triangles]
    return 0.5 * (P[:, [1, 2, 0]] + P[:, [2, 0, 1]])


def quadrature_points(mesh, bary=DUNAVANT5_POINTS):
    P = mesh.vertices[mesh.triangles]
    return np.einsum("qi,tid->tqd", bary, P)


def _evaluate(f, pts):
    """Evaluate scalar or vector data ``f`` at points of shape (..., 2)."""
    if callable(f):
        return np.asarray(f(pts[..., 0], pts[..., 1]), dtype=float)
    return np.broadcast_to(np.asarray(f, dtype=float), pts.shape[:-1])


def source_at_midpoints(mesh, S):
    """Source values at the three edge midpoints of each triangle.

    ``S`` may be a constant, a vectorized callable ``S(x1, x2)`` or an array of
    per-triangle values.
    """
    if callable(S):
        return _evaluate(S, triangle_midpoints(mesh))
    S = np.asarray(S, dtype=float)
    if S.ndim == 0:
        return np.full((mesh.n_triangles, 3), float(S))
    if S.shape == (mesh.n_triangles,):
        return np.repeat(S[:, None], 3, axis=1)
    raise ValueError("source must be scalar, callable or one value per triangle")


def per_triangle(mesh, r, name="r"):
    r = np.asarray(r, dtype=float)
    if r.ndim == 0:
        return np.full(mesh.n_triangles, float(r))
    if r.shape != (mesh.n_triangles,):
        raise ValueError(f"{name} must be scalar or one value per triangle")
    return r


# -- P1 assembly -----------------------------------------------------------------


class P1Assembler:
    """Cached sparsity pattern for P1 matrices on the free vertices.

    ``free`` defaults to all vertices not on a Dirichlet edge.
    """

    def __init__(self, mesh, free=None):
        self.mesh = mesh
        if free is None:
            free = np.setdiff1d(np.arange(mesh.n_vertices), mesh.dirichlet_vertices)
        self.free = np.asarray(free, dtype=np.int64)
        self.constrained = np.setdiff1d(np.arange(mesh.n_vertices), self.free)
        self.n = len(self.free)
        numbering = np.full(mesh.n_vertices, -1, dtype=np.int64)
        numbering[self.free] = np.arange(self.n)
        self.numbering = numbering

        t = numbering[mesh.triangles]
        rows = np.repeat(t, 3, axis=1)  # (M, 9) row index of local entry (i, j)
        cols = np.tile(t, (1, 3))
        keep = (rows >= 0) & (cols >= 0)
        self._keep = keep
        r, c = rows[keep], cols[keep]
        pattern = sp.csr_matrix((np.ones(len(r)), (r, c)), shape=(self.n, self.n))
        pattern.sum_duplicates()
        pattern.sort_indices()
        self.indptr = pattern.indptr
        self.indices = pattern.indices
        keys_pattern = np.repeat(np.arange(self.n), np.diff(self.indptr)) * self.n + self.indices
        self._pos = np.searchsorted(keys_pattern, r * self.n + c)
        self.nnz = len(self.indices)

        self._vec_rows = t  # load vector map
        self._vec_keep = t >= 0

    def matrix(self, local):
        """Assemble local (M, 3, 3) element matrices into a free-DOF CSR matrix."""
        data = np.bincount(self._pos, weights=local.reshape(-1, 9)[self._keep], minlength=self.nnz)
        return sp.csr_matrix((data, self.indices.copy(), self.indptr.copy()), shape=(self.n, self.n))

    def vector(self, local):
        """Assemble local (M, 3) element vectors into a free-DOF vector."""
        return np.bincount(
            self._vec_rows[self._vec_keep], weights=local[self._vec_keep], minlength=self.n
        )

    def stiffness(self, tensor=None):
        """``int K grad phi_j . grad phi_i`` with per-triangle tensor ``K`` (M, 2, 2)."""
        mesh = self.mesh
        G = mesh.barycentric_gradients()
        if tensor is None:
            local = np.einsum("tid,tjd->tij", G, G)
        elif np.ndim(tensor) == 1:
            local = np.einsum("tid,tjd->tij", G, G) * tensor[:, None, None]
        else:
            local = np.einsum("tid,tde,tje->tij", G, tensor, G)
        return self.matrix(local * mesh.areas[:, None, None])

    def mass(self):
        """Consistent P1 mass matrix on the free vertices."""
        local = (np.ones((3, 3)) + np.eye(3)) / 12.0
        return self.matrix(local[None] * self.mesh.areas[:, None, None])

    def load(self, S):
        Sm = source_at_midpoints(self.mesh, S)
        # phi_i is 1/2 at the two midpoints adjacent to vertex i, 0 at the opposite one
        local = (Sm.sum(axis=1)[:, None] - Sm) * 0.5 * self.mesh.areas[:, None] / 3.0
        return self.vector(local)


def _assembler(mesh, assembler):
    if assembler is None:
        return P1Assembler(mesh)
    if assembler.mesh is not mesh:
        raise ValueError("assembler was built for a different mesh")
    return assembler


def permeability(m, r):
    """Per-triangle tensor ``r I + m (x) m``, (M, 2, 2)."""
    m = np.asarray(m, dtype=float)
    K = np.einsum("ti,tj->tij", m, m)
    K[:, 0, 0] += r
    K[:, 1, 1] += r
    return K


def assemble_pressure_system(mesh, m, r, S, assembler=None):
    """Galerkin system for ``-div((r I + m (x) m) grad p) = S``, p = 0 on Dirichlet edges."""
    asm = _assembler(mesh, assembler)
    m = np.asarray(m, dtype=float)
    if m.shape != (mesh.n_triangles, 2) or not np.all(np.isfinite(m)):
        raise ValueError("m must be a finite (n_triangles, 2) array")
    r_t = per_triangle(mesh, r)
    if np.any(r_t <= 0):
        raise ValueError("background permeability r must be positive")
    A = asm.stiffness(permeability(m, r_t))
    return SparseSystem(A, asm.load(S), asm.free, mesh.n_vertices, asm.constrained)


# -- linear solves ----------------------------------------------------------------


def pcg(A, b, tol=1e-10, x0=None, maxiter=None, M_inv=None):
    """Preconditioned conjugate gradients with an explicit indefiniteness check.

    Converges when ``||b - A x|| <= tol ||b||``.  ``M_inv`` applies the
    preconditioner; Jacobi is used when omitted.
    """
    n = len(b)
    if maxiter is None:
        maxiter = max(100, 10 * n)
    if M_inv is None:
        d = A.diagonal()
        if np.any(d <= 0):
            raise IndefiniteMatrixError("non-positive diagonal entry")
        inv_d = 1.0 / d
        M_inv = lambda v: inv_d * v  # noqa: E731
    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        return np.zeros(n), 0
    x = np.zeros(n) if x0 is None else np.array(x0, dtype=float)
    r = b - A @ x
    z = M_inv(r)
    p = z.copy()
    rz = r @ z
    for it in range(1, maxiter + 1):
        if np.linalg.norm(r) <= tol * bnorm:
            # the recursive residual drifts from the true one; confirm, else restart
            r = b - A @ x
            if np.linalg.norm(r) <= tol * bnorm:
                return x, it - 1
            z = M_inv(r)
            p = z.copy()
            rz = r @ z
        Ap = A @ p
        pAp = p @ Ap
        if pAp <= 0:
            raise IndefiniteMatrixError(
                "matrix is not positive definite", residual=np.linalg.norm(r) / bnorm, iterations=it
            )
        alpha = rz / pAp
        x += alpha * p
        r -= alpha * Ap
        z = M_inv(r)
        rz_new = r @ z
        p = z + (rz_new / rz) * p
        rz = rz_new
    res = np.linalg.norm(b - A @ x) / bnorm
    if res <= tol:
        return x, maxiter
    raise SolverError(
        f"PCG did not converge in {maxiter} iterations (relative residual {res:.3e})",
        residual=res,
        iterations=maxiter,
    )


def solve_spd(system, tol=1e-10, method="cg", x0=None, maxiter=None):
    """Solve an SPD :class:`SparseSystem`; returns the full vector.

    ``method`` is ``"cg"`` (Jacobi PCG), ``"ilu"`` (PCG preconditioned by an
    incomplete LU factorization) or ``"direct"`` (sparse LU).  The relative
    residual on the free DOFs is checked against ``tol`` in every case.
    """
    if not 0 < tol < 1:
        raise ValueError("tol must lie in (0, 1)")
    A, b = system.matrix, system.rhs
    if x0 is not None and len(x0) == system.n_total:
        x0 = np.asarray(x0)[system.free]
    if method == "direct":
        x = spla.splu(A.tocsc(), permc_spec="MMD_AT_PLUS_A").solve(b)
    elif method == "cg":
        x, _ = pcg(A, b, tol=tol, x0=x0, maxiter=maxiter)
    elif method == "ilu":
        ilu = spla.spilu(A.tocsc(), drop_tol=1e-5, fill_factor=20)
        x, _ = pcg(A, b, tol=tol, x0=x0, maxiter=maxiter, M_inv=ilu.solve)
    else:
        raise ValueError(f"unknown method {method!r}")
    bnorm = np.linalg.norm(b)
    if bnorm > 0:
        res = np.linalg.norm(b - A @ x) / bnorm
        if not res <= tol:
            raise SolverError(f"relative residual {res:.3e} exceeds {tol:.1e}", residual=res)
    return system.expand(x)


# -- P1 / P0 field operations ------------------------------------------------------


def gradient_per_triangle(mesh, p):
    """Exact gradient of the P1 interpolant on every triangle, (M, 2)."""
    return np.einsum("tid,ti->td", mesh.barycentric_gradients(), np.asarray(p)[mesh.triangles])


def velocity(m, grad_p, r):
    """Discrete velocity ``(r I + m (x) m) grad p`` per triangle."""
    m = np.asarray(m, dtype=float)
    grad_p = np.asarray(grad_p, dtype=float)
    r = np.asarray(r, dtype=float)
    if r.ndim == 1:
        r = r[:, None]
    return r * grad_p + np.sum(m * grad_p, axis=-1, keepdims=True) * m


class BoxIndicator:
    """Vector field equal to ``value`` on an axis-aligned box and zero elsewhere.

    Cell means are exact: overlap areas come from polygon clipping.
    """

    def __init__(self, x_min, x_max, y_min, y_max, value=(1.0, 0.0)):
        self.bounds = (x_min, y_min, x_max, y_max)
        self.value = np.asarray(value, dtype=float)

    def __call__(self, x, y):
        x0, y0, x1, y1 = self.bounds
        inside = (x >= x0) & (x <= x1) & (y >= y0) & (y <= y1)
        return inside[..., None] * self.value

    def area_fractions(self, mesh):
        import shapely

        tris = shapely.polygons(mesh.vertices[mesh.triangles])
        box = shapely.box(*self.bounds)
        return shapely.area(shapely.intersection(tris, box)) / mesh.areas

    def cell_means(self, mesh):
        return self.area_fractions(mesh)[:, None] * self.value


def l2_project_p0(mesh, f):
    """L2 projection onto piecewise constants: the mean of ``f`` on each triangle.

    ``f`` is a constant vector, a vectorized callable ``f(x1, x2) -> (..., 2)``
    (integrated with the degree-5 Dunavant rule) or any object with a
    ``cell_means(mesh)`` method.
    """
    if hasattr(f, "cell_means"):
        return np.asarray(f.cell_means(mesh), dtype=float)
    if callable(f):
        vals = np.asarray(f(*np.moveaxis(quadrature_points(mesh), -1, 0)), dtype=float)
        return np.einsum("q,tq...->t...", DUNAVANT5_WEIGHTS, vals)
    f = np.asarray(f, dtype=float)
    return np.broadcast_to(f, (mesh.n_triangles,) + f.shape).copy()


def integrate_p0(mesh, values):
    return float(np.sum(mesh.areas * values))


def l2_norm_p0(mesh, v):
    v = np.asarray(v, dtype=float)
    sq = v**2 if v.ndim == 1 else np.sum(v**2, axis=-1)
    return float(np.sqrt(np.sum(mesh.areas * sq)))


def l2_error_p1(mesh, p, exact):
    """``||p_h - exact||_{L2}`` with the degree-5 rule."""
    qp = quadrature_points(mesh)
    ph = np.einsum("qi,ti->tq", DUNAVANT5_POINTS, np.asarray(p)[mesh.triangles])
    diff = ph - _evaluate(exact, qp)
    return float(np.sqrt(np.sum(mesh.areas * (diff**2 @ DUNAVANT5_WEIGHTS))))


def h1_seminorm_error_p1(mesh, p, exact_grad):
    """``||grad p_h - exact_grad||_{L2}``; ``exact_grad(x1, x2)`` returns (..., 2)."""
    qp = quadrature_points(mesh)
    gh = gradient_per_triangle(mesh, p)[:, None, :]
    ge = np.asarray(exact_grad(qp[..., 0], qp[..., 1]), dtype=float)
    diff = np.sum((gh - ge) ** 2, axis=-1)
    return float(np.sqrt(np.sum(mesh.areas * (diff @ DUNAVANT5_WEIGHTS))))


def h1_seminorm(mesh, p):
    g = gradient_per_triangle(mesh, p)
    return l2_norm_p0(mesh, g)


# -- RT0 mixed diffusion --------------------------------------------------------------


def rt0_local_mass(mesh):
    """Exact local RT0 mass matrices (M, 3, 3) in the global edge orientation."""
    P = mesh.vertices[mesh.triangles]
    mids = triangle_midpoints(mesh)
    diff = mids[:, :, None, :] - P[:, None, :, :]  # (t, q, i, d): midpoint q minus vertex i
    gram = np.einsum("tqid,tqjd->tij", diff, diff) * (mesh.areas / 3.0)[:, None, None]
    scale = (
        mesh.edge_signs * mesh.edge_lengths[mesh.tri_edges] / (2.0 * mesh.areas[:, None])
    )
    return gram * scale[:, :, None] * scale[:, None, :]


def rt0_divergence(mesh):
    """``B[T, e] = int_T div phi_e`` as a sparse (n_triangles, n_edges) matrix."""
    vals = mesh.edge_signs * mesh.edge_lengths[mesh.tri_edges]
    rows = np.repeat(np.arange(mesh.n_triangles), 3)
    return sp.csr_matrix(
        (vals.ravel().astype(float), (rows, mesh.tri_edges.ravel())),
        shape=(mesh.n_triangles, mesh.n_edges),
    )


def rt0_mass(mesh):
    local = rt0_local_mass(mesh)
    rows = np.repeat(mesh.tri_edges, 3, axis=1).ravel()
    cols = np.tile(mesh.tri_edges, (1, 3)).ravel()
    M = sp.csr_matrix((local.ravel(), (rows, cols)), shape=(mesh.n_edges, mesh.n_edges))
    M.sum_duplicates()
    return M


class MixedOperator:
    """One implicit diffusion step for both conductance components.

    Discretizes ``m - dt D^2 div sigma = rhs`` and ``sigma = grad m`` with P0
    conductance and RT0 flux.  With ``m_boundary="dirichlet"`` every edge
    carries a flux DOF (m = 0 enters as a natural condition); with
    ``"neumann"`` the boundary fluxes are constrained to zero.

    The P0 mass matrix is diagonal, so ``m`` is eliminated and the sparse SPD
    system ``(M_sigma + dt D^2 B^T M_0^{-1} B) sigma = -B^T rhs`` is solved on
    the edges; ``m = rhs + dt D^2 M_0^{-1} B sigma`` follows.
    """

    def __init__(self, mesh, D, dt, m_boundary="dirichlet", _blocks=None):
        if D < 0:
            raise ValueError("D must be non-negative")
        if not dt > 0:
            raise ValueError("time step must be positive")
        if m_boundary not in ("dirichlet", "neumann"):
            raise ValueError("m_boundary must be 'dirichlet' or 'neumann'")
        self.mesh, self.D, self.dt, self.m_boundary = mesh, float(D), float(dt), m_boundary
        if _blocks is None:
            _blocks = mixed_blocks(mesh, m_boundary)
        self.mass_p0, self.B, self.mass_rt0, self.flux_dofs = _blocks
        self.coupling = self.dt * self.D**2
        self._lu = None

    @property
    def reduced(self):
        """Edge-based SPD system (matrix only; rhs filled per solve)."""
        inv_area = sp.diags(1.0 / self.mass_p0)
        A = (self.mass_rt0 + self.coupling * (self.B.T @ inv_area @ self.B)).tocsr()
        return SparseSystem(A, np.zeros(A.shape[0]), self.flux_dofs, self.mesh.n_edges)

    def schur_matvec(self, m):
        """Action of the m-reduced operator ``M_0 + dt D^2 B M_sigma^{-1} B^T``."""
        m = np.asarray(m, dtype=float)
        if self.coupling == 0.0:
            return self.mass_p0[:, None] * m if m.ndim == 2 else self.mass_p0 * m
        sigma = self.flux(m)
        return (self.mass_p0[:, None] * m if m.ndim == 2 else self.mass_p0 * m) - self.coupling * (
            self.B @ sigma
        )

    def _factor(self):
        if self._lu is None:
            self._lu = spla.splu(self.reduced.matrix.tocsc(), permc_spec="MMD_AT_PLUS_A")
        return self._lu

    def flux(self, m):
        """Discrete gradient ``sigma = -M_sigma^{-1} B^T m`` on the free flux DOFs."""
        return -_mass_rt0_lu(self).solve(self.B.T @ np.asarray(m, dtype=float))

    def solve(self, rhs):
        """Return ``(m_new, sigma)`` for a right-hand side of shape (M,) or (M, 2)."""
        rhs = np.asarray(rhs, dtype=float)
        if self.coupling == 0.0:
            return rhs.copy(), np.zeros((self.B.shape[1],) + rhs.shape[1:])
        sigma = self._factor().solve(-(self.B.T @ rhs))
        m = rhs + self.coupling * (self.B @ sigma) / (
            self.mass_p0[:, None] if rhs.ndim == 2 else self.mass_p0
        )
        return m, sigma

    def flux_energy(self, sigma):
        """``int |sigma|^2`` summed over components."""
        return float(np.sum(sigma * (self.mass_rt0 @ sigma)))


def mixed_blocks(mesh, m_boundary="dirichlet"):
    """P0 mass (diagonal), divergence and RT0 mass restricted to the flux DOFs."""
    if m_boundary == "dirichlet":
        dofs = np.arange(mesh.n_edges)
    else:
        dofs = np.setdiff1d(np.arange(mesh.n_edges), mesh.boundary_edges)
    B = rt0_divergence(mesh)[:, dofs].tocsr()
    M = rt0_mass(mesh)[dofs][:, dofs].tocsr()
    return mesh.areas.copy(), B, M, dofs


_RT0_LU = {}


def _mass_rt0_lu(op):
    key = (id(op.mesh), op.m_boundary)
    entry = _RT0_LU.get(key)
    if entry is None or entry[0] is not op.mesh:
        entry = (op.mesh, spla.splu(op.mass_rt0.tocsc(), permc_spec="MMD_AT_PLUS_A"))
        _RT0_LU[key] = entry
    return entry[1]


def assemble_mixed_operator(mesh, D, dt, m_boundary="dirichlet"):
    """Coupled (m, sigma) operator of one implicit diffusion step; see :class:`MixedOperator`."""
    return MixedOperator(mesh, D, dt, m_boundary)


class LaggedFactorSolver:
    """PCG preconditioned by the LU factors of an earlier matrix in a sequence.

    Suited to time stepping, where the pressure matrix changes a little per
    step.  The factorization is refreshed whenever PCG needs more than
    ``max_iter`` iterations, so every solve still meets ``tol``.
    """

    def __init__(self, tol=1e-10, max_iter=12):
        self.tol, self.max_iter = tol, max_iter
        self._lu = None
        self.factorizations = 0

    def _refactor(self, A):
        self._lu = spla.splu(A.tocsc(), permc_spec="MMD_AT_PLUS_A")
        self.factorizations += 1

    def solve(self, system, x0=None):
        A, b = system.matrix, system.rhs
        if x0 is not None and len(x0) == system.n_total:
            x0 = np.asarray(x0)[system.free]
        if self._lu is None or self._lu.shape != A.shape:
            self._refactor(A)
        try:
            x, it = pcg(A, b, tol=self.tol, x0=x0, maxiter=self.max_iter, M_inv=self._lu.solve)
        except SolverError:
            self._refactor(A)
            x, it = pcg(A, b, tol=self.tol, x0=x0, maxiter=50, M_inv=self._lu.solve)
        return system.expand(x)


# -- manufactured solution -----------------------------------------------------------


def _sin_exact(x1, x2):
    return np.sin(np.pi * x1) * np.sin(np.pi * x2)


def _sin_grad(x1, x2):
    return np.pi * np.stack(
        [np.cos(np.pi * x1) * np.sin(np.pi * x2), np.sin(np.pi * x1) * np.cos(np.pi * x2)], axis=-1
    )


def _sin_source(x1, x2):
    return 2 * np.pi**2 * _sin_exact(x1, x2)


def manufactured_poisson_errors(mesh, method="direct"):
    """Errors of ``-Laplace p = 2 pi^2 sin(pi x1) sin(pi x2)`` (``m = 0``, ``r = 1``).

    The exact solution vanishes on the boundary of the unit square.  Returns
    ``(L2 error, H1 seminorm error)``.
    """
    system = assemble_pressure_system(mesh, np.zeros((mesh.n_triangles, 2)), 1.0, _sin_source)
    p = solve_spd(system, tol=1e-13, method=method)
    return l2_error_p1(mesh, p, _sin_exact), h1_seminorm_error_p1(mesh, p, _sin_grad)


def observed_orders(h, err):
    """``log(e_{k-1}/e_k) / log(h_{k-1}/h_k)`` between consecutive levels."""
    h, err = np.asarray(h, dtype=float), np.asarray(err, dtype=float)
    return np.log(err[:-1] / err[1:]) / np.log(h[:-1] / h[1:])
