"""Conforming triangulations of polygonal domains with boundary markers.

A :class:`Mesh` stores counterclockwise triangles, a global edge list with a
fixed orientation (lower to higher vertex index) and a DIRICHLET/NEUMANN tag
for every boundary edge.  Meshes are immutable once built.
"""

import math

import numpy as np

DIRICHLET = "DIRICHLET"
NEUMANN = "NEUMANN"

# The truncated diamond used for all 2D experiments.  The left corner of the
# kite (-1, 0), (1, -1), (2, 0), (1, 1) is cut by the line x1 = 0.
DIAMOND_CORNERS = np.array(
    [[0.0, -0.5], [1.0, -1.0], [2.0, 0.0], [1.0, 1.0], [0.0, 0.5]]
)
DIAMOND_CENTER = np.array([1.0, 0.0])


class MeshError(ValueError):
    pass


def _frozen(a, dtype):
    a = np.array(a, dtype=dtype)
    a.setflags(write=False)
    return a


class Mesh:
    """Triangulation of a polygonal 2D domain.

    Parameters
    ----------
    vertices : array_like, shape (N, 2)
    triangles : array_like, shape (M, 3)
        Vertex indices.  Clockwise triangles are reoriented.
    dirichlet : callable or None
        ``dirichlet(a, b)`` receives the two endpoint coordinates of a
        boundary edge and returns True when the edge belongs to the Dirichlet
        part of the boundary.  ``None`` marks every boundary edge DIRICHLET.
    boundary_tags : dict, optional
        Explicit ``{(v0, v1): tag}`` map; takes precedence over ``dirichlet``.
    """

    def __init__(self, vertices, triangles, dirichlet=None, boundary_tags=None):
        vertices = np.asarray(vertices, dtype=float)
        triangles = np.asarray(triangles, dtype=np.int64)
        if vertices.ndim != 2 or vertices.shape[1] != 2:
            raise MeshError("vertices must have shape (N, 2)")
        if triangles.ndim != 2 or triangles.shape[1] != 3:
            raise MeshError("triangles must have shape (M, 3)")
        if triangles.size and (triangles.min() < 0 or triangles.max() >= len(vertices)):
            raise MeshError("triangle references a missing vertex")

        triangles = triangles.copy()
        area2 = _signed_area2(vertices, triangles)
        flip = area2 < 0
        triangles[flip] = triangles[flip][:, [0, 2, 1]]
        area2 = np.abs(area2)
        if np.any(area2 <= 1e-14 * max(1.0, float(np.max(area2, initial=0.0)))):
            raise MeshError("degenerate triangle")

        self.vertices = _frozen(vertices, float)
        self.triangles = _frozen(triangles, np.int64)
        self.areas = _frozen(0.5 * area2, float)
        self._build_edges()
        self._tag_boundary(dirichlet, boundary_tags)

    # -- construction helpers -------------------------------------------------

    def _build_edges(self):
        tri = self.triangles
        # local edge i is opposite local vertex i and runs j -> k (CCW)
        j = tri[:, [1, 2, 0]]
        k = tri[:, [2, 0, 1]]
        lo = np.minimum(j, k).ravel()
        hi = np.maximum(j, k).ravel()
        keys = lo * len(self.vertices) + hi
        uniq, inverse, counts = np.unique(keys, return_inverse=True, return_counts=True)
        if np.any(counts > 2):
            raise MeshError("edge shared by more than two triangles")
        edges = np.column_stack([uniq // len(self.vertices), uniq % len(self.vertices)])
        tri_edges = inverse.reshape(-1, 3)
        signs = np.where(j < k, 1, -1).astype(np.int8)

        edge_tris = np.full((len(edges), 2), -1, dtype=np.int64)
        flat_t = np.repeat(np.arange(len(tri)), 3)
        order = np.argsort(inverse, kind="stable")
        first = np.ones(len(order), dtype=bool)
        first[1:] = inverse[order][1:] != inverse[order][:-1]
        edge_tris[inverse[order][first], 0] = flat_t[order][first]
        edge_tris[inverse[order][~first], 1] = flat_t[order][~first]

        self.edges = _frozen(edges, np.int64)
        self.tri_edges = _frozen(tri_edges, np.int64)
        self.edge_signs = _frozen(signs, np.int8)
        self.edge_triangles = _frozen(edge_tris, np.int64)
        ev = self.vertices[edges[:, 1]] - self.vertices[edges[:, 0]]
        self.edge_lengths = _frozen(np.hypot(ev[:, 0], ev[:, 1]), float)
        self.boundary_edges = _frozen(np.flatnonzero(counts == 1), np.int64)

    def _tag_boundary(self, dirichlet, boundary_tags):
        tags = np.empty(len(self.boundary_edges), dtype=object)
        for n, e in enumerate(self.boundary_edges):
            v0, v1 = self.edges[e]
            if boundary_tags is not None and (v0, v1) in boundary_tags:
                tags[n] = boundary_tags[(v0, v1)]
            elif boundary_tags is not None and (v1, v0) in boundary_tags:
                tags[n] = boundary_tags[(v1, v0)]
            elif dirichlet is None:
                tags[n] = DIRICHLET
            else:
                tags[n] = DIRICHLET if dirichlet(self.vertices[v0], self.vertices[v1]) else NEUMANN
        if not all(t in (DIRICHLET, NEUMANN) for t in tags):
            raise MeshError("boundary tags must be DIRICHLET or NEUMANN")
        self.boundary_tags = tags
        self.boundary_tags.setflags(write=False)
        is_dir = np.array([t == DIRICHLET for t in tags], dtype=bool)
        self.dirichlet_edges = _frozen(self.boundary_edges[is_dir], np.int64)
        self.neumann_edges = _frozen(self.boundary_edges[~is_dir], np.int64)
        self.dirichlet_vertices = _frozen(np.unique(self.edges[self.dirichlet_edges]), np.int64)
        self.boundary_vertices = _frozen(np.unique(self.edges[self.boundary_edges]), np.int64)

    # -- geometry -------------------------------------------------------------

    @property
    def n_vertices(self):
        return len(self.vertices)

    @property
    def n_triangles(self):
        return len(self.triangles)

    @property
    def n_edges(self):
        return len(self.edges)

    @property
    def h_T(self):
        return np.sqrt(self.areas)

    @property
    def h(self):
        """Mesh size ``max_T sqrt(|T|)``."""
        return float(np.sqrt(self.areas.max()))

    @property
    def area(self):
        return float(self.areas.sum())

    @property
    def centroids(self):
        return self.vertices[self.triangles].mean(axis=1)

    @property
    def edge_midpoints(self):
        return 0.5 * (self.vertices[self.edges[:, 0]] + self.vertices[self.edges[:, 1]])

    def barycentric_gradients(self):
        """Gradients of the three P1 hat functions on every triangle, (M, 3, 2)."""
        if not hasattr(self, "_grads"):
            P = self.vertices[self.triangles]
            # gradient of lambda_i is rot(P_k - P_j) / (2|T|) rotated inward
            e = P[:, [2, 0, 1]] - P[:, [1, 2, 0]]
            g = np.stack([-e[..., 1], e[..., 0]], axis=-1) / (2.0 * self.areas[:, None, None])
            g.setflags(write=False)
            self._grads = g
        return self._grads

    def check(self):
        """Raise :class:`MeshError` if any structural invariant fails."""
        if np.any(_signed_area2(self.vertices, self.triangles) <= 0):
            raise MeshError("non-positive signed area")
        counts = (self.edge_triangles >= 0).sum(axis=1)
        if np.any(counts < 1) or np.any(counts > 2):
            raise MeshError("edge incidence must be one or two triangles")
        if not np.array_equal(np.flatnonzero(counts == 1), self.boundary_edges):
            raise MeshError("boundary edge set inconsistent")
        if len(np.intersect1d(self.dirichlet_edges, self.neumann_edges)):
            raise MeshError("edge tagged both DIRICHLET and NEUMANN")
        if len(self.dirichlet_edges) + len(self.neumann_edges) != len(self.boundary_edges):
            raise MeshError("boundary markers do not cover the boundary")
        interior = np.flatnonzero(counts == 2)
        t0, t1 = self.edge_triangles[interior].T
        s0 = _sign_of(self, t0, interior)
        s1 = _sign_of(self, t1, interior)
        if np.any(s0 != -s1):
            raise MeshError("interior edge orientation signs are not opposite")
        return True

    def __repr__(self):
        return (
            f"Mesh({self.n_vertices} vertices, {self.n_triangles} triangles, "
            f"{len(self.dirichlet_edges)} Dirichlet / {len(self.neumann_edges)} Neumann edges, "
            f"h={self.h:.4g})"
        )


def _sign_of(mesh, tris, edges):
    local = np.argmax(mesh.tri_edges[tris] == edges[:, None], axis=1)
    return mesh.edge_signs[tris, local]


def _signed_area2(vertices, triangles):
    P = vertices[triangles]
    a = P[:, 1] - P[:, 0]
    b = P[:, 2] - P[:, 0]
    return a[:, 0] * b[:, 1] - a[:, 1] * b[:, 0]


def _boundary_tag_map(mesh):
    return {tuple(mesh.edges[e]): tag for e, tag in zip(mesh.boundary_edges, mesh.boundary_tags)}


# -- generators -----------------------------------------------------------------


def generate_unit_square(n):
    """Uniform ``2 n^2`` triangle mesh of the unit square, all boundary DIRICHLET."""
    if int(n) != n or n < 1:
        raise MeshError("n must be a positive integer")
    n = int(n)
    x = np.linspace(0.0, 1.0, n + 1)
    X, Y = np.meshgrid(x, x, indexing="xy")
    vertices = np.column_stack([X.ravel(), Y.ravel()])
    idx = np.arange((n + 1) ** 2).reshape(n + 1, n + 1)
    a = idx[:-1, :-1].ravel()
    b = idx[:-1, 1:].ravel()
    c = idx[1:, 1:].ravel()
    d = idx[1:, :-1].ravel()
    triangles = np.concatenate([np.column_stack([a, b, c]), np.column_stack([a, c, d])])
    return Mesh(vertices, triangles)


def _subdivide_triangles(corners, triangles, n):
    """Split each coarse triangle into n^2 congruent pieces and merge duplicates."""
    pts = []
    tris = []
    offset = 0
    for A, B, C in corners[triangles]:
        local = {}
        for i in range(n + 1):
            for j in range(n + 1 - i):
                local[(i, j)] = offset + len(local)
                pts.append(A + (B - A) * (i / n) + (C - A) * (j / n))
        for i in range(n):
            for j in range(n - i):
                tris.append((local[(i, j)], local[(i + 1, j)], local[(i, j + 1)]))
                if i + j < n - 1:
                    tris.append((local[(i + 1, j)], local[(i + 1, j + 1)], local[(i, j + 1)]))
        offset += len(local)
    pts = np.array(pts)
    key = np.round(pts * 2**30).astype(np.int64)
    _, first, inverse = np.unique(key, axis=0, return_index=True, return_inverse=True)
    order = np.argsort(first)
    rank = np.empty_like(order)
    rank[order] = np.arange(len(order))
    vertices = pts[first[order]]
    return vertices, rank[inverse.ravel()][np.array(tris)]


def _diamond_diameter():
    d = DIAMOND_CORNERS[:, None, :] - DIAMOND_CORNERS[None, :, :]
    return float(np.sqrt((d**2).sum(axis=-1)).max())


def generate_diamond(h_target):
    """Triangulate the truncated diamond with mesh size close to ``h_target``.

    The coarse mesh fans five triangles of area 1/2 around ``(1, 0)``; every
    fan triangle is split uniformly into ``n^2`` pieces with
    ``n = ceil(sqrt(1/2) / h_target)``.  Boundary edges on ``x1 = 0`` are
    DIRICHLET, the rest NEUMANN.
    """
    if not h_target > 0:
        raise MeshError("h_target must be positive")
    if h_target > _diamond_diameter():
        raise MeshError("h_target exceeds the domain diameter")
    n = max(1, math.ceil(math.sqrt(0.5) / h_target - 1e-12))
    corners = np.vstack([DIAMOND_CORNERS, DIAMOND_CENTER])
    fan = np.array([[5, i, (i + 1) % 5] for i in range(5)])
    vertices, triangles = _subdivide_triangles(corners, fan, n)
    return Mesh(vertices, triangles, dirichlet=on_cut_plane)


def diamond_with_triangles(n_triangles):
    """Diamond mesh whose triangle count is the closest available to ``n_triangles``."""
    n = max(1, round(math.sqrt(n_triangles / 5.0)))
    return generate_diamond(math.sqrt(0.5) / n)


def on_cut_plane(a, b, tol=1e-12):
    return abs(a[0]) < tol and abs(b[0]) < tol


def refine_uniform(mesh):
    """Red refinement: every triangle is split into four similar children."""
    nv = mesh.n_vertices
    mid = mesh.edge_midpoints
    vertices = np.vstack([mesh.vertices, mid])
    t = mesh.triangles
    e = mesh.tri_edges + nv  # midpoint opposite local vertex i
    v0, v1, v2 = t.T
    m0, m1, m2 = e.T
    children = np.concatenate(
        [
            np.column_stack([v0, m2, m1]),
            np.column_stack([v1, m0, m2]),
            np.column_stack([v2, m1, m0]),
            np.column_stack([m0, m1, m2]),
        ]
    )
    tags = {}
    for e_id, tag in zip(mesh.boundary_edges, mesh.boundary_tags):
        a, b = mesh.edges[e_id]
        m = nv + e_id
        tags[(min(a, m), max(a, m))] = tag
        tags[(min(b, m), max(b, m))] = tag
    return Mesh(vertices, children, boundary_tags=tags)


# -- plain-text serialization ---------------------------------------------------


def write_mesh(mesh, path):
    """Write the mesh in the plain-text format documented in docs/formats.md."""
    lines = [
        f"vertices {mesh.n_vertices}",
        f"triangles {mesh.n_triangles}",
        f"boundary {len(mesh.boundary_edges)}",
    ]
    lines += [f"{x!r} {y!r}" for x, y in mesh.vertices.tolist()]
    lines += [f"{a} {b} {c}" for a, b, c in mesh.triangles.tolist()]
    for e, tag in zip(mesh.boundary_edges, mesh.boundary_tags):
        a, b = mesh.edges[e]
        lines.append(f"edge {a} {b} {tag}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_mesh(path):
    with open(path) as fh:
        rows = [ln.split() for ln in fh if ln.strip()]
    try:
        header = {rows[i][0]: int(rows[i][1]) for i in range(3)}
        nv, nt, nb = header["vertices"], header["triangles"], header["boundary"]
    except (KeyError, IndexError, ValueError) as exc:
        raise MeshError(f"{path}: malformed header") from exc
    body = rows[3:]
    if len(body) != nv + nt + nb:
        raise MeshError(f"{path}: expected {nv + nt + nb} data rows, found {len(body)}")
    vertices = np.array(body[:nv], dtype=float)
    triangles = np.array(body[nv : nv + nt], dtype=np.int64)
    tags = {}
    for row in body[nv + nt :]:
        if row[0] != "edge" or len(row) != 4:
            raise MeshError(f"{path}: bad boundary row {' '.join(row)!r}")
        tags[(int(row[1]), int(row[2]))] = row[3]
    mesh = Mesh(vertices, triangles, boundary_tags=tags)
    if len(mesh.boundary_edges) != nb or len(tags) != nb:
        raise MeshError(f"{path}: boundary rows do not match the mesh boundary")
    return mesh
