"""Triangle surface meshes, one-ring topology and the discrete Laplace operator."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import sparse

from .errors import MeshError, NonManifoldEdgeError, SizeMismatchError

# Lower bound applied to every edge weight; keeps L^T L + delta*I well conditioned.
MIN_COTAN_WEIGHT = 1e-6


class SurfaceMesh:
    """Immutable triangle surface mesh, vertex positions in millimeters.

    Parameters
    ----------
    vertices : array_like, shape (n, 3)
    triangles : array_like of int, shape (m, 3)
    name : str, optional
        Organ tag or case id carried along for provenance.

    Raises
    ------
    MeshError
        Index out of range or a triangle repeating a vertex index.
    NonManifoldEdgeError
        An edge is shared by more than two triangles.
    """

    __slots__ = ("_vertices", "_triangles", "name", "_cache")

    def __init__(self, vertices, triangles, name: str = "", validate: bool = True):
        v = np.array(vertices, dtype=float)
        t = np.array(triangles, dtype=np.int64)
        if v.ndim != 2 or v.shape[1] != 3:
            raise MeshError(f"vertices must have shape (n, 3), got {v.shape}")
        if t.size == 0:
            t = t.reshape(0, 3)
        if t.ndim != 2 or t.shape[1] != 3:
            raise MeshError(f"triangles must have shape (m, 3), got {t.shape}")
        v.setflags(write=False)
        t.setflags(write=False)
        self._vertices = v
        self._triangles = t
        self.name = name
        self._cache = {}
        if validate:
            self._validate()

    def _validate(self):
        v, t = self._vertices, self._triangles
        if not np.all(np.isfinite(v)):
            raise MeshError("vertex coordinates must be finite")
        if t.size:
            if t.min() < 0 or t.max() >= len(v):
                raise MeshError(
                    f"triangle index out of range [0, {len(v)}): "
                    f"min={t.min()}, max={t.max()}"
                )
            rep = (t[:, 0] == t[:, 1]) | (t[:, 1] == t[:, 2]) | (t[:, 0] == t[:, 2])
            if rep.any():
                bad = int(np.flatnonzero(rep)[0])
                raise MeshError(f"degenerate triangle {bad}: {t[bad].tolist()}")
        edges, counts = self._edge_counts()
        over = counts > 2
        if over.any():
            k = int(np.flatnonzero(over)[0])
            raise NonManifoldEdgeError(edges[k], counts[k])

    @property
    def vertices(self) -> np.ndarray:
        return self._vertices

    @property
    def triangles(self) -> np.ndarray:
        return self._triangles

    @property
    def n_vertices(self) -> int:
        return len(self._vertices)

    @property
    def n_triangles(self) -> int:
        return len(self._triangles)

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"<SurfaceMesh{tag} V={self.n_vertices} F={self.n_triangles}>"

    def with_vertices(self, vertices, name: str | None = None) -> "SurfaceMesh":
        """Same connectivity, new positions (topology checks are skipped)."""
        vertices = np.asarray(vertices, dtype=float)
        if vertices.shape != self._vertices.shape:
            raise SizeMismatchError(
                f"expected vertices of shape {self._vertices.shape}, got {vertices.shape}"
            )
        out = SurfaceMesh(vertices, self._triangles, name=self.name if name is None else name,
                          validate=False)
        if not np.all(np.isfinite(out.vertices)):
            raise MeshError("vertex coordinates must be finite")
        # connectivity-only caches stay valid
        for key in ("edges", "edge_counts"):
            if key in self._cache:
                out._cache[key] = self._cache[key]
        return out

    def same_topology(self, other: "SurfaceMesh") -> bool:
        return (
            self.n_vertices == other.n_vertices
            and self._triangles.shape == other.triangles.shape
            and np.array_equal(self._triangles, other.triangles)
        )

    # -- connectivity --------------------------------------------------------------

    def _edge_counts(self):
        if "edge_counts" not in self._cache:
            t = self._triangles
            e = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
            e.sort(axis=1)
            edges, counts = np.unique(e, axis=0, return_counts=True)
            self._cache["edge_counts"] = (edges.reshape(-1, 2), counts)
        return self._cache["edge_counts"]

    @property
    def edges(self) -> np.ndarray:
        """Unique undirected edges as sorted index pairs, shape (e, 2)."""
        return self._edge_counts()[0]

    def is_watertight(self) -> bool:
        """Every edge is shared by exactly two triangles."""
        _, counts = self._edge_counts()
        return bool(counts.size) and bool(np.all(counts == 2))

    def boundary_edges(self) -> np.ndarray:
        edges, counts = self._edge_counts()
        return edges[counts == 1]

    # -- geometry ------------------------------------------------------------------

    def face_normals(self, normalize: bool = True) -> np.ndarray:
        v, t = self._vertices, self._triangles
        n = np.cross(v[t[:, 1]] - v[t[:, 0]], v[t[:, 2]] - v[t[:, 0]])
        if normalize:
            ln = np.linalg.norm(n, axis=1, keepdims=True)
            n = np.divide(n, ln, out=np.zeros_like(n), where=ln > 0)
        return n

    def face_areas(self) -> np.ndarray:
        return 0.5 * np.linalg.norm(self.face_normals(normalize=False), axis=1)

    def vertex_normals(self) -> np.ndarray:
        """Area-weighted vertex normals (unit length, zero for isolated vertices)."""
        fn = self.face_normals(normalize=False)
        vn = np.zeros_like(self._vertices)
        for k in range(3):
            np.add.at(vn, self._triangles[:, k], fn)
        ln = np.linalg.norm(vn, axis=1, keepdims=True)
        return np.divide(vn, ln, out=np.zeros_like(vn), where=ln > 0)

    def edge_lengths(self) -> np.ndarray:
        e = self.edges
        return np.linalg.norm(self._vertices[e[:, 0]] - self._vertices[e[:, 1]], axis=1)

    def mean_edge_length(self) -> float:
        return float(self.edge_lengths().mean())

    def centroid(self) -> np.ndarray:
        return self._vertices.mean(axis=0)

    def volume(self) -> float:
        """Signed enclosed volume (positive for outward-oriented closed meshes)."""
        v, t = self._vertices, self._triangles
        a, b, c = v[t[:, 0]], v[t[:, 1]], v[t[:, 2]]
        return float(np.einsum("ij,ij->i", a, np.cross(b, c)).sum() / 6.0)

    def translated(self, offset) -> "SurfaceMesh":
        return self.with_vertices(self._vertices + np.asarray(offset, dtype=float))

    def transformed(self, matrix, offset=(0.0, 0.0, 0.0)) -> "SurfaceMesh":
        m = np.asarray(matrix, dtype=float)
        return self.with_vertices(self._vertices @ m.T + np.asarray(offset, dtype=float))


@dataclass(frozen=True)
class MeshTopology:
    """One-ring adjacency plus per-edge weights.

    ``edges[k]`` is the sorted vertex pair of edge ``k`` and ``weights[k]`` its
    weight; ``edge_faces[k]`` lists the (one or two) incident triangles.
    """

    n_vertices: int
    edges: np.ndarray
    weights: np.ndarray
    edge_faces: tuple
    neighbors: tuple
    weighting: str = "cotangent"
    n_clamped: int = 0

    def weight(self, i: int, j: int) -> float:
        a, b = (i, j) if i < j else (j, i)
        k = np.flatnonzero((self.edges[:, 0] == a) & (self.edges[:, 1] == b))
        if not k.size:
            raise KeyError(f"({i}, {j}) is not an edge")
        return float(self.weights[k[0]])


@dataclass(frozen=True)
class LaplacianOperator:
    """Sparse symmetric n-by-n matrix with rows ``sum_j w_ij (v_i - v_j)``."""

    matrix: sparse.csr_matrix
    topology: MeshTopology = field(repr=False)

    @property
    def n(self) -> int:
        return self.matrix.shape[0]

    def toarray(self) -> np.ndarray:
        return self.matrix.toarray()


def cotangents(vertices: np.ndarray, triangles: np.ndarray) -> np.ndarray:
    """Cotangent of each corner angle, shape (m, 3); column k is the angle at corner k.

    Triangles whose area is negligible against their squared edge length get zero
    cotangents, so their edges fall back to the weight clamp.
    """
    v = vertices
    p0, p1, p2 = v[triangles[:, 0]], v[triangles[:, 1]], v[triangles[:, 2]]
    cots = np.zeros((len(triangles), 3))
    corners = ((p0, p1, p2), (p1, p2, p0), (p2, p0, p1))
    for k, (a, b, c) in enumerate(corners):
        e1, e2 = b - a, c - a
        dot = np.einsum("ij,ij->i", e1, e2)
        cross = np.linalg.norm(np.cross(e1, e2), axis=1)
        scale = np.maximum(np.einsum("ij,ij->i", e1, e1), np.einsum("ij,ij->i", e2, e2))
        ok = cross > 1e-12 * scale
        cots[ok, k] = dot[ok] / cross[ok]
    return cots


def build_topology(mesh: SurfaceMesh, weighting: str = "cotangent") -> MeshTopology:
    """Neighbor lists and edge weights for ``mesh``.

    Cotangent weights are ``(cot a + cot b) / 2`` over the angles opposite each
    edge (one term on boundary edges), clamped from below at ``MIN_COTAN_WEIGHT``.
    ``weighting="uniform"`` sets every weight to 1.
    """
    if weighting not in ("cotangent", "uniform"):
        raise ValueError(f"unknown weighting {weighting!r}")
    edges = mesh.edges
    n = mesh.n_vertices
    t = mesh.triangles
    m = len(t)

    # edge id of each triangle side; side k is opposite corner k
    sides = np.stack([t[:, [1, 2]], t[:, [2, 0]], t[:, [0, 1]]], axis=1).reshape(-1, 2)
    sides = np.sort(sides, axis=1)
    key = sides[:, 0] * n + sides[:, 1]
    ekey = edges[:, 0] * n + edges[:, 1]
    side_edge = np.searchsorted(ekey, key)

    face_of_side = np.repeat(np.arange(m), 3)
    order = np.argsort(side_edge, kind="stable")
    splits = np.searchsorted(side_edge[order], np.arange(1, len(edges)))
    edge_faces = tuple(tuple(int(f) for f in g) for g in np.split(face_of_side[order], splits))

    n_clamped = 0
    if weighting == "uniform":
        weights = np.ones(len(edges))
    else:
        cots = cotangents(mesh.vertices, t).reshape(-1)
        weights = 0.5 * np.bincount(side_edge, weights=cots, minlength=len(edges))
        low = weights < MIN_COTAN_WEIGHT
        n_clamped = int(low.sum())
        weights[low] = MIN_COTAN_WEIGHT

    nbrs = [[] for _ in range(n)]
    for a, b in edges.tolist():
        nbrs[a].append(b)
        nbrs[b].append(a)
    neighbors = tuple(np.array(sorted(x), dtype=np.int64) for x in nbrs)
    weights.setflags(write=False)
    return MeshTopology(
        n_vertices=n,
        edges=edges,
        weights=weights,
        edge_faces=edge_faces,
        neighbors=neighbors,
        weighting=weighting,
        n_clamped=n_clamped,
    )


def laplacian_operator(mesh_or_topology, weighting: str = "cotangent") -> LaplacianOperator:
    """Assemble the Laplacian of a mesh (or of an already built topology)."""
    if isinstance(mesh_or_topology, MeshTopology):
        topo = mesh_or_topology
    else:
        key = ("laplacian", weighting)
        cached = mesh_or_topology._cache.get(key)
        if cached is not None:
            return cached
        op = laplacian_operator(build_topology(mesh_or_topology, weighting))
        mesh_or_topology._cache[key] = op
        return op
    n = topo.n_vertices
    i, j = topo.edges[:, 0], topo.edges[:, 1]
    w = topo.weights
    upper = sparse.coo_matrix((-w, (i, j)), shape=(n, n))
    off = (upper + upper.T).tocsr()
    diag = -np.asarray(off.sum(axis=1)).ravel()
    mat = (off + sparse.diags(diag)).tocsr()
    mat.sort_indices()
    return LaplacianOperator(matrix=mat, topology=topo)


def apply_laplacian(op: LaplacianOperator, field) -> np.ndarray:
    """Apply ``op`` to each column of a per-vertex field of shape (n, 3)."""
    f = np.asarray(field, dtype=float)
    if f.shape[0] != op.n:
        raise SizeMismatchError(f"field has {f.shape[0]} rows, operator expects {op.n}")
    return op.matrix @ f


def triangle_pairs_intersect(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Vectorized test whether triangle ``p[k]`` crosses triangle ``q[k]``.

    Both arrays have shape (k, 3, 3). The test reports a hit when any edge of one
    triangle pierces the interior of the other, which covers every transversal
    intersection; touching and coplanar contacts are not reported.
    """
    hits = np.zeros(len(p), dtype=bool)
    for a, b in ((p, q), (q, p)):
        for s in range(3):
            o = a[:, s]
            d = a[:, (s + 1) % 3] - o
            hits |= _segment_hits_triangle(o, d, b)
    return hits


def _segment_hits_triangle(o, d, tri, eps=1e-12):
    e1 = tri[:, 1] - tri[:, 0]
    e2 = tri[:, 2] - tri[:, 0]
    h = np.cross(d, e2)
    det = np.einsum("ij,ij->i", e1, h)
    ok = np.abs(det) > eps * np.linalg.norm(e1, axis=1) * np.linalg.norm(e2, axis=1) * (
        np.linalg.norm(d, axis=1) + eps
    )
    inv = np.divide(1.0, det, out=np.zeros_like(det), where=ok)
    s = o - tri[:, 0]
    u = inv * np.einsum("ij,ij->i", s, h)
    qv = np.cross(s, e1)
    v = inv * np.einsum("ij,ij->i", d, qv)
    t = inv * np.einsum("ij,ij->i", e2, qv)
    tol = 1e-9
    return ok & (u > tol) & (v > tol) & (u + v < 1 - tol) & (t > tol) & (t < 1 - tol)


def find_self_intersections(mesh: SurfaceMesh, sample=None, seed: int = 0) -> np.ndarray:
    """Pairs of non-adjacent triangles that cross each other.

    Parameters
    ----------
    sample : int, optional
        Only test this many randomly chosen triangles against the whole mesh.
    """
    from scipy.spatial import cKDTree

    v, t = mesh.vertices, mesh.triangles
    tris = v[t]
    cen = tris.mean(axis=1)
    rad = np.linalg.norm(tris - cen[:, None], axis=2).max(axis=1)
    probe = np.arange(len(t))
    if sample is not None and sample < len(t):
        probe = np.sort(np.random.default_rng(seed).choice(len(t), sample, replace=False))
    tree = cKDTree(cen)
    pairs = []
    for f in probe:
        for g in tree.query_ball_point(cen[f], rad[f] + rad.max()):
            if g != f and not (set(t[f].tolist()) & set(t[g].tolist())):
                pairs.append((min(f, g), max(f, g)))
    if not pairs:
        return np.zeros((0, 2), dtype=np.int64)
    pairs = np.unique(np.array(pairs, dtype=np.int64), axis=0)
    hit = triangle_pairs_intersect(tris[pairs[:, 0]], tris[pairs[:, 1]])
    return pairs[hit]
