"""Exact point-to-surface queries."""
from __future__ import annotations

import numpy as np
from scipy.spatial import cKDTree

from .errors import MeshError
from .mesh import SurfaceMesh


def _dot(a, b):
    return np.einsum("ij,ij->i", a, b)


def closest_points_on_triangles(p, a, b, c):
    """Closest point on triangle ``(a[k], b[k], c[k])`` to ``p[k]``, row by row.

    Voronoi-region classification (vertex, edge or face region) of each query
    point, after Ericson, *Real-Time Collision Detection*, 5.1.5.
    """
    p, a, b, c = (np.asarray(x, dtype=float) for x in (p, a, b, c))
    ab, ac = b - a, c - a
    ap, bp, cp = p - a, p - b, p - c
    d1, d2 = _dot(ab, ap), _dot(ac, ap)
    d3, d4 = _dot(ab, bp), _dot(ac, bp)
    d5, d6 = _dot(ab, cp), _dot(ac, cp)
    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2

    with np.errstate(divide="ignore", invalid="ignore"):
        denom = va + vb + vc
        out = a + ab * (vb / denom)[:, None] + ac * (vc / denom)[:, None]

        m = (va <= 0) & (d4 - d3 >= 0) & (d5 - d6 >= 0)
        w = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        out[m] = (b + (c - b) * w[:, None])[m]

        m = (vb <= 0) & (d2 >= 0) & (d6 <= 0)
        w = d2 / (d2 - d6)
        out[m] = (a + ac * w[:, None])[m]

        m = (d6 >= 0) & (d5 <= d6)
        out[m] = c[m]

        m = (vc <= 0) & (d1 >= 0) & (d3 <= 0)
        v = d1 / (d1 - d3)
        out[m] = (a + ab * v[:, None])[m]

        m = (d3 >= 0) & (d4 <= d3)
        out[m] = b[m]

        m = (d1 <= 0) & (d2 <= 0)
        out[m] = a[m]

    bad = ~np.all(np.isfinite(out), axis=1)
    if bad.any():
        # zero-area triangles: closest of the three edge segments
        out[bad] = _closest_on_edges(p[bad], a[bad], b[bad], c[bad])
    return out


def _closest_on_segment(p, a, b):
    d = b - a
    dd = _dot(d, d)
    t = np.divide(_dot(p - a, d), dd, out=np.zeros_like(dd), where=dd > 0)
    return a + d * np.clip(t, 0.0, 1.0)[:, None]


def _closest_on_edges(p, a, b, c):
    cands = np.stack([_closest_on_segment(p, a, b), _closest_on_segment(p, b, c),
                      _closest_on_segment(p, c, a)], axis=1)
    d = np.linalg.norm(cands - p[:, None], axis=2)
    return cands[np.arange(len(p)), d.argmin(axis=1)]


class TriangleIndex:
    """Spatial index over the triangles of a mesh for exact closest-point queries.

    Each triangle is bounded by a sphere around its centroid; the centroids live in
    a k-d tree. A query first evaluates the few nearest centroids to get an upper
    bound ``ub`` on the distance, then scans every triangle whose bounding sphere
    can reach within ``ub``. The pruning is conservative, so the result is the
    global minimum over all triangles.
    """

    def __init__(self, mesh: SurfaceMesh):
        if mesh.n_triangles == 0:
            raise MeshError("cannot index a mesh without triangles")
        self.mesh = mesh
        self.tris = mesh.vertices[mesh.triangles]
        self.centroids = self.tris.mean(axis=1)
        self.radius = np.linalg.norm(self.tris - self.centroids[:, None], axis=2).max(axis=1)
        self.rmax = float(self.radius.max())
        self.tree = cKDTree(self.centroids)
        scale = float(np.abs(mesh.vertices).max()) + 1.0
        self._slack = 1e-9 * scale
        self.k_wide = 24

    def _exact(self, points, tri_ids):
        t = self.tris[tri_ids]
        cp = closest_points_on_triangles(points, t[:, 0], t[:, 1], t[:, 2])
        return cp, np.linalg.norm(cp - points, axis=1)

    def query(self, points, k: int = 4):
        """Closest surface points for an (q, 3) array of queries.

        Returns
        -------
        closest : ndarray (q, 3)
        distance : ndarray (q,)
        triangle : ndarray of int (q,)
        """
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        q = len(pts)
        kk = min(k, len(self.centroids))
        _, near = self.tree.query(pts, kk)
        near = np.asarray(near).reshape(q, kk)
        _, d0 = self._exact(np.repeat(pts, kk, axis=0), near.reshape(-1))
        ub = d0.reshape(q, kk).min(axis=1)

        reach = ub + self.rmax + self._slack
        # fixed-size neighbor lists cover most queries; overflowing ones fall back to a ball query
        kw = min(self.k_wide, len(self.centroids))
        dw, nw = self.tree.query(pts, kw, distance_upper_bound=reach[:, None].max() if q else 0.0)
        dw = np.asarray(dw).reshape(q, kw)
        nw = np.asarray(nw).reshape(q, kw)
        inside = dw <= reach[:, None]
        overflow = inside[:, -1] & (kw < len(self.centroids))
        inside[overflow] = False
        qid = np.nonzero(inside)[0]
        cand = nw[inside]
        if overflow.any():
            rows = np.flatnonzero(overflow)
            lists = self.tree.query_ball_point(pts[rows], reach[rows])
            extra_q = np.concatenate([np.full(len(x), r) for r, x in zip(rows, lists)])
            extra_c = np.concatenate([np.asarray(x, dtype=np.int64) for x in lists])
            qid = np.concatenate([qid, extra_q.astype(np.int64)])
            cand = np.concatenate([cand, extra_c])
        # drop triangles whose bounding sphere is farther than the bound
        cd = np.linalg.norm(self.centroids[cand] - pts[qid], axis=1) - self.radius[cand]
        keep = cd <= ub[qid] + self._slack
        cand, qid = cand[keep], qid[keep]

        cp, d = self._exact(pts[qid], cand)
        order = np.lexsort((cand, d, qid))
        first = np.ones(len(order), dtype=bool)
        first[1:] = qid[order][1:] != qid[order][:-1]
        best = order[first]
        return cp[best], d[best], cand[best]


def triangle_index(mesh: SurfaceMesh) -> TriangleIndex:
    """Cached :class:`TriangleIndex` for ``mesh``."""
    idx = mesh._cache.get("tri_index")
    if idx is None:
        idx = TriangleIndex(mesh)
        mesh._cache["tri_index"] = idx
    return idx


def closest_points(mesh: SurfaceMesh, points):
    """Batch form of :func:`closest_point`."""
    return triangle_index(mesh).query(points)


def closest_point(mesh: SurfaceMesh, query):
    """Closest point on the surface of ``mesh`` to a single 3D ``query``.

    Returns ``(point, distance, triangle_id)``.
    """
    cp, d, f = closest_points(mesh, np.asarray(query, dtype=float).reshape(1, 3))
    return cp[0], float(d[0]), int(f[0])


def barycentric(points, a, b, c):
    """Barycentric coordinates of ``points`` in triangles ``(a, b, c)``, row by row."""
    v0, v1, v2 = b - a, c - a, points - a
    d00, d01, d11 = _dot(v0, v0), _dot(v0, v1), _dot(v1, v1)
    d20, d21 = _dot(v2, v0), _dot(v2, v1)
    den = d00 * d11 - d01 * d01
    with np.errstate(divide="ignore", invalid="ignore"):
        v = (d11 * d20 - d01 * d21) / den
        w = (d00 * d21 - d01 * d20) / den
    bad = ~np.isfinite(v) | ~np.isfinite(w)
    v[bad], w[bad] = 0.0, 0.0
    return np.stack([1.0 - v - w, v, w], axis=1)
