"""Template construction: surface resampling and mean-shape averaging."""
from __future__ import annotations

import heapq
import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import ResampleError, SizeMismatchError
from .geometry import closest_points
from .mesh import SurfaceMesh

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TemplateModel:
    """Mean template of one organ.

    Attributes
    ----------
    mesh : SurfaceMesh
        Averaged mesh; connectivity is that of the seed template.
    organ : str
    provenance : dict
        ``seed_case`` and ``averaged_over`` (list of case ids).
    """

    mesh: SurfaceMesh
    organ: str = ""
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.provenance.get("averaged_over", [None])) < 1:
            raise ValueError("a template must average at least one registered instance")


# -- quadric error decimation ---------------------------------------------------------------

def _face_quadrics(v, f):
    p0, p1, p2 = v[f[:, 0]], v[f[:, 1]], v[f[:, 2]]
    n = np.cross(p1 - p0, p2 - p0)
    area2 = np.linalg.norm(n, axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        unit = np.where(area2[:, None] > 0, n / area2[:, None], 0.0)
    plane = np.hstack([unit, -np.einsum("ij,ij->i", unit, p0)[:, None]])
    return 0.5 * area2[:, None, None] * plane[:, :, None] * plane[:, None, :]


def _boundary_quadrics(v, f, nv):
    """Penalty planes through boundary edges, perpendicular to the adjacent face."""
    q = np.zeros((nv, 4, 4))
    e = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
    key = np.sort(e, axis=1)
    _, inv, cnt = np.unique(key, axis=0, return_inverse=True, return_counts=True)
    inv = inv.ravel()
    border = np.flatnonzero(cnt[inv] == 1)
    if border.size == 0:
        return q
    fid = border % len(f)
    a, b = e[border, 0], e[border, 1]
    fn = np.cross(v[f[fid, 1]] - v[f[fid, 0]], v[f[fid, 2]] - v[f[fid, 0]])
    d = v[b] - v[a]
    n = np.cross(d, fn)
    nn = np.linalg.norm(n, axis=1)
    ok = nn > 0
    n = n[ok] / nn[ok][:, None]
    a, b, d = a[ok], b[ok], d[ok]
    plane = np.hstack([n, -np.einsum("ij,ij->i", n, v[a])[:, None]])
    w = 100.0 * np.einsum("ij,ij->i", d, d)
    qq = w[:, None, None] * plane[:, :, None] * plane[:, None, :]
    np.add.at(q, a, qq)
    np.add.at(q, b, qq)
    return q


class _Decimator:
    def __init__(self, mesh: SurfaceMesh):
        self.v = mesh.vertices.copy()
        self.faces = mesh.triangles.copy()
        nv = len(self.v)
        self.alive_f = np.ones(len(self.faces), dtype=bool)
        self.alive_v = np.ones(nv, dtype=bool)
        self.vf = [set() for _ in range(nv)]
        for k, tri in enumerate(self.faces):
            for i in tri:
                self.vf[i].add(k)
        fq = _face_quadrics(self.v, self.faces)
        self.q = np.zeros((nv, 4, 4))
        np.add.at(self.q, self.faces[:, 0], fq)
        np.add.at(self.q, self.faces[:, 1], fq)
        np.add.at(self.q, self.faces[:, 2], fq)
        self.q += _boundary_quadrics(self.v, self.faces, nv)
        self.stamp = np.zeros(nv, dtype=np.int64)
        self.heap = []
        self._tick = 0
        self.rejected = {}
        self.n_alive = nv
        self.n_faces = len(self.faces)
        for a, b in mesh.edges:
            self._push(int(a), int(b))

    def neighbors(self, i):
        out = set()
        for k in self.vf[i]:
            out.update(self.faces[k])
        out.discard(i)
        return out

    def _is_boundary_edge(self, a, b):
        return len(self.vf[a] & self.vf[b]) == 1

    def _is_boundary_vertex(self, a):
        return any(self._is_boundary_edge(a, b) for b in self.neighbors(a))

    def _optimal(self, a, b):
        q = self.q[a] + self.q[b]
        m = q.copy()
        m[3] = (0, 0, 0, 1)
        cands = [self.v[a], self.v[b], 0.5 * (self.v[a] + self.v[b])]
        if abs(np.linalg.det(m[:3, :3])) > 1e-12 * max(np.abs(m[:3, :3]).max() ** 3, 1e-300):
            cands.insert(0, np.linalg.solve(m, [0, 0, 0, 1.0])[:3])
        best, best_cost = None, np.inf
        for p in cands:
            h = np.append(p, 1.0)
            cost = float(h @ q @ h)
            if cost < best_cost - 1e-15:
                best, best_cost = p, cost
        return best, max(best_cost, 0.0)

    def _push(self, a, b):
        if a > b:
            a, b = b, a
        pos, cost = self._optimal(a, b)
        self._tick += 1
        heapq.heappush(self.heap, (cost, self._tick, a, b, int(self.stamp[a]),
                                   int(self.stamp[b]), pos))

    def _can_collapse(self, a, b, pos):
        shared = self.vf[a] & self.vf[b]
        if not shared:
            return False
        opp = set()
        for k in shared:
            opp.update(self.faces[k])
        opp -= {a, b}
        if self.neighbors(a) & self.neighbors(b) != opp:
            return False
        if len(shared) == 2 and self._is_boundary_vertex(a) and self._is_boundary_vertex(b):
            return False
        if self.n_faces - len(shared) < 4 and len(shared) == 2:
            return False
        # no face around a or b may flip or degenerate
        for k in (self.vf[a] | self.vf[b]) - shared:
            tri = self.faces[k]
            p = self.v[tri]
            n0 = np.cross(p[1] - p[0], p[2] - p[0])
            moved = p.copy()
            for j in range(3):
                if tri[j] in (a, b):
                    moved[j] = pos
            n1 = np.cross(moved[1] - moved[0], moved[2] - moved[0])
            l0, l1 = np.linalg.norm(n0), np.linalg.norm(n1)
            if l1 <= 1e-12 * max(l0, 1e-300) or n0 @ n1 < 0.2 * l0 * l1:
                return False
        return True

    def collapse_to(self, target):
        while self.n_alive > target:
            if not self.heap:
                raise ResampleError(
                    f"decimation stalled at {self.n_alive} vertices (target {target}) "
                    "without breaking manifoldness")
            cost, _, a, b, sa, sb, pos = heapq.heappop(self.heap)
            if not (self.alive_v[a] and self.alive_v[b]):
                continue
            if self.stamp[a] != sa or self.stamp[b] != sb:
                continue
            if not self._can_collapse(a, b, pos):
                # may become legal once the neighborhood changes
                self.rejected.setdefault(a, {})[b] = (cost, pos)
                self.rejected.setdefault(b, {})[a] = (cost, pos)
                continue
            shared = self.vf[a] & self.vf[b]
            for k in shared:
                self.alive_f[k] = False
                for i in self.faces[k]:
                    self.vf[i].discard(k)
            for k in self.vf[b]:
                tri = self.faces[k]
                tri[tri == b] = a
                self.vf[a].add(k)
            self.vf[b] = set()
            self.alive_v[b] = False
            self.v[a] = pos
            self.q[a] = self.q[a] + self.q[b]
            self.n_alive -= 1
            self.n_faces -= len(shared)
            self.stamp[a] += 1
            self.rejected.pop(a, None)
            self.rejected.pop(b, None)
            ring = self.neighbors(a)
            for nb in ring:
                self._push(a, nb)
            for nb in ring:
                for other, (c, p) in list(self.rejected.pop(nb, {}).items()):
                    if self.alive_v[other] and other != a:
                        lo, hi = min(nb, other), max(nb, other)
                        self._tick += 1
                        heapq.heappush(self.heap, (c, self._tick, lo, hi, int(self.stamp[lo]),
                                                   int(self.stamp[hi]), p))
                        self.rejected.get(other, {}).pop(nb, None)

    def result(self, name):
        keep = np.flatnonzero(self.alive_v)
        remap = -np.ones(len(self.v), dtype=np.int64)
        remap[keep] = np.arange(len(keep))
        faces = remap[self.faces[self.alive_f]]
        return SurfaceMesh(self.v[keep], faces, name=name)


def _relax(mesh: SurfaceMesh, source: SurfaceMesh, iterations: int, step: float = 0.5):
    """Tangential smoothing: move vertices toward the one-ring centroid within the
    tangent plane, then snap back onto ``source``. Steps that flip a face are undone."""
    v = mesh.vertices.copy()
    tris = mesh.triangles
    e = mesh.edges
    boundary = np.zeros(len(v), dtype=bool)
    boundary[mesh.boundary_edges().ravel()] = True
    deg = np.bincount(e.ravel(), minlength=len(v)).astype(float)
    for _ in range(iterations):
        cen = np.zeros_like(v)
        np.add.at(cen, e[:, 0], v[e[:, 1]])
        np.add.at(cen, e[:, 1], v[e[:, 0]])
        cen /= np.maximum(deg, 1.0)[:, None]
        nrm = mesh.with_vertices(v).vertex_normals()
        d = cen - v
        d -= np.einsum("ij,ij->i", d, nrm)[:, None] * nrm
        d[boundary] = 0.0
        cand = closest_points(source, v + step * d)[0]
        cand[boundary] = v[boundary]
        n_old = np.cross(v[tris[:, 1]] - v[tris[:, 0]], v[tris[:, 2]] - v[tris[:, 0]])
        n_new = np.cross(cand[tris[:, 1]] - cand[tris[:, 0]], cand[tris[:, 2]] - cand[tris[:, 0]])
        ok = np.einsum("ij,ij->i", n_old, n_new) > 0.2 * np.linalg.norm(n_old, axis=1) \
            * np.linalg.norm(n_new, axis=1)
        if not ok.all():
            bad = np.unique(tris[~ok].ravel())
            cand[bad] = v[bad]
        v = cand
    return v


def resample_surface(mesh: SurfaceMesh, target_vertices: int, relax_iterations: int = 5,
                     name: str | None = None) -> SurfaceMesh:
    """Resample ``mesh`` to exactly ``target_vertices`` vertices.

    Quadric-error edge collapses (with link-condition and normal-flip checks)
    reduce the vertex count, then a few rounds of tangential relaxation even
    out the triangle sizes while keeping vertices on the input surface.

    Raises
    ------
    ResampleError
        If the target is out of range or no manifold-preserving collapse remains.
    """
    target_vertices = int(target_vertices)
    n = mesh.n_vertices
    if target_vertices < 4 or target_vertices > n:
        raise ResampleError(f"target_vertices must be in [4, {n}], got {target_vertices}")
    name = mesh.name if name is None else name
    if target_vertices == n:
        return SurfaceMesh(mesh.vertices, mesh.triangles, name=name, validate=False)
    dec = _Decimator(mesh)
    dec.collapse_to(target_vertices)
    out = dec.result(name)
    if relax_iterations > 0:
        out = out.with_vertices(_relax(out, mesh, relax_iterations))
    log.debug("resampled %s: %d -> %d vertices, %d triangles", mesh.name, n,
              out.n_vertices, out.n_triangles)
    return out


# -- averaging ------------------------------------------------------------------------------

def build_mean_template(registered, organ: str = "", seed_case: str = "") -> TemplateModel:
    """Per-vertex arithmetic mean of registered meshes sharing one connectivity.

    Parameters
    ----------
    registered : sequence of RegisteredMesh or SurfaceMesh
    """
    meshes = [getattr(r, "mesh", r) for r in registered]
    if not meshes:
        raise ValueError("build_mean_template needs at least one registered mesh")
    first = meshes[0]
    for m in meshes[1:]:
        if not first.same_topology(m):
            raise SizeMismatchError(f"mesh {m.name!r} does not share the template topology")
    mean = np.mean(np.stack([m.vertices for m in meshes]), axis=0)
    ids = [getattr(r, "target_id", None) or getattr(r, "name", "") for r in registered]
    mesh = SurfaceMesh(mean, first.triangles, name=f"{organ or first.name}_template",
                       validate=False)
    return TemplateModel(mesh, organ, {"seed_case": seed_case, "averaged_over": ids})


def build_template(seed: SurfaceMesh, targets, target_vertices: int, params=None,
                   organ: str = "", affine_iters: int = 10) -> TemplateModel:
    """Resample ``seed``, register it onto every target (affine then LDSM) and average.

    One pass is made; the mean is not fed back for another round.
    """
    from .registration import RegistrationParams, affine_prealign, ldsm_register

    params = params or RegistrationParams()
    base = resample_surface(seed, target_vertices) if seed.n_vertices != target_vertices \
        else seed
    regs = []
    for tgt in targets:
        _, moved = affine_prealign(base, tgt, iters=affine_iters)
        moved = SurfaceMesh(moved.vertices, base.triangles, name=base.name, validate=False)
        regs.append(ldsm_register(moved, tgt, params))
    return build_mean_template(regs, organ=organ, seed_case=seed.name)
