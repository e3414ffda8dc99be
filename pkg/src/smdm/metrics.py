"""Surface similarity criteria: mean distance, Hausdorff, Laplacian of displacement, Dice."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import OpenMeshError, SizeMismatchError
from .geometry import closest_points
from .mesh import SurfaceMesh, laplacian_operator


@dataclass(frozen=True)
class MetricReport:
    mean_distance: float
    hausdorff: float
    laplacian_mean: float | None = None
    laplacian_max: float | None = None
    dice: float | None = None
    vertex_error: float | None = None
    provenance: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        return asdict(self)

    def rows(self, case, phase):
        """Rows of the ``case,phase,metric,value_mm_or_frac`` report schema."""
        out = []
        for key in ("mean_distance", "hausdorff", "laplacian_mean", "laplacian_max",
                    "dice", "vertex_error"):
            val = getattr(self, key)
            if val is not None:
                out.append((case, phase, key, float(val)))
        return out


REPORT_HEADER = ("case", "phase", "metric", "value_mm_or_frac")


def directed_distances(points, mesh: SurfaceMesh) -> np.ndarray:
    """Distance from each point to the surface of ``mesh``."""
    return closest_points(mesh, points)[1]


def mean_distance(a: SurfaceMesh, b: SurfaceMesh, pooled: bool = True) -> float:
    """Mean of the nearest bidirectional vertex-to-surface distances.

    With ``pooled=True`` all vertex distances of both directions enter one mean;
    otherwise the two directional means are averaged.
    """
    dab = directed_distances(a.vertices, b)
    dba = directed_distances(b.vertices, a)
    if pooled:
        return float((dab.sum() + dba.sum()) / (len(dab) + len(dba)))
    return float(0.5 * (dab.mean() + dba.mean()))


def surface_samples(mesh: SurfaceMesh) -> np.ndarray:
    """Vertices, edge midpoints and face barycenters."""
    v = mesh.vertices
    e = mesh.edges
    return np.concatenate([v, 0.5 * (v[e[:, 0]] + v[e[:, 1]]), v[mesh.triangles].mean(axis=1)])


def directed_hausdorff(a: SurfaceMesh, b: SurfaceMesh) -> float:
    """Max distance from samples of ``a`` to the surface of ``b``."""
    return float(directed_distances(surface_samples(a), b).max())


def hausdorff_distance(a: SurfaceMesh, b: SurfaceMesh) -> float:
    """Symmetric Hausdorff distance estimated from augmented surface samples.

    Underestimates the true surface Hausdorff distance by at most half the
    longest edge of either mesh.
    """
    return max(directed_hausdorff(a, b), directed_hausdorff(b, a))


def hausdorff_bound(a: SurfaceMesh, b: SurfaceMesh) -> float:
    return 0.5 * max(a.edge_lengths().max(), b.edge_lengths().max())


def laplacian_of_displacement(mesh: SurfaceMesh, displacement, weighting: str = "cotangent",
                              operator=None):
    """Mean and max over vertices of ``|L u_i|`` with the Laplacian of ``mesh``."""
    u = np.asarray(displacement, dtype=float)
    if u.shape != (mesh.n_vertices, 3):
        raise SizeMismatchError(
            f"displacement shape {u.shape} does not match mesh with {mesh.n_vertices} vertices"
        )
    op = operator if operator is not None else laplacian_operator(mesh, weighting)
    mag = np.linalg.norm(op.matrix @ u, axis=1)
    return float(mag.mean()), float(mag.max())


# Sub-voxel ray offsets (fractions of the voxel size); keep rays off mesh edges.
_RAY_OFFSET = (1.234567e-6, 2.345679e-6)


def _ray_hits(mesh: SurfaceMesh, xs, ys):
    """Crossings of vertical rays through column centers (xs x ys) with ``mesh``.

    Returns (column index, z) arrays; column index is ``ix * len(ys) + iy``.
    """
    tri = mesh.vertices[mesh.triangles]
    x0, dx = xs[0], xs[1] - xs[0] if len(xs) > 1 else 1.0
    y0, dy = ys[0], ys[1] - ys[0] if len(ys) > 1 else 1.0
    cols, zs = [], []
    lo = tri[:, :, :2].min(axis=1)
    hi = tri[:, :, :2].max(axis=1)
    ix0 = np.clip(np.ceil((lo[:, 0] - x0) / dx).astype(int), 0, len(xs))
    ix1 = np.clip(np.floor((hi[:, 0] - x0) / dx).astype(int), -1, len(xs) - 1)
    iy0 = np.clip(np.ceil((lo[:, 1] - y0) / dy).astype(int), 0, len(ys))
    iy1 = np.clip(np.floor((hi[:, 1] - y0) / dy).astype(int), -1, len(ys) - 1)
    for f in np.flatnonzero((ix1 >= ix0) & (iy1 >= iy0)):
        gx, gy = np.meshgrid(np.arange(ix0[f], ix1[f] + 1), np.arange(iy0[f], iy1[f] + 1),
                             indexing="ij")
        gx, gy = gx.ravel(), gy.ravel()
        px, py = xs[gx], ys[gy]
        (ax, ay, az), (bx, by, bz), (cx, cy, cz) = tri[f]
        det = (bx - ax) * (cy - ay) - (cx - ax) * (by - ay)
        if det == 0:
            continue
        l1 = ((px - ax) * (cy - ay) - (cx - ax) * (py - ay)) / det
        l2 = ((bx - ax) * (py - ay) - (px - ax) * (by - ay)) / det
        l0 = 1 - l1 - l2
        inside = (l0 >= 0) & (l1 >= 0) & (l2 >= 0)
        if inside.any():
            cols.append(gx[inside] * len(ys) + gy[inside])
            zs.append(l0[inside] * az + l1[inside] * bz + l2[inside] * cz)
    if not cols:
        return np.zeros(0, dtype=np.int64), np.zeros(0)
    return np.concatenate(cols), np.concatenate(zs)


def voxelize(mesh: SurfaceMesh, origin, voxel: float, shape) -> np.ndarray:
    """Boolean occupancy of voxel centers on a grid, by parity of ray crossings along z."""
    if not mesh.is_watertight():
        raise OpenMeshError(f"mesh {mesh.name!r} is not watertight")
    nx, ny, nz = shape
    ox, oy, oz = origin
    xs = ox + (np.arange(nx) + 0.5 + _RAY_OFFSET[0]) * voxel
    ys = oy + (np.arange(ny) + 0.5 + _RAY_OFFSET[1]) * voxel
    zs = oz + (np.arange(nz) + 0.5) * voxel
    col, hz = _ray_hits(mesh, xs, ys)
    occ = np.zeros((nx * ny, nz), dtype=bool)
    if col.size:
        order = np.lexsort((hz, col))
        col, hz = col[order], hz[order]
        starts = np.searchsorted(col, np.arange(nx * ny))
        ends = np.searchsorted(col, np.arange(nx * ny), side="right")
        for c in np.flatnonzero(ends > starts):
            below = np.searchsorted(hz[starts[c]:ends[c]], zs)
            occ[c] = (below % 2) == 1
    return occ.reshape(nx, ny, nz)


def dice_coefficient(a: SurfaceMesh, b: SurfaceMesh, voxel_mm: float = 1.0) -> float:
    """Volume overlap ``2|A&B| / (|A| + |B|)`` of two closed meshes on a shared voxel grid."""
    if voxel_mm <= 0:
        raise ValueError("voxel_mm must be positive")
    for m in (a, b):
        if not m.is_watertight():
            raise OpenMeshError(f"mesh {m.name!r} is not watertight")
    lo = np.minimum(a.vertices.min(axis=0), b.vertices.min(axis=0)) - voxel_mm
    hi = np.maximum(a.vertices.max(axis=0), b.vertices.max(axis=0)) + voxel_mm
    shape = tuple(int(np.ceil(s)) for s in (hi - lo) / voxel_mm)
    va = voxelize(a, lo, voxel_mm, shape)
    vb = voxelize(b, lo, voxel_mm, shape)
    total = int(va.sum()) + int(vb.sum())
    if total == 0:
        return 1.0
    return float(2 * np.logical_and(va, vb).sum() / total)


def vertex_error(pred: SurfaceMesh, truth: SurfaceMesh) -> float:
    """Mean distance between corresponding vertices (meshes must share topology)."""
    if pred.n_vertices != truth.n_vertices:
        raise SizeMismatchError("vertex_error needs meshes in correspondence")
    return float(np.linalg.norm(pred.vertices - truth.vertices, axis=1).mean())


def gtv_localization_error(pred: SurfaceMesh, truth: SurfaceMesh, voxel_mm: float = 1.0,
                           with_dice: bool = True, provenance: dict | None = None) -> MetricReport:
    """Bundle of all criteria between a predicted and a ground-truth target mesh.

    When the two meshes are in correspondence the Laplacian criteria are taken
    of the residual field ``pred - truth`` on the truth mesh.
    """
    md = mean_distance(pred, truth)
    hd = hausdorff_distance(pred, truth)
    lmean = lmax = verr = None
    if pred.same_topology(truth):
        lmean, lmax = laplacian_of_displacement(truth, pred.vertices - truth.vertices)
        verr = vertex_error(pred, truth)
    dsc = dice_coefficient(pred, truth, voxel_mm) if with_dice else None
    return MetricReport(md, hd, lmean, lmax, dsc, verr, dict(provenance or {}))
