"""Affine pre-alignment and Laplacian deformable mesh registration.

``ldsm_register`` deforms a template onto a target surface by repeating two
steps: every template vertex is constrained to its closest point on the target,
then the vertex positions are re-solved from a sparse quadratic that keeps the
template's Laplacian coordinates (shape term), keeps the Laplacian of the
displacement small (smoothness term, weight ``gamma_deform``) and pulls toward
the constraints (weight ``delta``). ``gamma_deform = 0`` is plain Laplacian
shape matching; there is no separate code path.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import splu

from .errors import MeshError, RegistrationError, SizeMismatchError
from .geometry import TriangleIndex, barycentric, triangle_index
from .mesh import LaplacianOperator, SurfaceMesh, laplacian_operator

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class RegistrationParams:
    """Knobs of :func:`ldsm_register`.

    ``shape_frame`` selects the shape-term targets: ``"rotated"`` compares the
    deformed Laplacian coordinates against the template's coordinates rotated by
    the best-fitting one-ring rotation (re-estimated each outer iteration);
    ``"fixed"`` compares against the template's coordinates as they are.
    """

    delta: float = 1.0
    gamma_deform: float = 1.0
    max_outer_iters: int = 50
    convergence_tol: float = 1e-3
    weighting: str = "cotangent"
    constraint_policy: str = "all_vertices"
    delta_ramp: bool = True
    shape_frame: str = "rotated"
    seed: int = 0

    def __post_init__(self):
        if not self.delta > 0:
            raise ValueError("delta must be > 0")
        if not self.gamma_deform >= 0:
            raise ValueError("gamma_deform must be >= 0")
        if int(self.max_outer_iters) < 1:
            raise ValueError("max_outer_iters must be >= 1")
        if not self.convergence_tol > 0:
            raise ValueError("convergence_tol must be > 0")
        if self.weighting not in ("cotangent", "uniform"):
            raise ValueError(f"unknown weighting {self.weighting!r}")
        if self.constraint_policy not in CONSTRAINT_POLICIES:
            raise ValueError(f"unknown constraint policy {self.constraint_policy!r}")
        if self.shape_frame not in ("rotated", "fixed"):
            raise ValueError(f"unknown shape_frame {self.shape_frame!r}")

    def delta_at(self, iteration: int) -> float:
        """Constraint weight at 1-based outer ``iteration``.

        Ramps linearly from ``delta / 10`` to ``delta`` over the first half of
        the iteration budget when ``delta_ramp`` is set.
        """
        ramp = self.ramp_length
        if ramp <= 1 or iteration >= ramp:
            return float(self.delta)
        frac = (iteration - 1) / (ramp - 1)
        return float(self.delta * (0.1 + 0.9 * frac))

    @property
    def ramp_length(self) -> int:
        return max(1, self.max_outer_iters // 2) if self.delta_ramp else 1

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class DisplacementField:
    vectors: np.ndarray
    base_mesh_id: str = ""

    def __post_init__(self):
        v = np.array(self.vectors, dtype=float)
        if v.ndim != 2 or v.shape[1] != 3:
            raise SizeMismatchError(f"displacement must be (n, 3), got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("displacement entries must be finite")
        v.setflags(write=False)
        object.__setattr__(self, "vectors", v)

    def __len__(self):
        return len(self.vectors)

    def magnitudes(self) -> np.ndarray:
        return np.linalg.norm(self.vectors, axis=1)


@dataclass(frozen=True)
class EnergyTerms:
    """Weighted energy contributions; ``total`` is their sum."""

    shape: float
    deform: float
    pos: float

    @property
    def total(self) -> float:
        return self.shape + self.deform + self.pos


@dataclass
class RegisteredMesh:
    mesh: SurfaceMesh
    template_id: str
    target_id: str
    displacement: DisplacementField
    energy_log: list = field(default_factory=list)
    converged: bool = False

    @property
    def iterations(self) -> int:
        return len(self.energy_log)


@dataclass(frozen=True)
class AffineTransform:
    matrix: np.ndarray
    offset: np.ndarray

    def apply(self, points) -> np.ndarray:
        return np.asarray(points, dtype=float) @ self.matrix.T + self.offset

    def as_3x4(self) -> np.ndarray:
        return np.hstack([self.matrix, self.offset[:, None]])

    @classmethod
    def identity(cls):
        return cls(np.eye(3), np.zeros(3))


# -- constraints -------------------------------------------------------------------

def _all_vertex_constraints(vertices: np.ndarray, index: TriangleIndex):
    cp, d, _ = index.query(vertices)
    return np.arange(len(vertices)), cp, d


# name -> f(current vertices, target index) -> (vertex ids, points, distances)
CONSTRAINT_POLICIES = {"all_vertices": _all_vertex_constraints}


# -- energy -------------------------------------------------------------------------

def local_rotations(op: LaplacianOperator, rest: np.ndarray, current: np.ndarray) -> np.ndarray:
    """Per-vertex rotation best mapping the rest one-ring edges onto the current ones."""
    topo = op.topology
    a, b = topo.edges[:, 0], topo.edges[:, 1]
    e0 = rest[a] - rest[b]
    e1 = current[a] - current[b]
    outer = topo.weights[:, None, None] * e0[:, :, None] * e1[:, None, :]
    cov = np.zeros((len(rest), 3, 3))
    np.add.at(cov, a, outer)
    np.add.at(cov, b, outer)
    u, _, vt = np.linalg.svd(cov)
    rot = np.transpose(vt, (0, 2, 1)) @ np.transpose(u, (0, 2, 1))
    flip = np.linalg.det(rot) < 0
    if flip.any():
        vt[flip, 2, :] *= -1
        rot[flip] = np.transpose(vt[flip], (0, 2, 1)) @ np.transpose(u[flip], (0, 2, 1))
    return rot


def shape_targets(op: LaplacianOperator, rest: np.ndarray, current: np.ndarray | None,
                  frame: str = "rotated") -> np.ndarray:
    """Target Laplacian coordinates for the shape term."""
    lap = op.matrix @ rest
    if frame == "fixed" or current is None:
        return lap
    rot = local_rotations(op, rest, current)
    return np.einsum("nij,nj->ni", rot, lap)


def evaluate_energy(template: SurfaceMesh, current, constraints, params: RegistrationParams,
                    delta: float | None = None, targets=None,
                    op: LaplacianOperator | None = None) -> EnergyTerms:
    """Energy terms of a candidate vertex set.

    Parameters
    ----------
    current : (n, 3) array
        Candidate vertex positions.
    constraints : (n, 3) array or (ids, points) pair
        Positional constraints; an (n, 3) array constrains every vertex.
    delta : float, optional
        Constraint weight; defaults to ``params.delta``.
    targets : (n, 3) array, optional
        Shape-term Laplacian targets; defaults to the template's own coordinates.

    Returns
    -------
    EnergyTerms
        ``shape = sum |L v' - target|^2``, ``deform = gamma * sum |L u|^2`` and
        ``pos = delta * sum |p - v'|^2``.
    """
    v0 = template.vertices
    cur = np.asarray(current, dtype=float)
    if cur.shape != v0.shape:
        raise SizeMismatchError(f"current vertices {cur.shape} vs template {v0.shape}")
    if isinstance(constraints, tuple):
        ids, pts = constraints
        ids = np.asarray(ids)
        pts = np.asarray(pts, dtype=float)
    else:
        pts = np.asarray(constraints, dtype=float)
        ids = np.arange(len(v0))
    if pts.shape != (len(ids), 3):
        raise SizeMismatchError(f"constraint points {pts.shape} vs {len(ids)} ids")
    op = op if op is not None else laplacian_operator(template, params.weighting)
    L = op.matrix
    tgt = L @ v0 if targets is None else np.asarray(targets, dtype=float)
    if tgt.shape != v0.shape:
        raise SizeMismatchError(f"shape targets {tgt.shape} vs template {v0.shape}")
    d = float(params.delta if delta is None else delta)
    e_shape = float(np.sum((L @ cur - tgt) ** 2))
    e_deform = float(params.gamma_deform * np.sum((L @ (cur - v0)) ** 2))
    e_pos = float(d * np.sum((pts - cur[ids]) ** 2))
    return EnergyTerms(e_shape, e_deform, e_pos)


# -- solver ---------------------------------------------------------------------------

class _SystemCache:
    """Solves ``((1 + gamma) L^T L + delta * S) x = rhs`` for a sequence of deltas.

    ``S`` is the diagonal selector of constrained vertices. When every vertex is
    constrained the eigendecomposition of ``L^T L`` (cached per operator) solves
    any delta exactly; otherwise each delta gets its own sparse LU factorization.
    """

    def __init__(self, op: LaplacianOperator, gamma, ids, n):
        L = op.matrix
        self.LtL = (L.T @ L).tocsc()
        self.scale = 1.0 + gamma
        self.full = len(ids) == n and np.array_equal(ids, np.arange(n))
        sel = np.zeros(n)
        sel[ids] = 1.0
        self.sel = sel
        self._lu = {}
        if self.full:
            eig = op.topology.__dict__.get("_ltl_eig")
            if eig is None:
                eig = np.linalg.eigh(self.LtL.toarray())
                object.__setattr__(op.topology, "_ltl_eig", eig)
            self.evals, self.evecs = eig

    def apply(self, delta, x):
        return self.scale * (self.LtL @ x) + delta * self.sel[:, None] * x

    def solve(self, delta, rhs):
        if self.full:
            denom = self.scale * np.maximum(self.evals, 0.0) + delta
            return self.evecs @ ((self.evecs.T @ rhs) / denom[:, None])
        lu = self._lu.get(delta)
        if lu is None:
            mat = (self.scale * self.LtL + sparse.diags(delta * self.sel)).tocsc()
            lu = splu(mat)
            self._lu[delta] = lu
        return lu.solve(rhs)


def ldsm_register(template: SurfaceMesh, target: SurfaceMesh,
                  params: RegistrationParams | None = None) -> RegisteredMesh:
    """Register ``template`` onto ``target``; result keeps the template's connectivity.

    Any affine pre-alignment must already be applied to ``template``.
    """
    params = params or RegistrationParams()
    v0 = template.vertices
    n = len(v0)
    op = laplacian_operator(template, params.weighting)
    L = op.matrix
    gamma = float(params.gamma_deform)
    index = triangle_index(target)
    policy = CONSTRAINT_POLICIES[params.constraint_policy]

    cur = v0.copy()
    ids, pts, dist = policy(cur, index)
    md_prev = float(dist.mean())
    cache = _SystemCache(op, gamma, ids, n)
    deform_rhs = gamma * (cache.LtL @ v0)
    energy_log = []
    converged = False

    for it in range(1, params.max_outer_iters + 1):
        delta = params.delta_at(it)
        tgt = shape_targets(op, v0, cur, params.shape_frame)
        rhs = L.T @ tgt + deform_rhs
        rhs[ids] += delta * pts
        try:
            new = cache.solve(delta, rhs)
        except RuntimeError as exc:
            raise RegistrationError(f"linear solve failed: {exc}", it) from exc
        if not np.all(np.isfinite(new)):
            raise RegistrationError("non-finite vertex positions", it)
        resid = np.linalg.norm(cache.apply(delta, new) - rhs) / max(np.linalg.norm(rhs), 1e-300)
        if resid > 1e-10:
            raise RegistrationError(f"linear solve residual {resid:.3e} above 1e-10", it)

        terms = evaluate_energy(template, new, (ids, pts), params, delta=delta, targets=tgt, op=op)
        if not np.isfinite(terms.total):
            raise RegistrationError("non-finite energy", it)
        cur = new
        ids, pts, dist = policy(cur, index)
        md = float(dist.mean())
        energy_log.append({
            "iteration": it, "delta": delta, "e_shape": terms.shape,
            "e_deform": terms.deform, "e_pos": terms.pos, "total": terms.total,
            "mean_distance": md,
        })
        change = abs(md - md_prev)
        md_prev = md
        if change < params.convergence_tol and (it >= params.ramp_length
                                                or md < params.convergence_tol):
            converged = True
            break

    mesh = template.with_vertices(cur)
    return RegisteredMesh(
        mesh=mesh,
        template_id=template.name,
        target_id=target.name,
        displacement=DisplacementField(cur - v0, template.name),
        energy_log=energy_log,
        converged=converged,
    )


# -- affine pre-alignment ----------------------------------------------------------------

def _affine_lstsq(src, dst, weights):
    x = np.hstack([src, np.ones((len(src), 1))])
    w = np.sqrt(weights)[:, None]
    sol, *_ = np.linalg.lstsq(x * w, dst * w, rcond=None)
    return sol[:3].T, sol[3]


def affine_prealign(source: SurfaceMesh, target: SurfaceMesh, iters: int = 30,
                    tol: float = 1e-12):
    """Affine ICP: alternate two-way closest-point matching and a least-squares affine fit.

    Source vertices are matched to their closest target points, and target
    vertices to their closest points on the transformed source (mapped back to
    source coordinates through barycentric coordinates), so the fit cannot
    collapse the source onto a patch of the target.

    Returns
    -------
    (AffineTransform, SurfaceMesh)
        The transform and the transformed source.
    """
    xs = source.vertices
    if len(xs) == 0 or target.n_vertices == 0:
        raise MeshError("affine_prealign needs non-empty meshes")
    centered = xs - xs.mean(axis=0)
    sv = np.linalg.svd(centered, compute_uv=False)
    if len(sv) < 3 or sv[2] <= 1e-9 * max(sv[0], 1e-300):
        raise RegistrationError("singular affine normal system: source vertices are coplanar")

    tindex = triangle_index(target)
    ys = target.vertices
    a = np.eye(3)
    b = target.centroid() - source.centroid()
    src_tris = source.triangles
    w = np.concatenate([np.full(len(xs), 0.5 / len(xs)), np.full(len(ys), 0.5 / len(ys))])

    for _ in range(int(iters)):
        moved = xs @ a.T + b
        fwd_pts = tindex.query(moved)[0]
        cur_src = source.with_vertices(moved)
        bp, _, tri = TriangleIndex(cur_src).query(ys)
        corners = moved[src_tris[tri]]
        bc = barycentric(bp, corners[:, 0], corners[:, 1], corners[:, 2])
        back_src = np.einsum("ki,kij->kj", bc, xs[src_tris[tri]])
        a_new, b_new = _affine_lstsq(np.vstack([xs, back_src]), np.vstack([fwd_pts, ys]), w)
        step = np.abs(a_new - a).max() + np.abs(b_new - b).max()
        a, b = a_new, b_new
        if step < tol:
            break
    xf = AffineTransform(a, b)
    moved = source.with_vertices(xf.apply(xs))
    # never return something worse than the untouched source
    from .metrics import mean_distance
    if mean_distance(moved, target) > mean_distance(source, target):
        return AffineTransform.identity(), source
    return xf, moved
