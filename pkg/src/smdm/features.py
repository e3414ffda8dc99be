"""Multi-organ shape features for target-displacement regression.

A feature vector for target vertex ``i`` concatenates, for every sampled organ
point ``j`` (organ blocks in the order ST, DU, LI, LK, RK), the relative position
``g_i - v_j`` at phase 1 followed by the point's displacement ``u_j`` from
phase 1 to the query phase.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cohort import ORGANS, TARGET, Cohort
from .errors import ConfigError, ModelError, SizeMismatchError

MODES = ("per_patient", "per_region")


def normalize_mode(mode: str) -> str:
    """Accept ``per_vertex`` as a synonym of ``per_region``."""
    m = {"per_vertex": "per_region"}.get(mode, mode)
    if m not in MODES:
        raise ConfigError(f"unknown learning mode {mode!r}; expected one of {MODES}")
    return m


@dataclass(frozen=True)
class SamplingPlan:
    """Sampled vertex ids per organ, applied identically to every patient."""

    organs: tuple
    ids: dict
    seed: int = 0

    def __post_init__(self):
        if not self.organs:
            raise ConfigError("a sampling plan needs at least one organ")
        bad = [o for o in self.organs if o not in ORGANS]
        if bad:
            raise ConfigError(f"unknown organs {bad}")
        ordered = tuple(o for o in ORGANS if o in self.organs)
        object.__setattr__(self, "organs", ordered)

    @property
    def n_points(self) -> int:
        return int(sum(len(self.ids[o]) for o in self.organs))

    @property
    def dim(self) -> int:
        return 6 * self.n_points

    def to_dict(self) -> dict:
        return {"organs": list(self.organs), "seed": self.seed,
                "ids": {o: [int(i) for i in self.ids[o]] for o in self.organs}}

    @classmethod
    def from_dict(cls, data) -> "SamplingPlan":
        ids = {o: np.asarray(v, dtype=np.int64) for o, v in data["ids"].items()}
        return cls(tuple(data["organs"]), ids, int(data.get("seed", 0)))


def sample_feature_points(vertex_counts: dict, points_per_organ, organs=None,
                          seed: int = 0) -> SamplingPlan:
    """Draw vertex ids uniformly without replacement from each organ.

    Parameters
    ----------
    vertex_counts : dict organ -> int, or organ -> SurfaceMesh
    points_per_organ : int or dict organ -> int
    """
    organs = tuple(o for o in ORGANS if o in (organs or vertex_counts))
    counts = {o: getattr(vertex_counts[o], "n_vertices", vertex_counts[o]) for o in organs}
    rng = np.random.default_rng(seed)
    ids = {}
    for o in organs:
        k = points_per_organ[o] if isinstance(points_per_organ, dict) else points_per_organ
        n = int(counts[o])
        if k > n or k < 1:
            raise ConfigError(f"{o}: cannot sample {k} of {n} vertices")
        ids[o] = np.arange(n) if k == n else np.sort(rng.choice(n, size=k, replace=False))
    return SamplingPlan(organs, ids, seed)


@dataclass(frozen=True)
class PhaseData:
    """Sampled organ points of every patient for one query phase.

    Attributes
    ----------
    points : ndarray (P, M, 3)
        Sampled organ positions at phase 1.
    motion : ndarray (P, M, 3)
        Their displacement from phase 1 to the query phase.
    target : ndarray (P, G, 3)
        Target (GTV) vertices at phase 1.
    target_motion : ndarray (P, G, 3)
        Target displacement to the query phase.
    """

    points: np.ndarray
    motion: np.ndarray
    target: np.ndarray
    target_motion: np.ndarray
    phase: int

    @property
    def n_patients(self) -> int:
        return self.points.shape[0]


def phase_data(cohort: Cohort, plan: SamplingPlan, phase: int, target: str = TARGET) -> PhaseData:
    missing = [o for o in plan.organs if o not in cohort.positions]
    if missing:
        raise ModelError(f"cohort lacks organs {missing} required by the sampling plan")
    if target not in cohort.positions:
        raise ModelError(f"cohort lacks target {target!r}")
    if not 1 <= phase <= cohort.n_phases:
        raise ModelError(f"phase {phase} outside 1..{cohort.n_phases}")
    pts, mot = [], []
    for o in plan.organs:
        pos = cohort.positions[o][:, :, plan.ids[o]]
        pts.append(pos[:, 0])
        mot.append(pos[:, phase - 1] - pos[:, 0])
    tgt = cohort.positions[target]
    return PhaseData(np.concatenate(pts, axis=1), np.concatenate(mot, axis=1),
                     tgt[:, 0].copy(), tgt[:, phase - 1] - tgt[:, 0], phase)


def build_feature_vector(target_vertex, points, motion) -> np.ndarray:
    """Feature vector of one target vertex: ``[g - v_j, u_j]`` for every sampled point."""
    g = np.asarray(target_vertex, dtype=float).reshape(3)
    v = np.asarray(points, dtype=float)
    u = np.asarray(motion, dtype=float)
    if v.shape != u.shape or v.ndim != 2 or v.shape[1] != 3:
        raise SizeMismatchError(f"points {v.shape} and motion {u.shape} must both be (M, 3)")
    return np.concatenate([g - v, u], axis=1).reshape(-1)


def feature_matrix(targets, points, motion) -> np.ndarray:
    """Feature vectors of many target vertices sharing one set of organ points."""
    g = np.asarray(targets, dtype=float)
    v = np.asarray(points, dtype=float)
    u = np.asarray(motion, dtype=float)
    rel = g[:, None, :] - v[None, :, :]
    mot = np.broadcast_to(u[None], rel.shape)
    return np.concatenate([rel, mot], axis=2).reshape(len(g), -1)


def assemble_training(data: PhaseData, mode: str, patients=None, vertices=None):
    """Training rows and targets.

    Returns
    -------
    per_region : (X, Y) with rows ordered patient-major over target vertices.
    per_patient : list over target vertices of (X_i, Y_i), one row per patient.
    """
    mode = normalize_mode(mode)
    pats = list(range(data.n_patients)) if patients is None else list(patients)
    if not pats:
        raise ModelError("no training patients")
    verts = np.arange(data.target.shape[1]) if vertices is None else np.asarray(vertices)
    blocks = [feature_matrix(data.target[p, verts], data.points[p], data.motion[p]) for p in pats]
    ys = [data.target_motion[p, verts] for p in pats]
    if mode == "per_region":
        return np.vstack(blocks), np.vstack(ys)
    return [(np.stack([b[k] for b in blocks]), np.stack([y[k] for y in ys]))
            for k in range(len(verts))]


class PairDistances:
    """Squared feature distances between (patient, target vertex) rows, without features.

    With ``a = g_pi - g_qk``, ``S1_pq = sum_j (v_pj - v_qj)`` and
    ``S2_pq = sum_j |v_pj - v_qj|^2 + |u_pj - u_qj|^2``,

        |x_pi - x_qk|^2 = M |a|^2 - 2 a . S1_pq + S2_pq,

    which costs O(P^2 M) once plus O(1) per pair instead of O(M) per pair.
    """

    def __init__(self, data: PhaseData):
        v, u = data.points, data.motion
        self.m = v.shape[1]
        self.g = data.target
        vs = v.sum(axis=1)
        self.s1 = vs[:, None, :] - vs[None, :, :]
        sq = (v ** 2).sum(axis=(1, 2)) + (u ** 2).sum(axis=(1, 2))
        cross = np.einsum("pjc,qjc->pq", v, v) + np.einsum("pjc,qjc->pq", u, u)
        self.s2 = np.maximum(sq[:, None] + sq[None, :] - 2.0 * cross, 0.0)

    def block(self, p: int, q: int, rows=None, cols=None) -> np.ndarray:
        """Squared distances between patient ``p``'s rows and patient ``q``'s rows."""
        gp = self.g[p] if rows is None else self.g[p, rows]
        gq = self.g[q] if cols is None else self.g[q, cols]
        a = gp[:, None, :] - gq[None, :, :]
        d2 = self.m * np.einsum("ijc,ijc->ij", a, a) - 2.0 * (a @ self.s1[p, q]) + self.s2[p, q]
        return np.maximum(d2, 0.0)

    def matrix(self, pats_a, pats_b, rows=None, cols=None) -> np.ndarray:
        """Full block matrix; ``rows``/``cols`` select target vertices per patient."""
        return np.block([[self.block(p, q, rows, cols) for q in pats_b] for p in pats_a])

    def same_vertex(self, pats_a, pats_b, vertex: int) -> np.ndarray:
        """Per-patient mode: distances between patients at one target vertex."""
        ga = self.g[list(pats_a), vertex]
        gb = self.g[list(pats_b), vertex]
        a = ga[:, None, :] - gb[None, :, :]
        s1 = self.s1[np.ix_(list(pats_a), list(pats_b))]
        s2 = self.s2[np.ix_(list(pats_a), list(pats_b))]
        d2 = self.m * np.einsum("ijc,ijc->ij", a, a) - 2.0 * np.einsum("ijc,ijc->ij", a, s1) + s2
        return np.maximum(d2, 0.0)

    def same_vertex_all(self, pats_a, pats_b) -> np.ndarray:
        """``same_vertex`` for every target vertex at once, shape (G, |a|, |b|)."""
        ga = np.moveaxis(self.g[list(pats_a)], 1, 0)
        gb = np.moveaxis(self.g[list(pats_b)], 1, 0)
        a = ga[:, :, None, :] - gb[:, None, :, :]
        s1 = self.s1[np.ix_(list(pats_a), list(pats_b))]
        s2 = self.s2[np.ix_(list(pats_a), list(pats_b))]
        d2 = self.m * np.einsum("gijc,gijc->gij", a, a) \
            - 2.0 * np.einsum("gijc,ijc->gij", a, s1) + s2[None]
        return np.maximum(d2, 0.0)
