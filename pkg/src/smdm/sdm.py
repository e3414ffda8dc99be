"""Statistical deformation model: displacement fields, SVD modes and motion statistics."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ModelError, SizeMismatchError
from .meshio import atomic_write_text, read_table, write_table
from .registration import DisplacementField


def displacement_fields(sequence) -> list:
    """Vertexwise displacement of every phase from the first one.

    Parameters
    ----------
    sequence : list of SurfaceMesh or RegisteredMesh
        Phases 1..T of one organ, all in correspondence.
    """
    meshes = [getattr(m, "mesh", m) for m in sequence]
    if not meshes:
        raise ModelError("empty sequence")
    base = meshes[0]
    out = []
    for m in meshes:
        if not base.same_topology(m):
            raise SizeMismatchError(f"mesh {m.name!r} does not share the phase-1 topology")
        out.append(DisplacementField(m.vertices - base.vertices, base.name))
    return out


@dataclass(frozen=True)
class DeformationModel:
    """Mean displacement plus principal deformation modes.

    Attributes
    ----------
    mean_displacement : ndarray (3n,)
    modes : ndarray (k, 3n)
        Orthonormal rows, ordered by decreasing eigenvalue.
    eigenvalues : ndarray (k,)
        Variance along each mode (mm^2).
    n_samples : int
    total_variance : float
        Trace of the sample covariance; denominator of explained variance.
    base_id : str
    """

    mean_displacement: np.ndarray
    modes: np.ndarray
    eigenvalues: np.ndarray
    n_samples: int
    total_variance: float
    base_id: str = ""
    meta: dict = field(default_factory=dict)

    @property
    def n_modes(self) -> int:
        return len(self.eigenvalues)

    @property
    def n_vertices(self) -> int:
        return len(self.mean_displacement) // 3

    def project(self, sample) -> np.ndarray:
        """Mode weights of a displacement sample (flattened or (n, 3))."""
        x = np.asarray(sample, dtype=float).reshape(-1)
        return self.modes @ (x - self.mean_displacement)

    # -- bundle: model.json (metadata + eigenvalues), mean.csv, modes.csv ---------------

    def save(self, directory) -> list:
        d = Path(directory)
        meta = {"n_samples": self.n_samples, "n_modes": self.n_modes,
                "n_vertices": self.n_vertices, "total_variance": self.total_variance,
                "eigenvalues": self.eigenvalues.tolist(), "base_id": self.base_id,
                "meta": self.meta}
        atomic_write_text(d / "model.json", json.dumps(meta, indent=2, sort_keys=True) + "\n")
        mean = self.mean_displacement.reshape(-1, 3)
        write_table(d / "mean.csv", ("vertex_id", "ux", "uy", "uz"),
                    [(i, *row) for i, row in enumerate(mean)])
        header = ("mode", "vertex_id", "ux", "uy", "uz")
        rows = [(k, i, *row) for k, mode in enumerate(self.modes)
                for i, row in enumerate(mode.reshape(-1, 3))]
        write_table(d / "modes.csv", header, rows)
        return [d / "model.json", d / "mean.csv", d / "modes.csv"]

    @classmethod
    def load(cls, directory) -> "DeformationModel":
        d = Path(directory)
        meta = json.loads((d / "model.json").read_text())
        n = meta["n_vertices"]
        _, mean_rows = read_table(d / "mean.csv")
        mean = np.array([[float(x) for x in r[1:]] for r in mean_rows]).reshape(-1)
        _, mode_rows = read_table(d / "modes.csv")
        modes = np.array([[float(x) for x in r[2:]] for r in mode_rows]).reshape(
            meta["n_modes"], 3 * n)
        return cls(mean, modes, np.array(meta["eigenvalues"], dtype=float), meta["n_samples"],
                   float(meta["total_variance"]), meta.get("base_id", ""), meta.get("meta", {}))


def _as_matrix(displacements) -> np.ndarray:
    rows = [np.asarray(getattr(d, "vectors", d), dtype=float).reshape(-1) for d in displacements]
    if not rows:
        raise ModelError("no displacement samples")
    size = {len(r) for r in rows}
    if len(size) != 1:
        raise SizeMismatchError(f"displacement samples have differing sizes {sorted(size)}")
    return np.vstack(rows)


def fit_deformation_modes(displacements, k: int | None = None,
                          base_id: str = "") -> DeformationModel:
    """Principal modes of a set of displacement samples via SVD.

    Parameters
    ----------
    displacements : sequence of DisplacementField or arrays
        One sample per row (flattened to 3n).
    k : int, optional
        Number of modes; defaults to ``samples - 1``.
    """
    x = _as_matrix(displacements)
    s = len(x)
    if s < 2:
        raise ModelError("at least two samples are needed to fit deformation modes")
    k = s - 1 if k is None else int(k)
    if k < 0 or k > s - 1:
        raise ModelError(f"k={k} exceeds samples - 1 = {s - 1}")
    mean = x.mean(axis=0)
    centered = x - mean
    _, sv, vt = np.linalg.svd(centered, full_matrices=False)
    eig = sv ** 2 / (s - 1)
    total = float(np.sum(centered ** 2) / (s - 1))
    return DeformationModel(mean, vt[:k].copy(), eig[:k].copy(), s, total, base_id)


def synthesize_deformation(model: DeformationModel, weights) -> DisplacementField:
    """``mean + sum_i w_i * mode_i`` as a per-vertex field."""
    w = np.atleast_1d(np.asarray(weights, dtype=float))
    if w.ndim != 1 or len(w) > model.n_modes:
        raise SizeMismatchError(f"{len(w)} weights for a model with {model.n_modes} modes")
    field_ = model.mean_displacement + w @ model.modes[: len(w)]
    return DisplacementField(field_.reshape(-1, 3), model.base_id)


def mode_extremes(model: DeformationModel, mode: int, sigmas: float = 2.0):
    """Fields at ``-/+ sigmas * sqrt(eigenvalue)`` along one mode."""
    w = np.zeros(mode + 1)
    w[mode] = sigmas * np.sqrt(model.eigenvalues[mode])
    return synthesize_deformation(model, -w), synthesize_deformation(model, w)


def explained_variance(model: DeformationModel, k: int) -> float:
    """Share of the total variance captured by the first ``k`` modes."""
    if k < 0 or k > model.n_modes:
        raise ModelError(f"k={k} outside [0, {model.n_modes}]")
    if model.total_variance <= 0:
        return 1.0
    return float(np.clip(model.eigenvalues[:k].sum() / model.total_variance, 0.0, 1.0))


def cohort_samples(displacements: np.ndarray, phases=None, per_patient: int | None = None):
    """Rows for mode fitting from a (P, T, n, 3) displacement array.

    By default one row per (patient, phase != 1). ``phases`` restricts the phases
    (1-based); ``per_patient`` picks one patient's phases only.
    """
    d = np.asarray(displacements, dtype=float)
    phases = list(range(2, d.shape[1] + 1)) if phases is None else list(phases)
    pats = range(d.shape[0]) if per_patient is None else [per_patient]
    return np.stack([d[p, t - 1].reshape(-1) for p in pats for t in phases])


def fit_cohort_modes(displacements: np.ndarray, k=None, phases=None,
                     base_id="") -> DeformationModel:
    return fit_deformation_modes(cohort_samples(displacements, phases), k, base_id)


def fit_patient_modes(displacements: np.ndarray, k=None, base_id="") -> list:
    """One model per patient over that patient's phases (2..T)."""
    return [fit_deformation_modes(cohort_samples(displacements, per_patient=p), k, base_id)
            for p in range(np.asarray(displacements).shape[0])]


@dataclass(frozen=True)
class MotionDynamics:
    """Per-organ, per-phase mean and population std of vertex displacement magnitude (mm)."""

    mean: dict
    std: dict

    def rows(self):
        for organ in self.mean:
            for t, (m, s) in enumerate(zip(self.mean[organ], self.std[organ]), start=1):
                yield organ, t, float(m), float(s)

    def to_csv(self, path):
        write_table(path, ("organ", "phase", "mean_mm", "std_mm"), list(self.rows()))


def motion_statistics(displacements: dict) -> MotionDynamics:
    """Pool displacement magnitudes over patients and vertices, per organ and phase.

    Parameters
    ----------
    displacements : dict organ -> array (P, T, n, 3)
    """
    if not displacements:
        raise ModelError("no organs given")
    mean, std = {}, {}
    for organ, d in displacements.items():
        d = np.asarray(d, dtype=float)
        if d.ndim != 4 or d.shape[0] == 0:
            raise ModelError(f"{organ}: expected a non-empty (P, T, n, 3) array")
        mag = np.linalg.norm(d, axis=3)
        per_phase = np.moveaxis(mag, 1, 0).reshape(d.shape[1], -1)
        mean[organ] = per_phase.mean(axis=1)
        std[organ] = per_phase.std(axis=1)
    return MotionDynamics(mean, std)
