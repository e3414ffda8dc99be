"""Multi-patient, multi-phase organ meshes in per-organ correspondence."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import SizeMismatchError
from .mesh import SurfaceMesh
from .meshio import atomic_write_text, read_mesh, write_mesh

# feature organs in the fixed block order used by feature vectors
ORGANS = ("ST", "DU", "LI", "LK", "RK")
TARGET = "GTV"


def mesh_filename(organ: str, phase: int, ext: str = "ply") -> str:
    return f"{organ}_t{phase:02d}.{ext}"


@dataclass
class Cohort:
    """Organ meshes of every patient and phase, stored as position arrays.

    ``positions[organ]`` has shape (patients, phases, vertices, 3); all patients
    share ``triangles[organ]``. Phases are 1-based in the public API.
    """

    patient_ids: list
    n_phases: int
    triangles: dict
    positions: dict
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        for organ, pos in self.positions.items():
            pos = np.asarray(pos, dtype=float)
            if pos.ndim != 4 or pos.shape[:2] != (len(self.patient_ids), self.n_phases) \
                    or pos.shape[3] != 3:
                raise SizeMismatchError(f"positions[{organ}] has shape {pos.shape}")
            self.positions[organ] = pos

    @property
    def organs(self) -> tuple:
        return tuple(self.positions)

    @property
    def n_patients(self) -> int:
        return len(self.patient_ids)

    def mesh(self, patient: int, phase: int, organ: str) -> SurfaceMesh:
        pos = self.positions[organ][patient, phase - 1]
        return SurfaceMesh(pos, self.triangles[organ],
                           name=f"{self.patient_ids[patient]}_{organ}_t{phase:02d}", validate=False)

    def displacements(self, organ: str) -> np.ndarray:
        """Displacement from phase 1 for every patient/phase, shape (P, T, n, 3)."""
        pos = self.positions[organ]
        return pos - pos[:, :1]

    def subset(self, patients) -> "Cohort":
        idx = list(patients)
        return Cohort([self.patient_ids[i] for i in idx], self.n_phases, dict(self.triangles),
                      {o: p[idx] for o, p in self.positions.items()}, dict(self.meta))

    def with_organs(self, organs) -> "Cohort":
        return Cohort(list(self.patient_ids), self.n_phases,
                      {o: self.triangles[o] for o in organs},
                      {o: self.positions[o] for o in organs}, dict(self.meta))

    # -- disk layout: <root>/cohort.json + <root>/<patient>/<organ>_tNN.ply -------------

    def save(self, root) -> list:
        root = Path(root)
        written = []
        for p, pid in enumerate(self.patient_ids):
            for organ in self.organs:
                for t in range(1, self.n_phases + 1):
                    path = root / pid / mesh_filename(organ, t)
                    write_mesh(path, self.mesh(p, t, organ))
                    written.append(path)
        index = {"patients": list(self.patient_ids), "phases": self.n_phases,
                 "organs": list(self.organs), "meta": self.meta}
        atomic_write_text(root / "cohort.json", json.dumps(index, indent=2, sort_keys=True) + "\n")
        written.append(root / "cohort.json")
        return written

    @classmethod
    def load(cls, root, organs=None) -> "Cohort":
        root = Path(root)
        index = json.loads((root / "cohort.json").read_text())
        organs = list(organs or index["organs"])
        tris, pos = {}, {}
        for organ in organs:
            stack = []
            for pid in index["patients"]:
                row = []
                for t in range(1, index["phases"] + 1):
                    m = read_mesh(root / pid / mesh_filename(organ, t))
                    if organ not in tris:
                        tris[organ] = m.triangles
                    elif not np.array_equal(tris[organ], m.triangles):
                        raise SizeMismatchError(
                            f"{pid}/{organ} t={t} does not share the cohort topology")
                    row.append(m.vertices)
                stack.append(row)
            pos[organ] = np.array(stack)
        return cls(list(index["patients"]), int(index["phases"]), tris, pos,
                   dict(index.get("meta", {})))
