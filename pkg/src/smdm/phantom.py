"""Synthetic respiratory-motion cohort with analytic ground truth.

Every organ is a bumpy ellipsoid given by an analytic map from the unit sphere,
so any triangulation of the sphere yields an exact sample of the same surface.
Per-phase motion is an analytic displacement field defined over all of space:
translation along an organ-specific direction, a rotation about the organ
center, and a Gaussian bulge, all scaled by a breathing profile that is 0 at
phase 1 (end-inhale) and 1 at the middle phase (end-exhale). The tumor target
moves with a weighted blend of the neighboring organ fields plus its own bulge.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .cohort import ORGANS, TARGET, Cohort
from .errors import ConfigError
from .mesh import SurfaceMesh
from .meshio import atomic_write_text, write_mesh, write_vector_csv
from .shapes import fibonacci_sphere

# center (mm), semi-axes (mm), in-patient frame: +x patient left, +y posterior, +z superior
ANATOMY = {
    "LI": ((-75.0, 5.0, 55.0), (80.0, 65.0, 55.0)),
    "ST": ((55.0, -25.0, 45.0), (40.0, 30.0, 50.0)),
    "DU": ((-25.0, 0.0, -15.0), (35.0, 15.0, 16.0)),
    "LK": ((75.0, 55.0, 0.0), (25.0, 20.0, 48.0)),
    "RK": ((-70.0, 60.0, -15.0), (25.0, 20.0, 48.0)),
    "GTV": ((5.0, 15.0, 5.0), (15.0, 12.0, 12.0)),
}

# end-exhale mean displacement magnitudes (mm)
NOMINAL_AMPLITUDE = {"LI": 12.1, "ST": 10.3, "DU": 10.2, "LK": 11.4, "RK": 13.8}

# dominant motion direction per organ (normalized at use); mostly cranio-caudal
MOTION_DIRECTION = {
    "LI": (0.05, -0.25, 1.0), "ST": (-0.1, -0.3, 1.0), "DU": (0.05, -0.2, 1.0),
    "LK": (0.0, 0.15, 1.0), "RK": (0.0, 0.15, 1.0),
}


@dataclass(frozen=True)
class PhantomSpec:
    n_patients: int = 25
    n_phases: int = 10
    organ_vertices: int = 400
    gtv_vertices: int = 200
    seed: int = 0
    motion_family: str = "full"
    motion_scale: float = 1.0
    amplitude_cv: float = 0.45
    organ_amplitude_cv: float = 0.3
    rotation_sd_deg: float = 4.0
    bulge_sd_mm: float = 2.0
    shape_cv: float = 0.08
    center_sd_mm: float = 5.0
    bump_sd: float = 0.06
    gtv_amplitude: float = 7.6
    gtv_bulge_sd_mm: float = 1.0
    gtv_weights: dict = field(default_factory=lambda: {"ST": 0.4, "DU": 0.4, "LK": 0.2})
    gtv_coupling: str = "field"
    wall_width_mm: float = 15.0
    local_motion_sd_mm: float = 0.0
    local_motion_count: int = 12

    def __post_init__(self):
        if self.n_patients < 1:
            raise ConfigError("n_patients must be >= 1")
        if self.n_phases < 2:
            raise ConfigError("n_phases must be >= 2")
        if self.organ_vertices < 4 or self.gtv_vertices < 4:
            raise ConfigError("meshes need at least 4 vertices")
        if self.gtv_coupling not in ("field", "wall"):
            raise ConfigError(f"unknown gtv_coupling {self.gtv_coupling!r}")
        if self.wall_width_mm <= 0:
            raise ConfigError("wall_width_mm must be > 0")
        if self.motion_family not in ("full", "two_mode"):
            raise ConfigError(f"unknown motion_family {self.motion_family!r}")
        for name in ("motion_scale", "amplitude_cv", "organ_amplitude_cv", "rotation_sd_deg",
                     "bulge_sd_mm", "shape_cv", "center_sd_mm", "bump_sd", "gtv_amplitude",
                     "gtv_bulge_sd_mm", "local_motion_sd_mm", "local_motion_count"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        bad = set(self.gtv_weights) - set(ORGANS)
        if bad:
            raise ConfigError(f"gtv_weights has unknown organs {sorted(bad)}")
        if any(w < 0 for w in self.gtv_weights.values()) or not sum(self.gtv_weights.values()):
            raise ConfigError("gtv_weights must be non-negative with a positive sum")

    @classmethod
    def from_dict(cls, data: dict) -> "PhantomSpec":
        known = {f.name for f in fields(cls)}
        extra = set(data) - known
        if extra:
            raise ConfigError(f"unknown phantom spec keys: {sorted(extra)}")
        return cls(**data)

    def to_dict(self) -> dict:
        return asdict(self)


def breathing_profile(phase, n_phases: int):
    """0 at phase 1, 1 at phase ``n_phases // 2 + 1``; cosine in between."""
    t = np.asarray(phase, dtype=float)
    return 0.5 * (1.0 - np.cos(2.0 * np.pi * (t - 1.0) / n_phases))


def _rotation(axis, angle):
    axis = np.asarray(axis, dtype=float)
    axis = axis / np.linalg.norm(axis)
    k = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    return np.eye(3) + np.sin(angle) * k + (1 - np.cos(angle)) * (k @ k)


def _unit(v):
    v = np.asarray(v, dtype=float)
    return v / np.linalg.norm(v)


@dataclass
class OrganInstance:
    """Patient-specific geometry and motion parameters of one organ."""

    center: np.ndarray
    axes: np.ndarray
    bump_dirs: np.ndarray
    bump_amps: np.ndarray
    amplitude: float
    direction: np.ndarray
    rot_axis: np.ndarray
    rot_angle: float
    bulge_center: np.ndarray
    bulge_dir: np.ndarray
    bulge_amp: float
    bulge_width: float
    mode_weights: tuple = (0.0, 0.0)
    local_centers: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    local_vectors: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    local_width: float = 1.0

    def surface(self, dirs: np.ndarray) -> np.ndarray:
        """Map unit directions onto this organ's phase-1 surface."""
        cosang = dirs @ self.bump_dirs.T
        radial = 1.0 + (self.bump_amps * np.exp(-(1.0 - cosang) / 0.15)).sum(axis=1)
        return self.center + dirs * radial[:, None] * self.axes

    def to_json(self) -> dict:
        out = {}
        for k, v in asdict(self).items():
            out[k] = np.asarray(v).tolist() if isinstance(v, (np.ndarray, tuple)) else v
        return out


@dataclass
class PatientPhantom:
    patient_id: str
    organs: dict
    spec: PhantomSpec

    def organ_field(self, organ: str, points, phase) -> np.ndarray:
        """Displacement of ``organ``'s motion field at arbitrary ``points`` for ``phase``."""
        spec = self.spec
        o = self.organs[organ]
        x = np.asarray(points, dtype=float)
        s = float(breathing_profile(phase, spec.n_phases)) * spec.motion_scale
        if s == 0.0:
            return np.zeros_like(x)
        if spec.motion_family == "two_mode":
            a, b = o.mode_weights
            trans = a * NOMINAL_AMPLITUDE[organ] * _unit(MOTION_DIRECTION[organ])
            rot = b * np.deg2rad(spec.rotation_sd_deg) * np.cross(o.rot_axis, x - o.center)
            return s * (trans + rot)
        out = np.broadcast_to(s * o.amplitude * o.direction, x.shape).copy()
        out += (x - o.center) @ (_rotation(o.rot_axis, s * o.rot_angle) - np.eye(3)).T
        g = np.exp(-np.sum((x - o.bulge_center) ** 2, axis=1) / (2 * o.bulge_width ** 2))
        out += s * o.bulge_amp * g[:, None] * o.bulge_dir
        if len(o.local_centers):
            d2 = np.sum((x[:, None, :] - o.local_centers[None]) ** 2, axis=2)
            out += s * np.exp(-d2 / (2 * o.local_width ** 2)) @ o.local_vectors
        return out

    def field(self, organ: str, points, phase) -> np.ndarray:
        if organ != TARGET:
            return self.organ_field(organ, points, phase)
        spec = self.spec
        x = np.asarray(points, dtype=float)
        wsum = sum(spec.gtv_weights.values())
        nominal = sum(w * NOMINAL_AMPLITUDE[o] for o, w in spec.gtv_weights.items()) / wsum
        gain = spec.gtv_amplitude / nominal
        out = np.zeros_like(x)
        for o, w in spec.gtv_weights.items():
            if spec.gtv_coupling == "wall":
                contrib = self._wall_motion(o, x, phase)
            else:
                contrib = self.organ_field(o, x, phase)
            out += (gain * w / wsum) * contrib
        own = self.organs[TARGET]
        s = float(breathing_profile(phase, spec.n_phases)) * spec.motion_scale
        g = np.exp(-np.sum((x - own.bulge_center) ** 2, axis=1) / (2 * own.bulge_width ** 2))
        out += s * own.bulge_amp * g[:, None] * own.bulge_dir
        return out

    def _wall_motion(self, organ: str, x, phase) -> np.ndarray:
        """Gaussian-weighted average motion of the organ wall around each point."""
        wall = self.organs[organ].surface(_WALL_DIRS)
        d2 = np.sum((x[:, None, :] - wall[None, :, :]) ** 2, axis=2)
        logw = -d2 / (2.0 * self.spec.wall_width_mm ** 2)
        w = np.exp(logw - logw.max(axis=1, keepdims=True))
        w /= w.sum(axis=1, keepdims=True)
        return w @ self.organ_field(organ, wall, phase)

    def surface(self, organ: str, dirs, phase: int) -> np.ndarray:
        base = self.organs[organ].surface(np.asarray(dirs, dtype=float))
        return base + self.field(organ, base, phase)


def _draw_local(rng, organ: str, spec: PhantomSpec, inst: OrganInstance) -> None:
    """Small wall dents that move with breathing but carry no target information."""
    n = spec.local_motion_count if spec.local_motion_sd_mm > 0 else 0
    dirs = rng.normal(size=(n, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    inst.local_centers = inst.surface(dirs) if n else np.zeros((0, 3))
    inst.local_vectors = rng.normal(0.0, spec.local_motion_sd_mm, (n, 3))
    inst.local_width = 0.15 * float(np.mean(inst.axes))


def _draw_organ(rng, organ: str, spec: PhantomSpec, breath: float, mode_weights) -> OrganInstance:
    center, axes = ANATOMY[organ]
    center = np.asarray(center) + rng.normal(0.0, spec.center_sd_mm, 3)
    axes = np.asarray(axes) * np.clip(1.0 + rng.normal(0.0, spec.shape_cv, 3), 0.6, 1.4)
    bump_dirs = np.array([_unit(rng.normal(size=3)) for _ in range(3)])
    bump_amps = np.clip(rng.normal(0.0, spec.bump_sd, 3), -0.2, 0.2)
    is_target = organ == TARGET
    nominal = 0.0 if is_target else NOMINAL_AMPLITUDE[organ]
    amp = nominal * breath * max(0.1, 1.0 + rng.normal(0.0, spec.organ_amplitude_cv))
    direction = _unit(MOTION_DIRECTION.get(organ, (0.0, 0.0, 1.0)) + rng.normal(0.0, 0.1, 3))
    rot_axis = _unit(rng.normal(size=3))
    rot_angle = np.deg2rad(rng.normal(0.0, spec.rotation_sd_deg))
    bdir = _unit(rng.normal(size=3))
    bulge_center = center + 0.9 * axes * bdir
    bulge_width = 0.5 * float(np.mean(axes))
    bulge_sd = spec.gtv_bulge_sd_mm if is_target else spec.bulge_sd_mm
    bulge_amp = rng.normal(0.0, bulge_sd)
    return OrganInstance(center, axes, bump_dirs, bump_amps, float(amp), direction, rot_axis,
                         float(rot_angle), bulge_center, _unit(rng.normal(size=3)),
                         float(bulge_amp), bulge_width, tuple(float(m) for m in mode_weights))


def draw_patients(spec: PhantomSpec) -> list:
    """Patient parameter sets; each patient has its own RNG stream from the master seed."""
    streams = np.random.SeedSequence(spec.seed).spawn(spec.n_patients)
    patients = []
    for k, ss in enumerate(streams):
        rng = np.random.default_rng(ss)
        breath = float(np.clip(rng.normal(1.0, spec.amplitude_cv), 0.2, 2.5))
        modes = (breath, float(rng.normal(0.0, 1.0)))
        if spec.motion_family == "two_mode":
            # shared anatomy: patients differ only in the two motion weights
            geo = np.random.default_rng([spec.seed, 2])
            organs = {o: _draw_organ(geo, o, spec, 1.0, modes) for o in ORGANS + (TARGET,)}
        else:
            organs = {o: _draw_organ(rng, o, spec, breath, modes) for o in ORGANS + (TARGET,)}
            # separate stream so enabling local motion leaves every other draw unchanged
            local = np.random.default_rng([spec.seed, 3, k])
            for o in ORGANS:
                _draw_local(local, o, spec, organs[o])
        patients.append(PatientPhantom(f"P{k:02d}", organs, spec))
    return patients


def sphere_directions(n: int, twist: float = 0.0):
    m = fibonacci_sphere(n, twist)
    return m.vertices, m.triangles


_WALL_DIRS = fibonacci_sphere(2000).vertices


@dataclass
class PhantomCohort(Cohort):
    """Cohort with the analytic generator kept alongside for ground truth and resampling."""

    spec: PhantomSpec | None = None
    patients: list = field(default_factory=list)

    def ground_truth(self, organ: str) -> np.ndarray:
        """Analytic displacement from phase 1, shape (P, T, n, 3)."""
        base = self.positions[organ][:, 0]
        out = np.zeros_like(self.positions[organ])
        for p, pat in enumerate(self.patients):
            for t in range(1, self.n_phases + 1):
                out[p, t - 1] = pat.field(organ, base[p], t)
        return out

    def manifest(self) -> dict:
        return {
            "spec": self.spec.to_dict(),
            "patients": {pat.patient_id: {o: inst.to_json() for o, inst in pat.organs.items()}
                         for pat in self.patients},
            "organs": list(self.organs),
            "phases": self.n_phases,
        }


def generate_cohort(spec: PhantomSpec) -> PhantomCohort:
    patients = draw_patients(spec)
    tris, pos = {}, {}
    for organ in ORGANS + (TARGET,):
        n = spec.gtv_vertices if organ == TARGET else spec.organ_vertices
        dirs, tris[organ] = sphere_directions(n)
        arr = np.zeros((spec.n_patients, spec.n_phases, n, 3))
        for p, pat in enumerate(patients):
            base = pat.organs[organ].surface(dirs)
            for t in range(1, spec.n_phases + 1):
                arr[p, t - 1] = base + pat.field(organ, base, t)
        pos[organ] = arr
    return PhantomCohort([p.patient_id for p in patients], spec.n_phases, tris, pos,
                         {"source": "phantom", "seed": spec.seed}, spec=spec, patients=patients)


@dataclass(frozen=True)
class CorruptionParams:
    """``resample_factor`` > 0 re-triangulates each target with about that many
    times the template's vertex count; 0 keeps the original triangulation."""

    resample_factor: float = 1.6
    jitter_sigma: float = 0.1
    seed: int = 0


def corrupt_for_registration(cohort: PhantomCohort, params: CorruptionParams = CorruptionParams(),
                             organs=None, patients=None, phases=None) -> dict:
    """Independent target meshes per case: ``{(patient, phase, organ): SurfaceMesh}``.

    Each case gets its own triangulation of the analytic surface (vertex count
    varied per case) and Gaussian vertex jitter; ground truth stays in ``cohort``.
    """
    organs = list(organs or cohort.organs)
    patients = list(range(cohort.n_patients)) if patients is None else list(patients)
    phases = list(range(1, cohort.n_phases + 1)) if phases is None else list(phases)
    out = {}
    for p in patients:
        for t in phases:
            for k, organ in enumerate(organs):
                key_seed = [params.seed, p, t, ORGANS.index(organ) if organ in ORGANS else 9]
                rng = np.random.default_rng(key_seed)
                n0 = len(cohort.positions[organ][p, 0])
                if params.resample_factor > 0:
                    n = int(round(n0 * params.resample_factor * rng.uniform(0.9, 1.1)))
                    n = n + 1 if n == n0 else n
                    dirs, tris = sphere_directions(n, twist=float(rng.uniform(0, 2 * np.pi)))
                    verts = cohort.patients[p].surface(organ, dirs, t)
                else:
                    verts = cohort.positions[organ][p, t - 1].copy()
                    tris = cohort.triangles[organ]
                if params.jitter_sigma > 0:
                    verts = verts + rng.normal(0.0, params.jitter_sigma, verts.shape)
                name = f"{cohort.patient_ids[p]}_{organ}_t{t:02d}"
                out[(p, t, organ)] = SurfaceMesh(verts, tris, name=name, validate=False)
    return out


def write_phantom(cohort: PhantomCohort, out_dir,
                  corruption: CorruptionParams | None = None) -> list:
    """Write ground-truth meshes, displacement CSVs, corrupted targets and a manifest."""
    out_dir = Path(out_dir)
    written = cohort.save(out_dir / "truth")
    for organ in cohort.organs:
        gt = cohort.ground_truth(organ)
        for p, pid in enumerate(cohort.patient_ids):
            for t in range(1, cohort.n_phases + 1):
                path = out_dir / "truth" / pid / f"{organ}_t{t:02d}_disp.csv"
                write_vector_csv(path, gt[p, t - 1])
                written.append(path)
    if corruption is not None:
        for (p, t, organ), mesh in corrupt_for_registration(cohort, corruption).items():
            path = out_dir / "surfaces" / cohort.patient_ids[p] / f"{organ}_t{t:02d}.ply"
            write_mesh(path, mesh)
            written.append(path)
        index = {"patients": list(cohort.patient_ids), "phases": cohort.n_phases,
                 "organs": list(cohort.organs)}
        atomic_write_text(out_dir / "surfaces" / "index.json",
                          json.dumps(index, indent=2, sort_keys=True) + "\n")
        written.append(out_dir / "surfaces" / "index.json")
    manifest = cohort.manifest()
    if corruption is not None:
        manifest["corruption"] = asdict(corruption)
    atomic_write_text(out_dir / "manifest.json",
                      json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    written.append(out_dir / "manifest.json")
    return written
