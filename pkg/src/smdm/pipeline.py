"""Batch steps over a directory of per-case surfaces: templates and cohort registration."""
from __future__ import annotations

import json
import logging
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .cohort import ORGANS, TARGET, Cohort, mesh_filename
from .errors import SmdmError
from .meshio import atomic_write_text, read_mesh, write_mesh
from .registration import RegistrationParams, affine_prealign, ldsm_register
from .template import TemplateModel, build_template

log = logging.getLogger(__name__)

INDEX_NAME = "index.json"


def write_surface_index(root, patients, n_phases, organs) -> Path:
    path = Path(root) / INDEX_NAME
    index = {"patients": list(patients), "phases": int(n_phases), "organs": list(organs)}
    atomic_write_text(path, json.dumps(index, indent=2, sort_keys=True) + "\n")
    return path


def read_surface_index(root) -> dict:
    root = Path(root)
    for name in (INDEX_NAME, "cohort.json"):
        if (root / name).exists():
            return json.loads((root / name).read_text())
    raise FileNotFoundError(f"{root} has no {INDEX_NAME} or cohort.json")


def surface_path(root, patient: str, organ: str, phase: int) -> Path:
    return Path(root) / patient / mesh_filename(organ, phase)


def register_pair(template, target, params: RegistrationParams, affine_iters: int = 10):
    """Affine pre-alignment followed by LDSM; the result keeps the template connectivity."""
    if affine_iters > 0:
        _, moved = affine_prealign(template, target, iters=affine_iters)
        template = template.with_vertices(moved.vertices)
    return ldsm_register(template, target, params)


def _register_case(job):
    tpath, spath, params, affine_iters = job
    template = read_mesh(tpath)
    target = read_mesh(spath)
    reg = register_pair(template, target, params, affine_iters)
    return reg.mesh.vertices, reg.converged, reg.iterations


def _map(fn, jobs, threads: int):
    if threads <= 1 or len(jobs) < 2:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, jobs, chunksize=max(1, len(jobs) // (4 * threads))))


def build_templates(surfaces, out_dir, seed_case: str | None, target_vertices,
                    params: RegistrationParams, organs=None, seed: int = 0,
                    affine_iters: int = 10) -> dict:
    """One mean template per organ from the phase-1 surfaces of every patient.

    ``seed_case`` names the patient whose surface is resampled; when absent one
    is drawn with ``seed``. ``target_vertices`` is a count or ``organ -> count``.
    """
    index = read_surface_index(surfaces)
    patients = index["patients"]
    organs = list(organs or index["organs"])
    if seed_case is None:
        seed_case = patients[int(np.random.default_rng(seed).integers(len(patients)))]
    if seed_case not in patients:
        raise SmdmError(f"seed case {seed_case!r} not among {patients}")
    out = {}
    for organ in organs:
        seed_mesh = read_mesh(surface_path(surfaces, seed_case, organ, 1))
        targets = [read_mesh(surface_path(surfaces, p, organ, 1)) for p in patients]
        want = target_vertices(organ) if callable(target_vertices) else target_vertices
        n = min(int(want), seed_mesh.n_vertices)
        model = build_template(seed_mesh, targets, n, params, organ=organ,
                               affine_iters=affine_iters)
        model = TemplateModel(model.mesh, organ, {**model.provenance, "seed_case": seed_case})
        save_template(model, Path(out_dir) / f"{organ}.ply")
        out[organ] = model
        log.info("template %s: %d vertices from %s over %d cases", organ,
                 model.mesh.n_vertices, seed_case, len(targets))
    return out


def save_template(model: TemplateModel, path) -> list:
    path = Path(path)
    write_mesh(path, model.mesh)
    prov = path.with_suffix(".json")
    atomic_write_text(prov, json.dumps({"organ": model.organ, **model.provenance},
                                       indent=2, sort_keys=True) + "\n")
    return [path, prov]


def register_cohort(templates, surfaces, out_dir, params: RegistrationParams,
                    organs=None, threads: int = 1, affine_iters: int = 10) -> Cohort:
    """Register each organ template onto every (patient, phase) surface.

    The result is a cohort in correspondence, written in the standard cohort layout.
    """
    index = read_surface_index(surfaces)
    patients, n_phases = index["patients"], int(index["phases"])
    organs = [o for o in (organs or index["organs"]) if (Path(templates) / f"{o}.ply").exists()]
    if not organs:
        raise SmdmError(f"no organ templates found in {templates}")
    positions, tris = {}, {}
    for organ in organs:
        tpath = Path(templates) / f"{organ}.ply"
        tris[organ] = read_mesh(tpath).triangles
        jobs = [(tpath, surface_path(surfaces, p, organ, t), params, affine_iters)
                for p in patients for t in range(1, n_phases + 1)]
        results = _map(_register_case, jobs, threads)
        verts = np.array([r[0] for r in results])
        positions[organ] = verts.reshape(len(patients), n_phases, *verts.shape[1:])
        unconverged = sum(not r[1] for r in results)
        log.info("registered %s: %d cases, %d hit the iteration cap", organ, len(jobs),
                 unconverged)
    cohort = Cohort(list(patients), n_phases, tris, positions,
                    {"source": "registered", "surfaces": str(surfaces)})
    cohort.save(out_dir)
    return cohort


def default_organs(include_target: bool = True):
    return ORGANS + ((TARGET,) if include_target else ())
