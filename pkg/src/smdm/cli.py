"""Command-line front end: ``smdm <command> [options]``.

Exit codes: 0 success, 2 usage or config error, 3 I/O error, 4 processing error,
1 anything unexpected.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import evaluation as ev
from .cohort import ORGANS, TARGET, Cohort, mesh_filename
from .config import RunConfig, load_config, parse_config
from .errors import ConfigError, ModelError, SmdmError
from .features import PairDistances, SamplingPlan, phase_data, sample_feature_points
from .mesh import laplacian_operator
from .meshio import atomic_write_text, read_mesh, read_table, write_mesh, write_table, \
    write_vector_csv
from .metrics import REPORT_HEADER, hausdorff_distance, laplacian_of_displacement, \
    mean_distance
from .phantom import generate_cohort, write_phantom
from .pipeline import build_templates, read_surface_index, register_cohort, register_pair
from .sdm import fit_cohort_modes, mode_extremes, motion_statistics

log = logging.getLogger("smdm")

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_IO, EXIT_MODULE = 0, 1, 2, 3, 4


# -- helpers ---------------------------------------------------------------------------------

def _out_dir(cfg: RunConfig, args) -> Path:
    out = Path(args.out) if getattr(args, "out", None) else Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_resolved(cfg: RunConfig, out: Path, command: str, extra: dict | None = None):
    """Resolved config plus ``artifacts.json``; called last, so the listing covers the stage."""
    data = {"command": command, **cfg.to_dict(), **(extra or {})}
    atomic_write_text(out / "resolved_config.json", json.dumps(data, indent=2, sort_keys=True)
                      + "\n")
    files = sorted(p.relative_to(out).as_posix() for p in out.rglob("*") if p.is_file())
    _write_json(out / "artifacts.json",
                {"command": command, "files": [f for f in files if f != "artifacts.json"]})


def _write_json(path: Path, data):
    atomic_write_text(path, json.dumps(data, indent=2, sort_keys=True) + "\n")


def _plan(cfg: RunConfig, cohort: Cohort, organs=None) -> SamplingPlan:
    rc = cfg.regression
    organs = tuple(organs or rc.organs)
    verts = {o: cohort.positions[o].shape[2] for o in organs}
    per = {o: min(rc.points_per_organ, verts[o]) for o in organs}
    return sample_feature_points(verts, per, organs, seed=rc.seed)


def _loocv_rows(res: ev.LoocvResult):
    return [(pid, t, md, hd, dsc) for pid, t, md, hd, dsc in res.rows]


# -- commands -------------------------------------------------------------------------------

def cmd_phantom_gen(cfg: RunConfig, args) -> int:
    if args.spec:
        data = json.loads(Path(args.spec).read_text())
        if not isinstance(data, dict):
            raise ConfigError(f"{args.spec}: expected a JSON object")
        # a full run config, or a bare phantom block merged into the current config
        cfg = parse_config(data if "phantom" in data else {**cfg.to_dict(), "phantom": data})
    out = _out_dir(cfg, args)
    cohort = generate_cohort(cfg.phantom)
    written = write_phantom(cohort, out, cfg.corruption)
    _write_resolved(cfg, out, "phantom-gen")
    log.info("phantom: %d patients x %d phases, %d files", cohort.n_patients, cohort.n_phases,
             len(written))
    return EXIT_OK


def _register_report(reg, target):
    mesh = reg.mesh
    lmean, lmax = laplacian_of_displacement(mesh.with_vertices(mesh.vertices - reg.displacement
                                                               .vectors), reg.displacement.vectors)
    return [(target.name, 0, "mean_distance", mean_distance(mesh, target)),
            (target.name, 0, "hausdorff", hausdorff_distance(mesh, target)),
            (target.name, 0, "laplacian_mean", lmean),
            (target.name, 0, "laplacian_max", lmax)]


def cmd_register(cfg: RunConfig, args) -> int:
    out = _out_dir(cfg, args)
    if args.template and args.target:
        template = read_mesh(args.template)
        target = read_mesh(args.target)
        iters = 0 if args.no_affine else cfg.template.affine_iters
        reg = register_pair(template, target, cfg.registration, iters)
        write_mesh(out / "registered.ply", reg.mesh)
        write_vector_csv(out / "displacement.csv", reg.displacement.vectors)
        keys = ("iteration", "delta", "e_shape", "e_deform", "e_pos", "total", "mean_distance")
        write_table(out / "energy_log.csv", keys, [[r[k] for k in keys] for r in reg.energy_log])
        write_table(out / "report.csv", REPORT_HEADER, _register_report(reg, target))
    elif args.templates and args.surfaces:
        register_cohort(args.templates, args.surfaces, out / "cohort", cfg.registration,
                        threads=cfg.threads, affine_iters=cfg.template.affine_iters)
    else:
        raise ConfigError("register needs --template/--target or --templates/--surfaces")
    _write_resolved(cfg, out, "register")
    return EXIT_OK


def cmd_build_template(cfg: RunConfig, args) -> int:
    out = Path(args.out)
    organs = [args.organ] if args.organ else None
    seed_case = args.seed_case or cfg.template.seed_case
    if out.suffix == ".ply":
        if not args.organ:
            raise ConfigError("--out <file>.ply needs --organ")
        target_dir = out.parent
    else:
        target_dir = out
    target_dir.mkdir(parents=True, exist_ok=True)
    models = build_templates(args.cohort, target_dir, seed_case, cfg.template.vertices_for,
                             cfg.registration, organs=organs, seed=cfg.seed,
                             affine_iters=cfg.template.affine_iters)
    if out.suffix == ".ply" and out.name != f"{args.organ}.ply":
        write_mesh(out, models[args.organ].mesh)
    _write_resolved(cfg, target_dir, "build-template")
    return EXIT_OK


def cmd_build_sdm(cfg: RunConfig, args) -> int:
    out = _out_dir(cfg, args)
    cohort = Cohort.load(args.cohort)
    organs = [args.organ] if args.organ else list(cohort.organs)
    if args.all_phases:
        phases = None
    else:
        pair = args.phase_pair or f"1,{cohort.n_phases // 2 + 1}"
        a, b = (int(x) for x in pair.split(","))
        if a != 1:
            raise ConfigError("displacements are taken from phase 1; --phase-pair must start at 1")
        if not 1 < b <= cohort.n_phases:
            raise ConfigError(f"phase {b} outside 2..{cohort.n_phases}")
        phases = [b]
    for organ in organs:
        disp = cohort.displacements(organ)
        k = min(args.modes, disp.shape[0] * (len(phases) if phases else disp.shape[1] - 1) - 1)
        model = fit_cohort_modes(disp, k=k, phases=phases, base_id=organ)
        model.save(out / organ)
        rows = []
        for m in range(min(model.n_modes, 3)):
            lo, hi = mode_extremes(model, m)
            span = np.linalg.norm(hi.vectors - lo.vectors, axis=1).max()
            rows.append((m + 1, float(model.eigenvalues[m]), float(span)))
        write_table(out / organ / "mode_extremes.csv", ("mode", "eigenvalue_mm2", "max_span_mm"),
                    rows)
    motion_statistics({o: cohort.displacements(o) for o in cohort.organs}).to_csv(
        out / "motion_stats.csv")
    _write_resolved(cfg, out, "build-sdm", {"phases": phases})
    return EXIT_OK


def cmd_train(cfg: RunConfig, args) -> int:
    out = _out_dir(cfg, args)
    cohort = Cohort.load(args.cohort)
    rc = cfg.regression
    plan = _plan(cfg, cohort)
    phases = list(rc.phases or range(2, cohort.n_phases + 1))
    train = list(range(cohort.n_patients))
    _write_json(out / "plan.json", plan.to_dict())
    meta = {"mode": rc.mode, "beta": rc.beta, "lambda": rc.lam, "phases": phases,
            "patients": list(cohort.patient_ids), "cohort": str(Path(args.cohort).resolve()),
            "train_vertices": rc.train_vertices}
    for t in phases:
        data = phase_data(cohort, plan, t)
        rows = ev._fold_rows(data.target.shape[1], rc.train_vertices, rc.seed, t, len(train)) \
            if rc.mode == "per_region" else None
        model = ev.fit_fold(PairDistances(data), data, train, rc.mode, rc.beta, rc.lam, rows)
        alpha = model.alpha.reshape(-1, 3)
        write_table(out / f"alpha_t{t:02d}.csv", ("row", "ax", "ay", "az"),
                    [(i, *a) for i, a in enumerate(alpha)])
        if rows is not None:
            meta.setdefault("rows", {})[str(t)] = [int(r) for r in rows]
    _write_json(out / "model.json", meta)
    _write_resolved(cfg, out, "train")
    return EXIT_OK


def cmd_predict(cfg: RunConfig, args) -> int:
    out = _out_dir(cfg, args)
    mdir = Path(args.model)
    meta = json.loads((mdir / "model.json").read_text())
    plan = SamplingPlan.from_dict(json.loads((mdir / "plan.json").read_text()))
    train_cohort = Cohort.load(meta["cohort"])
    query = Cohort.load(args.cohort)
    pids = [args.patient] if args.patient else list(query.patient_ids)
    organs = list(plan.organs) + [TARGET]
    report = []
    for o in organs:
        if not np.array_equal(query.triangles[o], train_cohort.triangles[o]):
            raise ModelError(f"{o}: query meshes are not in correspondence with the training "
                             "cohort; register them with the same templates first")
    for pid in pids:
        if pid not in query.patient_ids:
            raise ConfigError(f"patient {pid!r} not in {args.cohort}")
        q = query.patient_ids.index(pid)
        joined = Cohort(list(train_cohort.patient_ids) + [f"query:{pid}"], train_cohort.n_phases,
                        {o: train_cohort.triangles[o] for o in organs},
                        {o: np.concatenate([train_cohort.positions[o],
                                            query.positions[o][q:q + 1]]) for o in organs})
        h = joined.n_patients - 1
        train = list(range(h))
        for t in meta["phases"]:
            _, alpha_rows = read_table(mdir / f"alpha_t{t:02d}.csv")
            alpha = np.array([[float(x) for x in r[1:]] for r in alpha_rows])
            rows = meta.get("rows", {}).get(str(t))
            rows = None if rows is None else np.asarray(rows)
            if meta["mode"] == "per_patient":
                alpha = alpha.reshape(-1, len(train), 3)
            model = ev.FoldModel(meta["mode"], meta["beta"], meta["lambda"], train, alpha, rows)
            data = phase_data(joined, plan, t)
            disp = ev.predict_with(model, PairDistances(data), h)
            pred = joined.mesh(h, 1, TARGET).with_vertices(data.target[h] + disp)
            write_mesh(out / pid / f"GTV_pred_t{t:02d}.ply", pred)
            truth = query.mesh(q, t, TARGET)
            md, hd, dsc = ev.score_prediction(pred.vertices, truth, True, cfg.regression.voxel_mm)
            report.append((pid, t, md, hd, dsc))
    write_table(out / "predict_errors.csv", ev.ERROR_HEADER, report)
    _write_resolved(cfg, out, "predict")
    return EXIT_OK


def _run_loocv(cfg: RunConfig, cohort: Cohort, out: Path, mode=None, beta=None, tag="loocv",
               save_meshes=True):
    rc = cfg.regression
    plan = _plan(cfg, cohort)
    res = ev.loocv_evaluate(cohort, plan, mode or rc.mode, beta or rc.beta, rc.lam,
                            phases=rc.phases, train_vertices=rc.train_vertices, seed=rc.seed,
                            voxel_mm=rc.voxel_mm)
    write_table(out / f"{tag}_errors.csv", ev.ERROR_HEADER, _loocv_rows(res))
    if save_meshes:
        for (pid, t), disp in sorted(res.predictions.items()):
            h = cohort.patient_ids.index(pid)
            base = cohort.mesh(h, 1, TARGET)
            write_mesh(out / f"{tag}_predictions" / pid / f"GTV_pred_t{t:02d}.ply",
                       base.with_vertices(base.vertices + disp))
    return res


def cmd_loocv(cfg: RunConfig, args) -> int:
    out = _out_dir(cfg, args)
    cohort = Cohort.load(args.cohort)
    res = _run_loocv(cfg, cohort, out)
    _write_json(out / "loocv_summary.json", res.summary())
    _write_resolved(cfg, out, "loocv")
    return EXIT_OK


def cmd_sweep_n(cfg: RunConfig, args) -> int:
    out = _out_dir(cfg, args)
    cohort = Cohort.load(args.cohort)
    rc = cfg.regression
    rows = ev.sampling_sweep(cohort, cfg.sweep.counts, cfg.sweep.trials, rc.mode, rc.beta,
                             rc.lam, rc.organs, rc.seed, phases=rc.phases,
                             train_vertices=rc.train_vertices)
    write_table(out / "sweep_n_trials.csv", ("n_points", "trial", "HD_mm"), rows)
    write_table(out / "sweep_n_curve.csv", ("n_points", "mean_HD_mm", "std_HD_mm", "trials"),
                ev.sweep_curve(rows))
    _write_resolved(cfg, out, "sweep-n")
    return EXIT_OK


def cmd_sweep_subsets(cfg: RunConfig, args) -> int:
    out = _out_dir(cfg, args)
    cohort = Cohort.load(args.cohort)
    rc = cfg.regression
    rows = ev.organ_subset_sweep(cohort, rc.points_per_organ, rc.mode, rc.beta, rc.lam,
                                 rc.seed, phases=rc.phases, train_vertices=rc.train_vertices)
    write_table(out / "subsets.csv", ("subset", "median_HD_mm", "mean_HD_mm", "mean_MD_mm"), rows)
    _write_resolved(cfg, out, "sweep-subsets")
    return EXIT_OK


def cmd_evaluate(cfg: RunConfig, args) -> int:
    """Every table behind the motion-statistics, learning-mode, sweep and phase-error plots."""
    out = _out_dir(cfg, args)
    cohort = Cohort.load(args.cohort)
    rc = cfg.regression
    motion_statistics({o: cohort.displacements(o) for o in cohort.organs}).to_csv(
        out / "motion_stats.csv")

    if args.surfaces:
        index = read_surface_index(args.surfaces)
        rows = []
        for o in cohort.organs:
            op = laplacian_operator(cohort.mesh(0, 1, o))
            for p, pid in enumerate(cohort.patient_ids):
                for t in range(1, cohort.n_phases + 1):
                    if pid not in index["patients"]:
                        continue
                    reg = cohort.mesh(p, t, o)
                    target = read_mesh(Path(args.surfaces) / pid / mesh_filename(o, t))
                    case = f"{pid}/{o}"
                    rows.append((case, t, "mean_distance", mean_distance(reg, target)))
                    rows.append((case, t, "hausdorff", hausdorff_distance(reg, target)))
        write_table(out / "registration_report.csv", REPORT_HEADER, rows)

    mode_rows = []
    for mode in ("per_patient", "per_region"):
        for beta in ev.BETA_GRID:
            res = _run_loocv(cfg, cohort, out, mode, beta, tag=f"loocv_{mode}_beta{beta:g}",
                             save_meshes=False)
            for pid, t, md, hd, dsc in res.rows:
                mode_rows.append((mode, beta, pid, t, md, hd, dsc))
    write_table(out / "learning_modes.csv",
                ("mode", "beta", "patient", "phase", "MD_mm", "HD_mm", "DSC"), mode_rows)

    res = _run_loocv(cfg, cohort, out, tag="phase_errors", save_meshes=True)
    by_phase = {}
    for _, t, md, hd, _ in res.rows:
        by_phase.setdefault(t, []).append((md, hd))
    write_table(out / "phase_error_curve.csv",
                ("phase", "mean_MD_mm", "std_MD_mm", "mean_HD_mm", "std_HD_mm"),
                [(t, m[0], sd[0], m[1], sd[1]) for t, m, sd in
                 ((t, np.mean(v, axis=0), np.std(v, axis=0)) for t, v in sorted(by_phase.items()))])

    counts = [c for c in cfg.sweep.counts
              if c <= max(cohort.positions[o].shape[2] for o in rc.organs)]
    rows = ev.sampling_sweep(cohort, counts, cfg.sweep.trials, rc.mode, rc.beta, rc.lam,
                             rc.organs, rc.seed, phases=rc.phases, train_vertices=rc.train_vertices)
    write_table(out / "sweep_n_curve.csv", ("n_points", "mean_HD_mm", "std_HD_mm", "trials"),
                ev.sweep_curve(rows))
    if all(o in cohort.positions for o in ORGANS):
        subsets = ev.organ_subset_sweep(cohort, rc.points_per_organ, rc.mode, rc.beta, rc.lam,
                                        rc.seed, phases=rc.phases,
                                        train_vertices=rc.train_vertices)
        write_table(out / "subsets.csv", ("subset", "median_HD_mm", "mean_HD_mm", "mean_MD_mm"),
                    subsets)
    _write_resolved(cfg, out, "evaluate")
    return EXIT_OK


COMMANDS = {
    "phantom-gen": cmd_phantom_gen,
    "register": cmd_register,
    "build-template": cmd_build_template,
    "build-sdm": cmd_build_sdm,
    "train": cmd_train,
    "predict": cmd_predict,
    "loocv": cmd_loocv,
    "sweep-n": cmd_sweep_n,
    "sweep-subsets": cmd_sweep_subsets,
    "evaluate": cmd_evaluate,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="smdm", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="JSON run config")
        p.add_argument("--out", help="output directory (overrides config and SMDM_OUT)")
        p.add_argument("--threads", type=int, help="worker processes")
        p.add_argument("--seed", type=int, help="master seed")
        p.add_argument("--log-level", default=None)
        return p

    p = add("phantom-gen", "generate a synthetic cohort")
    p.add_argument("--spec", help="phantom spec JSON (bare spec or full config)")
    p = add("register", "register a template onto a target, or a template set onto a cohort")
    p.add_argument("--template")
    p.add_argument("--target")
    p.add_argument("--templates", help="directory with <organ>.ply templates")
    p.add_argument("--surfaces", help="surface directory with index.json")
    p.add_argument("--no-affine", action="store_true")
    p = add("build-template", "mean template per organ")
    p.add_argument("--organ")
    p.add_argument("--seed-case")
    p.add_argument("--cohort", required=True, help="surface directory with index.json")
    p = add("build-sdm", "deformation modes and motion statistics")
    p.add_argument("--cohort", required=True)
    p.add_argument("--organ")
    p.add_argument("--phase-pair", help="'1,t'; default 1 and the end-exhale phase T//2+1")
    p.add_argument("--all-phases", action="store_true")
    p.add_argument("--modes", type=int, default=5)
    for name, help_ in (("train", "fit target-motion regressions on a cohort"),
                        ("loocv", "leave-one-patient-out evaluation"),
                        ("sweep-n", "error against sampled point count"),
                        ("sweep-subsets", "error for all organ subsets")):
        p = add(name, help_)
        p.add_argument("--cohort", required=True)
    p = add("predict", "predict target meshes with a trained model")
    p.add_argument("--model", required=True)
    p.add_argument("--cohort", required=True)
    p.add_argument("--patient")
    p = add("evaluate", "all evaluation tables for a registered cohort")
    p.add_argument("--cohort", required=True)
    p.add_argument("--surfaces")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code not in (0, None) else EXIT_OK
    try:
        cfg = load_config(args.config)
        if args.seed is not None or args.threads is not None or args.log_level:
            data = cfg.to_dict()
            if args.seed is not None:
                data["seed"] = args.seed
                for block in ("phantom", "corruption", "registration", "regression"):
                    data[block]["seed"] = args.seed
            if args.threads is not None:
                data["threads"] = args.threads
            if args.log_level:
                data["log_level"] = args.log_level
            cfg = parse_config(data, env={})
        logging.basicConfig(level=getattr(logging, cfg.log_level.upper(), logging.INFO),
                            format="%(levelname)s %(name)s: %(message)s")
        return COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except (OSError, json.JSONDecodeError) as exc:
        log.error("I/O error: %s", exc)
        return EXIT_IO
    except SmdmError as exc:
        log.error("%s: %s", type(exc).__name__, exc)
        return EXIT_MODULE


if __name__ == "__main__":
    sys.exit(main())
