"""Leave-one-patient-out evaluation of target-motion regression and its sweeps."""
from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field

import numpy as np

from .cohort import ORGANS, TARGET, Cohort
from .errors import ModelError
from .features import PairDistances, SamplingPlan, normalize_mode, phase_data, \
    sample_feature_points
from .kernel import RESIDUAL_TOL, kernel_from_sq, solve_weights
from .mesh import SurfaceMesh
from .metrics import dice_coefficient, hausdorff_distance, mean_distance

log = logging.getLogger(__name__)

ERROR_HEADER = ("patient", "phase", "MD_mm", "HD_mm", "DSC")
BETA_GRID = (1e-5, 1e-4, 1e-3, 1e-2)


@dataclass
class LoocvResult:
    """Per (held-out patient, phase) errors plus the predicted target displacements."""

    rows: list
    predictions: dict = field(default_factory=dict)
    settings: dict = field(default_factory=dict)

    def column(self, name: str) -> np.ndarray:
        k = ERROR_HEADER.index(name)
        return np.array([r[k] for r in self.rows], dtype=float)

    def summary(self) -> dict:
        out = {}
        for name in ("MD_mm", "HD_mm", "DSC"):
            col = self.column(name)
            col = col[np.isfinite(col)]
            if col.size:
                out[name] = {"mean": float(col.mean()), "std": float(col.std()),
                             "median": float(np.median(col))}
        return out


def _fold_rows(n_target: int, train_vertices, seed: int, phase: int, held_out: int):
    if train_vertices is None or train_vertices >= n_target:
        return None
    rng = np.random.default_rng([seed, phase, held_out])
    return np.sort(rng.choice(n_target, size=int(train_vertices), replace=False))


@dataclass
class FoldModel:
    """Weights fitted on ``train`` patients for one phase.

    Per-region: ``alpha`` is (N, 3) over (patient, target vertex) rows, ``rows``
    the target vertices used per patient (None = all). Per-patient: ``alpha`` is
    (G, P_train, 3), one regression per target vertex.
    """

    mode: str
    beta: float
    lam: float
    train: list
    alpha: np.ndarray
    rows: np.ndarray | None = None

    @property
    def n(self) -> int:
        return self.alpha.shape[0] if self.mode == "per_region" else self.alpha.shape[1]


def fit_fold(pd: PairDistances, data, train, mode: str, beta: float, lam: float,
             rows=None) -> FoldModel:
    mode = normalize_mode(mode)
    train = list(train)
    if mode == "per_region":
        d2 = pd.matrix(train, train, rows, rows)
        y = np.vstack([data.target_motion[p] if rows is None else data.target_motion[p, rows]
                       for p in train])
        alpha, _ = solve_weights(kernel_from_sq(d2, beta, len(d2)), y, lam)
        return FoldModel(mode, beta, lam, train, alpha, rows)
    n = len(train)
    k = kernel_from_sq(pd.same_vertex_all(train, train), beta, n) + lam * np.eye(n)[None]
    y = np.moveaxis(data.target_motion[train], 1, 0)
    alpha = np.linalg.solve(k, y)
    resid = np.linalg.norm(k @ alpha - y, axis=(1, 2)) / np.maximum(
        np.linalg.norm(y, axis=(1, 2)), 1e-300)
    if np.any(~np.isfinite(resid)) or resid.max() > RESIDUAL_TOL:
        raise ModelError(f"per-vertex kernel solve residual {np.nanmax(resid):.3e}")
    return FoldModel(mode, beta, lam, train, alpha, None)


def predict_with(model: FoldModel, pd: PairDistances, query: int) -> np.ndarray:
    """Predicted target displacement (G, 3) of patient index ``query`` in ``pd``."""
    if model.mode == "per_region":
        q = pd.matrix([query], model.train, None, model.rows)
        return kernel_from_sq(q, model.beta, model.n) @ model.alpha
    q = kernel_from_sq(pd.same_vertex_all([query], model.train), model.beta, model.n)
    return np.einsum("gij,gjc->gic", q, model.alpha)[:, 0]


def predict_fold(pd: PairDistances, data, held_out: int, train, mode: str, beta: float,
                 lam: float, rows=None) -> np.ndarray:
    """Fit on ``train`` and predict the target displacement (G, 3) of ``held_out``."""
    return predict_with(fit_fold(pd, data, train, mode, beta, lam, rows), pd, held_out)


def score_prediction(pred_vertices, truth: SurfaceMesh, with_dice: bool = True,
                     voxel_mm: float = 1.0):
    pred = truth.with_vertices(pred_vertices)
    md = mean_distance(pred, truth)
    hd = hausdorff_distance(pred, truth)
    dsc = dice_coefficient(pred, truth, voxel_mm) if with_dice else float("nan")
    return md, hd, dsc


def loocv_evaluate(cohort: Cohort, plan: SamplingPlan, mode: str = "per_region",
                   beta: float = 1e-3, lam: float = 1e-3, phases=None,
                   train_vertices: int | None = None, seed: int = 0, with_dice: bool = True,
                   voxel_mm: float = 1.0, target: str = TARGET,
                   keep_predictions: bool = True) -> LoocvResult:
    """Hold out each patient, fit on the rest, predict its target motion and score it.

    The held-out patient's organ motion is observed; only its target motion is
    hidden. Predictions are applied to the held-out target at phase 1 and
    compared with the true target at the query phase. Each phase gets its own fit.

    Parameters
    ----------
    phases : iterable of int, optional
        Query phases (1-based); default 2..T.
    train_vertices : int, optional
        Per-region mode only: random subset of target vertices per training
        patient (seeded per fold), bounding the system size.
    """
    mode = normalize_mode(mode)
    if cohort.n_patients < 2:
        raise ModelError("leave-one-out needs at least two patients")
    phases = list(range(2, cohort.n_phases + 1)) if phases is None else [int(t) for t in phases]
    tris = cohort.triangles[target]
    rows, preds = [], {}
    for t in phases:
        data = phase_data(cohort, plan, t, target)
        pd = PairDistances(data)
        for h in range(cohort.n_patients):
            train = [p for p in range(cohort.n_patients) if p != h]
            sub = _fold_rows(data.target.shape[1], train_vertices, seed, t, h) \
                if mode == "per_region" else None
            disp = predict_fold(pd, data, h, train, mode, beta, lam, sub)
            truth = SurfaceMesh(cohort.positions[target][h, t - 1], tris, validate=False)
            md, hd, dsc = score_prediction(data.target[h] + disp, truth, with_dice, voxel_mm)
            rows.append((cohort.patient_ids[h], t, md, hd, dsc))
            if keep_predictions:
                preds[(cohort.patient_ids[h], t)] = disp
        log.debug("loocv %s beta=%g phase %d done", mode, beta, t)
    settings = {"mode": mode, "beta": beta, "lambda": lam, "phases": phases,
                "train_vertices": train_vertices, "organs": list(plan.organs),
                "points": plan.n_points}
    return LoocvResult(rows, preds, settings)


def rescore(cohort: Cohort, predictions: dict, with_dice: bool = True, voxel_mm: float = 1.0,
            target: str = TARGET) -> list:
    """Recompute the error table from stored predictions."""
    idx = {pid: k for k, pid in enumerate(cohort.patient_ids)}
    tris = cohort.triangles[target]
    rows = []
    for (pid, t), disp in predictions.items():
        h = idx[pid]
        truth = SurfaceMesh(cohort.positions[target][h, t - 1], tris, validate=False)
        base = cohort.positions[target][h, 0]
        rows.append((pid, t, *score_prediction(base + disp, truth, with_dice, voxel_mm)))
    return rows


def select_beta(cohort, plan, mode, betas=BETA_GRID, metric="HD_mm", **kw):
    """Run the LOOCV for each beta and keep the one with the smallest median ``metric``."""
    results = {b: loocv_evaluate(cohort, plan, mode, beta=b, **kw) for b in betas}
    best = min(results, key=lambda b: np.median(results[b].column(metric)))
    return best, results


def sampling_sweep(cohort: Cohort, counts, trials: int = 10, mode: str = "per_region",
                   beta: float = 1e-3, lam: float = 1e-3, organs=ORGANS, seed: int = 0,
                   metric: str = "HD_mm", **kw) -> list:
    """Mean LOOCV error against the number of sampled points per organ.

    Returns rows ``(n_points, trial, error)``; a count that selects every vertex
    of every organ is deterministic and run once.
    """
    verts = {o: cohort.positions[o].shape[2] for o in organs}
    out = []
    for n in counts:
        full = all(n >= v for v in verts.values())
        for trial in range(1 if full else trials):
            per = {o: min(int(n), verts[o]) for o in organs}
            plan = sample_feature_points(verts, per, organs, seed=hash_seed(seed, n, trial))
            res = loocv_evaluate(cohort, plan, mode, beta, lam, with_dice=False,
                                 keep_predictions=False, seed=seed, **kw)
            out.append((int(n), trial, float(res.column(metric).mean())))
    return out


def sweep_curve(rows) -> list:
    """Trial means per count from ``sampling_sweep`` rows: ``(n_points, mean, std, trials)``."""
    by = {}
    for n, _, err in rows:
        by.setdefault(n, []).append(err)
    return [(n, float(np.mean(v)), float(np.std(v)), len(v)) for n, v in sorted(by.items())]


def hash_seed(*parts) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


def organ_subset_sweep(cohort: Cohort, points_per_organ: int, mode: str = "per_region",
                       beta: float = 1e-3, lam: float = 1e-3, seed: int = 0, **kw) -> list:
    """LOOCV for every non-empty organ subset, sorted by median Hausdorff distance.

    Rows: ``(subset, median_HD_mm, mean_HD_mm, mean_MD_mm)`` where ``subset`` joins
    the organ tags with ``+``. Every subset uses the same per-organ vertex draw.
    """
    missing = [o for o in ORGANS if o not in cohort.positions]
    if missing:
        raise ModelError(f"subset sweep needs all five organs; missing {missing}")
    verts = {o: cohort.positions[o].shape[2] for o in ORGANS}
    full_plan = sample_feature_points(verts, points_per_organ, ORGANS, seed=seed)
    rows = []
    for r in range(1, len(ORGANS) + 1):
        for subset in itertools.combinations(ORGANS, r):
            plan = SamplingPlan(subset, {o: full_plan.ids[o] for o in subset}, seed)
            res = loocv_evaluate(cohort, plan, mode, beta, lam, with_dice=False,
                                 keep_predictions=False, seed=seed, **kw)
            hd = res.column("HD_mm")
            rows.append(("+".join(subset), float(np.median(hd)), float(hd.mean()),
                         float(res.column("MD_mm").mean())))
    rows.sort(key=lambda r: (r[1], r[0]))
    return rows
