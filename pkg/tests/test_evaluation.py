"""Leave-one-out evaluation, its recomputation and the two sweeps."""
from __future__ import annotations

import numpy as np
import pytest

from smdm.cohort import ORGANS, TARGET, Cohort
from smdm.errors import ModelError
from smdm.evaluation import (
    ERROR_HEADER,
    loocv_evaluate,
    organ_subset_sweep,
    rescore,
    sampling_sweep,
    select_beta,
    sweep_curve,
)
from smdm.features import sample_feature_points
from smdm.metrics import hausdorff_distance, mean_distance


def _counts(cohort):
    return {o: cohort.positions[o].shape[2] for o in ORGANS}


@pytest.fixture(scope="module")
def plan(small_cohort):
    return sample_feature_points(_counts(small_cohort), 10, seed=0)


def _identical_cohort(cohort, n=5):
    pos = {o: np.repeat(p[:1], n, axis=0) for o, p in cohort.positions.items()}
    return Cohort([f"C{i}" for i in range(n)], cohort.n_phases, dict(cohort.triangles), pos)


@pytest.mark.parametrize("mode", ["per_region", "per_patient"])
def test_identical_patients_have_zero_error(small_cohort, plan, mode):
    cohort = _identical_cohort(small_cohort)
    res = loocv_evaluate(cohort, plan, mode, beta=1e-3, lam=1e-9, with_dice=False)
    assert len(res.rows) == 5 * (cohort.n_phases - 1)
    # what remains is ridge shrinkage on a rank-deficient kernel, far below a voxel
    assert res.column("MD_mm").max() < 1e-3
    assert res.column("HD_mm").max() < 1e-3


def test_rows_and_summary(small_cohort, plan):
    res = loocv_evaluate(small_cohort, plan, "per_region", phases=[2, 4], with_dice=False)
    assert [r[:2] for r in res.rows[:2]] == [(small_cohort.patient_ids[0], 2),
                                             (small_cohort.patient_ids[1], 2)]
    assert len(res.rows) == 2 * small_cohort.n_patients
    assert set(res.summary()) == {"MD_mm", "HD_mm"}
    assert res.settings["points"] == plan.n_points
    assert len(ERROR_HEADER) == len(res.rows[0])


def test_rescore_matches_table(small_cohort, plan):
    res = loocv_evaluate(small_cohort, plan, "per_patient", phases=[3], voxel_mm=1.0)
    again = rescore(small_cohort, res.predictions, voxel_mm=1.0)
    assert len(again) == len(res.rows)
    for a, b in zip(sorted(res.rows), sorted(again)):
        assert a[:2] == b[:2]
        np.testing.assert_allclose(a[2:], b[2:], atol=1e-9)


def test_scores_match_direct_metrics(small_cohort, plan):
    res = loocv_evaluate(small_cohort, plan, "per_region", phases=[3], with_dice=False)
    pid = small_cohort.patient_ids[2]
    disp = res.predictions[(pid, 3)]
    truth = small_cohort.mesh(2, 3, TARGET)
    pred = truth.with_vertices(small_cohort.positions[TARGET][2, 0] + disp)
    row = next(r for r in res.rows if r[:2] == (pid, 3))
    assert row[2] == pytest.approx(mean_distance(pred, truth), abs=1e-12)
    assert row[3] == pytest.approx(hausdorff_distance(pred, truth), abs=1e-12)


def test_train_vertices_subsample_is_seeded(small_cohort, plan):
    a = loocv_evaluate(small_cohort, plan, "per_region", phases=[3], train_vertices=10,
                       seed=4, with_dice=False)
    b = loocv_evaluate(small_cohort, plan, "per_region", phases=[3], train_vertices=10,
                       seed=4, with_dice=False)
    assert [r[:2] for r in a.rows] == [r[:2] for r in b.rows]
    np.testing.assert_array_equal(a.column("HD_mm"), b.column("HD_mm"))
    c = loocv_evaluate(small_cohort, plan, "per_region", phases=[3], train_vertices=10,
                       seed=5, with_dice=False)
    assert not np.array_equal(a.column("HD_mm"), c.column("HD_mm"))


def test_loocv_needs_two_patients(small_cohort, plan):
    with pytest.raises(ModelError):
        loocv_evaluate(small_cohort.subset([0]), plan)


def test_select_beta(small_cohort, plan):
    best, results = select_beta(small_cohort, plan, "per_region", betas=(1e-4, 1e-2),
                                phases=[3], with_dice=False)
    assert best in (1e-4, 1e-2)
    med = {b: np.median(r.column("HD_mm")) for b, r in results.items()}
    assert med[best] == min(med.values())


def test_sampling_sweep_full_count_runs_once(small_cohort):
    rows = sampling_sweep(small_cohort, [5, 1000], trials=3, phases=[3])
    assert [r[0] for r in rows] == [5, 5, 5, 1000]
    curve = sweep_curve(rows)
    assert curve[1] == (1000, rows[3][2], 0.0, 1)
    five = [r[2] for r in rows if r[0] == 5]
    assert curve[0][1] == pytest.approx(np.mean(five), abs=1e-12)
    assert curve[0][2] == pytest.approx(np.std(five), abs=1e-12)


def test_sampling_sweep_is_reproducible(small_cohort):
    a = sampling_sweep(small_cohort, [3], trials=2, phases=[2], seed=1)
    b = sampling_sweep(small_cohort, [3], trials=2, phases=[2], seed=1)
    assert a == b


def test_subset_sweep_has_31_sorted_rows(small_cohort):
    rows = organ_subset_sweep(small_cohort, 5, phases=[3])
    assert len(rows) == 31
    names = [r[0] for r in rows]
    assert len(set(names)) == 31
    assert sum("+" not in n for n in names) == 5
    medians = [r[1] for r in rows]
    assert medians == sorted(medians)


def test_subset_sweep_needs_all_organs(small_cohort):
    with pytest.raises(ModelError):
        organ_subset_sweep(small_cohort.with_organs(["ST", "DU", TARGET]), 5)
