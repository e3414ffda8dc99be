"""Displacement fields, SVD deformation modes and motion statistics."""
from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from smdm.errors import ModelError, SizeMismatchError
from smdm.phantom import PhantomSpec, generate_cohort
from smdm.sdm import (
    DeformationModel,
    displacement_fields,
    explained_variance,
    fit_cohort_modes,
    fit_deformation_modes,
    fit_patient_modes,
    mode_extremes,
    motion_statistics,
    synthesize_deformation,
)
from smdm.shapes import icosphere


@pytest.fixture(scope="module")
def two_mode_cohort():
    return generate_cohort(PhantomSpec(n_patients=25, n_phases=6, organ_vertices=60,
                                       gtv_vertices=30, motion_family="two_mode", seed=2))


def _random_samples(rng, s=12, n=20, rank=None):
    if rank is None:
        return rng.standard_normal((s, 3 * n))
    return rng.standard_normal((s, rank)) @ rng.standard_normal((rank, 3 * n))


# -- displacement fields ----------------------------------------------------------------

def test_identical_sequence_has_zero_fields():
    m = icosphere(1)
    fields = displacement_fields([m, m, m])
    assert len(fields) == 3
    assert all(np.all(f.vectors == 0) for f in fields)


def test_constant_shift_field():
    m = icosphere(1)
    fields = displacement_fields([m, m.with_vertices(m.vertices + [0, 0, 3.0])])
    expected = np.broadcast_to([0, 0, 3.0], (m.n_vertices, 3))
    np.testing.assert_allclose(fields[1].vectors, expected, atol=1e-15)


def test_fields_match_analytic_ground_truth(small_cohort):
    for organ in ("ST", "GTV"):
        gt = small_cohort.ground_truth(organ)
        for p in range(small_cohort.n_patients):
            seq = [small_cohort.mesh(p, t, organ) for t in range(1, small_cohort.n_phases + 1)]
            for t, f in enumerate(displacement_fields(seq)):
                np.testing.assert_allclose(f.vectors, gt[p, t], atol=1e-9)


def test_fields_reject_topology_mismatch():
    with pytest.raises(SizeMismatchError):
        displacement_fields([icosphere(1), icosphere(2)])
    with pytest.raises(ModelError):
        displacement_fields([])


# -- modes -------------------------------------------------------------------------------

def test_equal_samples_have_zero_variance():
    x = np.tile(np.arange(9.0), (4, 1))
    model = fit_deformation_modes(x)
    np.testing.assert_allclose(model.mean_displacement, np.arange(9.0))
    assert np.all(model.eigenvalues < 1e-24)
    assert explained_variance(model, 1) == 1.0


def test_rank_one_samples(rng):
    mean = rng.standard_normal(30)
    w = rng.standard_normal(30)
    x = np.array([mean + w, mean - w, mean + 0.5 * w, mean - 0.5 * w])
    model = fit_deformation_modes(x)
    assert model.eigenvalues[0] > 0
    assert np.all(model.eigenvalues[1:] < 1e-12 * model.eigenvalues[0])
    assert abs(model.modes[0] @ w) / np.linalg.norm(w) == pytest.approx(1.0, abs=1e-12)
    assert explained_variance(model, 1) == pytest.approx(1.0, abs=1e-12)
    assert explained_variance(model, 0) == 0.0


def test_eigenvalue_convention(rng):
    x = _random_samples(rng)
    model = fit_deformation_modes(x)
    sv = np.linalg.svd(x - x.mean(axis=0), compute_uv=False)
    np.testing.assert_allclose(model.eigenvalues, sv[: len(x) - 1] ** 2 / (len(x) - 1),
                               rtol=1e-12)


def test_explained_variance_matches_covariance_eigs(rng):
    x = _random_samples(rng, s=15, n=8)
    model = fit_deformation_modes(x)
    cov = np.cov(x, rowvar=False)
    eig = np.sort(np.linalg.eigvalsh(cov))[::-1]
    for k in range(model.n_modes + 1):
        assert explained_variance(model, k) == pytest.approx(eig[:k].sum() / eig.sum(),
                                                             abs=1e-10)


@settings(max_examples=25, deadline=None)
@given(st.integers(2, 12), st.integers(1, 15), st.integers(0, 10_000))
def test_modes_orthonormal_and_sorted(s, n, seed):
    x = np.random.default_rng(seed).standard_normal((s, 3 * n))
    model = fit_deformation_modes(x, k=min(s - 1, 3 * n))
    gram = model.modes @ model.modes.T
    np.testing.assert_allclose(gram, np.eye(model.n_modes), atol=1e-8)
    assert np.all(np.diff(model.eigenvalues) <= 1e-12)
    assert np.all(model.eigenvalues >= 0)


def test_full_reconstruction(rng):
    x = _random_samples(rng, s=10, n=30)
    model = fit_deformation_modes(x)
    for row in x:
        rec = synthesize_deformation(model, model.project(row)).vectors.reshape(-1)
        assert np.linalg.norm(rec - row) <= 1e-8 * np.linalg.norm(row)


def test_truncated_reconstruction_residual(rng):
    x = _random_samples(rng, s=10, n=30)
    model = fit_deformation_modes(x, k=3)
    centered = x - x.mean(axis=0)
    u, sv, vt = np.linalg.svd(centered, full_matrices=False)
    oracle = x.mean(axis=0) + (centered @ vt[:3].T) @ vt[:3]
    for row, ref in zip(x, oracle):
        rec = synthesize_deformation(model, model.project(row)).vectors.reshape(-1)
        np.testing.assert_allclose(rec, ref, atol=1e-10)


def test_mode_count_limits(rng):
    x = _random_samples(rng, s=4)
    with pytest.raises(ModelError):
        fit_deformation_modes(x, k=4)
    with pytest.raises(ModelError):
        fit_deformation_modes(x[:1])
    with pytest.raises(ModelError):
        explained_variance(fit_deformation_modes(x), 4)


def test_two_mode_family_is_captured_by_two_modes(two_mode_cohort):
    model = fit_cohort_modes(two_mode_cohort.displacements("ST"), phases=[4])
    assert model.n_samples == 25
    assert explained_variance(model, 2) > 0.95


def test_patient_modes(small_cohort):
    models = fit_patient_modes(small_cohort.displacements("LI"))
    assert len(models) == small_cohort.n_patients
    assert all(m.n_samples == small_cohort.n_phases - 1 for m in models)


# -- synthesis ---------------------------------------------------------------------------

def test_synthesize_zero_weights_is_mean(rng):
    model = fit_deformation_modes(_random_samples(rng))
    out = synthesize_deformation(model, np.zeros(3))
    np.testing.assert_array_equal(out.vectors.reshape(-1), model.mean_displacement)


def test_synthesize_along_first_mode(rng):
    model = fit_deformation_modes(_random_samples(rng))
    lo, hi = mode_extremes(model, 0)
    w = 2 * np.sqrt(model.eigenvalues[0])
    diff = hi.vectors.reshape(-1) - model.mean_displacement
    np.testing.assert_allclose(diff, w * model.modes[0], atol=1e-12)
    np.testing.assert_allclose(lo.vectors + hi.vectors,
                               2 * model.mean_displacement.reshape(-1, 3), atol=1e-12)


def test_synthesize_too_many_weights(rng):
    model = fit_deformation_modes(_random_samples(rng, s=3))
    with pytest.raises(SizeMismatchError):
        synthesize_deformation(model, np.ones(3))


def test_save_load_round_trip(tmp_path, rng):
    model = fit_deformation_modes(_random_samples(rng, s=6, n=7), base_id="LI")
    model.save(tmp_path)
    back = DeformationModel.load(tmp_path)
    np.testing.assert_allclose(back.modes, model.modes, rtol=1e-15)
    np.testing.assert_allclose(back.mean_displacement, model.mean_displacement, rtol=1e-15)
    np.testing.assert_array_equal(back.eigenvalues, model.eigenvalues)
    assert back.n_samples == 6 and back.base_id == "LI"


# -- motion statistics -----------------------------------------------------------------

def test_constant_shift_statistics():
    d = np.zeros((1, 3, 10, 3))
    d[0, 1] = [0, 3.0, 4.0]
    d[0, 2] = [1.0, 0, 0]
    stats = motion_statistics({"ST": d})
    np.testing.assert_allclose(stats.mean["ST"], [0.0, 5.0, 1.0])
    np.testing.assert_allclose(stats.std["ST"], 0.0, atol=1e-15)


def test_two_patient_statistics():
    d = np.zeros((2, 2, 5, 3))
    d[0, 1, :, 2] = 4.0
    d[1, 1, :, 2] = 8.0
    stats = motion_statistics({"GTV": d})
    assert stats.mean["GTV"][1] == pytest.approx(6.0)
    assert stats.std["GTV"][1] == pytest.approx(2.0)
    assert stats.mean["GTV"][0] == 0.0


def test_statistics_match_recomputation(small_cohort):
    disp = {o: small_cohort.displacements(o) for o in small_cohort.organs}
    stats = motion_statistics(disp)
    for organ, d in disp.items():
        for t in range(small_cohort.n_phases):
            mags = [np.linalg.norm(d[p, t, i]) for p in range(d.shape[0])
                    for i in range(d.shape[2])]
            assert stats.mean[organ][t] == pytest.approx(np.mean(mags), abs=1e-12)
            assert stats.std[organ][t] == pytest.approx(np.std(mags), abs=1e-12)
        assert stats.mean[organ][0] == 0.0


def test_statistics_invariant_to_patient_order(small_cohort):
    d = small_cohort.displacements("DU")
    a = motion_statistics({"DU": d})
    b = motion_statistics({"DU": d[::-1]})
    np.testing.assert_allclose(a.mean["DU"], b.mean["DU"], rtol=1e-12)
    np.testing.assert_allclose(a.std["DU"], b.std["DU"], rtol=1e-12)


def test_statistics_errors():
    with pytest.raises(ModelError):
        motion_statistics({})
    with pytest.raises(ModelError):
        motion_statistics({"ST": np.zeros((0, 2, 3, 3))})


def test_statistics_csv(tmp_path, small_cohort):
    stats = motion_statistics({"ST": small_cohort.displacements("ST")})
    stats.to_csv(tmp_path / "m.csv")
    lines = (tmp_path / "m.csv").read_text().splitlines()
    assert lines[0] == "organ,phase,mean_mm,std_mm"
    assert len(lines) == 1 + small_cohort.n_phases
