import numpy as np
import pytest

from mlpp.fpca import (FunctionalDataset, fit_fpca, read_basis, read_dataset_csv,
                       read_time_grid_csv, reconstruct, smooth_dataset,
                       trapezoid_weights, write_basis, write_dataset_csv,
                       write_time_grid_csv)
from mlpp.simgen import SimDesign, make_eigenfunctions, simulate


def _norm_under_grid(f, grid):
    return np.sqrt(np.sum(trapezoid_weights(grid) * f ** 2))


def _rank_k_dataset(score_sds, u=12, n=6, t=64, seed=0):
    """Noiseless curves built on the shared orthonormal mode pair, with
    score columns exactly centred and orthogonal so the planted modes are
    the exact eigenfunctions of the pooled covariance."""
    rng = np.random.default_rng(seed)
    grid, modes = make_eigenfunctions(t)
    k = len(score_sds)
    flat = rng.normal(0.0, score_sds, size=(u * n, k))
    flat -= flat.mean(axis=0)
    q, r = np.linalg.qr(flat)
    flat = q * np.sqrt(np.sum(flat ** 2, axis=0))  # orthogonal, original scale
    values = (flat @ modes[:, :k].T).reshape(u, n, t) + 1.5
    codes = np.where(np.arange(u) < u // 2, 2, 3)
    return FunctionalDataset(values, grid, codes), flat.reshape(u, n, k), modes[:, :k]


def test_trapezoid_weights_integrate_polynomials():
    grid = np.linspace(0.0, 2.0, 101)
    w = trapezoid_weights(grid)
    assert w.sum() == pytest.approx(2.0, rel=1e-12)
    assert np.sum(w * grid) == pytest.approx(2.0, rel=1e-4)


def test_rank_one_noiseless_recovery():
    data, scores, modes = _rank_k_dataset((2.0,), seed=3)
    basis = fit_fpca(data)
    assert basis.n_components == 1
    assert basis.var_explained[0] >= 1.0 - 1e-8
    sign = np.sign(np.sum(basis.eigenfunctions[:, 0] * modes[:, 0]))
    np.testing.assert_allclose(basis.eigenfunctions[:, 0] * sign, modes[:, 0],
                               atol=1e-8)
    np.testing.assert_allclose(basis.scores[:, :, 0] * sign, scores[:, :, 0],
                               atol=1e-8)


def test_rank_two_shares_match_score_variances():
    data, scores, _ = _rank_k_dataset((3.0, 1.0), seed=4)
    basis = fit_fpca(data, var_threshold=1.0, min_component_share=0.01)
    assert basis.n_components == 2
    flat = scores.reshape(-1, 2)
    expected = np.sum(flat ** 2, axis=0)
    np.testing.assert_allclose(basis.var_explained,
                               expected / expected.sum(), atol=1e-8)


def test_small_component_dropped_by_share_rule():
    data, _, _ = _rank_k_dataset((3.0, 1.0), seed=5)
    # second mode holds ~10% of the variance: below the 15% default share
    basis = fit_fpca(data, var_threshold=0.95)
    assert basis.n_components == 1


def test_eigenfunctions_orthonormal_under_grid_weights():
    design = SimDesign(n_subjects=8, n_channels=6, n_timepoints=60,
                       n_group_a=4, snr=6.0, seed=11)
    data, _ = simulate(design)
    basis = fit_fpca(data)
    w = trapezoid_weights(data.time_grid)
    gram = np.einsum("tk,t,tl->kl", basis.eigenfunctions, w, basis.eigenfunctions)
    np.testing.assert_allclose(gram, np.eye(basis.n_components), atol=1e-8)
    np.testing.assert_allclose(basis.component_norms(), 1.0, atol=1e-8)


def test_sign_convention_largest_entry_positive():
    data, _, _ = _rank_k_dataset((2.0, 1.0), seed=6)
    basis = fit_fpca(data, var_threshold=1.0, min_component_share=0.01)
    for col in basis.eigenfunctions.T:
        assert col[np.argmax(np.abs(col))] > 0


def test_reconstruct_matches_projection():
    data, _, _ = _rank_k_dataset((2.0, 1.0), seed=7)
    basis = fit_fpca(data, var_threshold=1.0, min_component_share=0.01)
    np.testing.assert_allclose(reconstruct(basis, 3, 2), data.values[3, 2],
                               atol=1e-8)


def test_zero_variance_rejected():
    grid = np.linspace(0.0, 1.0, 20)
    flat = np.ones((3, 2, 20))
    data = FunctionalDataset(flat, grid, np.array([2, 2, 3]))
    with pytest.raises(ValueError, match="zero variance"):
        fit_fpca(data)


def test_dataset_validation():
    grid = np.linspace(0.0, 1.0, 8)
    values = np.zeros((2, 2, 8))
    with pytest.raises(ValueError, match="group codes"):
        FunctionalDataset(values, grid, np.array([2, 5]))
    with pytest.raises(ValueError, match="grid length"):
        FunctionalDataset(values, grid[:-1], np.array([2, 3]))
    with pytest.raises(ValueError, match="finite"):
        FunctionalDataset(values + np.nan, grid, np.array([2, 3]))
    with pytest.raises(ValueError, match="shape"):
        FunctionalDataset(values[0], grid, np.array([2, 3]))


def test_smooth_dataset_reduces_noise():
    design = SimDesign(n_subjects=6, n_channels=4, n_timepoints=80,
                       n_group_a=3, snr=2.0, seed=9)
    data, truth = simulate(design)
    smoothed = smooth_dataset(data, basis_size=20)
    assert smoothed.values.shape == data.values.shape
    raw_err = np.mean((data.values - truth.noiseless) ** 2)
    smooth_err = np.mean((smoothed.values - truth.noiseless) ** 2)
    assert smooth_err < 0.5 * raw_err
    with pytest.raises(ValueError, match="nonnegative"):
        smooth_dataset(data, basis_size=20, penalty=-1.0)


def test_dataset_csv_round_trip(tmp_path):
    design = SimDesign(n_subjects=4, n_channels=3, n_timepoints=24,
                       n_group_a=2, snr=6.0, seed=12)
    data, _ = simulate(design)
    write_dataset_csv(data, tmp_path / "data.csv")
    write_time_grid_csv(data.time_grid, tmp_path / "grid.csv")
    back = read_dataset_csv(tmp_path / "data.csv", tmp_path / "grid.csv")
    np.testing.assert_array_equal(back.values, data.values)
    np.testing.assert_array_equal(back.time_grid, data.time_grid)
    np.testing.assert_array_equal(back.group_codes, data.group_codes)
    assert back.subject_ids == data.subject_ids
    assert read_time_grid_csv(tmp_path / "grid.csv").shape == (24,)


def test_basis_round_trip(tmp_path):
    data, _, _ = _rank_k_dataset((2.0, 1.0), seed=13)
    basis = fit_fpca(data, var_threshold=1.0, min_component_share=0.01)
    write_basis(basis, tmp_path / "basis")
    back = read_basis(tmp_path / "basis")
    np.testing.assert_array_equal(back.mean_curve, basis.mean_curve)
    np.testing.assert_array_equal(back.eigenfunctions, basis.eigenfunctions)
    np.testing.assert_array_equal(back.scores, basis.scores)
    np.testing.assert_array_equal(back.time_grid, basis.time_grid)
    np.testing.assert_array_equal(back.eigenvalues, basis.eigenvalues)
    np.testing.assert_array_equal(back.var_explained, basis.var_explained)


def test_var_threshold_validation():
    data, _, _ = _rank_k_dataset((2.0,), seed=14)
    with pytest.raises(ValueError, match="var_threshold"):
        fit_fpca(data, var_threshold=0.0)
    with pytest.raises(ValueError, match="var_threshold"):
        fit_fpca(data, var_threshold=1.5)
