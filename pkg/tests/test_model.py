import numpy as np
import pytest
from scipy.stats import norm

from mlpp.model import (cluster_params_for_labels, data_loglik,
                        derive_cluster_labels, load_state, refresh_cluster_labels,
                        save_state, scores_logprior, sticks_to_weights,
                        validate_state)
from conftest import random_state_and_workspace


def test_derive_cluster_labels_mapping():
    subject_alloc = np.array([[1], [2], [2], [3]])
    channel_alloc = np.full((4, 2, 1), 4)
    channel_alloc[3, :, 0] = [5, 7]
    codes = np.array([2, 2, 3, 3])
    labels = derive_cluster_labels(subject_alloc, channel_alloc, codes)
    np.testing.assert_array_equal(labels[:, :, 0],
                                  [[1, 1], [2, 2], [3, 3], [5, 7]])


def test_derive_cluster_labels_validation():
    codes = np.array([2, 3])
    with pytest.raises(ValueError, match="1, 2 or 3"):
        derive_cluster_labels(np.array([[0], [1]]), np.full((2, 1, 1), 4), codes)
    with pytest.raises(ValueError, match=">= 4"):
        derive_cluster_labels(np.array([[1], [1]]), np.full((2, 1, 1), 2), codes)


def test_cluster_params_gather_by_dimension_then_group():
    # distinct values in every slot so a transposed gather cannot pass
    state, _, _, _ = random_state_and_workspace(0, u=4, n=3, k=2)
    state.group_mean = np.array([[10.0, 20.0], [30.0, 40.0]])
    state.group_prec = np.array([[1.0, 2.0], [3.0, 4.0]])
    state.common_mean = np.array([-1.0, -2.0])
    state.common_prec = np.array([0.5, 0.25])
    state.subject_alloc[:] = 2
    state.subject_alloc[0, :] = 1
    refresh_cluster_labels(state)

    means, precs = cluster_params_for_labels(state)
    np.testing.assert_array_equal(means[0, :, 0], -1.0)
    np.testing.assert_array_equal(means[0, :, 1], -2.0)
    gidx = state.group_codes - 2
    for subj in range(1, 4):
        for dim in range(2):
            assert means[subj, 0, dim] == state.group_mean[dim, gidx[subj]]
            assert precs[subj, 0, dim] == state.group_prec[dim, gidx[subj]]


def test_cluster_params_subject_labels():
    state, _, _, _ = random_state_and_workspace(1, u=3, n=4, k=2)
    state.subject_alloc[2, 1] = 3
    state.channel_alloc[2, :, 1] = [4, 5, 4, 6]
    refresh_cluster_labels(state)
    means, _ = cluster_params_for_labels(state)
    np.testing.assert_array_equal(
        means[2, :, 1], state.subject_mean[2, 1, [0, 1, 0, 2]])


def test_sticks_to_weights_frozen_example():
    raw = np.full((1, 2, 3), 0.5)
    w = sticks_to_weights(raw)
    np.testing.assert_allclose(w[0, 0], [4.0 / 7.0, 2.0 / 7.0, 1.0 / 7.0],
                               rtol=1e-15)
    np.testing.assert_allclose(w.sum(axis=2), 1.0, rtol=1e-15)
    with pytest.raises(ValueError, match="inside"):
        sticks_to_weights(np.array([0.5, 1.0]))
    with pytest.raises(ValueError, match="inside"):
        sticks_to_weights(np.array([0.0, 0.5]))


def test_data_loglik_matches_direct_sum():
    state, _, ws, _ = random_state_and_workspace(2)
    val = data_loglik(state, ws.centred, ws.eigenfunctions)
    fitted = np.einsum("uik,tk->uit", state.scores, ws.eigenfunctions)
    direct = float(np.sum(norm.logpdf(ws.centred, fitted,
                                      state.noise_prec ** -0.5)))
    assert val == pytest.approx(direct, rel=1e-12)


def test_scores_logprior_matches_scipy():
    state, _, _, _ = random_state_and_workspace(3)
    means, precs = cluster_params_for_labels(state)
    direct = float(np.sum(norm.logpdf(state.scores, means, precs ** -0.5)))
    assert scores_logprior(state) == pytest.approx(direct, rel=1e-12)


def test_validate_state_catches_corruption():
    state, hp, _, _ = random_state_and_workspace(4)
    validate_state(state, hp)

    bad = state.copy()
    bad.category_weights[0] = [0.5, 0.4, 0.2]
    with pytest.raises(ValueError, match="sum to 1"):
        validate_state(bad)

    bad = state.copy()
    bad.subject_alloc[0, 0] = 1 + bad.subject_alloc[0, 0] % 3
    with pytest.raises(ValueError, match="disagree"):
        validate_state(bad)

    bad = state.copy()
    bad.common_prec[0] = 0.9 * hp.common_sd_bound[0] ** -2
    with pytest.raises(ValueError, match="exceeds its prior bound"):
        validate_state(bad, hp)

    bad = state.copy()
    bad.scores[0, 0, 0] = np.nan
    with pytest.raises(ValueError, match="finite"):
        validate_state(bad)

    bad = state.copy()
    bad.channel_alloc[0, 0, 0] = 4 + bad.max_subject_clusters
    with pytest.raises(ValueError, match="out of range"):
        validate_state(bad)


def test_copy_is_independent():
    state, _, _, _ = random_state_and_workspace(5)
    clone = state.copy()
    clone.scores[0, 0, 0] += 1.0
    clone.subject_alloc[0, 0] = 3
    assert state.scores[0, 0, 0] != clone.scores[0, 0, 0]
    assert state.subject_alloc[0, 0] != 3 or clone.subject_alloc[0, 0] == 3


def test_state_round_trip(tmp_path):
    state, _, _, _ = random_state_and_workspace(6)
    save_state(state, tmp_path / "state")
    back = load_state(tmp_path / "state")
    np.testing.assert_array_equal(back.scores, state.scores)
    assert back.noise_prec == state.noise_prec
    np.testing.assert_array_equal(back.subject_alloc, state.subject_alloc)
    np.testing.assert_array_equal(back.channel_alloc, state.channel_alloc)
    np.testing.assert_array_equal(back.cluster_label, state.cluster_label)
    np.testing.assert_array_equal(back.common_mean, state.common_mean)
    np.testing.assert_array_equal(back.common_prec, state.common_prec)
    np.testing.assert_array_equal(back.group_mean, state.group_mean)
    np.testing.assert_array_equal(back.group_prec, state.group_prec)
    np.testing.assert_array_equal(back.subject_mean, state.subject_mean)
    np.testing.assert_array_equal(back.subject_prec, state.subject_prec)
    np.testing.assert_array_equal(back.category_weights, state.category_weights)
    np.testing.assert_array_equal(back.raw_sticks, state.raw_sticks)
    np.testing.assert_array_equal(back.stick_weights, state.stick_weights)
    np.testing.assert_array_equal(back.group_codes, state.group_codes)
    validate_state(back)
