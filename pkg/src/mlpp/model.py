"""State and densities of the multilevel score-clustering model.

Each (subject, dimension) pair carries a category in {1, 2, 3}: its
scores all share the common cluster, all share the subject's group
cluster, or are split channel-by-channel among subject-specific
clusters labelled 4 .. 3+J (J = max_subject_clusters).  The flat cluster
label per (subject, channel, dimension) is derived from the category,
the subject's group code and the channel allocation; every conditional
in the sampler reads cluster parameters through that label.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .fpca import GROUP_A, GROUP_B
from .hyperparams import HyperParams

LOG_2PI = float(np.log(2.0 * np.pi))

CAT_COMMON = 1
CAT_GROUP = 2
CAT_SUBJECT = 3
FIRST_SUBJECT_LABEL = 4


@dataclass
class ModelState:
    """All latent quantities of the model at one iteration.

    Shapes: scores (U, n, K); subject_alloc (U, K) in {1,2,3};
    channel_alloc (U, n, K) in {4..3+J} (defined for every channel, used
    only where subject_alloc is 3); cluster_label (U, n, K) derived;
    group parameters indexed [k, group] in group-code order (2, 3);
    subject parameters indexed [u, k, j-4]; category_weights (K, 3);
    raw_sticks / stick_weights (K, 2, J) with rows renormalized to sum 1.
    """

    scores: np.ndarray
    noise_prec: float
    subject_alloc: np.ndarray
    channel_alloc: np.ndarray
    cluster_label: np.ndarray
    common_mean: np.ndarray
    common_prec: np.ndarray
    group_mean: np.ndarray
    group_prec: np.ndarray
    subject_mean: np.ndarray
    subject_prec: np.ndarray
    category_weights: np.ndarray
    raw_sticks: np.ndarray
    stick_weights: np.ndarray
    group_codes: np.ndarray

    @property
    def n_subjects(self) -> int:
        return self.scores.shape[0]

    @property
    def n_channels(self) -> int:
        return self.scores.shape[1]

    @property
    def n_components(self) -> int:
        return self.scores.shape[2]

    @property
    def max_subject_clusters(self) -> int:
        return self.subject_mean.shape[2]

    def copy(self) -> "ModelState":
        return ModelState(
            scores=self.scores.copy(), noise_prec=self.noise_prec,
            subject_alloc=self.subject_alloc.copy(),
            channel_alloc=self.channel_alloc.copy(),
            cluster_label=self.cluster_label.copy(),
            common_mean=self.common_mean.copy(), common_prec=self.common_prec.copy(),
            group_mean=self.group_mean.copy(), group_prec=self.group_prec.copy(),
            subject_mean=self.subject_mean.copy(), subject_prec=self.subject_prec.copy(),
            category_weights=self.category_weights.copy(),
            raw_sticks=self.raw_sticks.copy(), stick_weights=self.stick_weights.copy(),
            group_codes=self.group_codes.copy(),
        )


def derive_cluster_labels(subject_alloc: np.ndarray, channel_alloc: np.ndarray,
                          group_codes: np.ndarray) -> np.ndarray:
    """Flat cluster label per (subject, channel, dimension).

    Category 1 maps to label 1, category 2 to the subject's group code,
    category 3 to the channel allocation.
    """
    subject_alloc = np.asarray(subject_alloc)
    channel_alloc = np.asarray(channel_alloc)
    if not set(np.unique(subject_alloc)) <= {CAT_COMMON, CAT_GROUP, CAT_SUBJECT}:
        raise ValueError("subject allocations must be 1, 2 or 3")
    if np.any(channel_alloc < FIRST_SUBJECT_LABEL):
        raise ValueError(f"channel allocations must be >= {FIRST_SUBJECT_LABEL}")
    per_subject = np.where(subject_alloc == CAT_GROUP,
                           group_codes[:, None], subject_alloc)
    labels = np.where((subject_alloc == CAT_SUBJECT)[:, None, :],
                      channel_alloc, per_subject[:, None, :])
    return labels.astype(int)


def refresh_cluster_labels(state: ModelState) -> None:
    state.cluster_label = derive_cluster_labels(
        state.subject_alloc, state.channel_alloc, state.group_codes)


def cluster_params_for_labels(state: ModelState) -> tuple[np.ndarray, np.ndarray]:
    """Gather (mean, precision) per (subject, channel, dimension) label."""
    u, _, k = state.scores.shape
    j = state.max_subject_clusters
    stacked_mean = np.concatenate([
        np.broadcast_to(state.common_mean[None, :, None], (u, k, 1)),
        np.broadcast_to(state.group_mean[None, :, :], (u, k, 2)),
        state.subject_mean,
    ], axis=2)
    stacked_prec = np.concatenate([
        np.broadcast_to(state.common_prec[None, :, None], (u, k, 1)),
        np.broadcast_to(state.group_prec[None, :, :], (u, k, 2)),
        state.subject_prec,
    ], axis=2)
    idx = state.cluster_label - 1                      # labels 1..3+J -> 0..2+J
    uu = np.arange(u)[:, None, None]
    kk = np.arange(k)[None, None, :]
    return stacked_mean[uu, kk, idx], stacked_prec[uu, kk, idx]


def data_loglik(state: ModelState, centred_values: np.ndarray,
                eigenfunctions: np.ndarray) -> float:
    """Gaussian log likelihood of the centred curves given scores and noise.

    centred_values has shape (U, n, T): observed curves minus the fPCA
    mean curve. The fitted curve per channel is the score-weighted sum of
    eigenfunctions; every time point carries iid noise with precision
    noise_prec.
    """
    fitted = np.einsum("uik,tk->uit", state.scores, eigenfunctions)
    resid = centred_values - fitted
    n_obs = resid.size
    ssr = float(np.sum(resid ** 2))
    return 0.5 * n_obs * (np.log(state.noise_prec) - LOG_2PI) \
        - 0.5 * state.noise_prec * ssr


def scores_logprior(state: ModelState) -> float:
    """Log density of all scores under their cluster normals."""
    means, precs = cluster_params_for_labels(state)
    return float(np.sum(
        0.5 * (np.log(precs) - LOG_2PI) - 0.5 * precs * (state.scores - means) ** 2))


def sticks_to_weights(raw_sticks: np.ndarray) -> np.ndarray:
    """Truncated stick-breaking weights, renormalized to sum exactly 1.

    Operates on the last axis: w_j = p_j * prod_{l<j} (1 - p_l), then
    divided by the total.
    """
    raw = np.asarray(raw_sticks, dtype=float)
    if np.any(raw <= 0) or np.any(raw >= 1):
        raise ValueError("stick proportions must lie strictly inside (0, 1)")
    remaining = np.cumprod(1.0 - raw, axis=-1)
    shifted = np.concatenate([np.ones_like(raw[..., :1]), remaining[..., :-1]], axis=-1)
    weights = raw * shifted
    return weights / weights.sum(axis=-1, keepdims=True)


def validate_state(state: ModelState, hp: HyperParams | None = None,
                   atol: float = 1e-12) -> None:
    """Raise if any structural invariant is violated."""
    u, n, k = state.scores.shape
    j = state.max_subject_clusters
    if not np.all(np.isfinite(state.scores)):
        raise ValueError("scores must be finite")
    if not state.noise_prec > 0:
        raise ValueError("noise precision must be positive")
    if not set(np.unique(state.group_codes)) <= {GROUP_A, GROUP_B}:
        raise ValueError("group codes must be 2 or 3")
    if np.any(state.channel_alloc < FIRST_SUBJECT_LABEL) or \
            np.any(state.channel_alloc >= FIRST_SUBJECT_LABEL + j):
        raise ValueError("channel allocations out of range")
    expected = derive_cluster_labels(state.subject_alloc, state.channel_alloc,
                                     state.group_codes)
    if not np.array_equal(expected, state.cluster_label):
        raise ValueError("stored cluster labels disagree with (category, channel) labels")
    for name in ("common_prec", "group_prec", "subject_prec"):
        if np.any(getattr(state, name) <= 0):
            raise ValueError(f"{name} must be positive")
    if np.max(np.abs(state.category_weights.sum(axis=1) - 1.0)) > atol:
        raise ValueError("category weights must sum to 1 per dimension")
    if np.max(np.abs(state.stick_weights.sum(axis=2) - 1.0)) > atol:
        raise ValueError("stick weights must sum to 1 per (dimension, group)")
    if hp is not None:
        if np.any(state.common_prec ** -0.5 >= hp.common_sd_bound):
            raise ValueError("a common-cluster sd exceeds its prior bound")
        if np.any(state.group_prec ** -0.5 >= hp.group_sd_bound):
            raise ValueError("a group-cluster sd exceeds its prior bound")
        per_subject_bound = hp.subject_sd_bound.T[state.group_codes - GROUP_A]  # (U, K)
        if np.any(state.subject_prec ** -0.5 >= per_subject_bound[:, :, None]):
            raise ValueError("a subject-cluster sd exceeds its prior bound")


# ---------------------------------------------------------------------------
# State snapshots (JSON for scalars and labels, CSV for real tensors)
# ---------------------------------------------------------------------------

def save_state(state: ModelState, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    doc = {
        "noise_prec": state.noise_prec,
        "subject_alloc": state.subject_alloc.tolist(),
        "channel_alloc": state.channel_alloc.tolist(),
        "group_codes": state.group_codes.tolist(),
        "common_mean": state.common_mean.tolist(),
        "common_prec": state.common_prec.tolist(),
        "group_mean": state.group_mean.tolist(),
        "group_prec": state.group_prec.tolist(),
        "category_weights": state.category_weights.tolist(),
        "raw_sticks": state.raw_sticks.tolist(),
        "shape": list(state.scores.shape) + [state.max_subject_clusters],
    }
    (directory / "state.json").write_text(json.dumps(doc) + "\n")
    with open(directory / "scores.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["subject", "channel", "dim", "value"])
        u, n, k = state.scores.shape
        for s in range(u):
            for i in range(n):
                for d in range(k):
                    writer.writerow([s, i, d, repr(float(state.scores[s, i, d]))])
    with open(directory / "subject_clusters.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["subject", "dim", "label", "mean", "prec"])
        u, k, j = state.subject_mean.shape
        for s in range(u):
            for d in range(k):
                for lab in range(j):
                    writer.writerow([s, d, lab,
                                     repr(float(state.subject_mean[s, d, lab])),
                                     repr(float(state.subject_prec[s, d, lab]))])


def load_state(directory) -> ModelState:
    directory = Path(directory)
    doc = json.loads((directory / "state.json").read_text())
    u, n, k, j = doc["shape"]
    scores = np.zeros((u, n, k))
    for row in np.loadtxt(directory / "scores.csv", delimiter=",",
                          skiprows=1, ndmin=2):
        scores[int(row[0]), int(row[1]), int(row[2])] = row[3]
    subject_mean = np.zeros((u, k, j))
    subject_prec = np.zeros((u, k, j))
    for row in np.loadtxt(directory / "subject_clusters.csv", delimiter=",",
                          skiprows=1, ndmin=2):
        subject_mean[int(row[0]), int(row[1]), int(row[2])] = row[3]
        subject_prec[int(row[0]), int(row[1]), int(row[2])] = row[4]
    raw_sticks = np.array(doc["raw_sticks"])
    state = ModelState(
        scores=scores,
        noise_prec=doc["noise_prec"],
        subject_alloc=np.array(doc["subject_alloc"], dtype=int),
        channel_alloc=np.array(doc["channel_alloc"], dtype=int),
        cluster_label=np.zeros((u, n, k), dtype=int),
        common_mean=np.array(doc["common_mean"]),
        common_prec=np.array(doc["common_prec"]),
        group_mean=np.array(doc["group_mean"]),
        group_prec=np.array(doc["group_prec"]),
        subject_mean=subject_mean,
        subject_prec=subject_prec,
        category_weights=np.array(doc["category_weights"]),
        raw_sticks=raw_sticks,
        stick_weights=sticks_to_weights(raw_sticks),
        group_codes=np.array(doc["group_codes"], dtype=int),
    )
    refresh_cluster_labels(state)
    return state
