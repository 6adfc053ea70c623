"""Gibbs sampler for the multilevel score-clustering model.

One scan updates, in order: scores, noise precision, cluster parameters,
subject/channel allocations, category weights, stick proportions.  The
allocation update marginalizes the channel labels when choosing each
subject's category (the uncollapsed variant is kept behind a flag for
equivalence testing).  Chains are deterministic given (seed, inputs).
"""
from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
from scipy.special import gammaincc, gammainccinv, logsumexp

from .fpca import GROUP_A, EigenBasis, FunctionalDataset
from .hyperparams import HyperParams
from .model import (CAT_COMMON, CAT_GROUP, CAT_SUBJECT, FIRST_SUBJECT_LABEL,
                    LOG_2PI, ModelState, cluster_params_for_labels,
                    data_loglik, derive_cluster_labels, load_state,
                    refresh_cluster_labels, save_state, scores_logprior,
                    sticks_to_weights, validate_state)

AUDIT_TOL = 1e-8
_TINY_SS = 1e-300


class SamplerError(RuntimeError):
    """Raised when a scan produces non-finite state."""


@dataclass
class SamplerConfig:
    n_iter: int
    burn_in: int = 0
    thin: int = 1
    n_chains: int = 1
    seed: int = 0
    init_mode: str = "empirical"        # or "prior_draw"
    audit_every: int = 0
    checkpoint_every: int = 0
    collapsed_alloc: bool = True
    likelihood_off: bool = False

    def __post_init__(self):
        if self.init_mode not in ("empirical", "prior_draw"):
            raise ValueError("init_mode must be 'empirical' or 'prior_draw'")
        if self.burn_in < 0 or self.burn_in >= self.n_iter:
            raise ValueError("burn_in must lie in [0, n_iter)")
        if self.thin < 1:
            raise ValueError("thin must be a positive integer")
        if (self.n_iter - self.burn_in) // self.thin < 1:
            raise ValueError("no draws would be kept; lower burn_in or thin")
        if self.n_chains < 1:
            raise ValueError("n_chains must be positive")

    @property
    def n_draws(self) -> int:
        return (self.n_iter - self.burn_in) // self.thin


@dataclass
class Workspace:
    """Precomputed data quantities shared by all updates of one chain."""

    centred: np.ndarray         # (U, n, T) curves minus the mean curve
    proj: np.ndarray            # (U, n, K) plain dot products with eigenfunctions
    gram: np.ndarray            # (K, K) plain Gram matrix of eigenfunctions
    eigenfunctions: np.ndarray  # (T, K)
    group_codes: np.ndarray     # (U,)


def make_workspace(data: FunctionalDataset, basis: EigenBasis) -> Workspace:
    centred = data.values - basis.mean_curve
    phi = basis.eigenfunctions
    return Workspace(centred=centred, proj=centred @ phi, gram=phi.T @ phi,
                     eigenfunctions=phi, group_codes=data.group_codes.copy())


def _norm_logpdf(x, mean, prec):
    return 0.5 * (np.log(prec) - LOG_2PI) - 0.5 * prec * (x - mean) ** 2


def _categorical_rows(rng: np.random.Generator, probs: np.ndarray) -> np.ndarray:
    """One categorical draw per row of the last axis."""
    cum = np.cumsum(probs, axis=-1)
    r = rng.random(probs.shape[:-1] + (1,)) * cum[..., -1:]
    idx = np.sum(r > cum, axis=-1)
    return np.minimum(idx, probs.shape[-1] - 1)


def _uniform_sd_draw(rng: np.random.Generator, bound) -> np.ndarray:
    """Uniform cluster-sd draw on (0, bound), kept strictly inside."""
    bound = np.asarray(bound, dtype=float)
    u = rng.random(bound.shape) if bound.shape else rng.random()
    return np.clip(bound * u, 1e-12 * bound, (1.0 - 1e-12) * bound)


def truncated_gamma_sample(rng: np.random.Generator, shape: float, rate: float,
                           lower: float) -> float:
    """Draw from Gamma(shape, rate) conditioned on the draw exceeding lower.

    Inverse-CDF on the regularized upper incomplete gamma; when the
    truncation point leaves less than 1e-12 of the mass (or the shape is
    nonpositive, which is proper only on a truncated domain), falls back
    to rejection from a shifted exponential.
    """
    if rate <= 0:
        raise ValueError("rate must be positive")
    if shape > 0:
        tail = float(gammaincc(shape, rate * lower)) if lower > 0 else 1.0
        if tail >= 1e-12:
            q = (1.0 - rng.random()) * tail          # in (0, tail]
            x = float(gammainccinv(shape, q)) / rate
            return max(x, np.nextafter(lower, np.inf)) if lower > 0 else x
    if lower <= 0:
        raise ValueError("nonpositive shape requires a positive truncation point")
    if shape > 1:
        # Far-tail case: shifted-exponential proposal with reduced rate so
        # the tangent bound on the increasing power part holds; here
        # rate * lower >> shape - 1, so the reduced rate stays positive.
        prop_rate = rate - (shape - 1.0) / lower
        if prop_rate <= 0:
            raise ValueError("truncation point too close to the mode for tail sampling")
        for _ in range(100000):
            x = lower + rng.exponential(1.0 / prop_rate)
            log_accept = (shape - 1.0) * (np.log(x / lower) - (x - lower) / lower)
            if np.log(1.0 - rng.random()) < log_accept:
                return max(x, np.nextafter(lower, np.inf))
        raise SamplerError("tail rejection sampler failed to accept")
    # shape <= 1 (the power part is nonincreasing, e.g. a single-member
    # cluster with shape 0): two-piece envelope.  On (lower, c] bound the
    # exponential by its value at lower and invert the power-law CDF; on
    # (c, inf) bound the power part by its value at c and propose from a
    # shifted exponential.  With c = lower + 1/rate both pieces accept
    # with probability at least exp(-1)-ish, whatever rate * lower is.
    c = lower + 1.0 / rate
    log_span = np.log1p(1.0 / (rate * lower))          # log(c / lower)
    if shape == 0.0:
        log_mass_a = -rate * lower + np.log(log_span)
    else:
        log_mass_a = -rate * lower + shape * np.log(lower) \
            + np.log(np.expm1(shape * log_span) / shape)
    log_mass_b = (shape - 1.0) * np.log(c) - rate * c - np.log(rate)
    prob_a = 1.0 / (1.0 + np.exp(log_mass_b - log_mass_a))
    for _ in range(100000):
        if rng.random() < prob_a:
            u = rng.random()
            if shape == 0.0:
                x = lower * np.exp(u * log_span)
            else:
                x = lower * (1.0 + u * np.expm1(shape * log_span)) ** (1.0 / shape)
            log_accept = -rate * (x - lower)
        else:
            x = c + rng.exponential(1.0 / rate)
            log_accept = (shape - 1.0) * np.log(x / c)
        if np.log(1.0 - rng.random()) < log_accept:
            return max(x, np.nextafter(lower, np.inf))
    raise SamplerError("tail rejection sampler failed to accept")


# ---------------------------------------------------------------------------
# Initial states and prior simulation
# ---------------------------------------------------------------------------

def draw_state_from_prior(hp: HyperParams, n_subjects: int, n_channels: int,
                          group_codes: np.ndarray,
                          rng: np.random.Generator) -> ModelState:
    k = hp.n_components
    j = hp.max_subject_clusters
    group_codes = np.asarray(group_codes, dtype=int)
    gidx = group_codes - GROUP_A

    common_mean = rng.normal(0.0, np.sqrt(1.0 / hp.common_mean_prec))
    common_prec = _uniform_sd_draw(rng, hp.common_sd_bound) ** -2.0
    group_mean = rng.normal(hp.group_mean_loc, np.sqrt(1.0 / hp.group_mean_prec))
    group_prec = _uniform_sd_draw(rng, hp.group_sd_bound) ** -2.0
    subj_loc = hp.subject_mean_loc.T[gidx][:, :, None]         # (U, K, 1)
    subj_prec_prior = hp.subject_mean_prec.T[gidx][:, :, None]
    subject_mean = rng.normal(np.broadcast_to(subj_loc, (n_subjects, k, j)),
                              np.sqrt(1.0 / subj_prec_prior))
    subj_bound = np.broadcast_to(hp.subject_sd_bound.T[gidx][:, :, None],
                                 (n_subjects, k, j))
    subject_prec = _uniform_sd_draw(rng, subj_bound) ** -2.0

    category_weights = np.vstack([rng.dirichlet(hp.category_conc) for _ in range(k)])
    raw_sticks = np.clip(rng.beta(1.0, hp.stick_conc[:, None, None],
                                  size=(k, 2, j)), 1e-12, 1.0 - 1e-12)
    stick_weights = sticks_to_weights(raw_sticks)

    subject_alloc = _categorical_rows(
        rng, np.broadcast_to(category_weights[None], (n_subjects, k, 3))) + 1
    channel_probs = np.broadcast_to(
        np.moveaxis(stick_weights[:, gidx, :], 1, 0)[:, None, :, :],
        (n_subjects, n_channels, k, j))
    channel_alloc = _categorical_rows(rng, channel_probs) + FIRST_SUBJECT_LABEL

    state = ModelState(
        scores=np.zeros((n_subjects, n_channels, k)),
        noise_prec=float(rng.gamma(hp.noise_prec_shape, 1.0 / hp.noise_prec_rate)),
        subject_alloc=subject_alloc,
        channel_alloc=channel_alloc,
        cluster_label=np.zeros((n_subjects, n_channels, k), dtype=int),
        common_mean=common_mean, common_prec=common_prec,
        group_mean=group_mean, group_prec=group_prec,
        subject_mean=subject_mean, subject_prec=subject_prec,
        category_weights=category_weights,
        raw_sticks=raw_sticks, stick_weights=stick_weights,
        group_codes=group_codes.copy(),
    )
    refresh_cluster_labels(state)
    means, precs = cluster_params_for_labels(state)
    state.scores = rng.normal(means, np.sqrt(1.0 / precs))
    return state


def initial_state_empirical(basis: EigenBasis, hp: HyperParams, ws: Workspace,
                            rng: np.random.Generator) -> ModelState:
    """Scores at their empirical values, everyone in the common cluster,
    cluster parameters at prior means, channel labels from the stick prior."""
    u, n, k = basis.scores.shape
    j = hp.max_subject_clusters
    gidx = ws.group_codes - GROUP_A

    raw_sticks = np.broadcast_to(
        (1.0 / (1.0 + hp.stick_conc))[:, None, None], (k, 2, j)).copy()
    stick_weights = sticks_to_weights(raw_sticks)
    channel_probs = np.moveaxis(stick_weights[:, gidx, :], 1, 0)[:, None, :, :] \
        * np.ones((u, n, k, j))
    channel_alloc = _categorical_rows(rng, channel_probs) + FIRST_SUBJECT_LABEL

    fitted = np.einsum("uik,tk->uit", basis.scores, ws.eigenfunctions)
    resid_var = float(np.var(ws.centred - fitted))
    state = ModelState(
        scores=basis.scores.copy(),
        noise_prec=1.0 / max(resid_var, 1e-12),
        subject_alloc=np.full((u, k), CAT_COMMON, dtype=int),
        channel_alloc=channel_alloc,
        cluster_label=np.zeros((u, n, k), dtype=int),
        common_mean=np.zeros(k),
        common_prec=(hp.common_sd_bound / 2.0) ** -2.0,
        group_mean=hp.group_mean_loc.copy(),
        group_prec=(hp.group_sd_bound / 2.0) ** -2.0,
        subject_mean=np.broadcast_to(hp.subject_mean_loc.T[gidx][:, :, None],
                                     (u, k, j)).copy(),
        subject_prec=np.broadcast_to(
            (hp.subject_sd_bound.T[gidx][:, :, None] / 2.0) ** -2.0, (u, k, j)).copy(),
        category_weights=np.broadcast_to(hp.category_conc / hp.category_conc.sum(),
                                         (k, 3)).copy(),
        raw_sticks=raw_sticks,
        stick_weights=stick_weights,
        group_codes=ws.group_codes.copy(),
    )
    refresh_cluster_labels(state)
    return state


def draw_observations(state: ModelState, eigenfunctions: np.ndarray,
                      rng: np.random.Generator) -> np.ndarray:
    """Centred curves simulated from the current state (for calibration tests)."""
    fitted = np.einsum("uik,tk->uit", state.scores, eigenfunctions)
    return fitted + rng.normal(0.0, state.noise_prec ** -0.5, size=fitted.shape)


# ---------------------------------------------------------------------------
# Conditional updates
# ---------------------------------------------------------------------------

def score_update_params(state: ModelState, ws: Workspace, dim: int,
                        likelihood_off: bool = False):
    """Posterior mean and variance of every score in one dimension,
    holding the other dimensions at their current values."""
    means_z, precs_z = cluster_params_for_labels(state)
    mu, s = means_z[:, :, dim], precs_z[:, :, dim]
    if likelihood_off:
        return mu, 1.0 / s
    dot_r = ws.proj[:, :, dim] - state.scores @ ws.gram[:, dim] \
        + state.scores[:, :, dim] * ws.gram[dim, dim]
    var = 1.0 / (state.noise_prec * ws.gram[dim, dim] + s)
    mean = var * (state.noise_prec * dot_r + s * mu)
    return mean, var


def update_scores(state: ModelState, ws: Workspace, rng: np.random.Generator,
                  likelihood_off: bool = False) -> None:
    u, n, k = state.scores.shape
    for dim in range(k):
        mean, var = score_update_params(state, ws, dim, likelihood_off)
        state.scores[:, :, dim] = mean + np.sqrt(var) * rng.standard_normal((u, n))


def noise_prec_params(state: ModelState, ws: Workspace,
                      hp: HyperParams, ssr: float | None = None):
    """Gamma(shape, rate) parameters of the noise-precision conditional."""
    if ssr is None:
        fitted = np.einsum("uik,tk->uit", state.scores, ws.eigenfunctions)
        ssr = float(np.sum((ws.centred - fitted) ** 2))
    shape = hp.noise_prec_shape + 0.5 * ws.centred.size
    rate = hp.noise_prec_rate + 0.5 * ssr
    return shape, rate


def update_noise_prec(state: ModelState, ws: Workspace, hp: HyperParams,
                      rng: np.random.Generator, ssr: float | None = None,
                      likelihood_off: bool = False) -> None:
    if likelihood_off:
        shape, rate = hp.noise_prec_shape, hp.noise_prec_rate
    else:
        shape, rate = noise_prec_params(state, ws, hp, ssr)
    state.noise_prec = float(rng.gamma(shape, 1.0 / rate))


def _draw_cluster(rng, members: np.ndarray, mean0: float, prec0: float,
                  sd_bound: float, cur_prec: float):
    """Posterior (mean, precision) for one cluster; prior draw when empty.

    The precision conditional is Gamma(m/2 - 1/2, SS/2) truncated below
    at sd_bound^-2 (the uniform sd prior contributes the -3/2 power and
    the bound); an empty cluster or a zero sum of squares falls back to
    the prior.
    """
    m = members.size
    if m == 0:
        mean = float(rng.normal(mean0, np.sqrt(1.0 / prec0)))
        prec = float(_uniform_sd_draw(rng, sd_bound)) ** -2.0
        return mean, prec, 0.0
    post_prec = prec0 + m * cur_prec
    mean = float(rng.normal((prec0 * mean0 + cur_prec * members.sum()) / post_prec,
                            np.sqrt(1.0 / post_prec)))
    ss = float(np.sum((members - mean) ** 2))
    if ss <= _TINY_SS:
        prec = float(_uniform_sd_draw(rng, sd_bound)) ** -2.0
    else:
        prec = truncated_gamma_sample(rng, 0.5 * m - 0.5, 0.5 * ss, sd_bound ** -2.0)
    return mean, prec, ss


def update_cluster_params(state: ModelState, hp: HyperParams,
                          rng: np.random.Generator) -> float:
    """Update every cluster's (mean, precision); returns the change in the
    score log prior implied by the new parameters (for the audit cache)."""
    u, n, k = state.scores.shape
    j = state.max_subject_clusters
    gidx = state.group_codes - GROUP_A
    delta = 0.0

    def _apply(members, mean0, prec0, bound, old_mean, old_prec):
        nonlocal delta
        new_mean, new_prec, _ = _draw_cluster(rng, members, mean0, prec0, bound,
                                              old_prec)
        if members.size:
            delta += float(np.sum(_norm_logpdf(members, new_mean, new_prec))
                           - np.sum(_norm_logpdf(members, old_mean, old_prec)))
        return new_mean, new_prec

    for dim in range(k):
        members = state.scores[state.subject_alloc[:, dim] == CAT_COMMON, :, dim].ravel()
        state.common_mean[dim], state.common_prec[dim] = _apply(
            members, 0.0, hp.common_mean_prec[dim], hp.common_sd_bound[dim],
            state.common_mean[dim], state.common_prec[dim])
        for col in range(2):
            mask = (state.subject_alloc[:, dim] == CAT_GROUP) & (gidx == col)
            members = state.scores[mask, :, dim].ravel()
            state.group_mean[dim, col], state.group_prec[dim, col] = _apply(
                members, hp.group_mean_loc[dim, col], hp.group_mean_prec[dim, col],
                hp.group_sd_bound[dim, col],
                state.group_mean[dim, col], state.group_prec[dim, col])

    # Subject-specific clusters: vectorized prior redraw for all, then
    # posterior draws for the occupied ones (subjects currently in
    # category 3), in deterministic order.
    subj_loc = hp.subject_mean_loc.T[gidx][:, :, None]
    subj_prec0 = hp.subject_mean_prec.T[gidx][:, :, None]
    subj_bound = np.broadcast_to(hp.subject_sd_bound.T[gidx][:, :, None], (u, k, j))
    old_mean = state.subject_mean
    old_prec = state.subject_prec
    new_mean = rng.normal(np.broadcast_to(subj_loc, (u, k, j)),
                          np.sqrt(1.0 / subj_prec0))
    new_prec = _uniform_sd_draw(rng, subj_bound) ** -2.0
    for subj in range(u):
        for dim in range(k):
            if state.subject_alloc[subj, dim] != CAT_SUBJECT:
                continue
            labels = state.channel_alloc[subj, :, dim] - FIRST_SUBJECT_LABEL
            for lab in np.unique(labels):
                members = state.scores[subj, labels == lab, dim]
                new_mean[subj, dim, lab], new_prec[subj, dim, lab] = _apply(
                    members, float(subj_loc[subj, dim, 0]),
                    float(subj_prec0[subj, dim, 0]), float(subj_bound[subj, dim, lab]),
                    old_mean[subj, dim, lab], old_prec[subj, dim, lab])
    state.subject_mean = new_mean
    state.subject_prec = new_prec
    return delta


def alloc_log_weights(state: ModelState, dim: int, collapsed: bool = True):
    """Per-subject log weights of the three categories in one dimension,
    plus the per-channel log densities needed to finish the update."""
    gidx = state.group_codes - GROUP_A
    x = state.scores[:, :, dim]
    log_common = _norm_logpdf(x, state.common_mean[dim], state.common_prec[dim])
    log_group = _norm_logpdf(x, state.group_mean[dim, gidx][:, None],
                             state.group_prec[dim, gidx][:, None])
    log_subj = _norm_logpdf(x[:, :, None], state.subject_mean[:, None, dim, :],
                            state.subject_prec[:, None, dim, :])   # (U, n, J)
    log_sticks = np.log(np.maximum(state.stick_weights[dim, gidx, :], 1e-300))
    mixed = log_sticks[:, None, :] + log_subj
    if collapsed:
        third = logsumexp(mixed, axis=2).sum(axis=1)
    else:
        cur = state.channel_alloc[:, :, dim] - FIRST_SUBJECT_LABEL
        third = np.take_along_axis(log_subj, cur[:, :, None], axis=2)[:, :, 0].sum(axis=1)
    log_omega = np.log(np.maximum(state.category_weights[dim], 1e-300))
    weights = np.stack([log_omega[0] + log_common.sum(axis=1),
                        log_omega[1] + log_group.sum(axis=1),
                        log_omega[2] + third], axis=1)
    return weights, log_common, log_group, log_subj, mixed


def update_subject_alloc(state: ModelState, hp: HyperParams,
                         rng: np.random.Generator, collapsed: bool = True) -> float:
    """Draw each subject's category and all channel labels; returns the
    change in the score log prior (for the audit cache)."""
    u, n, k = state.scores.shape
    gidx = state.group_codes - GROUP_A
    delta = 0.0
    for dim in range(k):
        old_label = state.cluster_label[:, :, dim].copy()
        weights, log_common, log_group, log_subj, mixed = alloc_log_weights(
            state, dim, collapsed)
        top = weights.max(axis=1, keepdims=True)
        if not np.all(np.isfinite(top)):
            raise SamplerError(
                f"allocation weights underflowed in dimension {dim + 1}")
        probs = np.exp(weights - top)
        cat = _categorical_rows(rng, probs) + 1
        state.subject_alloc[:, dim] = cat

        post = np.exp(mixed - mixed.max(axis=2, keepdims=True))
        post /= post.sum(axis=2, keepdims=True)
        prior = np.broadcast_to(state.stick_weights[dim, gidx, :][:, None, :],
                                (u, n, state.max_subject_clusters))
        probs_chan = np.where((cat == CAT_SUBJECT)[:, None, None], post, prior)
        state.channel_alloc[:, :, dim] = _categorical_rows(rng, probs_chan) \
            + FIRST_SUBJECT_LABEL

        new_label = derive_cluster_labels(state.subject_alloc[:, dim:dim + 1],
                                          state.channel_alloc[:, :, dim:dim + 1],
                                          state.group_codes)[:, :, 0]
        state.cluster_label[:, :, dim] = new_label
        per_channel = {}
        for lab_grid, which in ((old_label, "old"), (new_label, "new")):
            val = np.where(lab_grid == 1, log_common,
                           np.where(lab_grid <= 3, log_group,
                                    np.take_along_axis(
                                        log_subj,
                                        np.maximum(lab_grid - FIRST_SUBJECT_LABEL, 0)[:, :, None],
                                        axis=2)[:, :, 0]))
            per_channel[which] = float(val.sum())
        delta += per_channel["new"] - per_channel["old"]
    return delta


def category_weight_params(state: ModelState, hp: HyperParams) -> np.ndarray:
    """Dirichlet concentrations of the category-weight conditional, (K, 3)."""
    k = state.n_components
    counts = np.stack([(state.subject_alloc == c).sum(axis=0)
                       for c in (CAT_COMMON, CAT_GROUP, CAT_SUBJECT)], axis=1)
    return hp.category_conc[None, :] + counts


def update_category_weights(state: ModelState, hp: HyperParams,
                            rng: np.random.Generator) -> None:
    conc = category_weight_params(state, hp)
    for dim in range(state.n_components):
        state.category_weights[dim] = np.maximum(rng.dirichlet(conc[dim]), 1e-300)


def stick_counts(state: ModelState, include_all_channels: bool = False) -> np.ndarray:
    """Channel-label counts n[k, group, j] among subject-specific scores
    (or among all channels, for the uncollapsed sampler variant)."""
    u, n, k = state.scores.shape
    j = state.max_subject_clusters
    gidx = state.group_codes - GROUP_A
    counts = np.zeros((k, 2, j), dtype=int)
    for dim in range(k):
        for col in range(2):
            mask = gidx == col
            if not include_all_channels:
                mask = mask & (state.subject_alloc[:, dim] == CAT_SUBJECT)
            labels = state.channel_alloc[mask, :, dim] - FIRST_SUBJECT_LABEL
            counts[dim, col] = np.bincount(labels.ravel(), minlength=j)
    return counts


def stick_params(state: ModelState, hp: HyperParams,
                 include_all_channels: bool = False):
    """Beta(a, b) parameters of every stick conditional, each (K, 2, J)."""
    counts = stick_counts(state, include_all_channels)
    total = counts.sum(axis=2, keepdims=True)
    tail = total - np.cumsum(counts, axis=2)
    a = 1.0 + counts
    b = hp.stick_conc[:, None, None] + tail
    return a, b


def update_sticks(state: ModelState, hp: HyperParams, rng: np.random.Generator,
                  include_all_channels: bool = False) -> None:
    a, b = stick_params(state, hp, include_all_channels)
    state.raw_sticks = np.clip(rng.beta(a, b), 1e-12, 1.0 - 1e-12)
    state.stick_weights = sticks_to_weights(state.raw_sticks)


def gibbs_scan(state: ModelState, ws: Workspace, hp: HyperParams,
               rng: np.random.Generator, collapsed: bool = True,
               likelihood_off: bool = False, caches: dict | None = None) -> None:
    """One systematic scan over all six blocks.

    When a caches dict is supplied it is updated with 'ssr' and
    'scores_logprior' maintained incrementally (full evaluation after the
    score update, exact deltas for the later blocks).
    """
    update_scores(state, ws, rng, likelihood_off)
    ssr = None
    if not likelihood_off:
        fitted = np.einsum("uik,tk->uit", state.scores, ws.eigenfunctions)
        ssr = float(np.sum((ws.centred - fitted) ** 2))
    update_noise_prec(state, ws, hp, rng, ssr=ssr, likelihood_off=likelihood_off)
    logprior = scores_logprior(state) if caches is not None else 0.0
    logprior += update_cluster_params(state, hp, rng)
    logprior += update_subject_alloc(state, hp, rng, collapsed)
    update_category_weights(state, hp, rng)
    update_sticks(state, hp, rng, include_all_channels=not collapsed)
    if caches is not None:
        caches["ssr"] = ssr
        caches["scores_logprior"] = logprior


# ---------------------------------------------------------------------------
# Chains and archives
# ---------------------------------------------------------------------------

def scalar_names(n_components: int) -> list[str]:
    names = ["noise_prec"]
    for k in range(1, n_components + 1):
        names += [f"weight_common[{k}]", f"weight_group[{k}]", f"weight_subject[{k}]",
                  f"common_mean[{k}]", f"common_prec[{k}]",
                  f"group_mean[{k},2]", f"group_prec[{k},2]",
                  f"group_mean[{k},3]", f"group_prec[{k},3]",
                  f"count_common[{k}]", f"count_group[{k}]", f"count_subject[{k}]"]
    return names


def _scalar_row(state: ModelState) -> list[float]:
    row = [state.noise_prec]
    for dim in range(state.n_components):
        counts = [int(np.sum(state.subject_alloc[:, dim] == c)) for c in (1, 2, 3)]
        row += [state.category_weights[dim, 0], state.category_weights[dim, 1],
                state.category_weights[dim, 2],
                state.common_mean[dim], state.common_prec[dim],
                state.group_mean[dim, 0], state.group_prec[dim, 0],
                state.group_mean[dim, 1], state.group_prec[dim, 1],
                float(counts[0]), float(counts[1]), float(counts[2])]
    return row


@dataclass
class ChainArchive:
    scalar_names: list
    scalars: np.ndarray               # (R, len(scalar_names))
    subject_alloc_draws: np.ndarray   # (R, U, K) int8
    channel_alloc_draws: np.ndarray   # (R, U, n, K) int16, -1 unless category 3
    group_codes: np.ndarray
    meta: dict = field(default_factory=dict)

    @property
    def n_draws(self) -> int:
        return self.scalars.shape[0]


def _audit(state: ModelState, ws: Workspace, hp: HyperParams, caches: dict,
           likelihood_off: bool, iteration: int) -> None:
    validate_state(state, hp)
    recomputed_prior = scores_logprior(state)
    if abs(recomputed_prior - caches["scores_logprior"]) > AUDIT_TOL * max(
            1.0, abs(recomputed_prior)):
        raise SamplerError(
            f"iteration {iteration}: cached score log prior "
            f"{caches['scores_logprior']:.12g} != recomputed {recomputed_prior:.12g}")
    if not likelihood_off:
        cached_loglik = 0.5 * ws.centred.size * (np.log(state.noise_prec) - LOG_2PI) \
            - 0.5 * state.noise_prec * caches["ssr"]
        fitted = np.einsum("uik,tk->uit", state.scores, ws.eigenfunctions)
        resid = ws.centred - fitted
        full = 0.5 * ws.centred.size * (np.log(state.noise_prec) - LOG_2PI) \
            - 0.5 * state.noise_prec * float(np.sum(resid ** 2))
        if abs(full - cached_loglik) > AUDIT_TOL * max(1.0, abs(full)):
            raise SamplerError(
                f"iteration {iteration}: cached log likelihood {cached_loglik:.12g} "
                f"!= recomputed {full:.12g}")


def _check_finite(state: ModelState, iteration: int) -> None:
    checks = [("scores", state.scores), ("noise_prec", np.array(state.noise_prec)),
              ("common", state.common_mean), ("common_prec", state.common_prec),
              ("group", state.group_mean), ("group_prec", state.group_prec),
              ("subject", state.subject_mean), ("subject_prec", state.subject_prec),
              ("weights", state.category_weights), ("sticks", state.stick_weights)]
    for name, arr in checks:
        if not np.all(np.isfinite(arr)):
            raise SamplerError(f"non-finite {name} after iteration {iteration}")


def run_chain(data: FunctionalDataset, basis: EigenBasis, hp: HyperParams,
              cfg: SamplerConfig, chain_index: int = 0,
              checkpoint_dir=None, resume_from=None) -> ChainArchive:
    """Run one chain and return its archive.

    The chain seed derives from (cfg.seed, chain_index) so multi-chain
    runs are reproducible chain by chain.
    """
    ws = make_workspace(data, basis)
    seed_seq = np.random.SeedSequence(cfg.seed).spawn(cfg.n_chains)[chain_index]
    rng = np.random.default_rng(seed_seq)
    start_iter = 0
    if resume_from is not None:
        state, rng, start_iter, kept = _load_checkpoint(resume_from)
    else:
        if cfg.init_mode == "prior_draw":
            state = draw_state_from_prior(hp, data.n_subjects, data.n_channels,
                                          data.group_codes, rng)
        else:
            state = initial_state_empirical(basis, hp, ws, rng)
        kept = []

    u, n, k = state.scores.shape
    names = scalar_names(k)
    alloc_draws = []
    chan_draws = []
    scalars = []
    for row in kept:
        scalars.append(row[0])
        alloc_draws.append(row[1])
        chan_draws.append(row[2])

    caches: dict = {"ssr": 0.0, "scores_logprior": 0.0}
    for it in range(start_iter + 1, cfg.n_iter + 1):
        gibbs_scan(state, ws, hp, rng, collapsed=cfg.collapsed_alloc,
                   likelihood_off=cfg.likelihood_off, caches=caches)
        _check_finite(state, it)
        if cfg.audit_every and it % cfg.audit_every == 0:
            _audit(state, ws, hp, caches, cfg.likelihood_off, it)
        if it > cfg.burn_in and (it - cfg.burn_in) % cfg.thin == 0:
            scalars.append(_scalar_row(state))
            alloc_draws.append(state.subject_alloc.astype(np.int8))
            chan_draws.append(np.where(
                (state.subject_alloc == CAT_SUBJECT)[:, None, :],
                state.channel_alloc, -1).astype(np.int16))
        if checkpoint_dir is not None and cfg.checkpoint_every \
                and it % cfg.checkpoint_every == 0 and it < cfg.n_iter:
            _save_checkpoint(checkpoint_dir, state, rng, it,
                             list(zip(scalars, alloc_draws, chan_draws)))

    return ChainArchive(
        scalar_names=names,
        scalars=np.array(scalars, dtype=float),
        subject_alloc_draws=np.array(alloc_draws, dtype=np.int8),
        channel_alloc_draws=np.array(chan_draws, dtype=np.int16),
        group_codes=data.group_codes.copy(),
        meta={"chain_index": chain_index, "seed": cfg.seed,
              "n_iter": cfg.n_iter, "burn_in": cfg.burn_in, "thin": cfg.thin,
              "init_mode": cfg.init_mode, "collapsed_alloc": cfg.collapsed_alloc,
              "n_subjects": int(u), "n_channels": int(n), "n_components": int(k)},
    )


def _worker_count(requested: int) -> int:
    cap = os.environ.get("MLPP_THREADS")
    if cap is None:
        return 1
    return max(1, min(requested, int(cap)))


def _chain_job(args):
    data, basis, hp, cfg, index = args
    return run_chain(data, basis, hp, cfg, chain_index=index)


def run_chains(data: FunctionalDataset, basis: EigenBasis, hp: HyperParams,
               cfg: SamplerConfig) -> list:
    """Run all configured chains (optionally in parallel worker processes,
    capped by the MLPP_THREADS environment variable)."""
    workers = _worker_count(cfg.n_chains)
    jobs = [(data, basis, hp, cfg, i) for i in range(cfg.n_chains)]
    if workers > 1 and cfg.n_chains > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(_chain_job, jobs))
    return [_chain_job(job) for job in jobs]


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def _save_checkpoint(directory, state: ModelState, rng: np.random.Generator,
                     iteration: int, kept: list) -> None:
    directory = Path(directory)
    save_state(state, directory / "state")
    doc = {"iteration": iteration, "rng_state": rng.bit_generator.state,
           "kept": [[list(map(float, row)), alloc.tolist(), chan.tolist()]
                    for row, alloc, chan in kept]}
    (directory / "checkpoint.json").write_text(json.dumps(doc) + "\n")


def _load_checkpoint(directory):
    directory = Path(directory)
    doc = json.loads((directory / "checkpoint.json").read_text())
    state = load_state(directory / "state")
    rng = np.random.default_rng()
    rng.bit_generator.state = doc["rng_state"]
    kept = [(row, np.array(alloc, dtype=np.int8), np.array(chan, dtype=np.int16))
            for row, alloc, chan in doc["kept"]]
    return state, rng, doc["iteration"], kept


# ---------------------------------------------------------------------------
# Archive files
# ---------------------------------------------------------------------------

def save_archives(archives: list, run_dir, extra_meta: dict | None = None) -> None:
    """One directory per run: meta.json plus per-chain scalar and label CSVs."""
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    meta = {"n_chains": len(archives), "chains": [a.meta for a in archives],
            "scalar_names": archives[0].scalar_names,
            "group_codes": archives[0].group_codes.tolist()}
    if extra_meta:
        meta.update(extra_meta)
    (run_dir / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    for idx, archive in enumerate(archives):
        chain_dir = run_dir / f"chain_{idx:02d}"
        chain_dir.mkdir(exist_ok=True)
        with open(chain_dir / "draws_scalar.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["draw"] + archive.scalar_names)
            for r, row in enumerate(archive.scalars):
                writer.writerow([r + 1] + [repr(float(v)) for v in row])
        with open(chain_dir / "labels_g.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["draw", "subject", "dim", "category"])
            draws, u, k = archive.subject_alloc_draws.shape
            for r in range(draws):
                for subj in range(u):
                    for dim in range(k):
                        writer.writerow([r + 1, subj + 1, dim + 1,
                                         int(archive.subject_alloc_draws[r, subj, dim])])
        with open(chain_dir / "labels_eta.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["draw", "subject", "channel", "dim", "label"])
            rr, uu, nn, kk = archive.channel_alloc_draws.shape
            idx_rows = np.argwhere(archive.channel_alloc_draws >= 0)
            for r, subj, chan, dim in idx_rows:
                writer.writerow([r + 1, subj + 1, chan + 1, dim + 1,
                                 int(archive.channel_alloc_draws[r, subj, chan, dim])])


def load_archives(run_dir) -> list:
    run_dir = Path(run_dir)
    meta = json.loads((run_dir / "meta.json").read_text())
    archives = []
    for idx in range(meta["n_chains"]):
        chain_dir = run_dir / f"chain_{idx:02d}"
        chain_meta = meta["chains"][idx]
        u, n, k = (chain_meta["n_subjects"], chain_meta["n_channels"],
                   chain_meta["n_components"])
        scalars = np.loadtxt(chain_dir / "draws_scalar.csv", delimiter=",",
                             skiprows=1, ndmin=2)[:, 1:]
        draws = scalars.shape[0]
        alloc = np.zeros((draws, u, k), dtype=np.int8)
        for row in np.loadtxt(chain_dir / "labels_g.csv", delimiter=",",
                              skiprows=1, ndmin=2, dtype=int):
            alloc[row[0] - 1, row[1] - 1, row[2] - 1] = row[3]
        chan = np.full((draws, u, n, k), -1, dtype=np.int16)
        with open(chain_dir / "labels_eta.csv") as fh:
            next(fh)                                  # header
            for line in fh:
                row = [int(v) for v in line.split(",")]
                chan[row[0] - 1, row[1] - 1, row[2] - 1, row[3] - 1] = row[4]
        archives.append(ChainArchive(
            scalar_names=meta["scalar_names"], scalars=scalars,
            subject_alloc_draws=alloc, channel_alloc_draws=chan,
            group_codes=np.array(meta["group_codes"], dtype=int),
            meta=chain_meta))
    return archives
