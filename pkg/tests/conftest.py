"""Shared helpers for the test suite.

The reference implementations here are deliberately naive (explicit
loops over items and pairs) so the vectorized library code is checked
against independent arithmetic rather than against itself.
"""
import itertools

import numpy as np

from mlpp.hyperparams import HyperParams
from mlpp.sampler import Workspace, draw_state_from_prior

BELL = {0: 1, 1: 1, 2: 2, 3: 5, 4: 15, 5: 52, 6: 203}


def all_partitions(n):
    """Every set partition of n items as a label vector (restricted growth)."""
    out = []

    def grow(prefix, used):
        if len(prefix) == n:
            out.append(np.array(prefix, dtype=int))
            return
        for lab in range(used + 1):
            grow(prefix + [lab], max(used, lab + 1))

    grow([], 0)
    return out


def brute_force_ari(a, b):
    """Adjusted Rand index straight from the pair-counting definition."""
    a = np.asarray(a).ravel()
    b = np.asarray(b).ravel()
    pairs = list(itertools.combinations(range(a.size), 2))
    in_a = sum(1 for i, j in pairs if a[i] == a[j])
    in_b = sum(1 for i, j in pairs if b[i] == b[j])
    both = sum(1 for i, j in pairs if a[i] == a[j] and b[i] == b[j])
    total = len(pairs)
    expected = in_a * in_b / total if total else 0.0
    max_index = 0.5 * (in_a + in_b)
    if max_index == expected:
        return 1.0
    return (both - expected) / (max_index - expected)


def brute_force_vi(a, b):
    """Variation of information (bits) from the block-overlap definition."""
    a = np.asarray(a).ravel()
    b = np.asarray(b).ravel()
    n = a.size
    blocks_a = [np.nonzero(a == lab)[0] for lab in np.unique(a)]
    blocks_b = [np.nonzero(b == lab)[0] for lab in np.unique(b)]
    h_a = -sum(blk.size / n * np.log2(blk.size / n) for blk in blocks_a)
    h_b = -sum(blk.size / n * np.log2(blk.size / n) for blk in blocks_b)
    mutual = 0.0
    for blk_a in blocks_a:
        for blk_b in blocks_b:
            inter = np.intersect1d(blk_a, blk_b).size
            if inter:
                mutual += inter / n * np.log2(inter * n / (blk_a.size * blk_b.size))
    return h_a + h_b - 2.0 * mutual


def make_hyperparams(rng, k=2, j=6):
    """Random but valid prior constants for small synthetic states."""
    return HyperParams(
        common_mean_prec=rng.uniform(0.5, 2.0, k),
        common_sd_bound=rng.uniform(1.5, 3.0, k),
        group_mean_loc=rng.normal(0.0, 1.0, (k, 2)),
        group_mean_prec=rng.uniform(0.5, 2.0, (k, 2)),
        group_sd_bound=rng.uniform(1.5, 3.0, (k, 2)),
        subject_mean_loc=rng.normal(0.0, 1.0, (k, 2)),
        subject_mean_prec=rng.uniform(0.5, 2.0, (k, 2)),
        subject_sd_bound=rng.uniform(1.5, 3.0, (k, 2)),
        noise_prec_shape=2.0,
        noise_prec_rate=2.0,
        max_subject_clusters=j,
    )


def random_state_and_workspace(seed, u=5, n=4, k=2, t=12, j=6):
    """A valid random model state plus a synthetic data workspace.

    The workspace arrays are plain random numbers: the conditional-update
    formulas must hold for any inputs, so nothing here needs to look like
    real data.
    """
    rng = np.random.default_rng(seed)
    hp = make_hyperparams(rng, k, j)
    group_codes = np.where(np.arange(u) < u // 2, 2, 3)
    state = draw_state_from_prior(hp, u, n, group_codes, rng)
    state.scores = rng.normal(0.0, 1.5, (u, n, k))
    phi = rng.normal(0.0, 1.0, (t, k))
    centred = rng.normal(0.0, 1.0, (u, n, t))
    ws = Workspace(centred=centred, proj=centred @ phi, gram=phi.T @ phi,
                   eigenfunctions=phi, group_codes=group_codes.copy())
    return state, hp, ws, rng
