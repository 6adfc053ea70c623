"""Partition summaries for the subject-level clustering.

A sampled allocation induces, per latent dimension, a partition of the
subjects: one shared block, blocks by clinical group, or singletons.
This module scores partitions (adjusted Rand index, variation of
information), builds posterior similarity matrices, and reports a point
estimate with a credible ball around it.
"""
from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np
from scipy.optimize import linear_sum_assignment

from .fpca import GROUP_A
from .model import CAT_COMMON, CAT_GROUP, CAT_SUBJECT


def _contingency(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a).ravel()
    b = np.asarray(b).ravel()
    if a.size != b.size:
        raise ValueError("partitions must label the same items")
    _, ai = np.unique(a, return_inverse=True)
    _, bi = np.unique(b, return_inverse=True)
    table = np.zeros((ai.max() + 1, bi.max() + 1), dtype=np.int64)
    np.add.at(table, (ai, bi), 1)
    return table


def adjusted_rand_index(a, b) -> float:
    """Adjusted Rand index between two partitions (1 = identical,
    0 = chance level).  Degenerate pairs where the correction has a zero
    denominator (for instance two all-singleton partitions) return 1.0
    exactly when the partitions agree."""
    table = _contingency(a, b)
    n = int(table.sum())

    def _pairs(counts):
        counts = counts.astype(np.int64)
        return int(np.sum(counts * (counts - 1) // 2))

    index = _pairs(table.ravel())
    sum_a = _pairs(table.sum(axis=1))
    sum_b = _pairs(table.sum(axis=0))
    total = n * (n - 1) // 2
    expected = sum_a * sum_b / total if total else 0.0
    max_index = 0.5 * (sum_a + sum_b)
    if max_index == expected:
        return 1.0
    return float((index - expected) / (max_index - expected))


def variation_of_information(a, b) -> float:
    """Variation of information between two partitions, in bits."""
    table = _contingency(a, b).astype(float)
    n = table.sum()
    p = table / n
    pa = p.sum(axis=1)
    pb = p.sum(axis=0)
    nz = p > 0
    h_joint = -np.sum(p[nz] * np.log2(p[nz]))
    h_a = -np.sum(pa[pa > 0] * np.log2(pa[pa > 0]))
    h_b = -np.sum(pb[pb > 0] * np.log2(pb[pb > 0]))
    return float(max(2.0 * h_joint - h_a - h_b, 0.0))


def subject_partition(subject_alloc_dim: np.ndarray,
                      group_codes: np.ndarray) -> np.ndarray:
    """Canonical subject labels for one dimension: category 1 maps to a
    single shared block, category 2 to one block per clinical group, and
    category 3 to a singleton per subject."""
    alloc = np.asarray(subject_alloc_dim, dtype=int)
    codes = np.asarray(group_codes, dtype=int)
    if alloc.shape != codes.shape:
        raise ValueError("one category per subject expected")
    labels = np.empty(alloc.size, dtype=int)
    labels[alloc == CAT_COMMON] = 0
    grp = alloc == CAT_GROUP
    labels[grp] = 1 + (codes[grp] - GROUP_A)
    own = alloc == CAT_SUBJECT
    labels[own] = 3 + np.nonzero(own)[0]
    return labels


def partition_draws(subject_alloc_draws: np.ndarray, group_codes: np.ndarray,
                    dim: int) -> np.ndarray:
    """Canonical subject partitions, one row per kept draw."""
    draws = subject_alloc_draws[:, :, dim]
    return np.stack([subject_partition(row, group_codes) for row in draws])


def similarity_matrix(draws: np.ndarray) -> np.ndarray:
    """Posterior co-clustering frequencies; draws is (R, n) labels."""
    draws = np.asarray(draws)
    r, n = draws.shape
    sim = np.zeros((n, n))
    for row in draws:
        sim += row[:, None] == row[None, :]
    return sim / r


def _block_sizes_per_item(labels: np.ndarray) -> np.ndarray:
    _, inv, counts = np.unique(labels, return_inverse=True, return_counts=True)
    return counts[inv]


def vi_point_estimate(draws: np.ndarray):
    """Point-estimate partition: the sampled partition minimizing the
    Jensen lower bound on the posterior expected variation of information.

    Ties go to the candidate with fewer blocks, then to the earliest
    draw.  Returns (labels, bound_value).
    """
    draws = np.asarray(draws)
    r, n = draws.shape
    sim = similarity_matrix(draws)
    mean_log_sizes = np.mean([np.sum(np.log2(_block_sizes_per_item(row)))
                              for row in draws]) / n

    candidates, first_idx = np.unique(draws, axis=0, return_index=True)
    order = np.argsort(first_idx)
    candidates, first_idx = candidates[order], first_idx[order]
    best = None
    for cand in candidates:
        sizes = _block_sizes_per_item(cand)
        same = cand[:, None] == cand[None, :]
        expected_overlap = np.sum(sim * same, axis=1)
        bound = (np.sum(np.log2(sizes)) / n + mean_log_sizes
                 - 2.0 * np.sum(np.log2(expected_overlap)) / n)
        n_blocks = np.unique(cand).size
        key = (bound, n_blocks)
        if best is None or key < best[0]:
            best = (key, cand)
    key, labels = best
    return labels.copy(), float(key[0])


def _partition_key(labels: np.ndarray) -> tuple:
    _, inv = np.unique(labels, return_inverse=True)
    return tuple(inv.tolist())


def credible_ball(draws: np.ndarray, centre: np.ndarray, level: float = 0.95):
    """Credible ball of posterior partitions around a centre.

    The radius is the smallest VI distance whose closed ball holds at
    least the requested posterior mass.  The three bound summaries
    follow the usual convention: the upper vertical bounds are the
    in-ball partitions with the fewest blocks (farthest such from the
    centre), the lower vertical bounds those with the most blocks, and
    the horizontal bounds the in-ball partitions at maximal distance.
    All ties are reported, each with its posterior frequency.
    """
    draws = np.asarray(draws)
    if not 0.0 < level <= 1.0:
        raise ValueError("level must lie in (0, 1]")
    r = draws.shape[0]
    dist = np.array([variation_of_information(centre, row) for row in draws])
    order = np.sort(dist)
    radius = float(order[int(np.ceil(level * r)) - 1])
    inside = dist <= radius + 1e-12

    freq: dict = {}
    rep: dict = {}
    rep_dist: dict = {}
    for row, d in zip(draws[inside], dist[inside]):
        key = _partition_key(row)
        freq[key] = freq.get(key, 0) + 1
        rep.setdefault(key, row)
        rep_dist.setdefault(key, float(d))

    def _summaries(keys):
        out = []
        for key in keys:
            out.append({"labels": [int(v) for v in rep[key]],
                        "n_blocks": int(np.unique(rep[key]).size),
                        "distance": rep_dist[key],
                        "frequency": freq[key] / r})
        return out

    keys = list(freq)
    blocks = {key: np.unique(rep[key]).size for key in keys}
    fewest = min(blocks.values())
    most = max(blocks.values())
    upper_pool = [key for key in keys if blocks[key] == fewest]
    upper_far = max(rep_dist[key] for key in upper_pool)
    lower_pool = [key for key in keys if blocks[key] == most]
    lower_far = max(rep_dist[key] for key in lower_pool)
    max_dist = max(rep_dist.values())
    return {
        "level": level,
        "radius": radius,
        "coverage": float(inside.mean()),
        "vertical_upper": _summaries(
            [k for k in upper_pool if rep_dist[k] == upper_far]),
        "vertical_lower": _summaries(
            [k for k in lower_pool if rep_dist[k] == lower_far]),
        "horizontal": _summaries(
            [k for k in keys if rep_dist[k] == max_dist]),
    }


def misclassification_count(estimate, truth) -> int:
    """Smallest number of disagreeing items over all matchings of the
    estimated blocks to the true blocks."""
    table = _contingency(estimate, truth)
    rows, cols = linear_sum_assignment(-table)
    return int(table.sum() - table[rows, cols].sum())


def summarize_dimension(subject_alloc_draws: np.ndarray, group_codes: np.ndarray,
                        dim: int, truth_labels=None, level: float = 0.95) -> dict:
    """Full partition report for one latent dimension."""
    draws = partition_draws(subject_alloc_draws, group_codes, dim)
    estimate, bound = vi_point_estimate(draws)
    ball = credible_ball(draws, estimate, level)
    category_share = {
        "common": float(np.mean(subject_alloc_draws[:, :, dim] == CAT_COMMON)),
        "group": float(np.mean(subject_alloc_draws[:, :, dim] == CAT_GROUP)),
        "subject": float(np.mean(subject_alloc_draws[:, :, dim] == CAT_SUBJECT)),
    }
    report = {
        "dim": dim + 1,
        "estimate": [int(v) for v in estimate],
        "n_blocks": int(np.unique(estimate).size),
        "expected_vi_bound": bound,
        "credible_ball": ball,
        "category_share": category_share,
    }
    if truth_labels is not None:
        truth_labels = np.asarray(truth_labels)
        report["ari_to_truth"] = adjusted_rand_index(estimate, truth_labels)
        report["misclassified"] = misclassification_count(estimate, truth_labels)
    return report


def write_similarity_csv(path, sim: np.ndarray, subject_ids=None) -> None:
    sim = np.asarray(sim)
    n = sim.shape[0]
    ids = subject_ids if subject_ids is not None else np.arange(1, n + 1)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["subject_id"] + [str(int(i)) for i in ids])
        for i in range(n):
            writer.writerow([str(int(ids[i]))] + [repr(float(v)) for v in sim[i]])


def write_partition_report(path, reports: list) -> None:
    Path(path).write_text(json.dumps({"dimensions": reports}, indent=2,
                                     sort_keys=True) + "\n")


def format_partition_table(reports: list) -> str:
    """Plain-text table over dimensions: blocks, ball radius, category
    shares, and (when the truth is known) ARI and misclassifications."""
    have_truth = any("ari_to_truth" in rep for rep in reports)
    header = ["dim", "blocks", "radius", "share_common", "share_group",
              "share_subject"]
    if have_truth:
        header += ["ari", "misclassified"]
    rows = [header]
    for rep in reports:
        row = [str(rep["dim"]), str(rep["n_blocks"]),
               f"{rep['credible_ball']['radius']:.3f}",
               f"{rep['category_share']['common']:.3f}",
               f"{rep['category_share']['group']:.3f}",
               f"{rep['category_share']['subject']:.3f}"]
        if have_truth:
            row += [f"{rep.get('ari_to_truth', float('nan')):.3f}",
                    str(rep.get("misclassified", ""))]
        rows.append(row)
    widths = [max(len(r[i]) for r in rows) for i in range(len(header))]
    lines = ["  ".join(val.rjust(w) for val, w in zip(row, widths)) for row in rows]
    return "\n".join(lines)
