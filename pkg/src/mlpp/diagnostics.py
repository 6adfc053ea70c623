"""Convergence diagnostics for archived chains.

Split potential scale reduction and autocorrelation-based effective
sample sizes, computed directly from the stored scalar draws, plus
trace/density exports for visual checks.
"""
from __future__ import annotations

import csv

import numpy as np
from scipy.fft import irfft, next_fast_len, rfft
from scipy.stats import gaussian_kde

_CONSTANT_TOL = 1e-12


def _as_matrix(chains) -> np.ndarray:
    arr = np.asarray(chains, dtype=float)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2:
        raise ValueError("chains must be a 1-D draw vector or a (chains, draws) array")
    return arr


def split_rhat(chains) -> float:
    """Split potential scale reduction factor.

    Each chain is halved (dropping a trailing draw when the length is
    odd) and the usual between/within variance ratio is computed over
    the resulting sequences.  Constant chains return 1.0.
    """
    arr = _as_matrix(chains)
    m, n = arr.shape
    half = n // 2
    if half < 2:
        raise ValueError("need at least 4 draws per chain")
    pieces = np.concatenate([arr[:, :half], arr[:, n - half:]], axis=0)
    within = pieces.var(axis=1, ddof=1)
    w = within.mean()
    if w < _CONSTANT_TOL * max(1.0, float(np.abs(pieces).max()) ** 2):
        return 1.0
    b = half * pieces.mean(axis=1).var(ddof=1)
    var_plus = (half - 1) / half * w + b / half
    return float(np.sqrt(var_plus / w))


def _autocovariances(arr: np.ndarray) -> np.ndarray:
    """Mean autocovariance over chains at every lag, biased normalization.

    Computed by FFT with zero padding (circular correlation of the padded
    sequence equals the linear one), so long chains stay O(n log n).
    """
    m, n = arr.shape
    size = next_fast_len(2 * n)
    acov = np.zeros(n)
    for row in arr:
        centred = row - row.mean()
        spec = rfft(centred, size)
        acov += irfft(spec * np.conj(spec), size)[:n] / n
    return acov / m

def effective_sample_size(chains) -> float:
    """Effective sample size from the pairwise-truncated autocorrelation sum.

    For several chains the correlation at each lag is estimated from the
    pooled within/between variances, so that non-mixing chains are
    penalized; a single chain uses its own normalized autocovariance.
    Summation stops at the first nonpositive pair of successive lags.
    Constant chains count every draw.
    """
    arr = _as_matrix(chains)
    m, n = arr.shape
    if n < 4:
        raise ValueError("need at least 4 draws per chain")
    within = arr.var(axis=1, ddof=1)
    w = within.mean()
    if w < _CONSTANT_TOL * max(1.0, float(np.abs(arr).max()) ** 2):
        return float(m * n)
    acov = _autocovariances(arr)
    if m > 1:
        b = n * arr.mean(axis=1).var(ddof=1)
        var_plus = (n - 1) / n * w + b / n
        rho = 1.0 - (w - acov * n / (n - 1)) / var_plus
    else:
        rho = acov / acov[0]
    rho[0] = 1.0
    tau = 1.0
    t = 1
    while t + 1 < n:
        pair = rho[t] + rho[t + 1]
        if pair <= 0.0:
            break
        tau += 2.0 * pair
        t += 2
    return float(m * n / tau)


def export_trace(path, chains, name: str = "value") -> None:
    """Long-format trace: one row per (chain, draw)."""
    arr = _as_matrix(chains)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["chain", "draw", name])
        for c, row in enumerate(arr):
            for d, v in enumerate(row):
                writer.writerow([c + 1, d + 1, repr(float(v))])


def export_density(path, chains, name: str = "value", grid_size: int = 256) -> None:
    """Per-chain kernel density on a shared extended grid.

    Chains with (numerically) zero variance are skipped; a smoothed
    density of a point mass is not informative and the kernel estimate
    is singular there.
    """
    arr = _as_matrix(chains)
    keep = [row for row in arr if row.std() > _CONSTANT_TOL * max(1.0, np.abs(row).max())]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["chain", name, "density"])
        if not keep:
            return
        lo = min(row.min() for row in keep)
        hi = max(row.max() for row in keep)
        span = hi - lo
        grid = np.linspace(lo - 0.1 * span, hi + 0.1 * span, grid_size)
        for c, row in enumerate(arr):
            if row.std() <= _CONSTANT_TOL * max(1.0, np.abs(row).max()):
                continue
            dens = gaussian_kde(row)(grid)
            for g, v in zip(grid, dens):
                writer.writerow([c + 1, repr(float(g)), repr(float(v))])


def diagnose_archives(archives, rhat_threshold: float = 1.1,
                      ess_threshold: float = 1000.0) -> list:
    """Per-column diagnostics over all chains of a run.

    Returns one dict per stored scalar with rhat, ess, posterior mean
    and sd, and the list of triggered flags.  Columns that never move
    (for instance a count locked at its posterior mode) are marked
    'constant' and not treated as failures.
    """
    names = archives[0].scalar_names
    rows = []
    for j, name in enumerate(names):
        chains = np.stack([a.scalars[:, j] for a in archives])
        pooled = chains.ravel()
        flags = []
        constant = chains.var(axis=1).mean() < _CONSTANT_TOL * max(
            1.0, float(np.abs(chains).max()) ** 2)
        rhat = split_rhat(chains)
        ess = effective_sample_size(chains)
        if constant:
            flags.append("constant")
        else:
            if rhat > rhat_threshold:
                flags.append("rhat")
            if ess < ess_threshold:
                flags.append("ess")
        rows.append({"name": name, "rhat": float(rhat), "ess": float(ess),
                     "mean": float(pooled.mean()), "sd": float(pooled.std(ddof=1)),
                     "flags": flags, "ok": not any(f in ("rhat", "ess")
                                                   for f in flags)})
    return rows


def format_diagnostics_table(rows: list) -> str:
    header = ["parameter", "mean", "sd", "rhat", "ess", "flags"]
    table = [header]
    for row in rows:
        table.append([row["name"], f"{row['mean']:.4g}", f"{row['sd']:.4g}",
                      f"{row['rhat']:.4f}", f"{row['ess']:.1f}",
                      ",".join(row["flags"]) or "-"])
    widths = [max(len(r[i]) for r in table) for i in range(len(header))]
    lines = ["  ".join(val.rjust(w) for val, w in zip(row, widths))
             for row in table]
    return "\n".join(lines)


def write_diagnostics_csv(path, rows: list) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["parameter", "mean", "sd", "rhat", "ess", "flags"])
        for row in rows:
            writer.writerow([row["name"], repr(row["mean"]), repr(row["sd"]),
                             repr(row["rhat"]), repr(row["ess"]),
                             ";".join(row["flags"])])
