"""Functional PCA for multi-subject, multi-channel curve data.

A dataset holds one curve per (subject, channel) on a shared, strictly
increasing time grid, with each subject assigned to one of two groups
(codes 2 and 3).  Curves can be presmoothed with penalized B-splines and
decomposed into a mean curve plus orthonormal eigenfunctions; per-curve
scores are the quadrature inner products of the centred curves with the
eigenfunctions.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .smoothing import CurveSmoother

GROUP_A = 2
GROUP_B = 3

ORTHONORMALITY_TOL = 1e-8


def trapezoid_weights(time_grid: np.ndarray) -> np.ndarray:
    """Quadrature weights so that sum(w * f) approximates the integral of f."""
    w = np.zeros_like(time_grid)
    d = np.diff(time_grid)
    w[:-1] += 0.5 * d
    w[1:] += 0.5 * d
    return w


@dataclass
class FunctionalDataset:
    """Curves values[u, i, t] for subject u, channel i, time t.

    group_codes[u] is 2 (group A, first condition) or 3 (group B, second).
    subject_ids are external labels carried through to reports.
    """

    values: np.ndarray
    time_grid: np.ndarray
    group_codes: np.ndarray
    subject_ids: list = field(default_factory=list)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        self.time_grid = np.asarray(self.time_grid, dtype=float)
        self.group_codes = np.asarray(self.group_codes, dtype=int)
        if self.values.ndim != 3:
            raise ValueError("values must have shape (subjects, channels, timepoints)")
        u, _, t = self.values.shape
        if self.time_grid.shape != (t,):
            raise ValueError("time grid length does not match the curves")
        if np.any(np.diff(self.time_grid) <= 0):
            raise ValueError("time grid must be strictly increasing")
        if self.group_codes.shape != (u,):
            raise ValueError("one group code per subject required")
        if not set(np.unique(self.group_codes)) <= {GROUP_A, GROUP_B}:
            raise ValueError(f"group codes must be {GROUP_A} or {GROUP_B}")
        if not self.subject_ids:
            self.subject_ids = list(range(1, u + 1))
        if len(self.subject_ids) != u:
            raise ValueError("one subject id per subject required")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("curve values must be finite")

    @property
    def n_subjects(self) -> int:
        return self.values.shape[0]

    @property
    def n_channels(self) -> int:
        return self.values.shape[1]

    @property
    def n_timepoints(self) -> int:
        return self.values.shape[2]

    @property
    def n_group_a(self) -> int:
        return int(np.sum(self.group_codes == GROUP_A))


@dataclass
class EigenBasis:
    """Truncated eigendecomposition of a functional dataset.

    eigenfunctions has shape (T, K) and is orthonormal under the trapezoid
    inner product on time_grid; scores[u, i, k] are the inner products of
    the centred curves with each eigenfunction.
    """

    mean_curve: np.ndarray
    eigenfunctions: np.ndarray
    eigenvalues: np.ndarray
    var_explained: np.ndarray
    scores: np.ndarray
    time_grid: np.ndarray

    @property
    def n_components(self) -> int:
        return self.eigenfunctions.shape[1]

    def component_norms(self) -> np.ndarray:
        w = trapezoid_weights(self.time_grid)
        return np.sqrt(np.einsum("tk,t,tk->k", self.eigenfunctions, w, self.eigenfunctions))


def smooth_dataset(raw: FunctionalDataset, basis_size: int,
                   penalty: float | None = None) -> FunctionalDataset:
    """Smooth every curve with a penalized cubic B-spline fit.

    penalty=None selects a single shared penalty by generalized
    cross-validation over a fixed log-spaced grid.
    """
    if penalty is not None and penalty < 0:
        raise ValueError("penalty must be nonnegative")
    smoother = CurveSmoother(raw.time_grid, basis_size)
    if penalty is None:
        penalty = smoother.select_penalty(raw.values)
    fitted = smoother.fit(raw.values, penalty)
    return FunctionalDataset(fitted, raw.time_grid.copy(), raw.group_codes.copy(),
                             list(raw.subject_ids))


def _fix_signs(eigenfunctions: np.ndarray) -> np.ndarray:
    """Flip each column so its largest-magnitude entry is positive.

    Ties on magnitude resolve to the lowest time index (argmax order).
    """
    out = eigenfunctions.copy()
    for k in range(out.shape[1]):
        idx = int(np.argmax(np.abs(out[:, k])))
        if out[idx, k] < 0:
            out[:, k] = -out[:, k]
    return out


def fit_fpca(data: FunctionalDataset, var_threshold: float = 0.8,
             min_component_share: float = 0.15) -> EigenBasis:
    """Eigendecomposition of the pooled covariance of all centred curves.

    The number of retained components is the smallest K whose cumulative
    variance share reaches var_threshold, then restricted to components
    whose individual share is at least min_component_share; at least one
    component is always kept.
    """
    if not 0 < var_threshold <= 1:
        raise ValueError("var_threshold must lie in (0, 1]")
    u, n, t = data.values.shape
    flat = data.values.reshape(u * n, t)
    mean_curve = flat.mean(axis=0)
    centred = flat - mean_curve
    total = float(np.sum(centred ** 2))
    if total <= 1e-12 * flat.size:
        raise ValueError("data has (numerically) zero variance around the mean curve")

    # Eigenproblem of the covariance operator under the trapezoid inner
    # product: SVD of centred @ diag(sqrt(w)), eigenfunctions w^-1/2 * v.
    w = trapezoid_weights(data.time_grid)
    sqrt_w = np.sqrt(w)
    _, sing, vt = np.linalg.svd(centred * sqrt_w, full_matrices=False)
    eigenvalues_all = sing ** 2 / (u * n - 1)
    shares = eigenvalues_all / eigenvalues_all.sum()
    cumulative = np.cumsum(shares)
    k_cum = int(np.searchsorted(cumulative, var_threshold - 1e-12) + 1)
    k_share = int(np.sum(shares >= min_component_share))
    k = max(1, min(k_cum, k_share))

    eigenfunctions = _fix_signs((vt[:k] / sqrt_w).T)
    scores = centred @ (w[:, None] * eigenfunctions)
    return EigenBasis(
        mean_curve=mean_curve,
        eigenfunctions=eigenfunctions,
        eigenvalues=eigenvalues_all[:k],
        var_explained=shares[:k],
        scores=scores.reshape(u, n, k),
        time_grid=data.time_grid.copy(),
    )


def reconstruct(basis: EigenBasis, subject: int, channel: int) -> np.ndarray:
    """Mean curve plus the score-weighted sum of eigenfunctions."""
    return basis.mean_curve + basis.eigenfunctions @ basis.scores[subject, channel]


# ---------------------------------------------------------------------------
# CSV / JSON interfaces
# ---------------------------------------------------------------------------

def write_dataset_csv(data: FunctionalDataset, path) -> None:
    """One row per curve: subject_id, channel_id, group_code, T values."""
    t = data.n_timepoints
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["subject_id", "channel_id", "group_code"]
                        + [f"t{j}" for j in range(t)])
        for u in range(data.n_subjects):
            for i in range(data.n_channels):
                writer.writerow([data.subject_ids[u], i + 1, data.group_codes[u]]
                                + [repr(float(v)) for v in data.values[u, i]])


def write_time_grid_csv(time_grid: np.ndarray, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["time"])
        for v in time_grid:
            writer.writerow([repr(float(v))])


def read_time_grid_csv(path) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != ["time"]:
        raise ValueError(f"{path}: expected a single 'time' column")
    return np.array([float(r[0]) for r in rows[1:]])


def read_dataset_csv(path, time_grid_path) -> FunctionalDataset:
    time_grid = read_time_grid_csv(time_grid_path)
    t = time_grid.size
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or header[:3] != ["subject_id", "channel_id", "group_code"]:
            raise ValueError(f"{path}: expected subject_id, channel_id, group_code columns")
        if len(header) != 3 + t:
            raise ValueError(f"{path}: {len(header) - 3} value columns but "
                             f"{t} time points in the grid")
        per_subject: dict = {}
        groups: dict = {}
        for row in reader:
            sid = row[0]
            groups.setdefault(sid, int(row[2]))
            if groups[sid] != int(row[2]):
                raise ValueError(f"{path}: subject {sid} has inconsistent group codes")
            per_subject.setdefault(sid, []).append(
                (int(row[1]), np.array([float(v) for v in row[3:]])))
    if not per_subject:
        raise ValueError(f"{path}: no curves found")
    n_channels = {len(v) for v in per_subject.values()}
    if len(n_channels) != 1:
        raise ValueError(f"{path}: subjects have unequal channel counts")
    subject_ids = list(per_subject)
    values = np.empty((len(subject_ids), n_channels.pop(), t))
    for u, sid in enumerate(subject_ids):
        for slot, (_, curve) in enumerate(sorted(per_subject[sid], key=lambda x: x[0])):
            values[u, slot] = curve
    ids = [int(s) if s.lstrip("-").isdigit() else s for s in subject_ids]
    return FunctionalDataset(values, time_grid,
                             np.array([groups[s] for s in subject_ids]), ids)


def write_basis(basis: EigenBasis, directory) -> None:
    """JSON header plus CSV matrices (mean curve, eigenfunctions, scores)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    header = {
        "n_components": basis.n_components,
        "eigenvalues": [float(v) for v in basis.eigenvalues],
        "var_explained": [float(v) for v in basis.var_explained],
        "n_subjects": int(basis.scores.shape[0]),
        "n_channels": int(basis.scores.shape[1]),
    }
    (directory / "basis.json").write_text(json.dumps(header, indent=2) + "\n")
    k = basis.n_components
    with open(directory / "mean_curve.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["time", "mean"])
        for tv, mv in zip(basis.time_grid, basis.mean_curve):
            writer.writerow([repr(float(tv)), repr(float(mv))])
    with open(directory / "eigenfunctions.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["time"] + [f"component_{j + 1}" for j in range(k)])
        for tv, row in zip(basis.time_grid, basis.eigenfunctions):
            writer.writerow([repr(float(tv))] + [repr(float(v)) for v in row])
    with open(directory / "scores.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["subject", "channel"] + [f"score_{j + 1}" for j in range(k)])
        u, n, _ = basis.scores.shape
        for s in range(u):
            for i in range(n):
                writer.writerow([s + 1, i + 1]
                                + [repr(float(v)) for v in basis.scores[s, i]])


def read_basis(directory) -> EigenBasis:
    directory = Path(directory)
    header = json.loads((directory / "basis.json").read_text())
    k = header["n_components"]
    mean_rows = np.loadtxt(directory / "mean_curve.csv", delimiter=",", skiprows=1, ndmin=2)
    eig_rows = np.loadtxt(directory / "eigenfunctions.csv", delimiter=",", skiprows=1, ndmin=2)
    score_rows = np.loadtxt(directory / "scores.csv", delimiter=",", skiprows=1, ndmin=2)
    u, n = header["n_subjects"], header["n_channels"]
    scores = np.empty((u, n, k))
    for row in score_rows:
        scores[int(row[0]) - 1, int(row[1]) - 1] = row[2:]
    return EigenBasis(
        mean_curve=mean_rows[:, 1],
        eigenfunctions=eig_rows[:, 1:],
        eigenvalues=np.array(header["eigenvalues"]),
        var_explained=np.array(header["var_explained"]),
        scores=scores,
        time_grid=mean_rows[:, 0],
    )
