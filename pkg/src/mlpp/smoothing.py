"""Penalized B-spline smoothing of noisy curves.

Curves observed on a shared time grid are fit by cubic B-splines with a
second-derivative roughness penalty.  A single penalty value is shared by
all curves and can be selected by generalized cross-validation over a
fixed log-spaced grid.
"""
from __future__ import annotations

import numpy as np
from scipy.interpolate import BSpline
from scipy.linalg import cholesky, solve_triangular

SPLINE_DEGREE = 3
GCV_GRID = np.logspace(-6.0, 3.0, 25)


def _knot_vector(time_grid: np.ndarray, basis_size: int) -> np.ndarray:
    """Clamped knot vector with equally spaced interior knots."""
    lo, hi = time_grid[0], time_grid[-1]
    n_interior = basis_size - SPLINE_DEGREE - 1
    interior = np.linspace(lo, hi, n_interior + 2)[1:-1]
    return np.concatenate([
        np.full(SPLINE_DEGREE + 1, lo),
        interior,
        np.full(SPLINE_DEGREE + 1, hi),
    ])


def basis_matrix(time_grid: np.ndarray, basis_size: int) -> np.ndarray:
    """Evaluate the cubic B-spline basis at the grid points, (T, basis_size)."""
    knots = _knot_vector(time_grid, basis_size)
    return BSpline(knots, np.eye(basis_size), SPLINE_DEGREE)(time_grid)


def penalty_matrix(time_grid: np.ndarray, basis_size: int) -> np.ndarray:
    """Integrated squared second derivative of the basis, (basis_size, basis_size).

    Second derivatives of cubic splines are piecewise linear, so 3-point
    Gauss-Legendre per knot span integrates the products exactly.
    """
    knots = _knot_vector(time_grid, basis_size)
    deriv2 = BSpline(knots, np.eye(basis_size), SPLINE_DEGREE).derivative(2)
    nodes, weights = np.polynomial.legendre.leggauss(3)
    pen = np.zeros((basis_size, basis_size))
    spans = np.unique(knots)
    for a, b in zip(spans[:-1], spans[1:]):
        x = 0.5 * (b - a) * nodes + 0.5 * (a + b)
        w = 0.5 * (b - a) * weights
        d = deriv2(x)
        pen += (d * w[:, None]).T @ d
    return 0.5 * (pen + pen.T)


def _validate(time_grid: np.ndarray, basis_size: int) -> None:
    if time_grid.ndim != 1 or time_grid.size < 2:
        raise ValueError("time grid must be a 1-d array with at least 2 points")
    if np.any(np.diff(time_grid) <= 0):
        raise ValueError("time grid must be strictly increasing")
    if basis_size < SPLINE_DEGREE + 1:
        raise ValueError(f"basis_size must be at least {SPLINE_DEGREE + 1}")
    if basis_size > time_grid.size:
        raise ValueError("basis_size cannot exceed the number of time points")


class CurveSmoother:
    """Shared factorization for smoothing many curves on one grid.

    Uses the Demmler-Reinsch decomposition: with B the basis matrix,
    P the roughness penalty and B'B = R'R, the eigendecomposition of
    R^-T P R^-1 yields fitted values for any penalty at O(basis_size^2)
    cost per curve.
    """

    def __init__(self, time_grid: np.ndarray, basis_size: int):
        time_grid = np.asarray(time_grid, dtype=float)
        _validate(time_grid, basis_size)
        self.time_grid = time_grid
        self.basis_size = basis_size
        self.basis = basis_matrix(time_grid, basis_size)
        self.penalty = penalty_matrix(time_grid, basis_size)
        btb = self.basis.T @ self.basis
        r = cholesky(btb, lower=False)
        rinv = solve_triangular(r, np.eye(basis_size), lower=False)
        m = rinv.T @ self.penalty @ rinv
        evals, evecs = np.linalg.eigh(0.5 * (m + m.T))
        self._shrink_dirs = np.clip(evals, 0.0, None)
        self._to_coef = rinv @ evecs          # coefficients = _to_coef @ shrunk
        self._from_data = evecs.T @ rinv.T @ self.basis.T

    def coefficients(self, curves: np.ndarray, penalty: float) -> np.ndarray:
        """Spline coefficients for curves (..., T) at a fixed penalty."""
        proj = self._from_data @ np.atleast_2d(curves).T
        shrunk = proj / (1.0 + penalty * self._shrink_dirs)[:, None]
        return (self._to_coef @ shrunk).T

    def fit(self, curves: np.ndarray, penalty: float) -> np.ndarray:
        """Fitted values on the time grid, same shape as curves."""
        curves = np.asarray(curves, dtype=float)
        coef = self.coefficients(curves.reshape(-1, self.time_grid.size), penalty)
        return (coef @ self.basis.T).reshape(curves.shape)

    def effective_df(self, penalty: float) -> float:
        return float(np.sum(1.0 / (1.0 + penalty * self._shrink_dirs)))

    def gcv_score(self, curves: np.ndarray, penalty: float) -> float:
        """Pooled GCV: mean squared residual / (1 - df/T)^2 over all curves."""
        curves = np.asarray(curves, dtype=float).reshape(-1, self.time_grid.size)
        fitted = self.fit(curves, penalty)
        t = self.time_grid.size
        rss = float(np.sum((curves - fitted) ** 2))
        denom = (1.0 - self.effective_df(penalty) / t) ** 2
        return rss / (curves.shape[0] * t * denom)

    def select_penalty(self, curves: np.ndarray, grid: np.ndarray = GCV_GRID) -> float:
        """Penalty with the smallest pooled GCV score on the grid."""
        scores = [self.gcv_score(curves, lam) for lam in grid]
        return float(grid[int(np.argmin(scores))])
