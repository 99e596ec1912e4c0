"""Natural cubic interpolating and smoothing splines used as control paths.

A :class:`ControlPath` stores per-interval cubic coefficients for every
channel and answers value / derivative queries at arbitrary times. Outside
the knot range the path continues linearly with the boundary slope.

Both fits are linear in the observed values, so :func:`path_weights` can hand
back a dense matrix ``W`` with ``path(t_q) = W @ y``. The model uses this to
keep the control encoders differentiable through the spline.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_banded

from .errors import InputError

DEFAULT_SMOOTHING = 1.0


@dataclass(frozen=True)
class ControlPath:
    knot_times: np.ndarray  # (N,)
    a: np.ndarray  # (N-1, C) value at left knot
    b: np.ndarray  # first derivative at left knot
    c: np.ndarray  # half second derivative at left knot
    d: np.ndarray  # cubic coefficient
    kind: str = "interpolating"
    smoothing: float = 0.0

    @property
    def channels(self):
        return self.a.shape[1]

    @property
    def knot_values(self):
        """Path value at each knot (the fitted values for a smoothing spline)."""
        h = np.diff(self.knot_times)[-1]
        last = self.a[-1] + self.b[-1] * h + self.c[-1] * h**2 + self.d[-1] * h**3
        return np.vstack([self.a, last])

    def _locate(self, t):
        t = np.asarray(t, dtype=np.float64)
        if np.isnan(t).any():
            raise InputError("query time is NaN")
        knots = self.knot_times
        idx = np.clip(np.searchsorted(knots, t, side="right") - 1, 0, len(knots) - 2)
        return t, idx

    def eval(self, t):
        t, idx = self._locate(t)
        knots = self.knot_times
        s = np.clip(t, knots[0], knots[-1]) - knots[idx]
        s = s[..., None]
        val = self.a[idx] + s * (self.b[idx] + s * (self.c[idx] + s * self.d[idx]))
        # linear continuation beyond the ends
        slope = self.eval_derivative(np.clip(t, knots[0], knots[-1]))
        over = (t - np.clip(t, knots[0], knots[-1]))[..., None]
        return val + over * slope

    def eval_derivative(self, t):
        t, idx = self._locate(t)
        knots = self.knot_times
        s = (np.clip(t, knots[0], knots[-1]) - knots[idx])[..., None]
        return self.b[idx] + s * (2.0 * self.c[idx] + 3.0 * s * self.d[idx])

    def eval_second_derivative(self, t, side="right"):
        """Second derivative; ``side`` picks the interval at an interior knot."""
        t = np.asarray(t, dtype=np.float64)
        knots = self.knot_times
        search = "right" if side == "right" else "left"
        idx = np.clip(np.searchsorted(knots, t, side=search) - 1, 0, len(knots) - 2)
        inside = (t >= knots[0]) & (t <= knots[-1])
        s = (np.clip(t, knots[0], knots[-1]) - knots[idx])[..., None]
        out = 2.0 * self.c[idx] + 6.0 * s * self.d[idx]
        return np.where(inside[..., None], out, 0.0)


def _prepare(times, values):
    times = np.asarray(times, dtype=np.float64).reshape(-1)
    values = np.asarray(values, dtype=np.float64)
    if values.ndim == 1:
        values = values[:, None]
    if values.shape[0] != times.size:
        raise InputError(f"{times.size} timestamps but {values.shape[0]} observation rows")
    if times.size < 2:
        raise InputError("need at least 2 observations to fit a path")
    if not np.isfinite(times).all() or not np.isfinite(values).all():
        raise InputError("observations must be finite")
    h = np.diff(times)
    if (h <= 0).any():
        raise InputError("timestamps must be strictly increasing (no duplicates)")
    return times, values, h


def _from_second_derivatives(times, values, M):
    """Cubic coefficients from knot values and knot second derivatives."""
    h = np.diff(times)[:, None]
    y0, y1 = values[:-1], values[1:]
    M0, M1 = M[:-1], M[1:]
    b = (y1 - y0) / h - h * (2.0 * M0 + M1) / 6.0
    c = M0 / 2.0
    d = (M1 - M0) / (6.0 * h)
    return y0.copy(), b, c, d


def _natural_second_derivatives(h, values):
    """Solve the tridiagonal system for interior second derivatives (ends are 0)."""
    N = h.size + 1
    M = np.zeros_like(values)
    if N == 2:
        return M
    slopes = np.diff(values, axis=0) / h[:, None]
    rhs = 6.0 * (slopes[1:] - slopes[:-1])
    ab = np.zeros((3, N - 2))
    ab[0, 1:] = h[1:-1]
    ab[1] = 2.0 * (h[:-1] + h[1:])
    ab[2, :-1] = h[1:-1]
    M[1:-1] = solve_banded((1, 1), ab, rhs)
    return M


def fit_natural_cubic(times, values):
    times, values, h = _prepare(times, values)
    M = _natural_second_derivatives(h, values)
    a, b, c, d = _from_second_derivatives(times, values, M)
    return ControlPath(times, a, b, c, d, kind="interpolating")


def fit_smoothing(times, values, lam=DEFAULT_SMOOTHING):
    """Natural smoothing spline minimising ``sum (y - S)^2 + lam * int S''^2``.

    Uses the Reinsch formulation: with band matrices ``Q`` (N x N-2) and
    ``R`` (N-2 x N-2), the interior second derivatives solve
    ``(R + lam Q^T Q) gamma = Q^T y`` and the fitted values are
    ``g = y - lam Q gamma``.
    """
    lam = float(lam)
    if not np.isfinite(lam):
        raise InputError("smoothing weight must be finite")
    if lam < 0:
        raise InputError(f"smoothing weight must be nonnegative, got {lam}")
    times, values, h = _prepare(times, values)
    N = times.size
    if N < 4:
        raise InputError("smoothing spline needs at least 4 observations")

    Q = np.zeros((N, N - 2))
    R = np.zeros((N - 2, N - 2))
    for j in range(N - 2):
        Q[j, j] = 1.0 / h[j]
        Q[j + 1, j] = -1.0 / h[j] - 1.0 / h[j + 1]
        Q[j + 2, j] = 1.0 / h[j + 1]
        R[j, j] = (h[j] + h[j + 1]) / 3.0
        if j + 1 < N - 2:
            R[j, j + 1] = R[j + 1, j] = h[j + 1] / 6.0
    gamma = np.linalg.solve(R + lam * Q.T @ Q, Q.T @ values)
    fitted = values - lam * Q @ gamma
    M = np.zeros_like(values)
    M[1:-1] = gamma
    a, b, c, d = _from_second_derivatives(times, fitted, M)
    return ControlPath(times, a, b, c, d, kind="smoothing", smoothing=lam)


def fit_path(times, values, kind="interpolating", lam=DEFAULT_SMOOTHING):
    if kind == "interpolating":
        return fit_natural_cubic(times, values)
    if kind == "smoothing":
        return fit_smoothing(times, values, lam)
    raise InputError(f"unknown spline kind {kind!r}")


def path_weights(times, query, kind="interpolating", lam=DEFAULT_SMOOTHING, derivative=True):
    """Matrix ``W`` (len(query) x len(times)) with ``path'(query) = W @ y``.

    With ``derivative=False`` the matrix reproduces path values instead.
    """
    times = np.asarray(times, dtype=np.float64).reshape(-1)
    basis = fit_path(times, np.eye(times.size), kind=kind, lam=lam)
    query = np.asarray(query, dtype=np.float64).reshape(-1)
    return basis.eval_derivative(query) if derivative else basis.eval(query)


def residual_sum(path, times, values):
    values = np.asarray(values, dtype=np.float64)
    if values.ndim == 1:
        values = values[:, None]
    return float(np.sum((path.eval(times) - values) ** 2))
