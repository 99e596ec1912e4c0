"""Row-wise projections onto the probability simplex.

Two regularizers are supported: entropic (softmax, always strictly interior)
and Euclidean/Gini (sparsemax, may land on faces and vertices). Everything
here works on plain numpy arrays along the last axis; the differentiable
wrappers live in :mod:`decoupled.autodiff`.
"""

from __future__ import annotations

import itertools

import numpy as np

from .errors import ContractError, NumericError


def _check_finite(z):
    z = np.asarray(z, dtype=np.float64)
    if not np.isfinite(z).all():
        raise NumericError("projection input contains non-finite entries")
    return z


def softmax_rows(z):
    z = _check_finite(z)
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def sparsemax_threshold(z):
    """Return ``(tau, k)`` along the last axis.

    Coordinates are sorted descending (stable, ties by original index) and
    ``k`` is the largest rank with ``1 + k*z_(k) > sum_{j<=k} z_(j)``.
    """
    z = _check_finite(z)
    K = z.shape[-1]
    zs = -np.sort(-z, axis=-1, kind="stable")
    csum = np.cumsum(zs, axis=-1)
    ranks = np.arange(1, K + 1, dtype=np.float64)
    valid = 1.0 + ranks * zs > csum
    # valid is a prefix along the sorted axis, so counting gives k(z)
    k = valid.sum(axis=-1, keepdims=True)
    tau = (np.take_along_axis(csum, k - 1, axis=-1) - 1.0) / k
    return tau, k


def sparsemax_rows(z):
    tau, _ = sparsemax_threshold(z)
    return np.maximum(np.asarray(z, dtype=np.float64) - tau, 0.0)


def softmax(z):
    return softmax_rows(np.asarray(z, dtype=np.float64).reshape(-1))


def sparsemax(z):
    return sparsemax_rows(np.asarray(z, dtype=np.float64).reshape(-1))


def tau(z):
    t, _ = sparsemax_threshold(np.asarray(z, dtype=np.float64).reshape(-1))
    return float(t[0])


def support(z):
    """Indices where sparsemax(z) is strictly positive (0-based)."""
    z = np.asarray(z, dtype=np.float64).reshape(-1)
    return tuple(int(i) for i in np.flatnonzero(z > tau(z)))


def sparsemax_jacobian(z):
    """``diag(s) - s s^T / |S|`` for the support indicator ``s``."""
    z = np.asarray(z, dtype=np.float64).reshape(-1)
    s = np.zeros(z.size)
    s[list(support(z))] = 1.0
    return np.diag(s) - np.outer(s, s) / s.sum()


def sparsemax_jvp(z, v):
    """Jacobian-vector product ``s * (v - vhat)``, vhat the mean of v on the support."""
    z = _check_finite(np.asarray(z, dtype=np.float64).reshape(-1))
    v = _check_finite(np.asarray(v, dtype=np.float64).reshape(-1))
    s = np.zeros(z.size)
    s[list(support(z))] = 1.0
    vhat = np.dot(s, v) / s.sum()
    return s * (v - vhat)


def softmax_jacobian(z):
    p = softmax(z)
    return np.diag(p) - np.outer(p, p)


def project_rows(M, kind="softmax"):
    M = np.asarray(M, dtype=np.float64)
    if kind == "softmax":
        return softmax_rows(M)
    if kind == "sparsemax":
        return sparsemax_rows(M)
    raise ValueError(f"unknown projection {kind!r}")


def is_row_stochastic(A, tol=1e-9):
    A = np.asarray(A)
    return bool((A >= -tol).all() and np.all(np.abs(A.sum(axis=-1) - 1.0) <= tol))


# --------------------------------------------------------------------------
# objectives and oracles


def entropic_objective(y, z):
    """``-z.y + sum y log y``; softmax(z) is its minimiser over the simplex."""
    y = np.asarray(y, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        ent = np.where(y > 0, y * np.log(y), 0.0)
    return float(-np.dot(z, y) + ent.sum())


def gini_objective(y, z):
    """``-z.y + 1/2 sum y(y-1)``; equals ``||y-z||^2/2`` up to a constant on the simplex."""
    y = np.asarray(y, dtype=np.float64)
    return float(-np.dot(z, y) + 0.5 * np.sum(y * (y - 1.0)))


MAX_ORACLE_DIM = 6


def brute_force_simplex_projection(z, tol=1e-12):
    """Euclidean projection onto the simplex by enumerating every candidate support.

    For each non-empty support S the stationarity and primal feasibility
    conditions fix ``y_S = z_S - tau`` with ``tau = (sum z_S - 1)/|S|``. The
    candidate is kept if all KKT conditions hold: ``y_S > 0`` and the
    multipliers ``mu_i = tau - z_i`` are nonnegative off the support.
    """
    z = np.asarray(z, dtype=np.float64).reshape(-1)
    K = z.size
    if K > MAX_ORACLE_DIM:
        raise ContractError(f"oracle limited to length <= {MAX_ORACLE_DIM}, got {K}")
    best, best_dist = None, np.inf
    for r in range(1, K + 1):
        for S in itertools.combinations(range(K), r):
            S = list(S)
            t = (z[S].sum() - 1.0) / r
            y = np.zeros(K)
            y[S] = z[S] - t
            if (y[S] <= 0).any():
                continue
            off = np.ones(K, dtype=bool)
            off[S] = False
            if (t - z[off] < -tol).any():
                continue
            d = np.sum((y - z) ** 2)
            if d < best_dist:
                best, best_dist = y, d
    return best


def projection_comparison(points):
    """Pair each 2-vector with its softmax and sparsemax images on the 1-simplex."""
    rows = []
    for p in points:
        p = np.asarray(p, dtype=np.float64).reshape(2)
        s = softmax(p)
        g = sparsemax(p)
        rows.append((p[0], p[1], s[0], s[1], g[0], g[1]))
    return np.array(rows, dtype=np.float64).reshape(-1, 6)


COMPARISON_COLUMNS = ("x0", "x1", "soft0", "soft1", "sparse0", "sparse1")
