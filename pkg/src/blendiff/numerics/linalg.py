"""Dense symmetric linear algebra in float64."""

import numpy as np

from ..errors import NotPositiveDefinite, NotPSD, NotSymmetric

PIVOT_MIN = 1e-12


def _check_square(a):
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {a.shape}")
    return a


def cholesky(a):
    """Lower-triangular ``L`` with ``L @ L.T == a``.

    Raises :class:`NotPositiveDefinite` when any pivot ``L[i, i]**2`` is at or
    below ``1e-12``.
    """
    a = _check_square(a)
    n = a.shape[0]
    if n == 0:
        return np.zeros((0, 0))
    scale = max(1.0, float(np.max(np.abs(a))))
    if np.max(np.abs(a - a.T)) > 1e-10 * scale:
        raise NotSymmetric("cholesky input is not symmetric")
    try:
        low = np.linalg.cholesky(a)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefinite(str(exc)) from None
    pivots = np.diag(low) ** 2
    if np.min(pivots) <= PIVOT_MIN:
        k = int(np.argmin(pivots))
        raise NotPositiveDefinite(f"pivot {k} = {pivots[k]:.3e} <= {PIVOT_MIN}")
    return low


def cho_solve(low, b):
    """Solve ``(L L^T) x = b`` given the Cholesky factor."""
    from scipy.linalg import solve_triangular

    y = solve_triangular(low, b, lower=True, check_finite=False)
    return solve_triangular(low.T, y, lower=False, check_finite=False)


def sym_eigh(a, tol=1e-8):
    a = _check_square(a)
    scale = max(1.0, float(np.max(np.abs(a)))) if a.size else 1.0
    if a.size and np.max(np.abs(a - a.T)) > tol * scale:
        raise NotSymmetric(f"asymmetry {np.max(np.abs(a - a.T)):.3e} exceeds {tol}")
    return np.linalg.eigh(0.5 * (a + a.T))


def sym_sqrt(a, *, psd_tol=1e-10):
    """Principal square root of a symmetric positive-semidefinite matrix.

    Eigenvalues down to ``-psd_tol`` (relative to the largest magnitude) are
    treated as round-off and clamped to zero; anything more negative raises
    :class:`NotPSD`.
    """
    w, v = sym_eigh(a)
    if w.size == 0:
        return np.zeros_like(np.asarray(a, dtype=np.float64))
    floor = -psd_tol * max(1.0, float(np.max(np.abs(w))))
    if w.min() < floor:
        raise NotPSD(f"smallest eigenvalue {w.min():.3e} is negative")
    root = (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T
    return 0.5 * (root + root.T)
