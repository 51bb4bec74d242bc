"""Dense two-phase simplex with Bland's rule for small linear programs.

Solves ``min c'x  s.t.  A_ub x <= b_ub,  A_eq x = b_eq,  x >= 0`` with
``b_ub >= 0`` (so slacks form a starting basis).  Bland's rule makes the pivot
sequence deterministic and cycle-free.
"""

from dataclasses import dataclass

import numpy as np

from ..errors import Infeasible, InputError, NumericalError

TOL = 1e-11


@dataclass
class LPResult:
    x: np.ndarray
    objective: float
    duals_ub: np.ndarray  # <= 0 for a minimization with <= rows
    duals_eq: np.ndarray
    iterations: int


def _pivot(tab, row, col):
    tab[row] /= tab[row, col]
    for r in range(tab.shape[0]):
        if r != row and tab[r, col] != 0.0:
            tab[r] -= tab[r, col] * tab[row]


def _run(tab, basis, n_cols, max_iter):
    """Minimize the objective in the last row of ``tab`` over the first ``n_cols`` columns."""
    it = 0
    while True:
        cost = tab[-1, :n_cols]
        entering = np.flatnonzero(cost < -TOL)
        if entering.size == 0:
            return it
        col = int(entering[0])  # Bland: lowest index
        column = tab[:-1, col]
        pos = column > TOL
        if not np.any(pos):
            raise NumericalError("LP is unbounded")
        ratios = np.full(column.shape, np.inf)
        ratios[pos] = tab[:-1, -1][pos] / column[pos]
        best = ratios.min()
        ties = np.flatnonzero(ratios <= best + TOL * max(1.0, abs(best)))
        row = int(min(ties, key=lambda r: basis[r]))  # Bland: lowest basic index leaves
        _pivot(tab, row, col)
        basis[row] = col
        it += 1
        if it > max_iter:
            raise NumericalError("simplex iteration limit reached")


def solve_lp(c, a_ub=None, b_ub=None, a_eq=None, b_eq=None, max_iter=10000):
    c = np.asarray(c, dtype=np.float64)
    n = c.size
    a_ub = np.zeros((0, n)) if a_ub is None else np.asarray(a_ub, dtype=np.float64)
    b_ub = np.zeros(0) if b_ub is None else np.asarray(b_ub, dtype=np.float64)
    a_eq = np.zeros((0, n)) if a_eq is None else np.asarray(a_eq, dtype=np.float64)
    b_eq = np.zeros(0) if b_eq is None else np.asarray(b_eq, dtype=np.float64)
    if np.any(b_ub < 0):
        raise InputError("b_ub must be nonnegative")
    sign = np.where(b_eq < 0, -1.0, 1.0)
    a_eq, b_eq = a_eq * sign[:, None], b_eq * sign
    m_ub, m_eq = a_ub.shape[0], a_eq.shape[0]
    m = m_ub + m_eq
    # columns: x | slacks | artificials | rhs
    n_cols = n + m_ub + m_eq
    tab = np.zeros((m + 1, n_cols + 1))
    tab[:m_ub, :n] = a_ub
    tab[:m_ub, n:n + m_ub] = np.eye(m_ub)
    tab[m_ub:m, :n] = a_eq
    tab[m_ub:m, n + m_ub:n_cols] = np.eye(m_eq)
    tab[:m_ub, -1] = b_ub
    tab[m_ub:m, -1] = b_eq
    basis = list(range(n, n_cols))

    # phase 1: minimise the sum of artificials
    tab[-1, n + m_ub:n_cols] = 1.0
    for r in range(m_ub, m):
        tab[-1] -= tab[r]
    it = _run(tab, basis, n_cols, max_iter)
    if -tab[-1, -1] > 1e-9:
        raise Infeasible(f"LP infeasible (phase-1 residual {-tab[-1, -1]:.3e})")
    # drive remaining artificials out of the basis where possible
    for r, b in enumerate(basis):
        if b >= n + m_ub:
            candidates = np.flatnonzero(np.abs(tab[r, :n + m_ub]) > TOL)
            if candidates.size:
                _pivot(tab, r, int(candidates[0]))
                basis[r] = int(candidates[0])

    # phase 2 over x and slacks only
    n2 = n + m_ub
    tab[-1] = 0.0
    tab[-1, :n] = c
    for r, b in enumerate(basis):
        if b < n2 and tab[-1, b] != 0.0:
            tab[-1] -= tab[-1, b] * tab[r]
    it += _run(tab, basis, n2, max_iter)

    x = np.zeros(n_cols)
    x[basis] = tab[:m, -1]
    x = x[:n]
    # duals y solve B'y = c_B over the original columns
    full = np.zeros((m, n_cols))
    full[:m_ub, :n] = a_ub
    full[:m_ub, n:n + m_ub] = np.eye(m_ub)
    full[m_ub:, :n] = a_eq
    full[m_ub:, n + m_ub:] = np.eye(m_eq)
    cost = np.zeros(n_cols)
    cost[:n] = c
    y = np.linalg.lstsq(full[:, basis].T, cost[basis], rcond=None)[0]
    return LPResult(np.maximum(x, 0.0), float(c @ x), y[:m_ub], y[m_ub:] * sign, it)
