"""Fit smooth blendshape coefficient sequences to vertex motion.

For a motion ``p^1..p^N`` and a blendshape model ``(b0, B)`` the coefficients
solve the box- and velocity-constrained least squares problem

    min  sum_n ||p^n - b0 - B u^n||^2
    s.t. 0 <= u^n_k <= 1,   |u^{n+1}_k - u^n_k| <= delta

which is a strictly convex QP with block-diagonal Hessian.  It is solved with
an operator-splitting (ADMM) method whose linear system is block tridiagonal,
followed by an active-set polish that recovers the exact solution.
"""

import csv
import io
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from scipy.linalg import cho_solve_banded, cholesky_banded, LinAlgError
from scipy.sparse.linalg import spsolve
from sklearn.base import BaseEstimator

from .errors import (
    DimensionMismatch,
    InputError,
    MaxIterations,
    NotPositiveDefinite,
    RankDeficientBlendshapes,
)
from .mesh import BlendshapeModel
from .numerics.linalg import cholesky

log = logging.getLogger(__name__)

DEFAULT_FPS = 60.0


@dataclass
class MotionSequence:
    frames: np.ndarray  # (N, 3M)
    frame_rate: float = DEFAULT_FPS

    def __post_init__(self):
        self.frames = np.atleast_2d(np.asarray(self.frames, dtype=np.float64))
        if self.frames.shape[0] < 1:
            raise InputError("motion needs at least one frame")

    @property
    def n_frames(self):
        return self.frames.shape[0]


@dataclass
class CoeffSequence:
    values: np.ndarray  # (N, K)
    frame_rate: float = DEFAULT_FPS
    names: tuple = ()

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64).reshape(len(self.values), -1)
        if not self.names:
            self.names = tuple(f"bs{k}" for k in range(self.values.shape[1]))
        self.names = tuple(self.names)
        if len(self.names) != self.values.shape[1]:
            raise DimensionMismatch(f"{len(self.names)} names for {self.values.shape[1]} channels")

    @property
    def shape(self):
        return self.values.shape

    def to_csv(self):
        buf = io.StringIO()
        buf.write(",".join(["frame", *self.names]) + "\n")
        for n, row in enumerate(self.values):
            buf.write(",".join([str(n), *(f"{v:.9g}" for v in row)]) + "\n")
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text, frame_rate=DEFAULT_FPS):
        rows = list(csv.reader(io.StringIO(text)))
        if not rows or rows[0][:1] != ["frame"]:
            raise InputError("coefficient CSV must start with a 'frame' header")
        names = tuple(rows[0][1:])
        body = [r for r in rows[1:] if r]
        try:
            values = np.array([[float(v) for v in r[1:]] for r in body], dtype=np.float64)
        except ValueError as exc:
            raise InputError(f"bad coefficient value: {exc}") from None
        return cls(values.reshape(len(body), len(names)), frame_rate, names)

    def save(self, path):
        Path(path).write_text(self.to_csv())

    @classmethod
    def load(cls, path, frame_rate=DEFAULT_FPS):
        return cls.from_csv(Path(path).read_text(), frame_rate)


@dataclass
class QPConfig:
    delta: float = 0.1
    tol_primal: float = 1e-6
    tol_dual: float = 1e-6
    max_iter: int = 20000
    rho: float = 1.0
    sigma: float = 1e-6
    alpha: float = 1.6
    adapt_every: int = 25
    polish: bool = True

    def __post_init__(self):
        if self.delta <= 0:
            raise InputError("delta must be positive")
        if self.tol_primal <= 0 or self.tol_dual <= 0:
            raise InputError("tolerances must be positive")


@dataclass
class QPInstance:
    """``min 1/2 u'Pu + q'u  s.t. 0 <= u <= 1, G u <= h`` with ``u`` frame-major."""

    P: sp.spmatrix
    q: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    G: sp.spmatrix
    h: np.ndarray
    gram: np.ndarray  # B'B, the repeated diagonal block
    n_frames: int
    n_blendshapes: int
    delta: float
    warm_start: np.ndarray = field(default=None, repr=False)

    @property
    def n(self):
        return self.q.size

    def objective(self, u):
        u = np.asarray(u).reshape(-1)
        return float(0.5 * u @ (self.P @ u) + self.q @ u)


@dataclass
class QPResult:
    u: np.ndarray  # (N, K)
    iterations: int
    primal_residual: float
    dual_residual: float
    objective: float
    converged: bool
    polished: bool
    rho: float
    bound_multipliers: np.ndarray = field(repr=False, default=None)  # (NK,)
    velocity_multipliers: np.ndarray = field(repr=False, default=None)  # (rows of G,)

    def diagnostics(self):
        return {
            "iterations": self.iterations,
            "primal_residual": self.primal_residual,
            "dual_residual": self.dual_residual,
            "objective": self.objective,
            "converged": self.converged,
            "polished": self.polished,
            "rho": self.rho,
        }


def difference_operator(n_frames, n_blendshapes):
    """Rows ``u^{n+1}_k - u^n_k`` for ``n < N``, frame-major ordering."""
    rows = (n_frames - 1) * n_blendshapes
    if rows <= 0:
        return sp.csr_matrix((0, n_frames * n_blendshapes))
    r = np.arange(rows)
    return sp.csr_matrix(
        (np.concatenate([-np.ones(rows), np.ones(rows)]),
         (np.concatenate([r, r]), np.concatenate([r, r + n_blendshapes]))),
        shape=(rows, n_frames * n_blendshapes),
    )


def velocity_constraint_matrix(n_frames, n_blendshapes):
    """Stacked ``[D, -D]`` blocks: per frame pair, ``u^n - u^{n+1}`` then ``u^{n+1} - u^n``."""
    diff = difference_operator(n_frames, n_blendshapes)
    k = n_blendshapes
    blocks = []
    for n in range(n_frames - 1):
        blk = diff[n * k:(n + 1) * k]
        blocks += [-blk, blk]
    if not blocks:
        return sp.csr_matrix((0, n_frames * n_blendshapes))
    return sp.vstack(blocks).tocsr()


def assemble_qp(model, motion, cfg=None):
    cfg = cfg or QPConfig()
    if not isinstance(motion, MotionSequence):
        motion = MotionSequence(motion)
    frames = motion.frames
    if frames.shape[1] != model.template.size:
        raise DimensionMismatch(
            f"motion has {frames.shape[1] // 3} vertices, model has {model.n_vertices}"
        )
    basis = model.basis
    k = model.n_blendshapes
    n = motion.n_frames
    gram = basis.T @ basis
    try:
        low = cholesky(gram) if k else np.zeros((0, 0))
    except NotPositiveDefinite as exc:
        raise RankDeficientBlendshapes(f"B'B is not positive definite: {exc}") from None
    q = ((model.template[None, :] - frames) @ basis).reshape(-1)
    P = sp.block_diag([gram] * n, format="csr") if k else sp.csr_matrix((0, 0))
    G = velocity_constraint_matrix(n, k)
    from scipy.linalg import cho_solve

    if k:
        free = cho_solve((low, True), ((frames - model.template) @ basis).T).T
        warm = np.clip(free, 0.0, 1.0).reshape(-1)
    else:
        warm = np.zeros(0)
    return QPInstance(P, q, np.zeros(n * k), np.ones(n * k), G,
                      np.full(G.shape[0], cfg.delta), gram, n, k, cfg.delta, warm)


# --------------------------------------------------------------------------
# ADMM with a block-tridiagonal system


class _BandedSystem:
    """Factorization of ``P + sigma I + rho (I + D'D)`` in banded form."""

    def __init__(self, qp, sigma, rho):
        n, k = qp.n_frames, qp.n_blendshapes
        size = n * k
        ab = np.zeros((k + 1, size))
        # diagonal
        lap = np.full(n, 2.0)
        if n == 1:
            lap[:] = 0.0
        else:
            lap[0] = lap[-1] = 1.0
        diag_blocks = np.broadcast_to(qp.gram, (n, k, k)).copy()
        idx = np.arange(k)
        diag_blocks[:, idx, idx] += sigma + rho + rho * lap[:, None]
        for off in range(k):
            # upper band entry (i, i + off) lives at ab[k - off, i + off]
            vals = np.zeros(size)
            for frame in range(n):
                base = frame * k
                vals[base + off:base + k] = diag_blocks[frame, idx[:k - off], idx[off:]]
            ab[k - off, :] = vals
        # coupling -rho between (n, k) and (n + 1, k): offset k
        if n > 1:
            ab[0, k:] = -rho
        self.factor = cholesky_banded(ab, lower=False, check_finite=False)

    def solve(self, rhs):
        return cho_solve_banded((self.factor, False), rhs, check_finite=False)


def _project(v, lo, hi):
    return np.minimum(np.maximum(v, lo), hi)


def _kkt_residuals(qp, x, y_box, y_vel, diff):
    """Infinity-norm primal violation and scaled stationarity residual."""
    px = qp.P @ x
    grad = px + qp.q + y_box + diff.T @ y_vel
    dx = diff @ x
    viol = max(
        float(np.max(np.maximum(qp.lower - x, 0.0), initial=0.0)),
        float(np.max(np.maximum(x - qp.upper, 0.0), initial=0.0)),
        float(np.max(np.maximum(np.abs(dx) - qp.delta, 0.0), initial=0.0)),
    )
    scale = max(1.0, float(np.max(np.abs(qp.q), initial=0.0)), float(np.max(np.abs(px), initial=0.0)))
    return viol, float(np.max(np.abs(grad), initial=0.0)) / scale


def _polish(qp, x, y, diff, tol=1e-9):
    """Solve the equality-constrained KKT system on the guessed active set."""
    n = qp.n
    a = sp.vstack([sp.identity(n, format="csr"), diff]).tocsr()
    lo = np.concatenate([qp.lower, np.full(diff.shape[0], -qp.delta)])
    hi = np.concatenate([qp.upper, np.full(diff.shape[0], qp.delta)])
    ax = a @ x
    low_act = (y < -tol) | (ax - lo < 1e-7)
    up_act = ((y > tol) | (hi - ax < 1e-7)) & ~low_act
    act = np.flatnonzero(low_act | up_act)
    a_act = a[act]
    b_act = np.where(low_act[act], lo[act], hi[act])
    reg = 1e-12
    kkt = sp.bmat([[qp.P + reg * sp.identity(n), a_act.T],
                   [a_act, -reg * sp.identity(len(act))]], format="csc")
    rhs = np.concatenate([-qp.q, b_act])
    sol = spsolve(kkt, rhs)
    for _ in range(3):  # iterative refinement against the regularization
        exact = sp.bmat([[qp.P, a_act.T], [a_act, None]], format="csc") if len(act) else qp.P.tocsc()
        resid = rhs - exact @ sol
        sol = sol + spsolve(kkt, resid)
    xs = sol[:n]
    ys = np.zeros(a.shape[0])
    ys[act] = sol[n:]
    # dual signs must match the side that is active
    if np.any(ys[low_act] > 1e-9) or np.any(ys[up_act] < -1e-9):
        return None
    return xs, ys


def solve_qp(qp, cfg=None, warm_start=None, raise_on_fail=True):
    """Solve an instance from :func:`assemble_qp`.

    Returns a :class:`QPResult`.  If the tolerances are not met within
    ``cfg.max_iter`` iterations, :class:`MaxIterations` is raised carrying the
    best iterate (or it is returned flagged when ``raise_on_fail`` is false).
    """
    cfg = cfg or QPConfig()
    n, k = qp.n_frames, qp.n_blendshapes
    diff = difference_operator(n, k)
    m_vel = diff.shape[0]
    if qp.n == 0:
        return QPResult(np.zeros((n, 0)), 0, 0.0, 0.0, 0.0, True, False, cfg.rho,
                        np.zeros(0), np.zeros(2 * m_vel))

    lo = np.concatenate([qp.lower, np.full(m_vel, -qp.delta)])
    hi = np.concatenate([qp.upper, np.full(m_vel, qp.delta)])

    def a_mul(v):
        return np.concatenate([v, diff @ v])

    def at_mul(w):
        return w[:qp.n] + diff.T @ w[qp.n:]

    x = np.asarray(warm_start if warm_start is not None else qp.warm_start, dtype=np.float64).reshape(-1)
    if x.size != qp.n:
        x = np.zeros(qp.n)
    z = _project(a_mul(x), lo, hi)
    y = np.zeros_like(z)
    rho, sigma, alpha = cfg.rho, cfg.sigma, cfg.alpha
    system = _BandedSystem(qp, sigma, rho)

    converged = polished = False
    it = 0
    best = (np.inf, x.copy(), y.copy())
    for it in range(1, cfg.max_iter + 1):
        rhs = sigma * x - qp.q + at_mul(rho * z - y)
        x_t = system.solve(rhs)
        z_t = a_mul(x_t)
        x = alpha * x_t + (1 - alpha) * x
        z_relax = alpha * z_t + (1 - alpha) * z
        z_new = _project(z_relax + y / rho, lo, hi)
        y = y + rho * (z_relax - z_new)
        z = z_new

        if it % cfg.adapt_every and it != cfg.max_iter:
            continue
        ax = a_mul(x)
        px = qp.P @ x
        aty = at_mul(y)
        r_prim = float(np.max(np.abs(ax - z)))
        r_dual = float(np.max(np.abs(px + qp.q + aty)))
        scale_p = max(float(np.max(np.abs(ax))), float(np.max(np.abs(z))), 1e-12)
        scale_d = max(float(np.max(np.abs(px))), float(np.max(np.abs(aty))),
                      float(np.max(np.abs(qp.q))), 1e-12)
        merit = max(r_prim, r_dual)
        if merit < best[0]:
            best = (merit, x.copy(), y.copy())
        if r_prim <= cfg.tol_primal * max(1.0, scale_p) and r_dual <= cfg.tol_dual * max(1.0, scale_d):
            converged = True
            break
        # residual balancing
        ratio = (r_prim / scale_p) / max(r_dual / scale_d, 1e-30)
        if ratio > 10.0:
            rho *= 2.0
            system = _BandedSystem(qp, sigma, rho)
        elif ratio < 0.1:
            rho /= 2.0
            system = _BandedSystem(qp, sigma, rho)
        if cfg.polish and it % (cfg.adapt_every * 8) == 0:
            pol = _polish(qp, x, y, diff)
            if pol is not None:
                viol, stat = _kkt_residuals(qp, pol[0], pol[1][:qp.n], pol[1][qp.n:], diff)
                if viol <= cfg.tol_primal and stat <= cfg.tol_dual:
                    x, y = pol
                    converged = polished = True
                    break

    if not converged:
        x, y = best[1], best[2]
    if cfg.polish and not polished:
        pol = _polish(qp, x, y, diff)
        if pol is not None:
            viol, stat = _kkt_residuals(qp, pol[0], pol[1][:qp.n], pol[1][qp.n:], diff)
            if viol <= cfg.tol_primal and stat <= cfg.tol_dual:
                x, y = pol
                polished = converged = True

    y_box, y_vel = y[:qp.n], y[qp.n:]
    viol, stat = _kkt_residuals(qp, x, y_box, y_vel, diff)
    # multipliers of the stacked [u^n - u^{n+1} <= d ; u^{n+1} - u^n <= d] rows
    lam = np.empty(2 * m_vel)
    for frame in range(n - 1):
        blk = slice(frame * k, (frame + 1) * k)
        lam[2 * frame * k:(2 * frame + 1) * k] = np.maximum(-y_vel[blk], 0.0)
        lam[(2 * frame + 1) * k:(2 * frame + 2) * k] = np.maximum(y_vel[blk], 0.0)
    result = QPResult(
        u=x.reshape(n, k),
        iterations=it,
        primal_residual=viol,
        dual_residual=stat,
        objective=qp.objective(x),
        converged=converged,
        polished=polished,
        rho=rho,
        bound_multipliers=y_box,
        velocity_multipliers=lam,
    )
    if not converged:
        log.warning("QP stopped after %d iterations (primal %.2e, dual %.2e)", it, viol, stat)
        if raise_on_fail:
            raise MaxIterations(f"QP not converged after {it} iterations", result)
    return result


def fit_sequence(model, motion, cfg=None):
    """Coefficient sequence reproducing ``motion`` with ``model``."""
    cfg = cfg or QPConfig()
    if not isinstance(motion, MotionSequence):
        motion = MotionSequence(motion)
    qp = assemble_qp(model, motion, cfg)
    res = solve_qp(qp, cfg)
    return CoeffSequence(np.clip(res.u, 0.0, 1.0), motion.frame_rate, model.names)


class CoefficientFitter(BaseEstimator):
    """Estimator wrapper: ``fit`` takes a blendshape model, ``transform`` motion frames.

    ``transform`` returns the ``(N, K)`` coefficient matrix; solver diagnostics
    of the last call are kept in ``diagnostics_``.
    """

    def __init__(self, delta=0.1, tol_primal=1e-6, tol_dual=1e-6, max_iter=20000, rho=1.0,
                 polish=True):
        self.delta = delta
        self.tol_primal = tol_primal
        self.tol_dual = tol_dual
        self.max_iter = max_iter
        self.rho = rho
        self.polish = polish

    def _config(self):
        return QPConfig(delta=self.delta, tol_primal=self.tol_primal, tol_dual=self.tol_dual,
                        max_iter=self.max_iter, rho=self.rho, polish=self.polish)

    def fit(self, model, y=None):
        if not isinstance(model, BlendshapeModel):
            raise InputError("CoefficientFitter.fit expects a BlendshapeModel")
        gram = model.basis.T @ model.basis
        if model.n_blendshapes:
            try:
                cholesky(gram)
            except NotPositiveDefinite as exc:
                raise RankDeficientBlendshapes(str(exc)) from None
        self.model_ = model
        self.n_features_in_ = model.template.size
        return self

    def transform(self, frames):
        if not hasattr(self, "model_"):
            from sklearn.exceptions import NotFittedError

            raise NotFittedError("CoefficientFitter is not fitted")
        frames = np.atleast_2d(np.asarray(frames, dtype=np.float64))
        if frames.shape[1] != self.n_features_in_:
            raise DimensionMismatch(f"expected {self.n_features_in_} coordinates per frame")
        cfg = self._config()
        res = solve_qp(assemble_qp(self.model_, MotionSequence(frames), cfg), cfg)
        self.diagnostics_ = res.diagnostics()
        return np.clip(res.u, 0.0, 1.0)
