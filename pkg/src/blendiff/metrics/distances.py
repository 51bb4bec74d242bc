"""Distribution distances over latent features: FD, GMM fitting, WInD, multimodality."""

from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from ..errors import Degenerate, InputError, ShapeMismatch
from ..numerics.linalg import sym_sqrt
from ..numerics.rng import as_rng
from .lp import solve_lp

SUBSET_SIZE = 36  # S_l, generations per subset for multimodality
GMM_COMPONENTS = 5
RIDGE = 1e-6


@dataclass
class LatentGaussianSet:
    """Weighted Gaussian components ``(pi, mu, Sigma)``; one component = ``single``."""

    weights: np.ndarray  # (C,)
    means: np.ndarray  # (C, d)
    covs: np.ndarray  # (C, d, d)
    log_likelihood: float = float("nan")
    history: list = field(default_factory=list, repr=False)

    def __post_init__(self):
        self.weights = np.atleast_1d(np.asarray(self.weights, dtype=np.float64))
        self.means = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        covs = np.asarray(self.covs, dtype=np.float64)
        self.covs = covs.reshape(self.means.shape[0], self.means.shape[1], self.means.shape[1])
        if abs(self.weights.sum() - 1.0) > 1e-9 or np.any(self.weights < 0):
            raise InputError("component weights must be nonnegative and sum to 1")

    @property
    def kind(self):
        return "single" if self.weights.size == 1 else "gmm"

    @property
    def n_components(self):
        return self.weights.size

    def component(self, i):
        return LatentGaussianSet([1.0], self.means[i:i + 1], self.covs[i:i + 1])

    @classmethod
    def single(cls, mean, cov):
        mean = np.atleast_1d(np.asarray(mean, dtype=np.float64))
        return cls([1.0], mean[None], np.asarray(cov, dtype=np.float64).reshape(1, mean.size, mean.size))


def gaussian_stats(features):
    """Maximum-likelihood mean and covariance of ``(n, d)`` features as a single Gaussian."""
    x = np.atleast_2d(np.asarray(features, dtype=np.float64))
    if x.shape[0] < 1:
        raise Degenerate("no samples")
    mu = x.mean(axis=0)
    xc = x - mu
    return LatentGaussianSet.single(mu, xc.T @ xc / x.shape[0])


def _moments(stats):
    if isinstance(stats, LatentGaussianSet):
        if stats.n_components != 1:
            raise InputError("frechet_distance expects single Gaussians")
        return stats.means[0], stats.covs[0]
    mu, cov = stats
    return np.atleast_1d(np.asarray(mu, dtype=np.float64)), np.atleast_2d(np.asarray(cov, dtype=np.float64))


def frechet_distance(stats_r, stats_g):
    """``|mu_r - mu_g|^2 + Tr(S_r + S_g - 2 (S_r^1/2 S_g S_r^1/2)^1/2)`` (clamped at 0)."""
    mu_r, s_r = _moments(stats_r)
    mu_g, s_g = _moments(stats_g)
    if mu_r.shape != mu_g.shape or s_r.shape != s_g.shape:
        raise ShapeMismatch("Gaussian dimensions differ")
    if np.array_equal(mu_r, mu_g) and np.array_equal(s_r, s_g):
        sym_sqrt(s_r)
        return 0.0  # exact, the trace term otherwise leaves ~1e-16 round-off
    root_r = sym_sqrt(s_r)
    sym_sqrt(s_g)  # PSD check on the second covariance
    inner = sym_sqrt(root_r @ s_g @ root_r)
    value = float(np.sum((mu_r - mu_g) ** 2) + np.trace(s_r) + np.trace(s_g) - 2.0 * np.trace(inner))
    return max(value, 0.0)


# --------------------------------------------------------------------------
# Gaussian mixtures


def _regularize(cov):
    """Raise the spectrum of ``cov`` to at least ``RIDGE`` along the diagonal."""
    cov = 0.5 * (cov + cov.T)
    lo = np.linalg.eigvalsh(cov)[0]
    if lo < RIDGE:
        cov = cov + (RIDGE - lo) * np.eye(cov.shape[0])
    return cov


def _log_gauss(x, mu, cov):
    d = x.shape[1]
    low = np.linalg.cholesky(cov)
    z = np.linalg.solve(low, (x - mu).T)
    return -0.5 * (np.sum(z * z, axis=0) + d * np.log(2 * np.pi)) - np.sum(np.log(np.diag(low)))


def _kmeanspp(x, k, rng):
    n = x.shape[0]
    centers = [x[int(rng.integers(0, n))]]
    for _ in range(1, k):
        d2 = np.min([np.sum((x - c) ** 2, axis=1) for c in centers], axis=0)
        total = d2.sum()
        if total <= 0:
            idx = int(rng.integers(0, n))
        else:
            idx = int(rng.choice(n, p=d2 / total))
        centers.append(x[idx])
    return np.array(centers)


def _m_step(x, resp):
    nk = resp.sum(axis=0) + 1e-300
    weights = nk / x.shape[0]
    means = (resp.T @ x) / nk[:, None]
    covs = []
    for j in range(resp.shape[1]):
        xc = x - means[j]
        covs.append(_regularize((resp[:, j, None] * xc).T @ xc / nk[j]))
    return weights, means, np.array(covs)


def _e_step(x, weights, means, covs):
    logp = np.stack([np.log(max(w, 1e-300)) + _log_gauss(x, m, c) for w, m, c in zip(weights, means, covs)], axis=1)
    norm = logsumexp(logp, axis=1)
    return np.exp(logp - norm[:, None]), float(norm.sum())


def _em(x, k, rng, max_iter, tol):
    centers = _kmeanspp(x, k, rng)
    labels = np.argmin(((x[:, None, :] - centers[None]) ** 2).sum(-1), axis=1)
    resp = np.eye(k)[labels]
    weights, means, covs = _m_step(x, resp)
    history = []
    for _ in range(max_iter):
        resp, ll = _e_step(x, weights, means, covs)
        history.append(ll)
        weights, means, covs = _m_step(x, resp)
        if len(history) > 1 and abs(history[-1] - history[-2]) <= tol * max(1.0, abs(history[-1])):
            break
    _, ll = _e_step(x, weights, means, covs)
    history.append(ll)
    return LatentGaussianSet(weights / weights.sum(), means, covs, ll, history)


def fit_gmm(features, k=GMM_COMPONENTS, rng=None, restarts=3, max_iter=300, tol=1e-10):
    """EM with k-means++ seeding; best of ``restarts`` by final log-likelihood."""
    x = np.atleast_2d(np.asarray(features, dtype=np.float64))
    if x.shape[0] < k:
        raise Degenerate(f"{x.shape[0]} samples cannot support {k} components")
    rng = as_rng(rng)
    best = None
    for r in range(max(1, restarts)):
        fit = _em(x, k, rng.child(f"restart{r}"), max_iter, tol)
        if best is None or fit.log_likelihood > best.log_likelihood:
            best = fit
    return best


# --------------------------------------------------------------------------
# WInD


@dataclass
class TransportPlan:
    w: np.ndarray
    objective: float
    cost: np.ndarray
    duals_ub: np.ndarray = field(repr=False, default=None)
    duals_eq: np.ndarray = field(repr=False, default=None)


def transport_lp(p_r, p_g, cost):
    """``min sum w_ij d_ij`` s.t. row sums <= p_r, column sums <= p_g, total mass 1, w >= 0."""
    kr, kg = cost.shape
    a_ub = np.vstack([np.kron(np.eye(kr), np.ones(kg)), np.kron(np.ones(kr), np.eye(kg))])
    b_ub = np.concatenate([p_r, p_g])
    a_eq = np.ones((1, kr * kg))
    res = solve_lp(cost.reshape(-1), a_ub, b_ub, a_eq, [1.0])
    return TransportPlan(res.x.reshape(kr, kg), res.objective, cost, res.duals_ub, res.duals_eq)


def wind(p_r, p_g):
    """Minimal transport cost between mixtures with Gaussian W2^2 ground costs."""
    if p_r.means.shape[1] != p_g.means.shape[1]:
        raise ShapeMismatch("mixture dimensions differ")
    cost = np.array([[frechet_distance(p_r.component(i), p_g.component(j))
                      for j in range(p_g.n_components)] for i in range(p_r.n_components)])
    plan = transport_lp(p_r.weights, p_g.weights, cost)
    return max(plan.objective, 0.0), plan


def wind_repeated(features_r, features_g, repeats=10, rng=None, k=GMM_COMPONENTS, restarts=3):
    """Refit both mixtures ``repeats`` times; returns ``(mean, std, values)``.

    Repeat ``r`` seeds both fits from the same child stream, so identical
    inputs yield identical mixtures and a distance of exactly 0.
    """
    rng = as_rng(rng)
    values = []
    for r in range(repeats):
        seed = int(rng.child(f"repeat{r}").bits(1)[0])
        g_r = fit_gmm(features_r, k, seed, restarts)
        g_g = fit_gmm(features_g, k, seed, restarts)
        values.append(wind(g_r, g_g)[0])
    values = np.array(values)
    return float(values.mean()), float(values.std()), values


# --------------------------------------------------------------------------


def multimodality(features_a, features_b):
    """Mean L2 distance between paired features of two ``(C, S_l, d)`` subsets."""
    a = np.asarray(features_a, dtype=np.float64)
    b = np.asarray(features_b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeMismatch(f"{a.shape} vs {b.shape}")
    if a.ndim != 3:
        raise ShapeMismatch("features must be (conditions, subset, dim)")
    return float(np.mean(np.linalg.norm(a - b, axis=-1)))


def split_subsets(features, subset_size=SUBSET_SIZE, rng=None):
    """Two disjoint random subsets of size ``S_l`` per condition from ``(C, S, d)`` features."""
    x = np.asarray(features, dtype=np.float64)
    if x.shape[1] < 2 * subset_size:
        raise Degenerate(f"need {2 * subset_size} samples per condition, have {x.shape[1]}")
    rng = as_rng(rng)
    a, b = [], []
    for c in range(x.shape[0]):
        perm = rng.permutation(x.shape[1])
        a.append(x[c, perm[:subset_size]])
        b.append(x[c, perm[subset_size:2 * subset_size]])
    return np.array(a), np.array(b)


__all__ = [
    "GMM_COMPONENTS", "LatentGaussianSet", "SUBSET_SIZE", "TransportPlan", "fit_gmm",
    "frechet_distance", "gaussian_stats", "multimodality", "split_subsets", "transport_lp", "wind",
    "wind_repeated",
]
