"""Training objectives for the noise predictor."""

import warnings

import numpy as np

from ..errors import InputError, ShapeMismatch
from ..numerics import autodiff as ad
from ..numerics.autodiff import Var, const


def _finish(loss, *inputs):
    return loss if any(isinstance(x, Var) for x in inputs) else float(loss.value)


def _check(eps, eps_hat):
    if tuple(np.shape(getattr(eps, "value", eps))) != tuple(np.shape(getattr(eps_hat, "value", eps_hat))):
        raise ShapeMismatch("eps and eps_hat shapes differ")


def loss_simple(eps, eps_hat, mode="l1"):
    """Mean absolute (``l1``) or squared (``l2``) noise-prediction error."""
    _check(eps, eps_hat)
    diff = const(eps_hat) - const(eps)
    mode = mode.lower()
    if mode == "l1":
        loss = ad.mean(ad.vabs(diff))
    elif mode == "l2":
        loss = ad.mean(ad.square(diff))
    else:
        raise InputError(f"unknown loss mode {mode!r}")
    return _finish(loss, eps, eps_hat)


def loss_velocity(eps, eps_hat):
    """Mean ``|(eps[n+1]-eps[n]) - (eps_hat[n+1]-eps_hat[n])|`` along the frame axis (-2)."""
    _check(eps, eps_hat)
    r = const(eps_hat) - const(eps)
    if r.shape[-2] < 2:
        warnings.warn("velocity loss needs at least two frames; returning 0", RuntimeWarning, stacklevel=2)
        return _finish(const(0.0), eps, eps_hat)
    vel = r[..., 1:, :] - r[..., :-1, :]
    return _finish(ad.mean(ad.vabs(vel)), eps, eps_hat)


def velocity_identity_check(u0, eps, eps_hat, alpha_bar_t):
    """Max discrepancy between the sample-space and scaled noise-space velocity gaps.

    With ``u_t = sqrt(ab) u0 + sqrt(1-ab) eps`` and the implied clean estimate
    ``u_hat = (u_t - sqrt(1-ab) eps_hat) / sqrt(ab)``, the frame-difference gap
    ``du0 - du_hat`` equals ``sqrt((1-ab)/ab) (d eps_hat - d eps)``.
    """
    ab = float(alpha_bar_t)
    if not 0.0 < ab < 1.0:
        raise InputError("alpha_bar_t must lie in (0, 1)")
    u0, eps, eps_hat = (np.asarray(a, dtype=np.float64) for a in (u0, eps, eps_hat))
    u_t = np.sqrt(ab) * u0 + np.sqrt(1 - ab) * eps
    u_hat = (u_t - np.sqrt(1 - ab) * eps_hat) / np.sqrt(ab)
    sample_gap = np.diff(u0, axis=-2) - np.diff(u_hat, axis=-2)
    noise_gap = np.sqrt((1 - ab) / ab) * (np.diff(eps_hat, axis=-2) - np.diff(eps, axis=-2))
    return float(np.max(np.abs(sample_gap - noise_gap), initial=0.0))
