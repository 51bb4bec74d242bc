"""Gaussian diffusion over coefficient sequences.

Forward noising, DDPM/DDIM reverse samplers with classifier-free guidance, and
masked editing that regenerates only the unmasked part of a reference.  The
denoiser is any callable ``denoiser(u_t, cond, t) -> eps_hat`` where ``cond``
is an ``(N, D)`` feature matrix or ``None`` for the null condition.
"""

import csv
import io
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .coeff_fit import CoeffSequence
from .errors import InputError, ShapeMismatch
from .numerics.rng import as_rng


@dataclass(frozen=True)
class NoiseSchedule:
    """Linear-beta schedule; ``alpha_bar[0] = 1`` and ``alpha_bar[t]`` for t = 1..T."""

    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 2e-2

    def __post_init__(self):
        if self.T < 1:
            raise InputError("T must be >= 1")
        if not 0 < self.beta_start <= self.beta_end < 1:
            raise InputError("need 0 < beta_start <= beta_end < 1")

    @property
    def betas(self):
        return np.linspace(self.beta_start, self.beta_end, self.T)

    @property
    def alpha_bar(self):
        return np.concatenate([[1.0], np.cumprod(1.0 - self.betas)])


@dataclass
class GuidanceConfig:
    gamma: float = 2.0
    sampler: str = "ddim"
    steps: int = 1000
    eta: float = 0.0

    def __post_init__(self):
        self.sampler = self.sampler.lower()
        if self.gamma < 0:
            raise InputError("gamma must be >= 0")
        if self.sampler not in ("ddim", "ddpm"):
            raise InputError(f"unknown sampler {self.sampler!r}")
        if self.steps < 1:
            raise InputError("steps must be >= 1")
        if self.eta < 0:
            raise InputError("eta must be >= 0")


def q_sample(schedule, u0, t, eps):
    u0 = np.asarray(u0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if u0.shape != eps.shape:
        raise ShapeMismatch(f"u0 {u0.shape} vs eps {eps.shape}")
    if not 0 <= t <= schedule.T:
        raise InputError(f"timestep {t} outside [0, {schedule.T}]")
    ab = schedule.alpha_bar[t]
    return np.sqrt(ab) * u0 + np.sqrt(1.0 - ab) * eps


def guided_noise(eps_cond, eps_uncond, gamma):
    return eps_cond + gamma * (eps_cond - eps_uncond)


def timesteps(schedule, steps):
    """Descending timesteps ``t_S > ... > t_1``, evenly spaced in [1, T]."""
    if steps > schedule.T:
        raise InputError(f"{steps} sampling steps exceed T={schedule.T}")
    ts = np.unique(np.round(np.linspace(0, schedule.T, steps + 1)).astype(int))[1:]
    return ts[::-1]


def _predict(denoiser, x, cond, t, gamma):
    if gamma == 0 or cond is None:
        return np.asarray(denoiser(x, cond, t), dtype=np.float64)
    eps_c = np.asarray(denoiser(x, cond, t), dtype=np.float64)
    eps_u = np.asarray(denoiser(x, None, t), dtype=np.float64)
    return guided_noise(eps_c, eps_u, gamma)


def _step(x, eps, ab_t, ab_s, cfg, rng):
    x0 = (x - np.sqrt(1.0 - ab_t) * eps) / np.sqrt(ab_t)
    if cfg.sampler == "ddim":
        sigma = cfg.eta * np.sqrt((1 - ab_s) / (1 - ab_t) * (1 - ab_t / ab_s))
        mean = np.sqrt(ab_s) * x0 + np.sqrt(max(1 - ab_s - sigma**2, 0.0)) * eps
    else:
        # posterior q(x_s | x_t, x0) for a (possibly strided) pair s < t
        a_ts = ab_t / ab_s
        mean = (np.sqrt(ab_s) * (1 - a_ts) * x0 + np.sqrt(a_ts) * (1 - ab_s) * x) / (1 - ab_t)
        sigma = np.sqrt((1 - ab_s) / (1 - ab_t) * (1 - a_ts))
    if ab_s >= 1.0 or sigma == 0.0:
        return mean
    return mean + sigma * rng.normal(x.shape)


def _run(denoiser, cond, shape, cfg, rng, schedule, u_ref=None, mask=None):
    rng = as_rng(rng)
    edit_rng = rng.child("edit")
    ab = schedule.alpha_bar
    x = rng.normal(shape)
    ts = timesteps(schedule, cfg.steps)
    for i, t in enumerate(ts):
        s = ts[i + 1] if i + 1 < len(ts) else 0
        if mask is not None:
            known = np.sqrt(ab[t]) * u_ref + np.sqrt(1 - ab[t]) * edit_rng.normal(shape)
            x = np.where(mask, known, x)
        eps = _predict(denoiser, x, cond, int(t), cfg.gamma)
        if eps.shape != x.shape:
            raise ShapeMismatch(f"denoiser returned {eps.shape}, expected {x.shape}")
        x = _step(x, eps, ab[t], ab[s], cfg, rng)
    x = np.clip(x, 0.0, 1.0)
    if mask is not None:
        x = np.where(mask, u_ref, x)
    return x


def sample(denoiser, cond, n_frames, n_channels, cfg=None, rng=None, schedule=None, names=(),
           frame_rate=60.0, batch=None):
    """Draw a coefficient sequence from pure noise.

    With ``batch`` set, the denoiser receives ``(batch, N, K)`` arrays and a
    ``(batch, N, K)`` array is returned instead of a :class:`CoeffSequence`.
    """
    cfg = cfg or GuidanceConfig()
    schedule = schedule or NoiseSchedule()
    shape = (n_frames, n_channels) if batch is None else (batch, n_frames, n_channels)
    values = _run(denoiser, cond, shape, cfg, rng, schedule)
    if batch is not None:
        return values
    return CoeffSequence(values, frame_rate, names)


def edit(denoiser, cond, u_ref, mask, cfg=None, rng=None, schedule=None, names=(), frame_rate=60.0):
    """Regenerate the entries of ``u_ref`` where ``mask == 0``; entries with 1 are kept."""
    cfg = cfg or GuidanceConfig()
    schedule = schedule or NoiseSchedule()
    ref = u_ref.values if isinstance(u_ref, CoeffSequence) else np.asarray(u_ref, dtype=np.float64)
    if isinstance(u_ref, CoeffSequence) and not names:
        names = u_ref.names
    mask = np.asarray(mask)
    if mask.shape != ref.shape:
        raise ShapeMismatch(f"mask {mask.shape} vs reference {ref.shape}")
    if not np.all((mask == 0) | (mask == 1)):
        raise InputError("mask must be binary")
    values = _run(denoiser, cond, ref.shape, cfg, rng, schedule, ref, mask.astype(bool))
    return CoeffSequence(values, frame_rate, names)


def read_mask(path, shape=None):
    """0/1 CSV in the coefficient CSV layout (``frame`` column plus one per channel)."""
    rows = list(csv.reader(io.StringIO(Path(path).read_text())))
    if not rows or rows[0][:1] != ["frame"]:
        raise InputError("mask CSV must start with a 'frame' header")
    try:
        mask = np.array([[float(v) for v in r[1:]] for r in rows[1:] if r])
    except ValueError as exc:
        raise InputError(f"bad mask value: {exc}") from None
    mask = mask.reshape(-1, len(rows[0]) - 1)
    if not np.all((mask == 0) | (mask == 1)):
        raise InputError("mask must be binary")
    if shape is not None and mask.shape != tuple(shape):
        raise ShapeMismatch(f"mask {mask.shape} vs expected {tuple(shape)}")
    return mask.astype(np.int8)


def write_mask(path, mask, names=None):
    mask = np.asarray(mask, dtype=int)
    names = names or [f"bs{k}" for k in range(mask.shape[1])]
    lines = [",".join(["frame", *names])]
    lines += [",".join([str(n), *map(str, row)]) for n, row in enumerate(mask)]
    Path(path).write_text("\n".join(lines) + "\n")
