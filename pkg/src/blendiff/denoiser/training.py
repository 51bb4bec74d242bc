"""Trainer for the noise predictor: augmentation, loss, AdamW and EMA."""

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from ..diffusion import NoiseSchedule
from ..errors import InputError, NaNLoss, ShapeMismatch
from ..names import pair_indices, symmetric_pairs
from ..numerics import autodiff as ad
from ..numerics.optim import EMA, AdamW
from ..numerics.rng import as_rng
from .losses import loss_simple, loss_velocity
from .network import DenoiserConfig, as_leaves, forward, init_params

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    batch: int = 8
    lr: float = 1e-5
    warmup_frac: float = 0.05
    weight_decay: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    ema_decay: float = 0.9999
    cond_drop_prob: float = 0.1
    loss_mode: str = "l1"
    use_velocity_loss: bool = True
    audio_shift_prob: float = 0.5
    max_shift_frames: float = 1.0  # 1/60 s at 60 fps
    blendshape_swap_prob: float = 0.5
    symmetric_pairs: list = field(default=None)  # None: derive from names
    steps: int = 1000
    window: int = 120
    T: int = 1000
    seed: int = 0

    def __post_init__(self):
        for name in ("cond_drop_prob", "audio_shift_prob", "blendshape_swap_prob", "warmup_frac"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise InputError(f"{name} must lie in [0, 1]")
        if self.loss_mode.lower() not in ("l1", "l2"):
            raise InputError("loss_mode must be l1 or l2")
        if self.batch < 1 or self.window < 1 or self.steps < 0:
            raise InputError("batch, window and steps must be positive")
        if self.symmetric_pairs is not None:
            self.symmetric_pairs = [tuple(p) for p in self.symmetric_pairs]

    def to_dict(self):
        return asdict(self)


@dataclass
class TrainingSet:
    """Paired coefficient sequences ``(N_i, K)`` and frame-aligned features ``(N_i, D)``."""

    coeffs: list
    features: list
    names: tuple = ()

    def __post_init__(self):
        self.coeffs = [np.asarray(c, dtype=np.float64) for c in self.coeffs]
        self.features = [np.asarray(f, dtype=np.float64) for f in self.features]
        if not self.coeffs or len(self.coeffs) != len(self.features):
            raise InputError("need a non-empty, equal number of coefficient and feature sequences")
        k = self.coeffs[0].shape[1]
        for c, f in zip(self.coeffs, self.features):
            if c.ndim != 2 or c.shape[1] != k or f.ndim != 2 or f.shape[0] != c.shape[0]:
                raise ShapeMismatch("each pair must be (N, K) coefficients with (N, D) features")
        if not self.names:
            self.names = tuple(f"bs{i}" for i in range(k))
        self.names = tuple(self.names)

    @property
    def n_channels(self):
        return self.coeffs[0].shape[1]

    @property
    def cond_dim(self):
        return self.features[0].shape[1]


def shift_features(feats, shift):
    """Resample rows at ``n + shift`` (fractional frames), clamping at the ends."""
    n = feats.shape[0]
    pos = np.clip(np.arange(n) + shift, 0, n - 1)
    lo = np.minimum(np.floor(pos).astype(int), max(n - 2, 0))
    hi = np.minimum(lo + 1, n - 1)
    w = (pos - lo)[:, None]
    return (1 - w) * feats[lo] + w * feats[hi]


def swap_channels(u, index_pairs):
    out = u.copy()
    for a, b in index_pairs:
        out[..., [a, b]] = out[..., [b, a]]
    return out


def draw_batch(data, cfg, rng):
    """Random windows of a common length from randomly chosen sequences."""
    idx = rng.integers(0, len(data.coeffs), cfg.batch)
    width = min(cfg.window, min(data.coeffs[i].shape[0] for i in idx))
    u0, feats = [], []
    for i in idx:
        start = int(rng.integers(0, data.coeffs[i].shape[0] - width + 1))
        u0.append(data.coeffs[i][start:start + width])
        feats.append(data.features[i][start:start + width])
    return np.stack(u0), np.stack(feats)


def augment(u0, feats, cfg, index_pairs, rng):
    """Feature shift and symmetric channel swap, each applied per sample."""
    b = u0.shape[0]
    do_shift = rng.random(b) < cfg.audio_shift_prob
    shifts = rng.uniform(-cfg.max_shift_frames, cfg.max_shift_frames, b)
    do_swap = rng.random(b) < cfg.blendshape_swap_prob
    u0 = u0.copy()
    feats = feats.copy()
    for i in range(b):
        if do_shift[i]:
            feats[i] = shift_features(feats[i], shifts[i])
        if do_swap[i] and index_pairs:
            u0[i] = swap_channels(u0[i], index_pairs)
    return u0, feats


def batch_loss(leaves, u0, feats, t, eps, drop, dcfg, tcfg, schedule):
    """Total loss (simple + optional velocity term) as an autodiff scalar, plus parts."""
    ab = schedule.alpha_bar[np.asarray(t)].reshape(-1, 1, 1)
    u_t = np.sqrt(ab) * u0 + np.sqrt(1 - ab) * eps
    eps_hat = forward(leaves, u_t, feats, t, dcfg, drop=drop)
    simple = loss_simple(ad.const(eps), eps_hat, tcfg.loss_mode)
    total = simple
    parts = {"simple": float(simple.value)}
    if tcfg.use_velocity_loss and u0.shape[1] > 1:
        vel = loss_velocity(ad.const(eps), eps_hat)
        total = total + vel
        parts["velocity"] = float(vel.value)
    parts["total"] = float(total.value)
    return total, parts


class TrainState:
    """Parameters, optimizer and EMA shadow for one training run."""

    def __init__(self, dcfg, tcfg, params=None):
        self.dcfg = dcfg
        self.tcfg = tcfg
        self.rng = as_rng(tcfg.seed)
        self.params = params if params is not None else init_params(dcfg, self.rng.child("init"))
        warmup = int(math.ceil(tcfg.warmup_frac * tcfg.steps))
        self.opt = AdamW(self.params, lr=tcfg.lr, betas=(tcfg.beta1, tcfg.beta2),
                         weight_decay=tcfg.weight_decay, warmup_steps=warmup)
        self.ema = EMA(self.params, tcfg.ema_decay)
        self.schedule = NoiseSchedule(tcfg.T)
        self.step = 0
        self.history = []


def train_step(state, u0, feats, rng, index_pairs=()):
    """One update on a ``(B, W, K)`` / ``(B, W, D)`` batch; returns the loss parts."""
    tcfg, dcfg = state.tcfg, state.dcfg
    u0, feats = augment(u0, feats, tcfg, index_pairs, rng)
    b = u0.shape[0]
    drop = rng.random(b) < tcfg.cond_drop_prob
    t = rng.integers(1, state.schedule.T + 1, b)
    eps = rng.normal(u0.shape)
    leaves = as_leaves(state.params)
    total, parts = batch_loss(leaves, u0, feats, t, eps, drop, dcfg, tcfg, state.schedule)
    if not np.isfinite(parts["total"]):
        norms = {k: float(np.linalg.norm(v)) for k, v in state.params.items()}
        raise NaNLoss(f"non-finite loss at step {state.step}",
                      {"step": state.step, "parts": parts, "param_norms": norms, "t": t.tolist()})
    ad.backward(total)
    grads = {k: v.grad for k, v in leaves.items() if v.grad is not None}
    state.opt.step(grads)
    state.ema.update(state.params)
    state.step += 1
    state.history.append(parts["total"])
    return parts


class Trainer:
    def __init__(self, data, dcfg=None, tcfg=None, params=None):
        self.data = data
        self.tcfg = tcfg or TrainConfig()
        if dcfg is None:
            dcfg = DenoiserConfig(n_channels=data.n_channels, cond_dim=data.cond_dim)
        if dcfg.n_channels != data.n_channels or dcfg.cond_dim != data.cond_dim:
            raise ShapeMismatch("denoiser config does not match the training data")
        self.dcfg = dcfg
        self.state = TrainState(dcfg, self.tcfg, params)
        pairs = self.tcfg.symmetric_pairs
        if pairs is None:
            pairs = symmetric_pairs(data.names)
        self.index_pairs = pair_indices(data.names, pairs)
        self._rng = self.state.rng.child("train")

    def step(self):
        u0, feats = draw_batch(self.data, self.tcfg, self._rng)
        return train_step(self.state, u0, feats, self._rng, self.index_pairs)

    def fit(self, steps=None, log_every=0):
        steps = self.tcfg.steps if steps is None else steps
        for _ in range(steps):
            parts = self.step()
            if log_every and self.state.step % log_every == 0:
                log.info("step %d loss %.5f", self.state.step, parts["total"])
        return self

    @property
    def params(self):
        return self.state.params

    @property
    def ema_params(self):
        return self.state.ema.shadow
