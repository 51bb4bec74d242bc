"""Sequence VAE whose latent means serve as features for the distribution metrics.

The encoder maps a fixed-length window of coefficients to a diagonal Gaussian;
the decoder ends with ReLU then Tanh so reconstructions stay in [0, 1).  The
objective is a channel-weighted reconstruction error, its frame-difference
analogue and a cyclically annealed KL term.
"""

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from ..errors import FormatError, InputError, NaNLoss, TooShort
from ..numerics import autodiff as ad
from ..numerics import btsr
from ..numerics.autodiff import Var, const
from ..numerics.optim import EMA, AdamW
from ..numerics.rng import as_rng


@dataclass
class VaeConfig:
    latent_dim: int = 16
    hidden: int = 32
    window: int = 120
    stride: int = 30
    kernel_size: int = 3
    cycles: int = 4
    ratio: float = 0.5
    beta_max: float = 1.0
    lr: float = 1e-4
    warmup_frac: float = 0.05
    weight_decay: float = 1e-2
    ema_decay: float = 0.99
    batch: int = 8
    steps: int = 2000
    seed: int = 0

    def __post_init__(self):
        if self.latent_dim < 1:
            raise InputError("latent_dim must be >= 1")
        if self.window < 2 or self.stride < 1:
            raise InputError("window must be >= 2 and stride >= 1")
        if not 0 < self.ratio <= 1 or self.cycles < 1:
            raise InputError("invalid cyclical schedule")

    def to_dict(self):
        return asdict(self)


def cyclical_beta(step, total_steps, cycles=4, ratio=0.5, beta_max=1.0):
    """Linear ramp from 0 to ``beta_max`` over the first ``ratio`` of each cycle, then flat."""
    period = max(total_steps / cycles, 1.0)
    phase = (step % period) / period
    return beta_max * min(1.0, phase / ratio)


def make_windows(seq, window, stride):
    seq = np.asarray(seq, dtype=np.float64)
    if seq.shape[0] < window:
        raise TooShort(f"sequence of {seq.shape[0]} frames is shorter than the {window}-frame window")
    starts = list(range(0, seq.shape[0] - window + 1, stride))
    if starts[-1] != seq.shape[0] - window:
        starts.append(seq.shape[0] - window)
    return np.stack([seq[s:s + window] for s in starts])


def channel_weights(data, floor=1e-6):
    """``1 / sigma_u`` per channel; channels with ``sigma_u < floor`` get weight 0."""
    flat = np.concatenate([np.asarray(d).reshape(-1, np.shape(d)[-1]) for d in data])
    sigma = flat.std(axis=0)
    w = np.zeros_like(sigma)
    ok = sigma >= floor
    w[ok] = 1.0 / sigma[ok]
    return w


def init_vae(cfg, n_channels, rng):
    k, h, w, lat = cfg.kernel_size, cfg.hidden, cfg.window, cfg.latent_dim
    p = {
        "enc.conv1.w": rng.normal((k, n_channels, h)) / math.sqrt(k * n_channels),
        "enc.conv1.b": np.zeros(h),
        "enc.conv2.w": rng.normal((k, h, h)) / math.sqrt(k * h),
        "enc.conv2.b": np.zeros(h),
        "enc.mu.w": rng.normal((w * h, lat)) / math.sqrt(w * h),
        "enc.mu.b": np.zeros(lat),
        "enc.logvar.w": rng.normal((w * h, lat)) * 0.01 / math.sqrt(w * h),
        "enc.logvar.b": np.zeros(lat),
        "dec.lin.w": rng.normal((lat, w * h)) / math.sqrt(lat),
        "dec.lin.b": np.zeros(w * h),
        "dec.conv1.w": rng.normal((k, h, h)) / math.sqrt(k * h),
        "dec.conv1.b": np.zeros(h),
        "dec.conv2.w": rng.normal((k, h, n_channels)) / math.sqrt(k * h),
        "dec.conv2.b": np.zeros(n_channels),
    }
    return p


def _p(params):
    return {k: v if isinstance(v, Var) else const(v) for k, v in params.items()}


def encode(params, x, cfg):
    """Return ``(mu, logvar)`` autodiff values for ``(B, W, K)`` windows."""
    p = _p(params)
    b = x.shape[0]
    h = ad.silu(ad.conv1d(const(x), p["enc.conv1.w"], p["enc.conv1.b"]))
    h = ad.silu(ad.conv1d(h, p["enc.conv2.w"], p["enc.conv2.b"]))
    h = ad.reshape(h, (b, -1))
    return ad.linear(h, p["enc.mu.w"], p["enc.mu.b"]), ad.linear(h, p["enc.logvar.w"], p["enc.logvar.b"])


def decode(params, z, cfg):
    p = _p(params)
    b = z.shape[0]
    h = ad.silu(ad.reshape(ad.linear(z, p["dec.lin.w"], p["dec.lin.b"]), (b, cfg.window, cfg.hidden)))
    h = ad.silu(ad.conv1d(h, p["dec.conv1.w"], p["dec.conv1.b"]))
    out = ad.conv1d(h, p["dec.conv2.w"], p["dec.conv2.b"])
    return ad.tanh(ad.relu(out))


def weighted_sq(recon, target, weights):
    return ad.mean(ad.square(recon - const(target)) * const(weights))


def velocity_sq(recon, target, weights):
    dr = recon[:, 1:, :] - recon[:, :-1, :]
    dt = np.diff(target, axis=1)
    return ad.mean(ad.square(dr - const(dt)) * const(weights))


def kl_standard_normal(mu, logvar):
    """Batch mean of KL(N(mu, diag exp(logvar)) || N(0, I))."""
    term = ad.square(mu) + ad.exp(logvar) - logvar - 1.0
    return ad.vsum(term) * (0.5 / mu.shape[0])


def vae_loss(params, x, eps, beta, weights, cfg):
    mu, logvar = encode(params, x, cfg)
    z = mu + ad.exp(logvar * 0.5) * const(eps)
    recon = decode(params, z, cfg)
    rec = weighted_sq(recon, x, weights)
    vel = velocity_sq(recon, x, weights)
    total = rec + vel
    kl = kl_standard_normal(mu, logvar)
    if beta > 0:
        total = total + kl * beta
    parts = {"reconstruction": float(rec.value), "velocity": float(vel.value), "kl": float(kl.value),
             "beta": beta, "total": float(total.value)}
    return total, parts


@dataclass
class VaeModel:
    params: dict
    cfg: VaeConfig
    weights: np.ndarray
    n_channels: int

    def save(self, path):
        path = Path(path)
        (path / "tensors").mkdir(parents=True, exist_ok=True)
        for name, v in self.params.items():
            btsr.save(path / "tensors" / f"{name}.btsr", v)
        btsr.save(path / "channel_weights.btsr", self.weights)
        manifest = {"format": "blendiff-vae", "config": self.cfg.to_dict(), "n_channels": self.n_channels,
                    "tensors": {k: list(v.shape) for k, v in self.params.items()}}
        (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))

    @classmethod
    def load(cls, path):
        path = Path(path)
        try:
            manifest = json.loads((path / "manifest.json").read_text())
        except (OSError, ValueError) as exc:
            raise FormatError(f"cannot read VAE manifest in {path}: {exc}") from None
        if manifest.get("format") != "blendiff-vae":
            raise FormatError(f"{path} is not a VAE directory")
        params = {k: btsr.load(path / "tensors" / f"{k}.btsr", rank=len(s)).astype(np.float64)
                  for k, s in manifest["tensors"].items()}
        weights = btsr.load(path / "channel_weights.btsr", rank=1).astype(np.float64)
        return cls(params, VaeConfig(**manifest["config"]), weights, manifest["n_channels"])


def train_vae(dataset, cfg=None, rng=None, return_history=False):
    """Fit the VAE on ``dataset`` (list of ``(N_i, K)`` sequences or ``(M, W, K)`` windows).

    Returns a :class:`VaeModel` holding the EMA weights.
    """
    cfg = cfg or VaeConfig()
    rng = as_rng(cfg.seed if rng is None else rng)
    if isinstance(dataset, np.ndarray) and dataset.ndim == 3:
        windows = dataset
    else:
        windows = np.concatenate([make_windows(s, cfg.window, cfg.stride) for s in dataset])
    if windows.shape[1] != cfg.window:
        raise InputError(f"windows have {windows.shape[1]} frames, config expects {cfg.window}")
    k = windows.shape[2]
    weights = channel_weights([windows])
    params = init_vae(cfg, k, rng.child("init"))
    opt = AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay,
                warmup_steps=int(math.ceil(cfg.warmup_frac * cfg.steps)))
    ema = EMA(params, cfg.ema_decay)
    train_rng = rng.child("train")
    history = []
    for step in range(cfg.steps):
        idx = train_rng.integers(0, windows.shape[0], cfg.batch)
        x = windows[idx]
        eps = train_rng.normal((cfg.batch, cfg.latent_dim))
        beta = cyclical_beta(step, cfg.steps, cfg.cycles, cfg.ratio, cfg.beta_max)
        leaves = {name: ad.param(v, name) for name, v in params.items()}
        total, parts = vae_loss(leaves, x, eps, beta, weights, cfg)
        if not np.isfinite(parts["total"]):
            raise NaNLoss(f"non-finite VAE loss at step {step}", {"step": step, "parts": parts})
        ad.backward(total)
        opt.step({name: leaf.grad for name, leaf in leaves.items() if leaf.grad is not None})
        ema.update(params)
        history.append(parts)
    model = VaeModel({k2: v.copy() for k2, v in ema.shadow.items()}, cfg, weights, k)
    return (model, history) if return_history else model


def window_features(model, sequence, batch=64):
    """Latent means of every window of one sequence, ``(n_windows, latent_dim)``."""
    windows = make_windows(sequence, model.cfg.window, model.cfg.stride)
    if windows.shape[2] != model.n_channels:
        raise InputError(f"sequence has {windows.shape[2]} channels, VAE expects {model.n_channels}")
    out = [encode(model.params, windows[i:i + batch], model.cfg)[0].value for i in range(0, len(windows), batch)]
    return np.concatenate(out)


def extract_features(model, sequences):
    """One feature per sequence: the average latent mean over its windows."""
    return np.stack([window_features(model, s).mean(axis=0) for s in sequences])


class VaeFeatureExtractor(BaseEstimator):
    """``fit`` trains the VAE on coefficient sequences; ``transform`` returns per-sequence features."""

    def __init__(self, latent_dim=16, hidden=32, window=120, stride=30, steps=2000, lr=1e-4, batch=8,
                 ema_decay=0.99, seed=0):
        self.latent_dim = latent_dim
        self.hidden = hidden
        self.window = window
        self.stride = stride
        self.steps = steps
        self.lr = lr
        self.batch = batch
        self.ema_decay = ema_decay
        self.seed = seed

    def fit(self, X, y=None):
        cfg = VaeConfig(latent_dim=self.latent_dim, hidden=self.hidden, window=self.window,
                        stride=self.stride, steps=self.steps, lr=self.lr, batch=self.batch,
                        ema_decay=self.ema_decay, seed=self.seed)
        self.model_ = train_vae(list(X), cfg)
        return self

    def transform(self, X):
        if not hasattr(self, "model_"):
            raise NotFittedError("VaeFeatureExtractor is not fitted")
        return extract_features(self.model_, list(X))
