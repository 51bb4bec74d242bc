"""Estimator facade over training, sampling and editing."""

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from ..diffusion import GuidanceConfig, NoiseSchedule, edit, sample
from ..numerics.rng import as_rng
from .network import DenoiserConfig, denoiser_fn
from .training import TrainConfig, Trainer, TrainingSet


class SpeechDiffusion(BaseEstimator):
    """Speech-conditioned diffusion model over coefficient sequences.

    ``fit(X, y)`` takes coefficient sequences ``X`` (list of ``(N_i, K)``)
    and frame-aligned features ``y`` (list of ``(N_i, D)``).  ``sample`` and
    ``edit`` run the guided sampler with the EMA (or raw) weights.
    """

    def __init__(self, hidden=64, heads=4, kernel_size=3, groups=8, norm="group", self_attention=True,
                 use_alignment_bias=True, loss_mode="l1", use_velocity_loss=True, lr=1e-5, steps=1000,
                 batch=8, window=120, ema_decay=0.9999, cond_drop_prob=0.1, T=1000, gamma=2.0,
                 sampler="ddim", sampling_steps=1000, eta=0.0, use_ema=True, seed=0):
        self.hidden = hidden
        self.heads = heads
        self.kernel_size = kernel_size
        self.groups = groups
        self.norm = norm
        self.self_attention = self_attention
        self.use_alignment_bias = use_alignment_bias
        self.loss_mode = loss_mode
        self.use_velocity_loss = use_velocity_loss
        self.lr = lr
        self.steps = steps
        self.batch = batch
        self.window = window
        self.ema_decay = ema_decay
        self.cond_drop_prob = cond_drop_prob
        self.T = T
        self.gamma = gamma
        self.sampler = sampler
        self.sampling_steps = sampling_steps
        self.eta = eta
        self.use_ema = use_ema
        self.seed = seed

    def fit(self, X, y, names=()):
        data = TrainingSet(X, y, names)
        dcfg = DenoiserConfig(n_channels=data.n_channels, hidden=self.hidden, heads=self.heads,
                              cond_dim=data.cond_dim, kernel_size=self.kernel_size, groups=self.groups,
                              norm=self.norm, self_attention=self.self_attention,
                              use_alignment_bias=self.use_alignment_bias)
        tcfg = TrainConfig(batch=self.batch, lr=self.lr, ema_decay=self.ema_decay,
                           cond_drop_prob=self.cond_drop_prob, loss_mode=self.loss_mode,
                           use_velocity_loss=self.use_velocity_loss, steps=self.steps,
                           window=self.window, T=self.T, seed=self.seed)
        trainer = Trainer(data, dcfg, tcfg).fit()
        self.config_ = dcfg
        self.names_ = data.names
        self.params_ = {k: v.copy() for k, v in trainer.params.items()}
        self.ema_params_ = {k: v.copy() for k, v in trainer.ema_params.items()}
        self.loss_history_ = list(trainer.state.history)
        return self

    def _check(self):
        if not hasattr(self, "params_"):
            raise NotFittedError("SpeechDiffusion is not fitted")

    def _fn(self):
        return denoiser_fn(self.ema_params_ if self.use_ema else self.params_, self.config_)

    def _guidance(self):
        return GuidanceConfig(self.gamma, self.sampler, self.sampling_steps, self.eta)

    def sample(self, features, n_samples=1, seed=None):
        """``n_samples`` arrays ``(N, K)`` for the ``(N, D)`` conditioning ``features``."""
        self._check()
        features = np.asarray(features, dtype=np.float64)
        rng = as_rng(self.seed if seed is None else seed)
        fn = self._fn()
        return [sample(fn, features, features.shape[0], self.config_.n_channels, self._guidance(),
                       rng.child(f"sample{i}"), NoiseSchedule(self.T), self.names_).values
                for i in range(n_samples)]

    def edit(self, features, u_ref, mask, seed=None):
        self._check()
        rng = as_rng(self.seed if seed is None else seed)
        return edit(self._fn(), features, u_ref, mask, self._guidance(), rng,
                    NoiseSchedule(self.T), self.names_).values
