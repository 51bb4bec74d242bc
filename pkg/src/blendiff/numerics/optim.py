"""Parameter updates: AdamW with linear warmup, and an EMA shadow."""

import numpy as np


class AdamW:
    """Adam with decoupled weight decay over a dict of float64 arrays."""

    def __init__(self, params, lr=1e-5, betas=(0.9, 0.999), eps=1e-8,
                 weight_decay=1e-2, warmup_steps=0):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.warmup_steps = warmup_steps
        self.step_count = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def current_lr(self):
        if self.warmup_steps and self.step_count < self.warmup_steps:
            return self.lr * (self.step_count + 1) / self.warmup_steps
        return self.lr

    def step(self, grads):
        lr = self.current_lr()
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1**t
        c2 = 1.0 - self.beta2**t
        for k, p in self.params.items():
            g = grads.get(k)
            if g is None:
                continue
            m = self.m[k]
            v = self.v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p *= 1.0 - lr * self.weight_decay
            p -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_dict(self):
        return {"step": self.step_count, "m": self.m, "v": self.v}


class EMA:
    """Exponential moving average: ``shadow <- decay * shadow + (1 - decay) * p``."""

    def __init__(self, params, decay=0.9999):
        self.decay = decay
        self.shadow = {k: v.copy() for k, v in params.items()}

    def update(self, params):
        d = self.decay
        for k, p in params.items():
            s = self.shadow[k]
            s *= d
            s += (1.0 - d) * p
