"""Noise-prediction network: a 1D conditional UNet without resampling.

Layout (one block per stage)::

    in_conv -> [res + transformer] -> [res + transformer] -> concat skip
            -> [res + transformer] -> norm/silu -> out (zero-initialised)

Residual blocks use temporal convolutions, normalization and an additive
timestep embedding.  Transformer blocks run self-attention over frames,
cross-attention from frames to the conditioning features under the alignment
bias, and a feed-forward layer.  Parameters live in a flat ``dict`` of arrays.
"""

import math
from dataclasses import asdict, dataclass

import numpy as np

from ..errors import AllMaskedRow, InputError, ShapeMismatch
from ..numerics import autodiff as ad
from ..numerics.autodiff import Var, const, param


@dataclass
class DenoiserConfig:
    n_channels: int = 32  # K
    hidden: int = 64
    heads: int = 4
    cond_dim: int = 40  # D
    kernel_size: int = 3
    groups: int = 8
    norm: str = "group"  # "group" | "layer"
    self_attention: bool = True
    use_alignment_bias: bool = True
    ff_mult: int = 2

    def __post_init__(self):
        if self.hidden % self.heads:
            raise InputError("hidden must be divisible by heads")
        if self.norm not in ("group", "layer"):
            raise InputError(f"unknown norm {self.norm!r}")
        if self.norm == "group" and self.hidden % self.groups:
            raise InputError("hidden must be divisible by groups")
        if min(self.n_channels, self.hidden, self.cond_dim, self.kernel_size) < 1:
            raise InputError("sizes must be positive")

    def to_dict(self):
        return asdict(self)


def sinusoidal_embedding(t, dim):
    """Interleaved ``sin, cos`` of ``t * 10000^(-2i/dim)``; ``t`` scalar or 1-D."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    freqs = 10000.0 ** (-2.0 * np.arange(dim // 2) / dim)
    ang = t[:, None] * freqs[None, :]
    emb = np.zeros((t.size, dim))
    emb[:, 0:2 * (dim // 2):2] = np.sin(ang)
    emb[:, 1:2 * (dim // 2):2] = np.cos(ang)
    return emb


def alignment_bias(n_query, n_key=None):
    """0 where ``|i - j| <= 1``, ``-inf`` elsewhere."""
    n_key = n_query if n_key is None else n_key
    i = np.arange(n_query)[:, None]
    j = np.arange(n_key)[None, :]
    return np.where(np.abs(i - j) <= 1, 0.0, -np.inf)


def attend(q, k, v, bias=None):
    """softmax(q k^T / sqrt(d) + bias) v on autodiff values; heads in leading axes."""
    d = q.shape[-1]
    logits = ad.matmul(q, ad.swapaxes(k, -1, -2)) * (1.0 / math.sqrt(d))
    if bias is not None:
        if np.any(np.all(np.isneginf(bias), axis=-1)):
            raise AllMaskedRow("a query row has no admissible key")
        logits = logits + const(bias)
    return ad.matmul(ad.softmax(logits, axis=-1), v)


def biased_cross_attention(q, k, v, bias=None, return_weights=False):
    """Array version of :func:`attend` for ``(N, d)`` inputs."""
    q, k, v = (np.asarray(a, dtype=np.float64) for a in (q, k, v))
    if q.shape[-1] != k.shape[-1] or k.shape[0] != v.shape[0]:
        raise ShapeMismatch("q/k/v shapes disagree")
    if bias is not None and np.shape(bias) != (q.shape[0], k.shape[0]):
        raise ShapeMismatch("bias must be (N_q, N_k)")
    logits = q @ k.T / math.sqrt(q.shape[-1])
    if bias is not None:
        if np.any(np.all(np.isneginf(bias), axis=-1)):
            raise AllMaskedRow("a query row has no admissible key")
        logits = logits + bias
    weights = ad.softmax(Var(logits)).value
    out = weights @ v
    return (out, weights) if return_weights else out


# --------------------------------------------------------------------------
# parameters


def _dense(rng, fan_in, fan_out):
    return rng.normal((fan_in, fan_out)) / math.sqrt(fan_in)


def _res_params(p, prefix, rng, cin, cout, cfg):
    k = cfg.kernel_size
    p[f"{prefix}.norm1.g"] = np.ones(cin)
    p[f"{prefix}.norm1.b"] = np.zeros(cin)
    p[f"{prefix}.conv1.w"] = rng.normal((k, cin, cout)) / math.sqrt(k * cin)
    p[f"{prefix}.conv1.b"] = np.zeros(cout)
    p[f"{prefix}.temb.w"] = _dense(rng, cfg.hidden, cout)
    p[f"{prefix}.temb.b"] = np.zeros(cout)
    p[f"{prefix}.norm2.g"] = np.ones(cout)
    p[f"{prefix}.norm2.b"] = np.zeros(cout)
    p[f"{prefix}.conv2.w"] = rng.normal((k, cout, cout)) / math.sqrt(k * cout)
    p[f"{prefix}.conv2.b"] = np.zeros(cout)
    if cin != cout:
        p[f"{prefix}.skip.w"] = _dense(rng, cin, cout)


def _attn_params(p, prefix, rng, h, kv_dim):
    for name, fan_in in (("q", h), ("k", kv_dim), ("v", kv_dim), ("o", h)):
        p[f"{prefix}.{name}"] = _dense(rng, fan_in, h)


def _transformer_params(p, prefix, rng, cfg):
    h = cfg.hidden
    if cfg.self_attention:
        p[f"{prefix}.ln1.g"] = np.ones(h)
        p[f"{prefix}.ln1.b"] = np.zeros(h)
        _attn_params(p, f"{prefix}.self", rng, h, h)
    p[f"{prefix}.ln2.g"] = np.ones(h)
    p[f"{prefix}.ln2.b"] = np.zeros(h)
    _attn_params(p, f"{prefix}.cross", rng, h, cfg.cond_dim)
    p[f"{prefix}.ln3.g"] = np.ones(h)
    p[f"{prefix}.ln3.b"] = np.zeros(h)
    p[f"{prefix}.ff1.w"] = _dense(rng, h, cfg.ff_mult * h)
    p[f"{prefix}.ff1.b"] = np.zeros(cfg.ff_mult * h)
    p[f"{prefix}.ff2.w"] = _dense(rng, cfg.ff_mult * h, h)
    p[f"{prefix}.ff2.b"] = np.zeros(h)


def init_params(cfg, rng):
    """Fresh parameters; the output projection starts at zero so eps_hat = 0."""
    h = cfg.hidden
    p = {}
    p["in.w"] = rng.normal((cfg.kernel_size, cfg.n_channels, h)) / math.sqrt(cfg.kernel_size * cfg.n_channels)
    p["in.b"] = np.zeros(h)
    p["time.w1"] = _dense(rng, h, h)
    p["time.b1"] = np.zeros(h)
    p["time.w2"] = _dense(rng, h, h)
    p["time.b2"] = np.zeros(h)
    p["null"] = rng.normal(cfg.cond_dim) * 0.1
    _res_params(p, "enc.res", rng, h, h, cfg)
    _transformer_params(p, "enc.tf", rng, cfg)
    _res_params(p, "mid.res", rng, h, h, cfg)
    _transformer_params(p, "mid.tf", rng, cfg)
    _res_params(p, "dec.res", rng, 2 * h, h, cfg)
    _transformer_params(p, "dec.tf", rng, cfg)
    p["out.norm.g"] = np.ones(h)
    p["out.norm.b"] = np.zeros(h)
    p["out.w"] = np.zeros((h, cfg.n_channels))
    p["out.b"] = np.zeros(cfg.n_channels)
    return p


# --------------------------------------------------------------------------
# forward pass


def _norm(x, g, b, cfg):
    if cfg.norm == "layer":
        return ad.layer_norm(x, g, b)
    groups = cfg.groups if x.shape[-1] % cfg.groups == 0 else math.gcd(cfg.groups, x.shape[-1])
    return ad.group_norm(x, groups, g, b)


def _res_block(p, prefix, x, temb, cfg):
    h = _norm(x, p[f"{prefix}.norm1.g"], p[f"{prefix}.norm1.b"], cfg)
    h = ad.conv1d(ad.silu(h), p[f"{prefix}.conv1.w"], p[f"{prefix}.conv1.b"])
    h = h + ad.reshape(ad.linear(temb, p[f"{prefix}.temb.w"], p[f"{prefix}.temb.b"]), (temb.shape[0], 1, -1))
    h = _norm(h, p[f"{prefix}.norm2.g"], p[f"{prefix}.norm2.b"], cfg)
    h = ad.conv1d(ad.silu(h), p[f"{prefix}.conv2.w"], p[f"{prefix}.conv2.b"])
    skip = ad.matmul(x, p[f"{prefix}.skip.w"]) if f"{prefix}.skip.w" in p else x
    return skip + h


def _split_heads(x, heads):
    b, n, h = x.shape
    return ad.transpose(ad.reshape(x, (b, n, heads, h // heads)), (0, 2, 1, 3))


def _merge_heads(x):
    b, heads, n, d = x.shape
    return ad.reshape(ad.transpose(x, (0, 2, 1, 3)), (b, n, heads * d))


def _mha(p, prefix, x, kv, heads, bias=None):
    q = _split_heads(ad.matmul(x, p[f"{prefix}.q"]), heads)
    k = _split_heads(ad.matmul(kv, p[f"{prefix}.k"]), heads)
    v = _split_heads(ad.matmul(kv, p[f"{prefix}.v"]), heads)
    return ad.matmul(_merge_heads(attend(q, k, v, bias)), p[f"{prefix}.o"])


def _transformer(p, prefix, x, cond, bias, cfg):
    if cfg.self_attention:
        h = ad.layer_norm(x, p[f"{prefix}.ln1.g"], p[f"{prefix}.ln1.b"])
        x = x + _mha(p, f"{prefix}.self", h, h, cfg.heads)
    h = ad.layer_norm(x, p[f"{prefix}.ln2.g"], p[f"{prefix}.ln2.b"])
    x = x + _mha(p, f"{prefix}.cross", h, cond, cfg.heads, bias)
    h = ad.layer_norm(x, p[f"{prefix}.ln3.g"], p[f"{prefix}.ln3.b"])
    h = ad.gelu(ad.linear(h, p[f"{prefix}.ff1.w"], p[f"{prefix}.ff1.b"]))
    return x + ad.linear(h, p[f"{prefix}.ff2.w"], p[f"{prefix}.ff2.b"])


def forward(params, u_t, cond, t, cfg, drop=None):
    """Predict the injected noise.

    ``u_t`` is ``(B, N, K)``; ``cond`` is ``(B, N, D)`` or ``None`` (null
    condition for the whole batch); ``t`` is an int or a length-``B`` array.
    ``drop`` optionally marks batch rows whose condition is replaced by the
    null embedding.  ``params`` may hold arrays or autodiff leaves.
    """
    p = {k: v if isinstance(v, Var) else const(v) for k, v in params.items()}
    u_t = const(u_t)
    if u_t.ndim != 3 or u_t.shape[-1] != cfg.n_channels:
        raise ShapeMismatch(f"expected (B, N, {cfg.n_channels}) input, got {u_t.shape}")
    b, n, _ = u_t.shape
    null = ad.broadcast_to(ad.reshape(p["null"], (1, 1, cfg.cond_dim)), (b, n, cfg.cond_dim))
    if cond is None:
        c = null
    else:
        cond = const(cond)
        if cond.shape != (b, n, cfg.cond_dim):
            raise ShapeMismatch(f"condition must be {(b, n, cfg.cond_dim)}, got {cond.shape}")
        if drop is None or not np.any(drop):
            c = cond
        else:
            keep = (1.0 - np.asarray(drop, dtype=np.float64)).reshape(b, 1, 1)
            c = cond * keep + null * (1.0 - keep)
    bias = alignment_bias(n) if cfg.use_alignment_bias else None

    t = np.broadcast_to(np.asarray(t, dtype=np.float64), (b,))
    temb = const(sinusoidal_embedding(t, cfg.hidden))
    temb = ad.linear(ad.silu(ad.linear(temb, p["time.w1"], p["time.b1"])), p["time.w2"], p["time.b2"])

    x = ad.conv1d(u_t, p["in.w"], p["in.b"])
    x = _res_block(p, "enc.res", x, temb, cfg)
    skip = _transformer(p, "enc.tf", x, c, bias, cfg)
    x = _res_block(p, "mid.res", skip, temb, cfg)
    x = _transformer(p, "mid.tf", x, c, bias, cfg)
    x = _res_block(p, "dec.res", ad.concat([x, skip], axis=-1), temb, cfg)
    x = _transformer(p, "dec.tf", x, c, bias, cfg)
    x = ad.silu(_norm(x, p["out.norm.g"], p["out.norm.b"], cfg))
    return ad.linear(x, p["out.w"], p["out.b"])


def predict_noise(params, u_t, cond, t, cfg):
    """Array-in, array-out wrapper accepting ``(N, K)`` or ``(B, N, K)``."""
    u_t = np.asarray(u_t, dtype=np.float64)
    single = u_t.ndim == 2
    x = u_t[None] if single else u_t
    if cond is not None:
        cond = np.asarray(cond, dtype=np.float64)
        if cond.ndim == 2:
            cond = np.broadcast_to(cond, (x.shape[0],) + cond.shape)
    out = forward(params, x, cond, t, cfg).value
    return out[0] if single else out


def denoiser_fn(params, cfg):
    """Closure with the ``(u_t, cond, t) -> eps_hat`` signature used by the samplers."""
    frozen = {k: np.array(v, dtype=np.float64) for k, v in params.items()}

    def fn(u_t, cond, t):
        return predict_noise(frozen, u_t, cond, t, cfg)

    return fn


def as_leaves(params):
    return {k: param(v, name=k) for k, v in params.items()}
