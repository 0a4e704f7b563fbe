"""Shared transformer building blocks: linear maps, multi-head attention with
optional banded masks / rotary positions / low-rank adapters, and pre-norm blocks.

Parameters live in flat name->Tensor dicts owned by the model classes; these
functions are pure given (params, input).
"""

import numpy as np

from . import autograd as ag
from .autograd import Tensor

INIT_STD = 0.02


def param(rng, shape, dtype, std=INIT_STD) -> Tensor:
    return Tensor((rng.normal(0.0, std, shape)).astype(dtype), requires_grad=True)


def zeros(shape, dtype) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)


def ones(shape, dtype) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype), requires_grad=True)


def linear(x, w, b=None, adapter=None):
    """y = x @ w.T (+ b) with optional low-rank delta (A, B, scale)."""
    y = x @ ag.transpose(w)
    if adapter is not None:
        A, B, scale = adapter
        y = y + float(scale) * ((x @ ag.transpose(A)) @ ag.transpose(B))
    if b is not None:
        y = y + b
    return y


def feedforward(x, p, prefix):
    h = ag.gelu(linear(x, p[f"{prefix}.w1"], p[f"{prefix}.b1"]))
    return linear(h, p[f"{prefix}.w2"], p[f"{prefix}.b2"])


def causal_mask(T: int) -> np.ndarray:
    return np.tril(np.ones((T, T), dtype=bool))


def rope_tables(T: int, d_head: int, dtype, base: float = 10000.0, positions=None):
    """cos/sin tables (T, d_head/2) at frequencies base^(-2m/d_head)."""
    if d_head % 2 != 0:
        raise ValueError("rotary positions need an even head width")
    if positions is None:
        positions = np.arange(T)
    positions = np.asarray(positions, dtype=np.float64)
    m = np.arange(d_head // 2, dtype=np.float64)
    theta = base ** (-2.0 * m / d_head)
    ang = positions[:, None] * theta[None, :]
    return np.cos(ang).astype(dtype), np.sin(ang).astype(dtype)


def rotary_apply(x, cos, sin):
    """Rotate interleaved feature pairs of x (..., T, d_head) by position angles."""
    even = x[..., 0::2]
    odd = x[..., 1::2]
    r_even = even * cos - odd * sin
    r_odd = even * sin + odd * cos
    return ag.stack([r_even, r_odd], axis=-1).reshape(*x.shape)


def attention(x, p, prefix, n_heads, keep_mask=None, rope=None, adapters=None):
    """Multi-head attention over x (..., T, d_model); masked scores are replaced,
    not offset, so masked positions carry no data dependence at all."""
    *lead, T, D = x.shape
    if D % n_heads != 0:
        raise ValueError("d_model not divisible by n_heads")
    dh = D // n_heads

    def adp(name):
        return None if adapters is None else adapters.get(f"{prefix}.{name}")

    def heads(t):
        return t.reshape(*lead, T, n_heads, dh).swapaxes(-3, -2)

    q = heads(linear(x, p[f"{prefix}.wq"], adapter=adp("wq")))
    k = heads(linear(x, p[f"{prefix}.wk"], adapter=adp("wk")))
    v = heads(linear(x, p[f"{prefix}.wv"], adapter=adp("wv")))
    if rope is not None:
        cos, sin = rope
        q = rotary_apply(q, cos, sin)
        k = rotary_apply(k, cos, sin)
    scores = (q @ k.swapaxes(-1, -2)) * (1.0 / np.sqrt(dh))
    if keep_mask is not None:
        scores = ag.masked_fill(scores, keep_mask, -1e30)
    w = ag.softmax(scores, axis=-1)
    out = (w @ v).swapaxes(-3, -2).reshape(*lead, T, D)
    return linear(out, p[f"{prefix}.wo"], adapter=adp("wo"))


def block(x, p, prefix, n_heads, keep_mask=None, rope=None, adapters=None):
    a = ag.layernorm(x, p[f"{prefix}.ln1.g"], p[f"{prefix}.ln1.b"])
    x = x + attention(a, p, f"{prefix}.attn", n_heads, keep_mask, rope, adapters)
    m = ag.layernorm(x, p[f"{prefix}.ln2.g"], p[f"{prefix}.ln2.b"])
    return x + feedforward(m, p, f"{prefix}.mlp")


def init_block(params, rng, prefix, d_model, d_ff, dtype):
    params[f"{prefix}.ln1.g"] = ones((d_model,), dtype)
    params[f"{prefix}.ln1.b"] = zeros((d_model,), dtype)
    for w in ("wq", "wk", "wv", "wo"):
        params[f"{prefix}.attn.{w}"] = param(rng, (d_model, d_model), dtype)
    params[f"{prefix}.ln2.g"] = ones((d_model,), dtype)
    params[f"{prefix}.ln2.b"] = zeros((d_model,), dtype)
    params[f"{prefix}.mlp.w1"] = param(rng, (d_ff, d_model), dtype)
    params[f"{prefix}.mlp.b1"] = zeros((d_ff,), dtype)
    params[f"{prefix}.mlp.w2"] = param(rng, (d_model, d_ff), dtype)
    params[f"{prefix}.mlp.b2"] = zeros((d_model,), dtype)
