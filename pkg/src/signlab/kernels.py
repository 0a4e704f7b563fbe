"""Hot numeric kernels, each with a numba-jitted and a pure-numpy implementation.

The active path is picked once at import time from the SIGNLAB_NUMBA env var
("0"/"false"/"off"/"no" forces the numpy fallback). Both paths compute the same
quantities to float tolerance; benchmarks/bench_kernels.py times them side by side.
"""

import os

import numpy as np


def _numba_wanted() -> bool:
    flag = os.environ.get("SIGNLAB_NUMBA", "1").strip().lower()
    return flag not in ("0", "false", "off", "no")


NUMBA_REQUESTED = _numba_wanted()
NUMBA_ACTIVE = False

if NUMBA_REQUESTED:
    try:
        from numba import njit

        NUMBA_ACTIVE = True
    except ImportError:  # numba missing: silently fall back, flag stays readable
        NUMBA_ACTIVE = False

if not NUMBA_ACTIVE:
    def njit(*args, **kwargs):
        # identity decorator so the _nb variants remain importable for the benchmark
        if args and callable(args[0]):
            return args[0]

        def wrap(f):
            return f

        return wrap


# ---------------------------------------------------------------------------
# fused softmax + cross entropy over rows
#
# logits: (N, V) float, targets: (N,) int64, mask: (N,) uint8.
# Returns (sum of masked per-row losses, softmax probs for backward).

def softmax_xent_fwd_np(logits, targets, mask):
    m = logits.max(axis=1, keepdims=True)
    e = np.exp(logits - m)
    z = e.sum(axis=1, keepdims=True)
    probs = e / z
    lse = np.log(z[:, 0]) + m[:, 0]
    picked = logits[np.arange(logits.shape[0]), targets]
    total = float(((lse - picked) * mask).sum())
    return total, probs


@njit(cache=True)
def softmax_xent_fwd_nb(logits, targets, mask):
    n, v = logits.shape
    probs = np.empty_like(logits)
    total = 0.0
    for i in range(n):
        row = logits[i]
        mx = row[0]
        for j in range(1, v):
            if row[j] > mx:
                mx = row[j]
        s = 0.0
        for j in range(v):
            p = np.exp(row[j] - mx)
            probs[i, j] = p
            s += p
        inv = 1.0 / s
        for j in range(v):
            probs[i, j] *= inv
        if mask[i]:
            total += np.log(s) + mx - row[targets[i]]
    return total, probs


def softmax_xent_bwd_np(probs, targets, mask, scale):
    s = (mask * scale).astype(probs.dtype)
    g = probs * s[:, None]
    g[np.arange(probs.shape[0]), targets] -= s
    return g


@njit(cache=True)
def softmax_xent_bwd_nb(probs, targets, mask, scale):
    n, v = probs.shape
    g = np.zeros_like(probs)
    for i in range(n):
        if mask[i]:
            for j in range(v):
                g[i, j] = probs[i, j] * scale
            g[i, targets[i]] -= scale
    return g


# ---------------------------------------------------------------------------
# layer norm over the last axis of a 2-d view
#
# fwd returns (y, mean, rstd); bwd consumes the cached statistics.

def layernorm_fwd_np(x, gamma, beta, eps):
    mu = x.mean(axis=1)
    xc = x - mu[:, None]
    var = (xc * xc).mean(axis=1)
    rstd = 1.0 / np.sqrt(var + eps)
    y = xc * rstd[:, None] * gamma + beta
    return y, mu, rstd


@njit(cache=True)
def layernorm_fwd_nb(x, gamma, beta, eps):
    n, d = x.shape
    y = np.empty_like(x)
    mu = np.empty(n, dtype=x.dtype)
    rstd = np.empty(n, dtype=x.dtype)
    for i in range(n):
        s = 0.0
        for j in range(d):
            s += x[i, j]
        m = s / d
        q = 0.0
        for j in range(d):
            c = x[i, j] - m
            q += c * c
        r = 1.0 / np.sqrt(q / d + eps)
        mu[i] = m
        rstd[i] = r
        for j in range(d):
            y[i, j] = (x[i, j] - m) * r * gamma[j] + beta[j]
    return y, mu, rstd


def layernorm_bwd_np(gy, x, gamma, mu, rstd):
    xhat = (x - mu[:, None]) * rstd[:, None]
    ggamma = (gy * xhat).sum(axis=0)
    gbeta = gy.sum(axis=0)
    gxhat = gy * gamma
    m1 = gxhat.mean(axis=1, keepdims=True)
    m2 = (gxhat * xhat).mean(axis=1, keepdims=True)
    gx = rstd[:, None] * (gxhat - m1 - xhat * m2)
    return gx, ggamma, gbeta


@njit(cache=True)
def layernorm_bwd_nb(gy, x, gamma, mu, rstd):
    n, d = x.shape
    gx = np.empty_like(x)
    ggamma = np.zeros(d, dtype=x.dtype)
    gbeta = np.zeros(d, dtype=x.dtype)
    for i in range(n):
        m1 = 0.0
        m2 = 0.0
        for j in range(d):
            xh = (x[i, j] - mu[i]) * rstd[i]
            gh = gy[i, j] * gamma[j]
            ggamma[j] += gy[i, j] * xh
            gbeta[j] += gy[i, j]
            m1 += gh
            m2 += gh * xh
        m1 /= d
        m2 /= d
        for j in range(d):
            xh = (x[i, j] - mu[i]) * rstd[i]
            gh = gy[i, j] * gamma[j]
            gx[i, j] = rstd[i] * (gh - m1 - xh * m2)
    return gx, ggamma, gbeta


# ---------------------------------------------------------------------------
# fused AdamW step over flat arrays, in place
#
# Decoupled decay: p *= (1 - lr*wd) before the moment update.

def adamw_update_np(p, g, m, v, lr, beta1, beta2, eps, wd, t):
    if wd != 0.0:
        p *= 1.0 - lr * wd
    m *= beta1
    m += (1.0 - beta1) * g
    v *= beta2
    v += (1.0 - beta2) * (g * g)
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    p -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)


@njit(cache=True)
def adamw_update_nb(p, g, m, v, lr, beta1, beta2, eps, wd, t):
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    shrink = 1.0 - lr * wd
    for i in range(p.shape[0]):
        if wd != 0.0:
            p[i] *= shrink
        m[i] = beta1 * m[i] + (1.0 - beta1) * g[i]
        v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i]
        p[i] -= lr * (m[i] / bc1) / (np.sqrt(v[i] / bc2) + eps)


# ---------------------------------------------------------------------------
# longest common subsequence length (ROUGE-L)

def lcs_length_np(a, b):
    n, m = a.shape[0], b.shape[0]
    prev = np.zeros(m + 1, dtype=np.int64)
    cur = np.zeros(m + 1, dtype=np.int64)
    for i in range(n):
        ai = a[i]
        for j in range(m):
            if ai == b[j]:
                cur[j + 1] = prev[j] + 1
            else:
                cur[j + 1] = max(prev[j + 1], cur[j])
        prev, cur = cur, prev
    return int(prev[m])


@njit(cache=True)
def lcs_length_nb(a, b):
    n, m = a.shape[0], b.shape[0]
    prev = np.zeros(m + 1, dtype=np.int64)
    cur = np.zeros(m + 1, dtype=np.int64)
    for i in range(n):
        ai = a[i]
        for j in range(m):
            if ai == b[j]:
                cur[j + 1] = prev[j] + 1
            else:
                c1 = prev[j + 1]
                c2 = cur[j]
                cur[j + 1] = c1 if c1 > c2 else c2
        tmp = prev
        prev = cur
        cur = tmp
    return int(prev[m])


if NUMBA_ACTIVE:
    softmax_xent_fwd = softmax_xent_fwd_nb
    softmax_xent_bwd = softmax_xent_bwd_nb
    layernorm_fwd = layernorm_fwd_nb
    layernorm_bwd = layernorm_bwd_nb
    adamw_update = adamw_update_nb
    lcs_length = lcs_length_nb
else:
    softmax_xent_fwd = softmax_xent_fwd_np
    softmax_xent_bwd = softmax_xent_bwd_np
    layernorm_fwd = layernorm_fwd_np
    layernorm_bwd = layernorm_bwd_np
    adamw_update = adamw_update_np
    lcs_length = lcs_length_np


def warmup():
    """Trigger jit compilation of every kernel on tiny inputs (no-op on the numpy path)."""
    x = np.ones((2, 3))
    t = np.zeros(2, dtype=np.int64)
    mk = np.ones(2, dtype=np.uint8)
    _, probs = softmax_xent_fwd(x, t, mk)
    softmax_xent_bwd(probs, t, mk, 1.0)
    g = np.ones(3)
    y, mu, rstd = layernorm_fwd(x, g, g * 0, 1e-5)
    layernorm_bwd(y, x, g, mu, rstd)
    p = np.ones(4)
    adamw_update(p, p * 0.1, p * 0, p * 0, 1e-3, 0.9, 0.999, 1e-8, 0.01, 1)
    lcs_length(np.arange(3), np.arange(3))
