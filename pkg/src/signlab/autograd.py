"""Tape-based reverse-mode automatic differentiation over numpy arrays.

Tensors wrap float32 or float64 ndarrays; every op records a backward closure
on a tape. Graphs are built per step and released when the root goes out of
scope. Integer data (token ids, gather indices) stays in plain ndarrays.
"""

import numpy as np

from . import kernels

_GRAD_ENABLED = True


class no_grad:
    """Context manager: ops inside build no tape."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_bw", "_parents")

    def __init__(self, data, requires_grad=False):
        d = np.asarray(data)
        if d.dtype not in (np.float32, np.float64):
            d = d.astype(np.float64)
        self.data = d
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._bw = None
        self._parents = ()

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def _accum(self, g):
        self.grad = g if self.grad is None else self.grad + g

    def backward(self):
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar root")
        topo = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, emitted = stack.pop()
            if emitted:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._bw is not None and node.grad is not None:
                node._bw(node.grad)

    # operator sugar; every op lives below as a free function
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, e):
        return power(self, e)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        return reshape(self, *shape)

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)

    def swapaxes(self, a, b):
        return swapaxes(self, a, b)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, grad={self.requires_grad})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _pair(a, b):
    """as_tensor for binary ops; a bare python scalar adopts the other side's
    float dtype so float32 graphs do not silently promote to float64."""
    if isinstance(a, (int, float)) and isinstance(b, Tensor) \
            and np.issubdtype(b.data.dtype, np.floating):
        a = Tensor(np.asarray(a, dtype=b.data.dtype))
    elif isinstance(b, (int, float)) and isinstance(a, Tensor) \
            and np.issubdtype(a.data.dtype, np.floating):
        b = Tensor(np.asarray(b, dtype=a.data.dtype))
    return as_tensor(a), as_tensor(b)


def _make(data, parents, bw):
    track = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    out = Tensor(data)
    if track:
        out.requires_grad = True
        out._parents = tuple(parents)
        out._bw = bw
    return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# --- elementwise arithmetic ------------------------------------------------

def add(a, b):
    a, b = _pair(a, b)
    data = a.data + b.data

    def bw(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g, b.data.shape))

    return _make(data, (a, b), bw)


def sub(a, b):
    a, b = _pair(a, b)
    data = a.data - b.data

    def bw(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(-g, b.data.shape))

    return _make(data, (a, b), bw)


def mul(a, b):
    a, b = _pair(a, b)
    data = a.data * b.data

    def bw(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g * a.data, b.data.shape))

    return _make(data, (a, b), bw)


def div(a, b):
    a, b = _pair(a, b)
    data = a.data / b.data

    def bw(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g / b.data, a.data.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _make(data, (a, b), bw)


def power(a, e: float):
    a = as_tensor(a)
    data = a.data ** e

    def bw(g):
        a._accum(g * e * a.data ** (e - 1))

    return _make(data, (a,), bw)


def texp(a):
    a = as_tensor(a)
    data = np.exp(a.data)

    def bw(g):
        a._accum(g * data)

    return _make(data, (a,), bw)


def tlog(a):
    a = as_tensor(a)
    data = np.log(a.data)

    def bw(g):
        a._accum(g / a.data)

    return _make(data, (a,), bw)


def tsqrt(a):
    a = as_tensor(a)
    data = np.sqrt(a.data)

    def bw(g):
        a._accum(g * 0.5 / data)

    return _make(data, (a,), bw)


def ttanh(a):
    a = as_tensor(a)
    data = np.tanh(a.data)

    def bw(g):
        a._accum(g * (1.0 - data * data))

    return _make(data, (a,), bw)


def relu(a):
    a = as_tensor(a)
    data = np.maximum(a.data, 0.0)

    def bw(g):
        a._accum(g * (a.data > 0))

    return _make(data, (a,), bw)


_GELU_C = 0.7978845608028654  # sqrt(2/pi)


def gelu(a):
    # tanh form; numpy has no erf and the approximation is differentiable everywhere
    a = as_tensor(a)
    x = a.data
    u = _GELU_C * (x + 0.044715 * x * x * x)
    t = np.tanh(u)
    data = 0.5 * x * (1.0 + t)

    def bw(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        a._accum(g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du))

    return _make(data, (a,), bw)


# --- shape ops ---------------------------------------------------------------

def reshape(a, *shape):
    a = as_tensor(a)
    if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
        shape = tuple(shape[0])
    orig = a.data.shape
    data = a.data.reshape(shape)

    def bw(g):
        a._accum(g.reshape(orig))

    return _make(data, (a,), bw)


def transpose(a, axes=None):
    a = as_tensor(a)
    data = a.data.transpose(axes)
    inv = None if axes is None else tuple(np.argsort(axes))

    def bw(g):
        a._accum(g.transpose(inv))

    return _make(data, (a,), bw)


def swapaxes(a, ax1, ax2):
    a = as_tensor(a)
    data = a.data.swapaxes(ax1, ax2)

    def bw(g):
        a._accum(g.swapaxes(ax1, ax2))

    return _make(data, (a,), bw)


def getitem(a, idx):
    a = as_tensor(a)
    data = a.data[idx]

    def bw(g):
        full = np.zeros_like(a.data)
        full[idx] += g
        a._accum(full)

    return _make(data, (a,), bw)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                t._accum(g[tuple(sl)])

    return _make(data, tuple(tensors), bw)


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    data = np.stack([t.data for t in tensors], axis=axis)

    def bw(g):
        for i, t in enumerate(tensors):
            if t.requires_grad:
                t._accum(np.take(g, i, axis=axis))

    return _make(data, tuple(tensors), bw)


def gather_rows(a, idx):
    """Row gather along axis 0 with integer index array (embedding lookup and friends)."""
    a = as_tensor(a)
    idx = np.asarray(idx)
    data = a.data[idx]

    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        a._accum(full)

    return _make(data, (a,), bw)


# --- reductions --------------------------------------------------------------

def tsum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is None:
            a._accum(np.broadcast_to(g, a.data.shape).copy())
        else:
            if not keepdims:
                g = np.expand_dims(g, axis)
            a._accum(np.broadcast_to(g, a.data.shape).copy())

    return _make(data, (a,), bw)


def tmean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    n = a.data.size if axis is None else np.prod(
        [a.data.shape[ax] for ax in (axis if isinstance(axis, tuple) else (axis,))]
    )
    out = tsum(a, axis, keepdims)
    return mul(out, 1.0 / float(n))


# --- linear algebra ----------------------------------------------------------

def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    # promote vector operands so the backward pass is uniform 2-D math
    if a.ndim == 1:
        return reshape(matmul(reshape(a, 1, -1), b), *b.shape[:-2], b.shape[-1])
    if b.ndim == 1:
        return reshape(matmul(a, reshape(b, -1, 1)), *a.shape[:-1])
    data = a.data @ b.data

    def bw(g):
        if a.requires_grad:
            ga = g @ np.swapaxes(b.data, -1, -2)
            a._accum(_unbroadcast(ga, a.data.shape))
        if b.requires_grad:
            gb = np.swapaxes(a.data, -1, -2) @ g
            b._accum(_unbroadcast(gb, b.data.shape))

    return _make(data, (a, b), bw)


# --- fused numeric ops (kernel-backed) ----------------------------------------

def softmax(a, axis=-1):
    a = as_tensor(a)
    m = a.data.max(axis=axis, keepdims=True)
    e = np.exp(a.data - m)
    data = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        dot = (g * data).sum(axis=axis, keepdims=True)
        a._accum((g - dot) * data)

    return _make(data, (a,), bw)


def log_softmax(a, axis=-1):
    a = as_tensor(a)
    m = a.data.max(axis=axis, keepdims=True)
    s = a.data - m
    lse = np.log(np.exp(s).sum(axis=axis, keepdims=True))
    data = s - lse

    def bw(g):
        p = np.exp(data)
        a._accum(g - p * g.sum(axis=axis, keepdims=True))

    return _make(data, (a,), bw)


def masked_fill(a, keep_mask, value: float):
    """Replace entries where keep_mask is False by `value` (no data dependence there)."""
    a = as_tensor(a)
    keep = np.asarray(keep_mask, dtype=bool)
    data = np.where(keep, a.data, a.data.dtype.type(value))

    def bw(g):
        a._accum(g * keep)

    return _make(data, (a,), bw)


def cross_entropy(logits, targets, mask=None):
    """Mean cross entropy over masked rows of (N, V) logits. Errors when nothing is masked in."""
    logits = as_tensor(logits)
    if logits.ndim != 2:
        raise ValueError("cross_entropy expects (N, V) logits")
    targets = np.ascontiguousarray(targets, dtype=np.int64)
    n = logits.data.shape[0]
    if mask is None:
        mask8 = np.ones(n, dtype=np.uint8)
    else:
        mask8 = np.ascontiguousarray(np.asarray(mask, dtype=bool), dtype=np.uint8)
    count = int(mask8.sum())
    if count == 0:
        raise ValueError("cross_entropy: mask selects no positions")
    x = np.ascontiguousarray(logits.data)
    total, probs = kernels.softmax_xent_fwd(x, targets, mask8)
    data = np.asarray(total / count, dtype=logits.dtype)

    def bw(g):
        scale = float(g) / count
        logits._accum(kernels.softmax_xent_bwd(probs, targets, mask8, scale))

    return _make(data, (logits,), bw)


def layernorm(x, gamma, beta, eps: float = 1e-5):
    """Normalize over the last axis; gamma/beta are (D,)."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    shape = x.data.shape
    d = shape[-1]
    x2 = np.ascontiguousarray(x.data.reshape(-1, d))
    y, mu, rstd = kernels.layernorm_fwd(x2, gamma.data, beta.data, np.float64(eps))
    data = y.reshape(shape)

    def bw(g):
        g2 = np.ascontiguousarray(g.reshape(-1, d))
        gx, ggamma, gbeta = kernels.layernorm_bwd(g2, x2, gamma.data, mu, rstd)
        if x.requires_grad:
            x._accum(gx.reshape(shape))
        if gamma.requires_grad:
            gamma._accum(ggamma)
        if beta.requires_grad:
            beta._accum(gbeta)

    return _make(data, (x, gamma, beta), bw)


def rownorm(a, axis=-1, keepdims=False):
    """L2 norm along an axis; exact forward, backward guarded at zero."""
    a = as_tensor(a)
    sq = (a.data * a.data).sum(axis=axis, keepdims=True)
    n = np.sqrt(sq)
    data = n if keepdims else np.squeeze(n, axis=axis)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        a._accum(g * a.data / np.maximum(n, 1e-12))

    return _make(data, (a,), bw)
