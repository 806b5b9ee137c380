"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every op that touches a tensor with ``requires_grad`` appends a node to the
calling thread's tape. ``backward`` walks the tape once in reverse recording
order, accumulates gradients and clears it.
"""
from __future__ import annotations

import contextlib
import threading

import numpy as np

from . import _kernels as K

MAX_RANK = 3
LN_EPS = 1e-5
ADAM_EPS = 1e-8


class ContractError(ValueError):
    """An argument violates an operation's preconditions."""


class DimensionError(ContractError):
    pass


class NumericalError(FloatingPointError):
    """A NaN or Inf appeared in a forward value."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad=False, name=None):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim > MAX_RANK:
            raise DimensionError(f"tensor rank {arr.ndim} exceeds {MAX_RANK}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a tensor is not supported")
        return mul(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self):
        return sum_all(self)

    def mean(self):
        return mean_all(self)


# ---------------------------------------------------------------- tape

class _TapeState(threading.local):
    def __init__(self):
        self.nodes = []
        self.enabled = True


_state = _TapeState()


def tape_size():
    return len(_state.nodes)


def clear_tape():
    _state.nodes.clear()


@contextlib.contextmanager
def no_grad():
    prev = _state.enabled
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, inputs, backward_fn):
    if not np.all(np.isfinite(data)):
        raise NumericalError("non-finite value produced in forward pass")
    needs = _state.enabled and any(t.requires_grad for t in inputs)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = needs
    out.grad = None
    out.name = None
    if data.ndim > MAX_RANK:
        raise DimensionError(f"tensor rank {data.ndim} exceeds {MAX_RANK}")
    if needs:
        _state.nodes.append((out, inputs, backward_fn))
    return out


def _accumulate(t, g):
    # never in place: backward rules may hand the same array to several inputs
    if t.requires_grad:
        t.grad = g if t.grad is None else t.grad + g


def backward(loss):
    """Populate ``.grad`` on every differentiable tensor reachable from ``loss``."""
    if loss.data.ndim != 0:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    nodes = _state.nodes
    if not loss.requires_grad or not any(n[0] is loss for n in reversed(nodes)):
        raise ContractError("loss was not produced under an active tape")
    loss.grad = np.ones((), dtype=np.float64)
    try:
        for out, inputs, fn in reversed(nodes):
            if out.grad is None:
                continue
            for t, g in zip(inputs, fn(out.grad)):
                if g is not None:
                    _accumulate(t, g)
    finally:
        nodes.clear()


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise

def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    sa, sb = a.shape, b.shape
    return _result(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    sa, sb = a.shape, b.shape
    return _result(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    ad, bd = a.data, b.data
    return _result(ad * bd, (a, b),
                   lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def exp(a):
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,))


def log(a):
    ad = a.data
    return _result(np.log(ad), (a,), lambda g: (g / ad,))


def sum_all(a):
    shape = a.shape
    return _result(np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, shape),))


def mean_all(a):
    shape, n = a.shape, a.data.size
    return _result(np.asarray(a.data.mean()), (a,),
                   lambda g: (np.broadcast_to(g / n, shape),))


def gelu(x):
    """Exact-erf GELU, x * Phi(x)."""
    xd = x.data
    x2 = xd.reshape(-1, xd.shape[-1]) if xd.ndim else xd.reshape(1, 1)
    out = K.gelu_fwd(x2).reshape(xd.shape)
    return _result(out, (x,), lambda g: (K.gelu_bwd(x2, g.reshape(x2.shape)).reshape(xd.shape),))


# ---------------------------------------------------------------- linear algebra

def matmul(a, b):
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs rank >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        if bd.ndim == 2:
            ga = g @ bd.T
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            return ga, gb
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return _result(ad @ bd, (a, b), bw)


def linear(x, weight, bias=None):
    """``x @ weight.T + bias`` with ``weight`` stored as (out, in)."""
    if x.shape[-1] != weight.shape[1]:
        raise DimensionError(f"linear: input {x.shape} does not match weight {weight.shape}")
    xd, wd = x.data, weight.data
    x2 = xd.reshape(-1, xd.shape[-1])
    out = x2 @ wd.T
    if bias is not None:
        out = out + bias.data
    out = out.reshape(xd.shape[:-1] + (wd.shape[0],))

    def bw(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = (g2 @ wd).reshape(xd.shape)
        gw = g2.T @ x2
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _result(out, inputs, bw)


def transpose(a):
    """Swap the last two axes."""
    return _result(np.swapaxes(a.data, -1, -2).copy(), (a,),
                   lambda g: (np.swapaxes(g, -1, -2),))


def reshape(a, shape):
    old = a.shape
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def split_heads(x, n_heads):
    """(B, L, H*D) -> (B*H, L, D)."""
    b, l, h = x.shape
    if h % n_heads:
        raise DimensionError(f"hidden size {h} not divisible by {n_heads} heads")
    d = h // n_heads
    out = x.data.reshape(b, l, n_heads, d).transpose(0, 2, 1, 3).reshape(b * n_heads, l, d)

    def bw(g):
        return (g.reshape(b, n_heads, l, d).transpose(0, 2, 1, 3).reshape(b, l, h),)

    return _result(np.ascontiguousarray(out), (x,), bw)


def merge_heads(x, n_heads):
    """(B*H, L, D) -> (B, L, H*D)."""
    bh, l, d = x.shape
    b = bh // n_heads
    out = x.data.reshape(b, n_heads, l, d).transpose(0, 2, 1, 3).reshape(b, l, n_heads * d)

    def bw(g):
        return (g.reshape(b, l, n_heads, d).transpose(0, 2, 1, 3).reshape(bh, l, d),)

    return _result(np.ascontiguousarray(out), (x,), bw)


def concat(tensors, axis):
    datas = [t.data for t in tensors]
    sizes = np.cumsum([d.shape[axis] for d in datas])[:-1]
    return _result(np.concatenate(datas, axis=axis), tuple(tensors),
                   lambda g: tuple(np.split(g, sizes, axis=axis)))


def _scatter_rows(idx, g, n_rows):
    """out[i] = sum of g[j] over j with idx[j] == i, summed in a fixed order."""
    out = np.zeros((n_rows, g.shape[1]))
    if len(idx) == 0:
        return out
    order = np.argsort(idx, kind="stable")
    sidx = idx[order]
    uniq, starts = np.unique(sidx, return_index=True)
    out[uniq] = np.add.reduceat(g[order], starts, axis=0)
    return out


def take_rows(weight, idx):
    """Gather rows of a (V, h) matrix: result shape ``idx.shape + (h,)``."""
    idx = np.asarray(idx, dtype=np.int64)
    wshape = weight.shape

    def bw(g):
        return (_scatter_rows(idx.reshape(-1), g.reshape(-1, wshape[1]), wshape[0]),)

    return _result(weight.data[idx], (weight,), bw)


def take_cols(weight, idx):
    """Gather columns of an (h, V) matrix: result shape ``idx.shape + (h,)``."""
    idx = np.asarray(idx, dtype=np.int64)
    wshape = weight.shape

    def bw(g):
        return (_scatter_rows(idx.reshape(-1), g.reshape(-1, wshape[0]), wshape[1]).T,)

    return _result(weight.data.T[idx], (weight,), bw)


# ---------------------------------------------------------------- normalization

def softmax(x, mask=None):
    """Softmax over the last axis.

    ``mask`` is a boolean array broadcastable to ``x``; False entries get weight
    exactly 0. A slice with no allowed entry raises ``EmptySupportError``.
    """
    xd = x.data
    d = xd.shape[-1]
    x2 = xd.reshape(-1, d)
    m2 = None if mask is None else np.broadcast_to(mask, xd.shape).reshape(-1, d)
    y = K.softmax_masked(x2, m2)
    return _result(y.reshape(xd.shape), (x,),
                   lambda g: (K.softmax_backward(y, g.reshape(-1, d)).reshape(xd.shape),))


def layer_norm(x, gain, bias, eps=LN_EPS):
    xd = x.data
    d = xd.shape[-1]
    x2 = xd.reshape(-1, d)
    out, xhat, rstd = K.layer_norm_fwd(x2, gain.data, bias.data, eps)

    def bw(g):
        gx, gg, gb = K.layer_norm_bwd(g.reshape(-1, d), xhat, rstd, gain.data)
        return gx.reshape(xd.shape), gg, gb

    return _result(out.reshape(xd.shape), (x, gain, bias), bw)


def masked_cross_entropy(logits, allowed, target, weight):
    """Sum over positions of ``-weight * log softmax(logits | allowed)[target]``.

    ``logits`` is (..., V); ``allowed`` a boolean mask over V per position;
    ``target`` integer indices of shape ``logits.shape[:-1]``; ``weight`` a
    float array of the same shape (0 excludes a position).
    """
    ld = logits.data
    v = ld.shape[-1]
    l2 = ld.reshape(-1, v)
    a2 = np.broadcast_to(allowed, ld.shape).reshape(-1, v)
    t = np.asarray(target, dtype=np.int64).reshape(-1)
    w = np.asarray(weight, dtype=np.float64).reshape(-1)
    live = w != 0
    if not np.all(a2[live, t[live]]):
        raise ContractError("target class outside the allowed support")
    p = K.softmax_masked(l2, a2)
    rows = np.arange(l2.shape[0])
    picked = np.where(live, p[rows, np.where(live, t, 0)], 1.0)
    loss = -(w * np.log(picked)).sum()

    def bw(g):
        gl = p * w[:, None]
        gl[rows[live], t[live]] -= w[live]
        return ((g * gl).reshape(ld.shape),)

    return _result(np.asarray(loss), (logits,), bw)


# ---------------------------------------------------------------- optimizer

class AdamState:
    def __init__(self, params):
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]
        self.step = 0


def adam_step(params, grads, state, lr, beta1, beta2, eps=ADAM_EPS):
    """In-place Adam update with bias correction."""
    if state.step < 0:
        raise ContractError("adam step counter must be non-negative")
    if not (len(params) == len(grads) == len(state.m)):
        raise ContractError("params, grads and moment buffers differ in length")
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            g = np.zeros_like(p.data)
        if m.shape != p.data.shape or g.shape != p.data.shape:
            raise ContractError(f"adam: shape mismatch for {p.name}: {p.shape} vs {g.shape}")
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


class Adam:
    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=ADAM_EPS):
        self.params = list(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.state = AdamState(self.params)

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        adam_step(self.params, [p.grad for p in self.params], self.state,
                  self.lr, self.betas[0], self.betas[1], self.eps)
