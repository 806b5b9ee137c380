"""Attention primitives and the pre-norm causal transformer stack.

Linear weights follow the (out, in) layout, so ``W1`` of the feedforward
network is (4h, h) and ``W2`` is (h, 4h). Inputs may be a single sequence
(l, h) or a batch (B, l, h); masks are boolean with True meaning "may attend".
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor

INIT_STD = 0.02


@dataclass
class AttentionWeights:
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    n_heads: int

    @classmethod
    def init(cls, rng, h, n_heads, prefix=""):
        if h % n_heads:
            raise T.ContractError(f"hidden size {h} not divisible by {n_heads} heads")
        mats = [Tensor(rng.normal(0.0, INIT_STD, (h, h)), requires_grad=True, name=f"{prefix}{k}")
                for k in ("wq", "wk", "wv", "wo")]
        return cls(*mats, n_heads=n_heads)

    def tensors(self):
        return [self.wq, self.wk, self.wv, self.wo]


@dataclass
class LayerNormWeights:
    gain: Tensor
    bias: Tensor

    @classmethod
    def init(cls, h, prefix=""):
        return cls(Tensor(np.ones(h), requires_grad=True, name=f"{prefix}gain"),
                   Tensor(np.zeros(h), requires_grad=True, name=f"{prefix}bias"))

    def tensors(self):
        return [self.gain, self.bias]

    def __call__(self, x):
        return T.layer_norm(x, self.gain, self.bias)


@dataclass
class TransformerBlockWeights:
    ln1: LayerNormWeights
    attn: AttentionWeights
    ln2: LayerNormWeights
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    @classmethod
    def init(cls, rng, h, n_heads, prefix=""):
        return cls(
            ln1=LayerNormWeights.init(h, f"{prefix}ln1."),
            attn=AttentionWeights.init(rng, h, n_heads, f"{prefix}attn."),
            ln2=LayerNormWeights.init(h, f"{prefix}ln2."),
            w1=Tensor(rng.normal(0.0, INIT_STD, (4 * h, h)), requires_grad=True, name=f"{prefix}w1"),
            b1=Tensor(np.zeros(4 * h), requires_grad=True, name=f"{prefix}b1"),
            w2=Tensor(rng.normal(0.0, INIT_STD, (h, 4 * h)), requires_grad=True, name=f"{prefix}w2"),
            b2=Tensor(np.zeros(h), requires_grad=True, name=f"{prefix}b2"),
        )

    def tensors(self):
        return (self.ln1.tensors() + self.attn.tensors() + self.ln2.tensors()
                + [self.w1, self.b1, self.w2, self.b2])


# ---------------------------------------------------------------- masks

def causal_mask(length, key_mask=None):
    """(B, l, l) mask: j < i among live keys, and always the diagonal.

    The diagonal keeps every query row non-empty even when its own position is
    padding; those rows are never read as keys downstream.
    """
    tri = np.tril(np.ones((length, length), dtype=bool), k=-1)
    eye = np.eye(length, dtype=bool)
    if key_mask is None:
        return (tri | eye)[None]
    key_mask = np.asarray(key_mask, dtype=bool)
    return (tri[None] & key_mask[:, None, :]) | eye[None]


def prefix_mask(length, key_mask=None):
    """(B, l, l+1) mask for the output head.

    Query k sees key 0 (the start row) and keys 1..k, where key j holds the
    transformer output at sequence position j-1. Position k itself is excluded.
    """
    m = np.zeros((length, length + 1), dtype=bool)
    m[:, 0] = True
    m[:, 1:] = np.tril(np.ones((length, length), dtype=bool), k=-1)
    if key_mask is None:
        return m[None]
    key_mask = np.asarray(key_mask, dtype=bool)
    full = np.repeat(m[None], key_mask.shape[0], axis=0)
    full[:, :, 1:] &= key_mask[:, None, :]
    return full


# ---------------------------------------------------------------- attention

def attention(q, k, v, mask=None):
    """softmax(Q K^T / sqrt(d_k), masked) V over the last two axes."""
    if q.shape[-1] != k.shape[-1]:
        raise T.DimensionError(f"query/key width differ: {q.shape} vs {k.shape}")
    scores = T.matmul(q, T.transpose(k)) * (1.0 / math.sqrt(q.shape[-1]))
    return T.matmul(T.softmax(scores, mask), v)


def multi_head_attention(xq, xkv, w, mask=None):
    """Batched multi-head attention; ``xq`` (B, lq, h), ``xkv`` (B, l, h), mask (B, lq, l)."""
    b = xq.shape[0]
    q = T.split_heads(T.linear(xq, w.wq), w.n_heads)
    k = T.split_heads(T.linear(xkv, w.wk), w.n_heads)
    v = T.split_heads(T.linear(xkv, w.wv), w.n_heads)
    if mask is not None:
        mask = np.broadcast_to(mask, (b,) + mask.shape[1:])
        mask = np.repeat(mask, w.n_heads, axis=0)
    out = attention(q, k, v, mask)
    return T.linear(T.merge_heads(out, w.n_heads), w.wo)


def _batched(x):
    if x.ndim == 2:
        return T.reshape(x, (1,) + x.shape), True
    return x, False


def _unbatched(x, squeeze):
    return T.reshape(x, x.shape[1:]) if squeeze else x


def causal_self_attention(x, w, key_mask=None):
    x, squeeze = _batched(x)
    mask = causal_mask(x.shape[1], key_mask)
    return _unbatched(multi_head_attention(x, x, w, mask), squeeze)


def feedforward(x, block):
    return T.linear(T.gelu(T.linear(x, block.w1, block.b1)), block.w2, block.b2)


def causal_transformer(h, blocks, final_ln, key_mask=None):
    """Pre-norm residual stack followed by a final layer norm; returns R."""
    x, squeeze = _batched(h)
    mask = causal_mask(x.shape[1], key_mask)
    for blk in blocks:
        a = blk.ln1(x)
        x = x + multi_head_attention(a, a, blk.attn, mask)
        x = x + feedforward(blk.ln2(x), blk)
    return _unbatched(final_ln(x), squeeze)


def cross_attention_head(queries, r_aug, w, ln, key_mask=None, mask=None):
    """Y = LayerNorm(queries + cross-attention(queries -> R_aug)) under the prefix mask.

    ``r_aug`` has the start row at index 0 followed by R; ``queries`` holds
    the column embedding of the feature at each sequence position. An explicit
    ``mask`` (B, n, l+1) replaces the prefix mask, e.g. when decoding one
    position at a time.
    """
    q, squeeze = _batched(queries)
    r, _ = _batched(r_aug)
    if mask is None:
        mask = prefix_mask(q.shape[1], key_mask)
    return _unbatched(ln(q + multi_head_attention(q, r, w, mask)), squeeze)
