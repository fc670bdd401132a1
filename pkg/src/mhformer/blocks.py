"""Transformer building blocks: MSA, three-source MCA, MLP and the pre-norm encoder layer.

Every block accepts inputs with arbitrary leading (batch) axes; the last two
axes are (tokens, features).
"""

from dataclasses import dataclass

import numpy as np

from .tensor import (
    ShapeError,
    dropout,
    gelu,
    layer_norm,
    linear,
    matmul,
    reshape,
    scale,
    softmax_rows,
    swap_last,
    transpose,
)


@dataclass
class AttentionWeights:
    w_q: object
    b_q: object
    w_k: object
    b_k: object
    w_v: object
    b_v: object
    w_o: object
    b_o: object
    heads: int

    @classmethod
    def from_params(cls, params, prefix, heads):
        g = lambda k: params[f"{prefix}.{k}"]
        return cls(g("w_q"), g("b_q"), g("w_k"), g("b_k"), g("w_v"), g("b_v"), g("w_o"), g("b_o"), heads)

    @property
    def dim(self):
        return self.w_q.shape[0]


@dataclass
class MlpWeights:
    w1: object
    b1: object
    w2: object
    b2: object

    @classmethod
    def from_params(cls, params, prefix):
        return cls(*(params[f"{prefix}.{k}"] for k in ("w1", "b1", "w2", "b2")))


@dataclass
class LayerNormWeights:
    gain: object
    bias: object
    eps: float = 1e-5

    @classmethod
    def from_params(cls, params, prefix, eps=1e-5):
        return cls(params[f"{prefix}.gain"], params[f"{prefix}.bias"], eps)

    def __call__(self, x):
        return layer_norm(x, self.gain, self.bias, self.eps)


@dataclass
class EncoderLayerWeights:
    ln1: LayerNormWeights
    attn: AttentionWeights
    ln2: LayerNormWeights
    mlp: MlpWeights

    @classmethod
    def from_params(cls, params, prefix, heads, eps=1e-5):
        return cls(
            LayerNormWeights.from_params(params, f"{prefix}.ln1", eps),
            AttentionWeights.from_params(params, f"{prefix}.attn", heads),
            LayerNormWeights.from_params(params, f"{prefix}.ln2", eps),
            MlpWeights.from_params(params, f"{prefix}.mlp"),
        )


def _split_heads(t, heads):
    *lead, n, d = t.shape
    k = len(lead)
    t = reshape(t, (*lead, n, heads, d // heads))
    return transpose(t, (*range(k), k + 1, k, k + 2))


def _merge_heads(t):
    *lead, h, n, dh = t.shape
    k = len(lead)
    t = transpose(t, (*range(k), k + 1, k, k + 2))
    return reshape(t, (*lead, n, h * dh))


def _attention(q_src, k_src, v_src, w, attn_dropout=0.0, rng=None, probs_out=None):
    d = q_src.shape[-1]
    if d % w.heads:
        raise ShapeError(f"{w.heads} heads do not divide feature dim {d}")
    if not (q_src.shape == k_src.shape == v_src.shape):
        raise ShapeError(f"attention sources differ in shape: {q_src.shape}, {k_src.shape}, {v_src.shape}")
    dh = d // w.heads
    q = _split_heads(linear(q_src, w.w_q, w.b_q), w.heads)
    k = _split_heads(linear(k_src, w.w_k, w.b_k), w.heads)
    v = _split_heads(linear(v_src, w.w_v, w.b_v), w.heads)
    scores = scale(matmul(q, swap_last(k)), 1.0 / np.sqrt(dh))
    probs = softmax_rows(scores)
    if probs_out is not None:
        probs_out.append(probs.data)
    if attn_dropout > 0.0:
        probs = dropout(probs, attn_dropout, rng)
    return linear(_merge_heads(matmul(probs, v)), w.w_o, w.b_o)


def msa(x, w, attn_dropout=0.0, rng=None, probs_out=None):
    """Multi-head self-attention; per-head scores are scaled by sqrt(d / heads)."""
    return _attention(x, x, x, w, attn_dropout, rng, probs_out)


def mca(q_src, k_src, v_src, w, attn_dropout=0.0, rng=None, probs_out=None):
    """Multi-head cross-attention with queries, keys and values from three separate sources."""
    return _attention(q_src, k_src, v_src, w, attn_dropout, rng, probs_out)


def mlp(x, w):
    return linear(gelu(linear(x, w.w1, w.b1)), w.w2, w.b2)


def encoder_layer(x, w, attn_dropout=0.0, rng=None, probs_out=None):
    y = x + msa(w.ln1(x), w.attn, attn_dropout, rng, probs_out)
    return y + mlp(w.ln2(y), w.mlp)
