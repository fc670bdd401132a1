import math

import numpy as np
import pytest

from mhformer import blocks
from mhformer.blocks import AttentionWeights, EncoderLayerWeights, LayerNormWeights, MlpWeights
from mhformer.tensor import Tensor, gelu, grad_check, linear, mul, sum_all


def attn_weights(rng, d, heads, zero=False):
    mk = (lambda *s: Tensor(np.zeros(s))) if zero else (lambda *s: Tensor(rng.standard_normal(s) * 0.5))
    return AttentionWeights(mk(d, d), mk(d), mk(d, d), mk(d), mk(d, d), mk(d), mk(d, d), mk(d), heads)


def scalar_attention(q_src, k_src, v_src, w):
    """Single-head attention evaluated entry by entry with Python floats."""
    W = {k: getattr(w, k).data for k in ("w_q", "b_q", "w_k", "b_k", "w_v", "b_v", "w_o", "b_o")}
    n, d = q_src.shape

    def proj(x, wm, bv):
        return [[bv[j] + sum(x[i][k] * wm[k][j] for k in range(d)) for j in range(d)] for i in range(n)]

    q = proj(q_src, W["w_q"], W["b_q"])
    k = proj(k_src, W["w_k"], W["b_k"])
    v = proj(v_src, W["w_v"], W["b_v"])
    out = []
    for i in range(n):
        s = [sum(q[i][c] * k[j][c] for c in range(d)) / math.sqrt(d) for j in range(n)]
        mx = max(s)
        e = [math.exp(t - mx) for t in s]
        a = [t / sum(e) for t in e]
        ctx = [sum(a[j] * v[j][c] for j in range(n)) for c in range(d)]
        out.append(ctx)
    return np.array(proj(out, W["w_o"], W["b_o"]))


def test_msa_single_token_is_value_then_output_projection(rng):
    w = attn_weights(rng, 4, 2)
    x = Tensor(rng.standard_normal((1, 4)))
    want = linear(linear(x, w.w_v, w.b_v), w.w_o, w.b_o).data
    np.testing.assert_allclose(blocks.msa(x, w).data, want, atol=1e-14)


def test_msa_zero_weights(rng):
    assert np.array_equal(blocks.msa(Tensor(rng.standard_normal((3, 4))), attn_weights(rng, 4, 2, zero=True)).data, np.zeros((3, 4)))


def test_msa_hand_oracle_two_tokens(rng):
    w = AttentionWeights(
        Tensor([[1.0, 0.5], [-0.3, 2.0]]), Tensor([0.1, -0.2]),
        Tensor([[0.7, -1.0], [0.2, 0.4]]), Tensor([0.0, 0.3]),
        Tensor([[1.5, 0.0], [0.25, -0.5]]), Tensor([-0.1, 0.05]),
        Tensor([[0.9, 0.1], [-0.2, 1.1]]), Tensor([0.2, 0.0]),
        1,
    )
    x = np.array([[0.3, -1.2], [2.0, 0.4]])
    np.testing.assert_allclose(blocks.msa(Tensor(x), w).data, scalar_attention(x, x, x, w), atol=1e-12, rtol=0)


def test_mca_distinct_sources_hand_oracle(rng):
    w = attn_weights(rng, 2, 1)
    q, k, v = (rng.standard_normal((2, 2)) for _ in range(3))
    np.testing.assert_allclose(blocks.mca(Tensor(q), Tensor(k), Tensor(v), w).data, scalar_attention(q, k, v, w),
                               atol=1e-12, rtol=0)


def test_mca_degenerates_to_msa_exactly(rng):
    w = attn_weights(rng, 6, 3)
    x = Tensor(rng.standard_normal((2, 5, 6)))
    assert np.array_equal(blocks.mca(x, x, x, w).data, blocks.msa(x, w).data)


def test_mca_zero_value_path(rng):
    w = attn_weights(rng, 4, 2)
    w.w_v, w.b_v, w.b_o = Tensor(np.zeros((4, 4))), Tensor(np.zeros(4)), Tensor(np.zeros(4))
    out = blocks.mca(Tensor(rng.standard_normal((3, 4))), Tensor(rng.standard_normal((3, 4))), Tensor(rng.standard_normal((3, 4))), w)
    assert np.array_equal(out.data, np.zeros((3, 4)))


def test_multihead_equals_per_head_concat(rng):
    d, h, n = 6, 3, 4
    w = attn_weights(rng, d, h)
    x = rng.standard_normal((n, d))
    q = x @ w.w_q.data + w.b_q.data
    k = x @ w.w_k.data + w.b_k.data
    v = x @ w.w_v.data + w.b_v.data
    heads = []
    for i in range(h):
        sl = slice(i * d // h, (i + 1) * d // h)
        s = q[:, sl] @ k[:, sl].T / math.sqrt(d // h)
        a = np.exp(s - s.max(1, keepdims=True))
        a /= a.sum(1, keepdims=True)
        heads.append(a @ v[:, sl])
    want = np.concatenate(heads, axis=1) @ w.w_o.data + w.b_o.data
    np.testing.assert_allclose(blocks.msa(Tensor(x), w).data, want, atol=1e-12)


def test_attention_rejects_bad_heads_and_sources(rng):
    from mhformer.tensor import ShapeError

    with pytest.raises(ShapeError):
        blocks.msa(Tensor(rng.standard_normal((3, 4))), attn_weights(rng, 4, 3))
    w = attn_weights(rng, 4, 2)
    with pytest.raises(ShapeError):
        blocks.mca(Tensor(np.ones((3, 4))), Tensor(np.ones((2, 4))), Tensor(np.ones((3, 4))), w)


def test_mlp_cases(rng):
    d = 5
    x = Tensor(rng.standard_normal((3, d)))
    z = MlpWeights(Tensor(np.zeros((d, 7))), Tensor(np.zeros(7)), Tensor(np.zeros((7, d))), Tensor(np.zeros(d)))
    assert np.array_equal(blocks.mlp(x, z).data, np.zeros((3, d)))
    eye = MlpWeights(Tensor(np.eye(d)), Tensor(np.zeros(d)), Tensor(np.eye(d)), Tensor(np.zeros(d)))
    np.testing.assert_array_equal(blocks.mlp(x, eye).data, gelu(x).data)
    w = MlpWeights(*(Tensor(rng.standard_normal(s)) for s in ((d, 7), (7,), (7, d), (d,))))
    want = linear(gelu(linear(x, w.w1, w.b1)), w.w2, w.b2).data
    np.testing.assert_array_equal(blocks.mlp(x, w).data, want)


def make_layer(rng, d, heads, zero=False):
    mk = (lambda *s: Tensor(np.zeros(s))) if zero else (lambda *s: Tensor(rng.standard_normal(s) * 0.5))
    return EncoderLayerWeights(
        LayerNormWeights(mk(d) if zero else Tensor(1 + rng.standard_normal(d) * 0.1), mk(d)),
        attn_weights(rng, d, heads, zero),
        LayerNormWeights(mk(d) if zero else Tensor(1 + rng.standard_normal(d) * 0.1), mk(d)),
        MlpWeights(mk(d, 2 * d), mk(2 * d), mk(2 * d, d), mk(d)),
    )


def test_encoder_layer_zero_params_is_identity(rng):
    x = rng.standard_normal((2, 5, 6))
    assert np.array_equal(blocks.encoder_layer(Tensor(x), make_layer(rng, 6, 3, zero=True)).data, x)


@pytest.mark.parametrize("n,d,h", [(1, 2, 1), (5, 6, 3), (9, 4, 4)])
def test_encoder_layer_shape(rng, n, d, h):
    assert blocks.encoder_layer(Tensor(rng.standard_normal((n, d))), make_layer(rng, d, h)).shape == (n, d)


def test_encoder_layer_grad_check(rng):
    lw = make_layer(rng, 6, 3)
    x = Tensor(rng.standard_normal((4, 6)))
    probe = Tensor(rng.standard_normal((4, 6)))
    leaves = [x, lw.ln1.gain, lw.ln1.bias, lw.ln2.gain, lw.attn.w_q, lw.attn.b_k, lw.attn.w_v, lw.attn.w_o, lw.mlp.w1, lw.mlp.b2]
    assert grad_check(lambda: sum_all(mul(blocks.encoder_layer(x, lw), probe)), leaves) < 1e-5


def test_blocks_are_batch_agnostic(rng):
    lw = make_layer(rng, 6, 2)
    x = rng.standard_normal((3, 4, 6))
    batched = blocks.encoder_layer(Tensor(x), lw).data
    for i in range(3):
        np.testing.assert_allclose(batched[i], blocks.encoder_layer(Tensor(x[i]), lw).data, atol=1e-13)
