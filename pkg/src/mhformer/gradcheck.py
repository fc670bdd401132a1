"""Finite-difference gradient checks for every block and the full model."""

import numpy as np

from . import blocks
from .config import tiny_config
from .model import chi_forward, forward, init_params, mhg_forward, regress, shr_forward, temporal_embed
from .tensor import (
    Tensor,
    concat_last,
    gelu,
    grad_check,
    layer_norm,
    linear,
    matmul,
    mul,
    softmax_rows,
    split_last,
    sum_all,
)
from .training import pose_loss

# blocks that are exactly linear in their inputs are held to the tighter bound
LINEAR_BLOCKS = ("matmul", "linear", "concat_split")
LINEAR_TOL = 1e-6
TOL = 1e-4


def _weighted_sum(t, w):
    return sum_all(mul(t, w))


def _perturbed_params(cfg, seed, spread=0.5):
    rng = np.random.default_rng(seed + 1)
    params = init_params(cfg, seed)
    for t in params.tensors():
        t.data = t.data + rng.normal(0.0, spread, size=t.shape).astype(t.dtype)
    return params


def run(cfg=None, seed=0, eps=1e-6, max_coords=None):
    """Return ``{block: max relative error}`` for a float64 copy of ``cfg`` (tiny by default)."""
    cfg = cfg or tiny_config()
    if cfg.dtype != "float64":
        cfg = type(cfg)(**dict(cfg.to_dict(), dtype="float64"))
    cfg.validate()
    rng = np.random.default_rng(seed)
    T = lambda *shape: Tensor(rng.standard_normal(shape))
    res = {}

    a, b = T(3, 4), T(4, 2)
    w = T(3, 2)
    res["matmul"] = grad_check(lambda: _weighted_sum(matmul(a, b), w), [a, b], eps)
    x, wl, bl = T(3, 4), T(4, 5), T(5)
    w = T(3, 5)
    res["linear"] = grad_check(lambda: _weighted_sum(linear(x, wl, bl), w), [x, wl, bl], eps)
    xs = [T(3, 2) for _ in range(3)]
    ws = [T(3, 2) for _ in range(3)]
    res["concat_split"] = grad_check(
        lambda: sum_all(concat_last([mul(p, q) for p, q in zip(split_last(concat_last(xs), 3), ws)])), xs, eps
    )
    x, w = T(3, 5), T(3, 5)
    res["softmax_rows"] = grad_check(lambda: _weighted_sum(softmax_rows(x), w), [x], eps)
    x, g, bb, w = T(3, 5), T(5), T(5), T(3, 5)
    res["layer_norm"] = grad_check(lambda: _weighted_sum(layer_norm(x, g, bb, cfg.ln_eps), w), [x, g, bb], eps)
    x, w = T(4, 3), T(4, 3)
    res["gelu"] = grad_check(lambda: _weighted_sum(gelu(x), w), [x], eps)

    params = _perturbed_params(cfg, seed)
    d, h = cfg.C, cfg.h_t
    aw = blocks.AttentionWeights.from_params(params, "shr.layer1.h1.attn", h)
    attn_leaves = [aw.w_q, aw.b_q, aw.w_k, aw.b_k, aw.w_v, aw.b_v, aw.w_o, aw.b_o]
    x, k, v, w = T(cfg.N, d), T(cfg.N, d), T(cfg.N, d), T(cfg.N, d)
    res["msa"] = grad_check(lambda: _weighted_sum(blocks.msa(x, aw), w), [x] + attn_leaves, eps, max_coords)
    res["mca"] = grad_check(lambda: _weighted_sum(blocks.mca(x, k, v, aw), w), [x, k, v] + attn_leaves, eps, max_coords)
    mw = blocks.MlpWeights.from_params(params, "mhg.h1.layer1.mlp") if cfg.L1 else None
    if mw is not None:
        x, w = T(2 * cfg.J, cfg.N), T(2 * cfg.J, cfg.N)
        res["mlp"] = grad_check(lambda: _weighted_sum(blocks.mlp(x, mw), w), [x, mw.w1, mw.b1, mw.w2, mw.b2], eps, max_coords)
        ew = blocks.EncoderLayerWeights.from_params(params, "mhg.h1.layer1", cfg.h_s, cfg.ln_eps)
        layer_leaves = [t for n, t in params.items() if n.startswith("mhg.h1.layer1.")]
        res["encoder_layer"] = grad_check(lambda: _weighted_sum(blocks.encoder_layer(x, ew), w), [x] + layer_leaves, eps, max_coords)

    x2d = Tensor(rng.standard_normal((cfg.N, cfg.J, 2)))
    gt = Tensor(rng.standard_normal((cfg.N, cfg.J, 3)))
    wz = [T(cfg.N, cfg.C) for _ in range(cfg.M)]
    wh = [T(2 * cfg.J, cfg.N) for _ in range(cfg.M)]
    stage = lambda prefix: [t for n, t in params.items() if n.startswith(prefix)]
    res["mhg"] = grad_check(
        lambda: sum_all(concat_last([mul(hh, ww) for hh, ww in zip(mhg_forward(x2d, params, cfg), wh)])),
        [x2d] + stage("mhg."), eps, max_coords)
    hz = [T(2 * cfg.J, cfg.N) for _ in range(cfg.M)]
    res["temporal_embed"] = grad_check(
        lambda: sum_all(concat_last([mul(z, ww) for z, ww in zip(temporal_embed(hz, params, cfg), wz)])),
        hz + stage("embed."), eps, max_coords)
    zin = [T(cfg.N, cfg.C) for _ in range(cfg.M)]
    res["shr"] = grad_check(
        lambda: sum_all(concat_last([mul(z, ww) for z, ww in zip(shr_forward(zin, params, cfg), wz)])),
        zin + stage("shr."), eps, max_coords)
    wc = T(cfg.N, cfg.C * cfg.M)
    res["chi"] = grad_check(lambda: _weighted_sum(chi_forward(zin, params, cfg), wc), zin + stage("chi."), eps, max_coords)
    zf = T(cfg.N, cfg.C * cfg.M)
    res["regress"] = grad_check(lambda: pose_loss(regress(zf, params, cfg)[0], gt), [zf] + stage("head."), eps, max_coords)
    pred = T(cfg.N, cfg.J, 3)
    res["pose_loss"] = grad_check(lambda: pose_loss(pred, gt, normalize=True), [pred], eps)
    res["full_model"] = grad_check(
        lambda: pose_loss(forward(x2d, params, cfg)[0], gt, normalize=True), [x2d] + params.tensors(), eps, max_coords)
    return res


def tolerance(block):
    return LINEAR_TOL if block in LINEAR_BLOCKS else TOL


def failures(results):
    return [b for b, e in results.items() if not e < tolerance(b)]
