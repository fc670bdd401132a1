"""Parameter counts and analytic FLOP estimates."""

import math

from .model import param_specs


def count_params(cfg):
    """Number of scalars in the model parameters (per-hypothesis heads excluded)."""
    return sum(math.prod(shape) for _, shape, _ in param_specs(cfg, include_hyp_heads=False))


def _attn_macs(tokens, dim):
    # q/k/v/o projections, QK^T, probs @ V
    return 4 * tokens * dim * dim + 2 * tokens * tokens * dim


def forward_macs(cfg):
    M, N, J, C = cfg.M, cfg.N, cfg.J, cfg.C
    t = 2 * J
    cm = C * M
    spatial = cfg.L1 * M * (_attn_macs(t, N) + 2 * t * N * cfg.spatial_hidden)
    embed = M * N * t * C
    mixing = 2 * N * cm * cfg.mix_hidden
    temporal = (cfg.L2 + cfg.L3) * (M * _attn_macs(N, C) + mixing)
    head = N * cm * 3 * J
    return spatial + embed + temporal + head


def estimate_flops(cfg):
    """FLOPs of one forward pass on one window, counting 2 per multiply-accumulate.

    Only matrix products are counted (projections, QK^T, AV, MLPs, embedding
    and head); normalization, softmax and activations are ignored.
    """
    return 2 * forward_macs(cfg)


def report(cfg):
    return {"params": count_params(cfg), "flops": estimate_flops(cfg)}
