"""The multi-hypothesis lifting network: spatial hypothesis generation, temporal
embedding, self-hypothesis refinement, cross-hypothesis interaction and the
regression head.

Shapes through :func:`forward` (leading batch axes pass through untouched)::

    x2d            [..., N, J, 2]
    mhg_forward    M x [..., 2J, N]
    temporal_embed M x [..., N, C]
    shr_forward    M x [..., N, C]
    chi_forward    [..., N, C*M]
    regress        [..., N, J, 3], center [..., J, 3]
"""

from collections import OrderedDict

import numpy as np

from .blocks import (
    AttentionWeights,
    EncoderLayerWeights,
    LayerNormWeights,
    MlpWeights,
    encoder_layer,
    mca,
    mlp,
    msa,
)
from .tensor import (
    ShapeError,
    Tensor,
    add_bias,
    concat_last,
    linear,
    reshape,
    split_last,
    swap_last,
    take,
)

INIT_STD = 0.02


def _attn_specs(prefix, d):
    for k in ("q", "k", "v", "o"):
        yield f"{prefix}.w_{k}", (d, d), "weight"
        yield f"{prefix}.b_{k}", (d,), "zeros"


def _ln_specs(prefix, d):
    yield f"{prefix}.gain", (d,), "ones"
    yield f"{prefix}.bias", (d,), "zeros"


def _mlp_specs(prefix, d, hidden):
    yield f"{prefix}.w1", (d, hidden), "weight"
    yield f"{prefix}.b1", (hidden,), "zeros"
    yield f"{prefix}.w2", (hidden, d), "weight"
    yield f"{prefix}.b2", (d,), "zeros"


def param_specs(cfg, include_hyp_heads=None):
    """Yield ``(name, shape, init)`` for every parameter, in checkpoint order."""
    M, N, J, C = cfg.M, cfg.N, cfg.J, cfg.C
    cm = C * M
    for m in range(1, M + 1):
        p = f"mhg.h{m}"
        yield from _ln_specs(f"{p}.ln_in", N)
        yield f"{p}.pos", (2 * J, N), "weight"
        for l in range(1, cfg.L1 + 1):
            q = f"{p}.layer{l}"
            yield from _ln_specs(f"{q}.ln1", N)
            yield from _attn_specs(f"{q}.attn", N)
            yield from _ln_specs(f"{q}.ln2", N)
            yield from _mlp_specs(f"{q}.mlp", N, cfg.spatial_hidden)
        yield from _ln_specs(f"{p}.ln_out", N)
    for m in range(1, M + 1):
        yield f"embed.h{m}.w", (2 * J, C), "weight"
        yield f"embed.h{m}.b", (C,), "zeros"
        yield f"embed.h{m}.pos", (N, C), "weight"
    for l in range(1, cfg.L2 + 1):
        for m in range(1, M + 1):
            yield from _ln_specs(f"shr.layer{l}.h{m}.ln", C)
            yield from _attn_specs(f"shr.layer{l}.h{m}.attn", C)
        yield from _ln_specs(f"shr.layer{l}.mix.ln", cm)
        yield from _mlp_specs(f"shr.layer{l}.mix.mlp", cm, cfg.mix_hidden)
    for l in range(1, cfg.L3 + 1):
        for m in range(1, M + 1):
            for role in ("q", "k", "v"):
                yield from _ln_specs(f"chi.layer{l}.h{m}.ln_{role}", C)
            yield from _attn_specs(f"chi.layer{l}.h{m}.attn", C)
        yield from _ln_specs(f"chi.layer{l}.mix.ln", cm)
        yield from _mlp_specs(f"chi.layer{l}.mix.mlp", cm, cfg.mix_hidden)
    yield "head.w", (cm, 3 * J), "weight"
    yield "head.b", (3 * J,), "zeros"
    if cfg.hyp_heads if include_hyp_heads is None else include_hyp_heads:
        for m in range(1, M + 1):
            yield f"hyp_head.h{m}.w", (C, 3 * J), "weight"
            yield f"hyp_head.h{m}.b", (3 * J,), "zeros"


class ModelParams:
    """Ordered name -> Tensor store; the order is the checkpoint blob order."""

    def __init__(self, tensors=None):
        self._t = OrderedDict(tensors or ())

    def __getitem__(self, name):
        return self._t[name]

    def __setitem__(self, name, t):
        self._t[name] = t

    def __contains__(self, name):
        return name in self._t

    def __len__(self):
        return len(self._t)

    def __iter__(self):
        return iter(self._t)

    def names(self):
        return list(self._t)

    def items(self):
        return self._t.items()

    def tensors(self):
        return list(self._t.values())

    def num_scalars(self):
        return int(sum(t.size for t in self._t.values()))

    def zero_grad(self):
        for t in self._t.values():
            t.grad = None

    def requires_grad_(self, flag=True):
        for t in self._t.values():
            t.requires_grad = flag
        return self

    def copy(self):
        return ModelParams((k, Tensor(v.data.copy(), requires_grad=v.requires_grad)) for k, v in self._t.items())

    def astype(self, dtype):
        return ModelParams((k, Tensor(v.data.astype(dtype), requires_grad=v.requires_grad)) for k, v in self._t.items())

    def arrays(self):
        return OrderedDict((k, v.data) for k, v in self._t.items())

    @classmethod
    def from_arrays(cls, arrays, requires_grad=True):
        return cls((k, Tensor(np.array(v), requires_grad=requires_grad)) for k, v in arrays.items())


def _trunc_normal(rng, shape, std):
    z = rng.standard_normal(shape)
    bad = np.abs(z) > 2.0
    while bad.any():
        z[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(z) > 2.0
    return z * std


def init_params(cfg, seed=0, include_hyp_heads=None):
    """Truncated-normal weights (std 0.02, cut at 2 std), zero biases, unit LN gains."""
    cfg.validate(for_forward=False)
    rng = np.random.default_rng(seed)
    dt = cfg.np_dtype
    out = ModelParams()
    for name, shape, kind in param_specs(cfg, include_hyp_heads):
        if kind == "weight":
            arr = _trunc_normal(rng, shape, INIT_STD)
        elif kind == "ones":
            arr = np.ones(shape)
        else:
            arr = np.zeros(shape)
        out[name] = Tensor(arr.astype(dt), requires_grad=True)
    return out


def zero_params(cfg, include_hyp_heads=None):
    dt = cfg.np_dtype
    return ModelParams(
        (name, Tensor(np.zeros(shape, dtype=dt), requires_grad=True))
        for name, shape, _ in param_specs(cfg, include_hyp_heads)
    )


def add_hypothesis_heads(params, cfg, seed=0):
    """Return a copy of ``params`` extended with freshly initialized per-hypothesis heads."""
    rng = np.random.default_rng(seed)
    out = ModelParams(params.items())
    for m in range(1, cfg.M + 1):
        out[f"hyp_head.h{m}.w"] = Tensor(_trunc_normal(rng, (cfg.C, 3 * cfg.J), INIT_STD).astype(cfg.np_dtype), requires_grad=True)
        out[f"hyp_head.h{m}.b"] = Tensor(np.zeros(3 * cfg.J, dtype=cfg.np_dtype), requires_grad=True)
    return out


# --------------------------------------------------------------------------
# stages
# --------------------------------------------------------------------------

def _as_input(x2d, cfg):
    if not isinstance(x2d, Tensor):
        x2d = Tensor(np.asarray(x2d, dtype=cfg.np_dtype))
    if x2d.dtype != cfg.np_dtype:
        x2d = Tensor(x2d.data.astype(cfg.np_dtype))
    if x2d.shape[-3:] != (cfg.N, cfg.J, 2):
        raise ShapeError(f"input must end in ({cfg.N}, {cfg.J}, 2), got {x2d.shape}")
    return x2d


def _ln(params, prefix, cfg):
    return LayerNormWeights.from_params(params, prefix, cfg.ln_eps)


def mhg_forward(x2d, params, cfg, rng=None, trace=None):
    """Cascaded spatial encoder stacks; returns the M hypotheses, each [..., 2J, N]."""
    x2d = _as_input(x2d, cfg)
    *lead, N, J, _ = x2d.shape
    xbar = swap_last(reshape(x2d, (*lead, N, 2 * J)))
    hyps = []
    src = xbar
    for m in range(1, cfg.M + 1):
        p = f"mhg.h{m}"
        x = add_bias(_ln(params, f"{p}.ln_in", cfg)(src), params[f"{p}.pos"])
        for l in range(1, cfg.L1 + 1):
            w = EncoderLayerWeights.from_params(params, f"{p}.layer{l}", cfg.h_s, cfg.ln_eps)
            probs = [] if trace is not None and l == 1 else None
            x = encoder_layer(x, w, cfg.dropout if rng is not None else 0.0, rng, probs)
            if probs:
                trace.append(("mhg", m, l, probs[0]))
        out = src + _ln(params, f"{p}.ln_out", cfg)(x)
        hyps.append(out)
        src = xbar if cfg.mhg_parallel else out
    return hyps


def temporal_embed(hyps, params, cfg):
    out = []
    for m, h in enumerate(hyps, start=1):
        z = linear(swap_last(h), params[f"embed.h{m}.w"], params[f"embed.h{m}.b"])
        out.append(add_bias(z, params[f"embed.h{m}.pos"]))
    return out


def _mix(z, params, prefix, cfg, partition=True):
    zc = concat_last(z)
    zc = zc + mlp(_ln(params, f"{prefix}.ln", cfg)(zc), MlpWeights.from_params(params, f"{prefix}.mlp"))
    return split_last(zc, cfg.M) if partition else zc


def shr_forward(z, params, cfg, rng=None, trace=None):
    """Per-hypothesis self-attention followed by the hypothesis-mixing MLP, L2 times."""
    z = list(z)
    drop = cfg.dropout if rng is not None else 0.0
    for l in range(1, cfg.L2 + 1):
        nxt = []
        for m in range(1, cfg.M + 1):
            p = f"shr.layer{l}.h{m}"
            probs = [] if trace is not None and l == 1 else None
            a = msa(_ln(params, f"{p}.ln", cfg)(z[m - 1]), AttentionWeights.from_params(params, f"{p}.attn", cfg.h_t), drop, rng, probs)
            if probs:
                trace.append(("shr", m, l, probs[0]))
            nxt.append(z[m - 1] + a)
        z = _mix(nxt, params, f"shr.layer{l}.mix", cfg)
    return z


def chi_roles(M, mode="cyclic"):
    """(query source, key source) hypothesis indices (0-based) for each hypothesis."""
    if mode == "cyclic":
        return [((m + 1) % M, (m + 2) % M) for m in range(M)]
    return [((m + 2) % M, (m + 1) % M) for m in range(M)]


def chi_forward(z, params, cfg, rng=None):
    """Cross-hypothesis attention plus mixing MLP; the last layer returns the [..., N, C*M] aggregate."""
    if cfg.M != 3 and not cfg.chi_any_m:
        raise ValueError("cross-hypothesis interaction needs M == 3 unless chi_any_m is set")
    z = list(z)
    drop = cfg.dropout if rng is not None else 0.0
    roles = chi_roles(cfg.M, cfg.chi_roles)
    for l in range(1, cfg.L3 + 1):
        nxt = []
        for m in range(cfg.M):
            p = f"chi.layer{l}.h{m + 1}"
            m1, m2 = roles[m]
            a = mca(
                _ln(params, f"{p}.ln_q", cfg)(z[m1]),
                _ln(params, f"{p}.ln_k", cfg)(z[m2]),
                _ln(params, f"{p}.ln_v", cfg)(z[m]),
                AttentionWeights.from_params(params, f"{p}.attn", cfg.h_t),
                drop,
                rng,
            )
            nxt.append(z[m] + a)
        z = _mix(nxt, params, f"chi.layer{l}.mix", cfg, partition=l < cfg.L3)
    return z


def regress(zfinal, params, cfg):
    """Per-frame linear head; returns (sequence [..., N, J, 3], center frame [..., J, 3])."""
    *lead, N, _ = zfinal.shape
    seq = reshape(linear(zfinal, params["head.w"], params["head.b"]), (*lead, N, cfg.J, 3))
    return seq, take(seq, N // 2, axis=len(lead))


def hypothesis_decode(z, params, cfg):
    """Decode each hypothesis feature [..., N, C] to poses [..., N, J, 3] with its own head."""
    if "hyp_head.h1.w" not in params:
        raise KeyError("per-hypothesis heads are not present in these parameters")
    out = []
    for m, zm in enumerate(z, start=1):
        *lead, N, _ = zm.shape
        y = linear(zm, params[f"hyp_head.h{m}.w"], params[f"hyp_head.h{m}.b"])
        out.append(reshape(y, (*lead, N, cfg.J, 3)))
    return out


def forward(x2d, params, cfg, rng=None, trace=None, return_hypotheses=False):
    """Full network. ``rng`` enables attention dropout (training only)."""
    hyps = mhg_forward(x2d, params, cfg, rng, trace)
    z = temporal_embed(hyps, params, cfg)
    z = shr_forward(z, params, cfg, rng, trace)
    seq, center = regress(chi_forward(z, params, cfg, rng), params, cfg)
    if return_hypotheses:
        return seq, center, z
    return seq, center


def export_attention(x2d, params, cfg):
    """First-layer attention maps of the spatial (MHG) and temporal (SHR) stages.

    Returns a list of records ``{stage, hypothesis, layer, head, shape, rows}``
    for a single unbatched input sequence.
    """
    x2d = _as_input(x2d, cfg)
    if x2d.ndim != 3:
        raise ShapeError("export_attention expects a single [N, J, 2] sequence")
    trace = []
    hyps = mhg_forward(x2d, params, cfg, trace=trace)
    shr_forward(temporal_embed(hyps, params, cfg), params, cfg, trace=trace)
    records = []
    for stage, m, l, probs in trace:
        for h in range(probs.shape[0]):
            mat = probs[h]
            records.append({
                "stage": stage,
                "hypothesis": m,
                "layer": l,
                "head": h + 1,
                "shape": list(mat.shape),
                "rows": mat.astype(float).tolist(),
            })
    return records
