"""Numba vs numpy row kernels, plus one full training step at the generalization scale.

    python benchmarks/bench_kernels.py [--repeat 20]

Numba kernels are warmed up (compiled) before timing. Matrix products go to
BLAS in both modes, so the full-step numbers differ only by the row kernels.
"""

import argparse
import time

import numpy as np

from mhformer import _kernels
from mhformer.config import ModelConfig
from mhformer.model import forward, init_params
from mhformer.tensor import GradTape
from mhformer.training import pose_loss


def best_of(fn, repeat):
    fn()
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return min(times)


def kernel_cases(rng):
    # row shapes seen at C=64, batch 64: temporal rows (B*N*heads, N) and features (B*N, C*M)
    att = rng.standard_normal((64 * 8 * 9, 9))
    feat = rng.standard_normal((64 * 9, 192))
    g = rng.standard_normal(feat.shape)
    gain, bias = np.ones(192), np.zeros(192)
    y, xhat, rstd = _kernels.layernorm_fwd(feat, gain, bias, 1e-5)
    sm = _kernels.softmax_fwd(att)
    ga = rng.standard_normal(att.shape)
    return {
        "softmax_fwd": lambda: _kernels.softmax_fwd(att),
        "softmax_bwd": lambda: _kernels.softmax_bwd(sm, ga),
        "layernorm_fwd": lambda: _kernels.layernorm_fwd(feat, gain, bias, 1e-5),
        "layernorm_bwd": lambda: _kernels.layernorm_bwd(g, xhat, rstd, gain),
        "gelu_fwd": lambda: _kernels.gelu_fwd(feat),
        "gelu_bwd": lambda: _kernels.gelu_bwd(feat, g),
    }


def train_step_case(rng):
    cfg = ModelConfig(M=3, N=9, J=17, C=64, h_s=9, h_t=8)
    params = init_params(cfg, 0)
    x = rng.standard_normal((64, 9, 17, 2)).astype(np.float32) * 0.3
    y = rng.standard_normal((64, 9, 17, 3)).astype(np.float32) * 0.3

    def step():
        params.zero_grad()
        with GradTape() as tape:
            loss = pose_loss(forward(x, params, cfg)[0], y, normalize=True)
            tape.backward(loss, params.tensors())

    return step


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()
    backends = [b for b in ("numpy", "numba") if b in _kernels.available_backends()]
    rng = np.random.default_rng(0)
    before = _kernels.backend()
    rows = {}
    try:
        for b in backends:
            _kernels.set_backend(b)
            for name, fn in kernel_cases(rng).items():
                rows.setdefault(name, {})[b] = best_of(fn, args.repeat)
            rows.setdefault("train_step (B=64, C=64)", {})[b] = best_of(train_step_case(rng), max(3, args.repeat // 5))
    finally:
        _kernels.set_backend(before)
    print(f"{'case':26s}" + "".join(f"{b:>12s}" for b in backends) + ("     speedup" if len(backends) == 2 else ""))
    for name, t in rows.items():
        line = f"{name:26s}" + "".join(f"{t[b] * 1e3:10.3f}ms" for b in backends)
        if len(backends) == 2:
            line += f"{t['numpy'] / t['numba']:11.2f}x"
        print(line)


if __name__ == "__main__":
    main()
