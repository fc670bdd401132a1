"""Loss, Amsgrad, learning-rate schedule, flip augmentation and the training loop."""

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .model import forward, hypothesis_decode
from .tensor import (
    GradTape,
    NonFiniteError,
    ShapeError,
    Tensor,
    detach,
    mul,
    norm_last,
    scale,
    sub,
    sum_all,
)

log = logging.getLogger(__name__)


def pose_loss(pred, gt, normalize=False, squared=False):
    """Sum over batch, frames and joints of the per-joint Euclidean error.

    ``squared`` switches to the sum of squared errors. ``normalize`` divides by
    the number of (sample, frame, joint) triples.
    """
    if not isinstance(gt, Tensor):
        gt = Tensor(np.asarray(gt, dtype=pred.dtype))
    if pred.shape != gt.shape:
        raise ShapeError(f"pose_loss: shape mismatch {pred.shape} vs {gt.shape}")
    diff = sub(pred, gt)
    per_joint = sum_all(mul(diff, diff)) if squared else sum_all(norm_last(diff))
    if normalize:
        count = pred.size // pred.shape[-1]
        per_joint = scale(per_joint, 1.0 / count)
    return per_joint


def lr_at(epoch, tc):
    """``base_lr * epoch_decay**epoch * every5_decay**(epoch // 5)``."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return tc.base_lr * tc.epoch_decay ** epoch * tc.every5_decay ** (epoch // 5)


class Amsgrad:
    """Adam with the running maximum of the second moment in the denominator.

    Update, per parameter, at step t::

        m = b1*m + (1-b1)*g
        v = b2*v + (1-b2)*g^2
        vmax = max(vmax, v)
        p -= lr * (m / (1-b1^t)) / (sqrt(vmax / (1-b2^t)) + eps)
    """

    def __init__(self, names, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.step_count = 0
        self.state = {n: None for n in names}

    def step(self, params, lr):
        grads = {}
        for name in self.state:
            g = params[name].grad
            if g is None:
                g = np.zeros_like(params[name].data)
            if not np.isfinite(g).all():
                raise NonFiniteError(f"non-finite gradient for {name}; step rejected")
            grads[name] = g
        self.step_count += 1
        t = self.step_count
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** t
        c2 = math.sqrt(1.0 - b2 ** t)
        for name, g in grads.items():
            p = params[name]
            st = self.state[name]
            if st is None:
                z = np.zeros_like(p.data)
                st = self.state[name] = [z, z.copy(), z.copy()]
            m, v, vmax = st
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            np.maximum(vmax, v, out=vmax)
            p.data -= (lr / c1) * m / (np.sqrt(vmax) / c2 + self.eps)

    def state_arrays(self):
        out = {}
        for name, st in self.state.items():
            if st is not None:
                out[f"optim.m.{name}"], out[f"optim.v.{name}"], out[f"optim.vmax.{name}"] = st
        return out

    def load_state_arrays(self, arrays, step_count):
        self.step_count = int(step_count)
        for name in self.state:
            key = f"optim.m.{name}"
            if key in arrays:
                self.state[name] = [
                    np.array(arrays[key]),
                    np.array(arrays[f"optim.v.{name}"]),
                    np.array(arrays[f"optim.vmax.{name}"]),
                ]

    def meta(self):
        return {"step": self.step_count, "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps}


def flip_pairs_permutation(num_joints, pairs):
    perm = np.arange(num_joints)
    seen = set()
    for l, r in pairs:
        if l == r or l in seen or r in seen or not (0 <= l < num_joints and 0 <= r < num_joints):
            raise ValueError(f"invalid left/right pair table {pairs}")
        seen.update((l, r))
        perm[l], perm[r] = r, l
    return perm


def hflip(poses, pairs):
    """Mirror about the vertical axis: negate x and swap left/right joints.

    Works on any array shaped [..., J, D] with D in {2, 3}.
    """
    poses = np.asarray(poses)
    perm = flip_pairs_permutation(poses.shape[-2], pairs)
    out = poses[..., perm, :].copy()
    out[..., 0] *= -1
    return out


def predict_center(params, cfg, x2d, batch_size=256):
    """Center-frame predictions [B, J, 3] for windows [B, N, J, 2] (no tape)."""
    x2d = np.asarray(x2d, dtype=cfg.np_dtype)
    outs = []
    for i in range(0, len(x2d), batch_size):
        outs.append(forward(x2d[i:i + batch_size], params, cfg)[1].data)
    return np.concatenate(outs, axis=0)


def test_time_flip(params, cfg, x2d, pairs, batch_size=256):
    """Average of the prediction and the un-flipped prediction on the flipped input."""
    a = predict_center(params, cfg, x2d, batch_size)
    b = hflip(predict_center(params, cfg, hflip(x2d, pairs), batch_size), pairs)
    return 0.5 * (a + b)


@dataclass
class TrainResult:
    params: object
    optimizer: Amsgrad
    history: list = field(default_factory=list)
    epoch_losses: list = field(default_factory=list)


def _epoch_rng(seed, epoch):
    return np.random.default_rng([seed, epoch])


def train(params, cfg, x2d, y3d, tc, pairs=(), optimizer=None, start_epoch=0, on_epoch=None):
    """Train ``params`` in place on windows ``x2d`` [S, N, J, 2] and ``y3d`` [S, N, J, 3].

    Each epoch draws its shuffle, flips and dropout from ``rng([seed, epoch])``
    so that a run resumed from a checkpoint at an epoch boundary reproduces an
    uninterrupted run exactly. ``on_epoch(epoch, result)`` is called after every
    epoch (checkpointing hook).
    """
    tc.validate()
    cfg.validate()
    x2d = np.asarray(x2d, dtype=cfg.np_dtype)
    y3d = np.asarray(y3d, dtype=cfg.np_dtype)
    if x2d.shape[:-1] != y3d.shape[:-1] or x2d.shape[1:] != (cfg.N, cfg.J, 2):
        raise ShapeError(f"training windows {x2d.shape} / {y3d.shape} do not match config")
    if tc.flip_prob > 0 and not pairs:
        raise ValueError("flip augmentation needs a left/right pair table")
    names = [n for n in params.names() if not n.startswith("hyp_head.") or tc.hyp_aux_weight > 0]
    if optimizer is None:
        optimizer = Amsgrad(names, tc.beta1, tc.beta2, tc.adam_eps)
    result = TrainResult(params, optimizer)
    S = len(x2d)
    leaves = [params[n] for n in names]
    for n in names:
        params[n].requires_grad = True
    for epoch in range(start_epoch, start_epoch + tc.epochs):
        rng = _epoch_rng(tc.seed, epoch)
        order = rng.permutation(S)
        flips = rng.random(S) < tc.flip_prob
        lr = lr_at(epoch, tc)
        total, count = 0.0, 0
        for bi, lo in enumerate(range(0, S, tc.batch_size)):
            idx = order[lo:lo + tc.batch_size]
            xb, yb = x2d[idx].copy(), y3d[idx].copy()
            fb = flips[idx]
            if fb.any():
                xb[fb] = hflip(xb[fb], pairs)
                yb[fb] = hflip(yb[fb], pairs)
            params.zero_grad()
            drop_rng = rng if cfg.dropout > 0 else None
            try:
                with GradTape() as tape:
                    seq, _, z = forward(xb, params, cfg, rng=drop_rng, return_hypotheses=True)
                    loss = pose_loss(seq, yb, tc.normalize_loss, tc.squared_loss)
                    objective = loss
                    if tc.hyp_aux_weight > 0:
                        for dec in hypothesis_decode([detach(t) for t in z], params, cfg):
                            aux = pose_loss(dec, yb, tc.normalize_loss, tc.squared_loss)
                            objective = objective + scale(aux, tc.hyp_aux_weight)
                    tape.backward(objective, leaves=leaves)
                optimizer.step(params, lr)
            except NonFiniteError as e:
                raise NonFiniteError(f"epoch {epoch}, batch {bi}: {e}") from e
            lv = float(loss.data)
            result.history.append((epoch, optimizer.step_count, lr, lv))
            total += lv * len(idx)
            count += len(idx)
        mean = total / max(count, 1)
        result.epoch_losses.append(mean)
        log.info("epoch %d lr %.3g loss %.6g", epoch, lr, mean)
        if on_epoch is not None:
            on_epoch(epoch, result)
    return result


def write_loss_csv(history, path, append=False):
    with open(path, "a" if append else "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if not append:
            w.writerow(["epoch", "step", "lr", "loss"])
        for epoch, step, lr, loss in history:
            w.writerow([epoch, step, repr(float(lr)), repr(float(loss))])
