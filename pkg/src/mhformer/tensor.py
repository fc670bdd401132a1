"""Dense tensors with tape-based reverse-mode differentiation.

Usage::

    with GradTape() as tape:
        y = linear(x, w, b)
        loss = sum_all(y)
    tape.backward(loss)        # populates w.grad, b.grad, ...

Ops only record when a tape is active and at least one input has
``requires_grad``. Shapes are explicit: elementwise binary ops require equal
shapes and the only broadcast is :func:`add_bias` over leading axes.
"""

import contextlib
import threading

import numpy as np

from . import _kernels

DTYPES = (np.float32, np.float64)


class NonFiniteError(FloatingPointError):
    """An op produced NaN or Inf."""


class ShapeError(ValueError):
    pass


class TapeError(RuntimeError):
    pass


def _check_finite(arr, op):
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite values produced by {op}")
    return arr


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "__weakref__")

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in DTYPES:
            arr = arr.astype(np.float64 if dtype is None else dtype)
        if arr.ndim and 0 in arr.shape:
            raise ShapeError(f"tensor extents must be positive, got {arr.shape}")
        _check_finite(arr, "tensor construction")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name

    @classmethod
    def _wrap(cls, arr):
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = False
        t.grad = None
        t.name = None
        return t

    shape = property(lambda self: self.data.shape)
    dtype = property(lambda self: self.data.dtype)
    ndim = property(lambda self: self.data.ndim)
    size = property(lambda self: self.data.size)

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else None

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}{rg})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def tensor(data, requires_grad=False, dtype=None, name=None):
    return Tensor(data, requires_grad=requires_grad, dtype=dtype, name=name)


# --------------------------------------------------------------------------
# tape
# --------------------------------------------------------------------------

_state = threading.local()
# test-only hook: op name -> adjoint multiplier (negative control for gradcheck)
_adjoint_corruption = {}


def _stack():
    if not hasattr(_state, "tapes"):
        _state.tapes = []
    return _state.tapes


def active_tape():
    s = _stack()
    return s[-1] if s else None


class GradTape:
    """Ordered record of executed ops; replayed in reverse by :meth:`backward`."""

    def __init__(self):
        self.records = []
        self._outputs = set()

    def __enter__(self):
        _stack().append(self)
        return self

    def __exit__(self, *exc):
        _stack().remove(self)
        return False

    def record(self, op, out, inputs, vjp):
        self.records.append((op, out, inputs, vjp))
        self._outputs.add(id(out))

    def backward(self, seed, leaves=()):
        if not isinstance(seed, Tensor) or seed.size != 1:
            raise TapeError("backward seed must be a scalar tensor")
        if not self.records or id(seed) not in self._outputs:
            raise TapeError("seed was not produced under this tape")
        grads = {id(seed): np.ones_like(seed.data)}
        found = {}
        for op, out, inputs, vjp in reversed(self.records):
            g = grads.pop(id(out), None)
            for inp in inputs:
                if inp.requires_grad and id(inp) not in self._outputs:
                    found.setdefault(id(inp), inp)
            if g is None:
                continue
            needs = tuple(inp.requires_grad for inp in inputs)
            gins = vjp(g, needs)
            k = _adjoint_corruption.get(op)
            for inp, gi, need in zip(inputs, gins, needs):
                if not need or gi is None:
                    continue
                if k is not None:
                    gi = gi * k
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        for leaf in leaves:
            found.setdefault(id(leaf), leaf)
        for key, leaf in found.items():
            g = grads.get(key)
            if g is None:
                g = np.zeros_like(leaf.data)
            g = _check_finite(g, "backward")
            leaf.grad = g if leaf.grad is None else leaf.grad + g


def backward(seed, leaves=()):
    """Backpropagate from ``seed`` through the innermost active tape."""
    tape = active_tape()
    if tape is None:
        raise TapeError("no active GradTape")
    tape.backward(seed, leaves)


@contextlib.contextmanager
def corrupt_adjoint(op, factor=1.01):
    """Scale the recorded adjoint of ``op`` (for negative-control tests only)."""
    _adjoint_corruption[op] = factor
    try:
        yield
    finally:
        _adjoint_corruption.pop(op, None)


def _emit(op, arr, inputs, vjp):
    _check_finite(arr, op)
    out = Tensor._wrap(arr)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(op, out, tuple(inputs), vjp)
    return out


def _same_dtype(op, *ts):
    d = ts[0].dtype
    for t in ts[1:]:
        if t.dtype != d:
            raise TypeError(f"{op}: dtype mismatch {d} vs {t.dtype}")


def _same_shape(op, a, b):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# --------------------------------------------------------------------------
# elementwise / structural ops
# --------------------------------------------------------------------------

def add(a, b):
    _same_shape("add", a, b)
    _same_dtype("add", a, b)
    return _emit("add", a.data + b.data, (a, b), lambda g, n: (g, g))


def sub(a, b):
    _same_shape("sub", a, b)
    _same_dtype("sub", a, b)
    return _emit("sub", a.data - b.data, (a, b), lambda g, n: (g, -g))


def mul(a, b):
    _same_shape("mul", a, b)
    _same_dtype("mul", a, b)
    ad, bd = a.data, b.data
    return _emit("mul", ad * bd, (a, b), lambda g, n: (g * bd if n[0] else None, g * ad if n[1] else None))


def scale(x, c):
    c = x.dtype.type(c)
    return _emit("scale", x.data * c, (x,), lambda g, n: (g * c,))


def add_bias(x, b):
    """``x + b`` with ``b`` broadcast over the leading axes of ``x``."""
    k = b.ndim
    if x.shape[x.ndim - k:] != b.shape:
        raise ShapeError(f"add_bias: bias {b.shape} does not match trailing axes of {x.shape}")
    _same_dtype("add_bias", x, b)
    lead = tuple(range(x.ndim - k))

    def vjp(g, n):
        return g, (g.sum(axis=lead) if n[1] else None)

    return _emit("add_bias", x.data + b.data, (x, b), vjp)


def reshape(x, shape):
    shape = tuple(shape)
    src = x.shape
    return _emit("reshape", x.data.reshape(shape), (x,), lambda g, n: (g.reshape(src),))


def transpose(x, axes):
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _emit("transpose", x.data.transpose(axes), (x,), lambda g, n: (g.transpose(inv),))


def swap_last(x):
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, axes)


def take(x, index, axis):
    """Select one index along ``axis`` (the axis is dropped)."""
    src_shape, dt = x.shape, x.dtype

    def vjp(g, n):
        out = np.zeros(src_shape, dtype=dt)
        sl = [slice(None)] * len(src_shape)
        sl[axis] = index
        out[tuple(sl)] = g
        return (out,)

    return _emit("take", np.take(x.data, index, axis=axis), (x,), vjp)


def detach(x):
    return Tensor._wrap(x.data)


def concat_last(xs):
    xs = list(xs)
    if not xs:
        raise ShapeError("concat_last: empty input")
    lead = xs[0].shape[:-1]
    for t in xs:
        if t.shape[:-1] != lead:
            raise ShapeError(f"concat_last: leading shape mismatch {t.shape} vs {lead}")
    _same_dtype("concat_last", *xs)
    bounds = np.cumsum([0] + [t.shape[-1] for t in xs])

    def vjp(g, n):
        return tuple(g[..., bounds[i]:bounds[i + 1]] if n[i] else None for i in range(len(xs)))

    return _emit("concat_last", np.concatenate([t.data for t in xs], axis=-1), xs, vjp)


def split_last(x, parts):
    c = x.shape[-1]
    if parts < 1 or c % parts:
        raise ShapeError(f"split_last: {c} channels not divisible into {parts} parts")
    w = c // parts
    outs = []
    for i in range(parts):
        lo = i * w

        def vjp(g, n, lo=lo):
            full = np.zeros(x.shape, dtype=x.dtype)
            full[..., lo:lo + w] = g
            return (full,)

        outs.append(_emit("split_last", x.data[..., lo:lo + w].copy(), (x,), vjp))
    return outs


def sum_all(x):
    shape, dt = x.shape, x.dtype
    out = np.asarray(x.data.sum(), dtype=dt)
    return _emit("sum", out, (x,), lambda g, n: (np.full(shape, g, dtype=dt),))


def mean_all(x):
    return scale(sum_all(x), 1.0 / x.size)


def norm_last(x):
    """Euclidean norm over the last axis; the adjoint at a zero vector is taken as 0."""
    xd = x.data
    r = np.sqrt((xd * xd).sum(axis=-1))

    def vjp(g, n):
        safe = np.where(r > 0, r, 1.0)
        return ((g / safe * (r > 0))[..., None] * xd,)

    return _emit("norm_last", r, (x,), vjp)


def dropout(x, rate, rng):
    if rate <= 0.0:
        return x
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / x.dtype.type(1.0 - rate)
    return _emit("dropout", x.data * keep, (x,), lambda g, n: (g * keep,))


# --------------------------------------------------------------------------
# linear algebra
# --------------------------------------------------------------------------

def matmul(a, b):
    """``a[..., p, q] @ b[q, r]`` or batched ``a[..., p, q] @ b[..., q, r]`` with equal leading axes."""
    _same_dtype("matmul", a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul: operands must be at least 2-D")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner extents differ {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    if b.ndim == 2:
        q = ad.shape[-1]

        def vjp(g, n):
            ga = g @ bd.T if n[0] else None
            gb = ad.reshape(-1, q).T @ g.reshape(-1, g.shape[-1]) if n[1] else None
            return ga, gb

        return _emit("matmul", ad @ bd, (a, b), vjp)
    if a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch axes differ {a.shape} @ {b.shape}")

    def vjp(g, n):
        ga = g @ np.swapaxes(bd, -1, -2) if n[0] else None
        gb = np.swapaxes(ad, -1, -2) @ g if n[1] else None
        return ga, gb

    return _emit("matmul", ad @ bd, (a, b), vjp)


def linear(x, w, b):
    """``x @ w + b`` over the last axis of ``x``; ``w`` is (d_in, d_out)."""
    if w.ndim != 2 or b.shape != (w.shape[1],):
        raise ShapeError(f"linear: bad weight/bias shapes {w.shape}, {b.shape}")
    return add_bias(matmul(x, w), b)


# --------------------------------------------------------------------------
# kernel-backed nonlinearities
# --------------------------------------------------------------------------

def softmax_rows(x):
    y = _kernels.softmax_fwd(x.data)
    return _emit("softmax_rows", y, (x,), lambda g, n: (_kernels.softmax_bwd(y, g),))


def layer_norm(x, gain, bias, eps=1e-5):
    if eps <= 0:
        raise ValueError("layer_norm: eps must be positive")
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: affine shapes {gain.shape}/{bias.shape} vs feature dim {d}")
    _same_dtype("layer_norm", x, gain, bias)
    y, xhat, rstd = _kernels.layernorm_fwd(x.data, gain.data, bias.data, eps)
    gd = gain.data

    def vjp(g, n):
        gx, ggain, gbias = _kernels.layernorm_bwd(g, xhat, rstd, gd)
        return gx, ggain, gbias

    return _emit("layer_norm", y, (x, gain, bias), vjp)


def gelu(x):
    xd = x.data
    return _emit("gelu", _kernels.gelu_fwd(xd), (x,), lambda g, n: (_kernels.gelu_bwd(xd, g),))


# --------------------------------------------------------------------------
# finite-difference oracle
# --------------------------------------------------------------------------

def grad_check(f, x, eps=1e-6, max_coords=None, rng=None):
    """Max relative error between tape gradients and central differences.

    ``f`` maps no arguments to a scalar Tensor and must read ``x`` (a Tensor or
    a sequence of Tensors) by reference. Error per coordinate is
    ``|a - n| / max(1, |a|, |n|)``. ``max_coords`` subsamples coordinates per
    tensor when set.
    """
    xs = [x] if isinstance(x, Tensor) else list(x)
    saved = [(t.requires_grad, t.grad) for t in xs]
    for t in xs:
        if not t.data.flags.c_contiguous:
            t.data = np.ascontiguousarray(t.data)
        t.requires_grad = True
        t.grad = None
    try:
        with GradTape() as tape:
            out = f()
            if out.size != 1:
                raise ShapeError("grad_check: f must return a scalar")
            tape.backward(out, leaves=xs)
        analytic = [t.grad.copy() for t in xs]
        worst = 0.0
        for t, ga in zip(xs, analytic):
            flat = t.data.reshape(-1)
            idx = np.arange(flat.size)
            if max_coords is not None and flat.size > max_coords:
                rng = rng or np.random.default_rng(0)
                idx = rng.choice(flat.size, size=max_coords, replace=False)
            gflat = ga.reshape(-1)
            for i in idx:
                orig = flat[i]
                flat[i] = orig + eps
                fp = float(f().data)
                flat[i] = orig - eps
                fm = float(f().data)
                flat[i] = orig
                num = (fp - fm) / (2 * eps)
                a = float(gflat[i])
                err = abs(a - num) / max(1.0, abs(a), abs(num))
                worst = max(worst, err)
        return worst
    finally:
        for t, (rg, g) in zip(xs, saved):
            t.requires_grad = rg
            t.grad = g
