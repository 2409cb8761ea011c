"""Dense float64 tensors with reverse-mode automatic differentiation.

Every operation whose inputs require gradients appends one node to the
active tape (one tape per thread). Ops execute after their inputs exist, so
the recording order is a topological order of the graph and a single reverse
sweep visits every node exactly once.

The op set is only what a small transformer pipeline needs. Elementwise ops
broadcast by numpy rules and gradients are un-broadcast by summation; beyond
that no general numpy surface is attempted. Tensors are treated as immutable
once produced by an op; the optimizer and the finite-difference checker are
the only places that write ``.data`` in place, and both own their tensors at
that point.
"""

from __future__ import annotations

import math
import threading
from contextlib import contextmanager

import numpy as np

DTYPE = np.float64


class ShapeError(ValueError):
    """Operand shapes do not conform for an op."""


class AutogradError(RuntimeError):
    """Misuse of the tape or a non-finite value where one is forbidden."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.size == 1 else _fail("item", "tensor is not scalar, shape %s" % (self.shape,))

    def detach(self):
        """Stop-gradient view: same buffer, no grad participation."""
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def backward(self, params=None):
        backward(self, params=params)

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return neg(self)

    def __getitem__(self, key):
        return getitem(self, key)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return "Tensor(shape=%s%s)" % (self.shape, flag)


class Tape:
    """Ordered record of executed ops; reverse iteration is reverse-topological."""

    __slots__ = ("nodes", "_produced")

    def __init__(self):
        self.nodes = []
        self._produced = set()

    def record(self, out, parents, backward_fn):
        self.nodes.append((out, parents, backward_fn))
        self._produced.add(id(out))

    def clear(self):
        self.nodes.clear()
        self._produced.clear()

    def __len__(self):
        return len(self.nodes)


_state = threading.local()


def tape():
    """The current thread's tape, created on first use."""
    tp = getattr(_state, "tape", None)
    if tp is None:
        tp = Tape()
        _state.tape = tp
    return tp


def clear_tape():
    tape().clear()


@contextmanager
def scoped_tape():
    """Run with a fresh tape, restoring the previous one afterwards."""
    old = getattr(_state, "tape", None)
    _state.tape = Tape()
    try:
        yield _state.tape
    finally:
        _state.tape = old


def grad_enabled():
    return getattr(_state, "grad_enabled", True)


@contextmanager
def no_grad():
    old = grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = old


def _fail(op, msg):
    raise ShapeError("%s: %s" % (op, msg))


def _coerce(x):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=DTYPE))


def _record(out, parents, backward_fn):
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        tape().record(out, parents, backward_fn)
    return out


def _unbroadcast(g, shape):
    """Sum gradient over axes that were added or expanded by broadcasting."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gd, sd) in enumerate(zip(g.shape, shape)) if sd == 1 and gd != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def backward(loss, params=None):
    """Populate ``.grad`` on every requires-grad leaf below ``loss``.

    Leaves that appear on the tape but are unreachable from ``loss`` receive
    an explicit zero gradient. If ``params`` is given, those tensors get a
    zero gradient even when they never appeared on the tape at all.
    """
    if loss.size != 1:
        raise AutogradError("backward: loss must be scalar, got shape %s" % (loss.shape,))
    tp = tape()
    grads = {id(loss): np.ones_like(loss.data)}
    leaves = {}
    for out, parents, backward_fn in reversed(tp.nodes):
        for p in parents:
            if p.requires_grad and id(p) not in tp._produced:
                leaves.setdefault(id(p), p)
        g = grads.pop(id(out), None)
        if g is None:
            continue
        for p, pg in zip(parents, backward_fn(g)):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    for key, leaf in leaves.items():
        g = grads.get(key)
        leaf.grad = np.zeros_like(leaf.data) if g is None else g
    if params is not None:
        for p in params:
            if p.requires_grad and p.grad is None:
                p.grad = np.zeros_like(p.data)


# ---------------------------------------------------------------------------
# elementwise / arithmetic


def add(a, b):
    a, b = _coerce(a), _coerce(b)
    try:
        out = Tensor(a.data + b.data)
    except ValueError:
        _fail("add", "shapes %s and %s not broadcastable" % (a.shape, b.shape))
    return _record(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b):
    a, b = _coerce(a), _coerce(b)
    try:
        out = Tensor(a.data - b.data)
    except ValueError:
        _fail("sub", "shapes %s and %s not broadcastable" % (a.shape, b.shape))
    return _record(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b):
    a, b = _coerce(a), _coerce(b)
    try:
        out = Tensor(a.data * b.data)
    except ValueError:
        _fail("mul", "shapes %s and %s not broadcastable" % (a.shape, b.shape))

    def bfn(g):
        return (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape))

    return _record(out, (a, b), bfn)


def div(a, b):
    a, b = _coerce(a), _coerce(b)
    try:
        out = Tensor(a.data / b.data)
    except ValueError:
        _fail("div", "shapes %s and %s not broadcastable" % (a.shape, b.shape))

    def bfn(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return (ga, gb)

    return _record(out, (a, b), bfn)


def neg(a):
    a = _coerce(a)
    return _record(Tensor(-a.data), (a,), lambda g: (-g,))


def matmul(a, b):
    a, b = _coerce(a), _coerce(b)
    if a.ndim < 2 or b.ndim < 2:
        _fail("matmul", "operands must have ndim >= 2, got %s and %s" % (a.shape, b.shape))
    if a.shape[-1] != b.shape[-2]:
        _fail("matmul", "inner dims differ: %s vs %s" % (a.shape, b.shape))
    try:
        out = Tensor(a.data @ b.data)
    except ValueError:
        _fail("matmul", "batch dims of %s and %s not broadcastable" % (a.shape, b.shape))

    def bfn(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return (ga, gb)

    return _record(out, (a, b), bfn)


# ---------------------------------------------------------------------------
# shape ops


def transpose(a, axes=None):
    a = _coerce(a)
    out = Tensor(np.transpose(a.data, axes))
    if axes is None:
        inv = None
    else:
        inv = tuple(np.argsort(axes))
    return _record(out, (a,), lambda g: (np.transpose(g, inv),))


def reshape(a, shape):
    a = _coerce(a)
    try:
        out = Tensor(a.data.reshape(shape))
    except ValueError:
        _fail("reshape", "cannot reshape %s to %s" % (a.shape, shape))
    return _record(out, (a,), lambda g: (g.reshape(a.shape),))


def broadcast_to(a, shape):
    a = _coerce(a)
    try:
        out = Tensor(np.broadcast_to(a.data, shape).copy())
    except ValueError:
        _fail("broadcast_to", "cannot broadcast %s to %s" % (a.shape, shape))
    return _record(out, (a,), lambda g: (_unbroadcast(g, a.shape),))


def concatenate(tensors, axis=0):
    ts = [_coerce(t) for t in tensors]
    if not ts:
        _fail("concatenate", "empty tensor list")
    try:
        out = Tensor(np.concatenate([t.data for t in ts], axis=axis))
    except ValueError:
        _fail("concatenate", "shapes %s do not align on axis %d" % ([t.shape for t in ts], axis))
    sizes = [t.shape[axis] for t in ts]
    bounds = np.cumsum([0] + sizes)

    def bfn(g):
        g = np.moveaxis(g, axis, 0)
        return tuple(np.moveaxis(g[bounds[i]:bounds[i + 1]], 0, axis) for i in range(len(ts)))

    return _record(out, tuple(ts), bfn)


def stack(tensors, axis=0):
    ts = [_coerce(t) for t in tensors]
    if not ts:
        _fail("stack", "empty tensor list")
    shapes = {t.shape for t in ts}
    if len(shapes) != 1:
        _fail("stack", "mismatched shapes %s" % shapes)
    out = Tensor(np.stack([t.data for t in ts], axis=axis))

    def bfn(g):
        g = np.moveaxis(g, axis, 0)
        return tuple(g[i] for i in range(len(ts)))

    return _record(out, tuple(ts), bfn)


def getitem(a, key):
    a = _coerce(a)
    out = Tensor(np.array(a.data[key]))

    def bfn(g):
        z = np.zeros_like(a.data)
        np.add.at(z, key, g)
        return (z,)

    return _record(out, (a,), bfn)


def gather(a, indices, axis=0):
    """Select rows by integer index along axis 0 (embedding-style lookup)."""
    a = _coerce(a)
    if axis != 0:
        _fail("gather", "only axis=0 is supported")
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        _fail("gather", "index out of range for first dim %d" % a.shape[0])
    out = Tensor(a.data[idx])

    def bfn(g):
        z = np.zeros_like(a.data)
        np.add.at(z, idx, g)
        return (z,)

    return _record(out, (a,), bfn)


# ---------------------------------------------------------------------------
# reductions


def sum_(a, axis=None, keepdims=False):
    a = _coerce(a)
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims))

    def bfn(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _record(out, (a,), bfn)


def mean(a, axis=None, keepdims=False):
    a = _coerce(a)
    count = a.size if axis is None else np.prod([a.shape[ax] for ax in np.atleast_1d(axis)])
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / float(count))


def _extreme(a, axis, keepdims, op_name, np_fn, np_arg_fn):
    a = _coerce(a)
    data = np_fn(a.data, axis=axis, keepdims=keepdims)
    out = Tensor(data)

    def bfn(g):
        z = np.zeros_like(a.data)
        if axis is None:
            z.reshape(-1)[np_arg_fn(a.data)] = g
            return (z,)
        idx = np.expand_dims(np_arg_fn(a.data, axis=axis), axis)
        gg = g if keepdims else np.expand_dims(g, axis)
        np.put_along_axis(z, idx, gg, axis)
        return (z,)

    return _record(out, (a,), bfn)


def max_(a, axis=None, keepdims=False):
    """Max reduction; gradient flows to the first argmax position."""
    return _extreme(a, axis, keepdims, "max", np.max, np.argmax)


def min_(a, axis=None, keepdims=False):
    return _extreme(a, axis, keepdims, "min", np.min, np.argmin)


# ---------------------------------------------------------------------------
# nonlinearities


def log(a):
    a = _coerce(a)
    out = Tensor(np.log(a.data))
    return _record(out, (a,), lambda g: (g / a.data,))


def exp(a):
    a = _coerce(a)
    out = Tensor(np.exp(a.data))
    return _record(out, (a,), lambda g: (g * out.data,))


def sqrt(a):
    a = _coerce(a)
    out = Tensor(np.sqrt(a.data))
    return _record(out, (a,), lambda g: (g / (2.0 * out.data),))


def tanh(a):
    a = _coerce(a)
    out = Tensor(np.tanh(a.data))
    return _record(out, (a,), lambda g: (g * (1.0 - out.data * out.data),))


def relu(a):
    a = _coerce(a)
    out = Tensor(np.maximum(a.data, 0.0))
    return _record(out, (a,), lambda g: (g * (a.data > 0.0),))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a):
    """Gaussian error linear unit (tanh approximation)."""
    a = _coerce(a)
    x = a.data
    x2 = x * x
    inner = x2 * x
    inner *= 0.044715
    inner += x
    inner *= _GELU_C
    t = np.tanh(inner)
    out = Tensor(0.5 * x * (1.0 + t))

    def bfn(g):
        dy = 1.0 - t * t
        dy *= _GELU_C * (1.0 + 0.134145 * x2)
        dy *= 0.5 * x
        dy += 0.5 * (1.0 + t)
        return (g * dy,)

    return _record(out, (a,), bfn)


def softmax(a, axis=-1):
    """Numerically stable softmax; rows sum to 1 and are strictly positive."""
    a = _coerce(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(y)

    def bfn(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _record(out, (a,), bfn)


def log_softmax(a, axis=-1):
    a = _coerce(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    y = shifted - lse
    out = Tensor(y)

    def bfn(g):
        return (g - np.exp(y) * g.sum(axis=axis, keepdims=True),)

    return _record(out, (a,), bfn)


def layer_norm(a, gamma, beta, eps=1e-6):
    """Layer normalization over the last dimension with affine parameters."""
    a, gamma, beta = _coerce(a), _coerce(gamma), _coerce(beta)
    if gamma.shape != (a.shape[-1],) or beta.shape != (a.shape[-1],):
        _fail("layer_norm", "affine params %s/%s do not match last dim of %s" % (gamma.shape, beta.shape, a.shape))
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = Tensor(xhat * gamma.data + beta.data)

    def bfn(g):
        gg = g * gamma.data
        m1 = gg.mean(axis=-1, keepdims=True)
        m2 = (gg * xhat).mean(axis=-1, keepdims=True)
        ga = (gg - m1 - xhat * m2) * inv
        axes = tuple(range(g.ndim - 1))
        return (ga, (g * xhat).sum(axis=axes), g.sum(axis=axes))

    return _record(out, (a, gamma, beta), bfn)


def l2_normalize(a, axis=-1, eps=1e-12):
    """Scale rows to unit Euclidean norm; zero rows stay zero."""
    a = _coerce(a)
    norm = np.sqrt((a.data * a.data).sum(axis=axis, keepdims=True))
    denom = np.maximum(norm, eps)
    y = a.data / denom
    out = Tensor(y)

    def bfn(g):
        safe = norm > eps
        proj = (g - y * (g * y).sum(axis=axis, keepdims=True)) / denom
        return (np.where(safe, proj, g / eps),)

    return _record(out, (a,), bfn)


# ---------------------------------------------------------------------------
# verification harness


def finite_diff_check(f, params, eps=1e-5):
    """Max relative error between analytic and central-difference gradients.

    ``f`` maps the live ``params`` list to a scalar Tensor and must be
    deterministic. Parameters are perturbed in place and restored. The error
    for each coordinate is |analytic - numeric| / max(1, |numeric|).
    """
    if eps <= 0:
        raise ValueError("finite_diff_check: eps must be positive")
    params = list(params)
    with scoped_tape():
        for p in params:
            p.grad = None
        out = f(params)
        if out.size != 1:
            raise AutogradError("finite_diff_check: f must return a scalar")
        if not np.isfinite(out.data).all():
            raise AutogradError("finite_diff_check: non-finite function value")
        backward(out, params=params)
        analytic = [np.array(p.grad, dtype=DTYPE) for p in params]
    max_err = 0.0
    with no_grad():
        for p, an in zip(params, analytic):
            flat = p.data.reshape(-1)
            an_flat = an.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                hi = float(f(params).data)
                flat[i] = orig - eps
                lo = float(f(params).data)
                flat[i] = orig
                if not (math.isfinite(hi) and math.isfinite(lo)):
                    raise AutogradError("finite_diff_check: non-finite value during probing")
                numeric = (hi - lo) / (2.0 * eps)
                err = abs(an_flat[i] - numeric) / max(1.0, abs(numeric))
                if err > max_err:
                    max_err = err
    return max_err
