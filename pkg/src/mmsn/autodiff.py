"""Dense float64 arrays with tape-based reverse-mode differentiation.

Every op builds its result through :func:`_record`, which checks finiteness
and, when gradients are enabled, stores the parents and a closure mapping
the output gradient to the input gradients. :func:`backward` walks the
recorded DAG once in reverse topological order and then consumes it.
"""
from __future__ import annotations

import contextlib
import math
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractError, NumericError

_GRAD_ENABLED = True
_KINK_MONITOR = None


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class KinkMonitor:
    """Tracks the smallest |pre-activation| seen by ReLU while active."""

    def __init__(self):
        self.margin = math.inf

    def observe(self, x):
        if x.size:
            self.margin = min(self.margin, float(np.min(np.abs(x))))


@contextlib.contextmanager
def kink_monitor():
    global _KINK_MONITOR
    prev = _KINK_MONITOR
    mon = KinkMonitor()
    _KINK_MONITOR = mon
    try:
        yield mon
    finally:
        _KINK_MONITOR = prev


class Tensor:
    """A float64 ndarray plus the bookkeeping needed for reverse mode."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward", "_op", "_consumed")
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, name=None):
        arr = np.array(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NumericError(f"non-finite entries in tensor {name or ''}".strip())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name
        self._parents = ()
        self._backward = None
        self._op = "leaf"
        self._consumed = False

    # -- introspection -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def is_leaf(self):
        return self._backward is None

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"

    def __len__(self):
        return self.data.shape[0]

    # -- operator sugar ------------------------------------------------
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
        if isinstance(other, Tensor):
            raise ContractError("division by a tensor is not supported")
        return mul(self, 1.0 / float(other))

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    @property
    def T(self):
        return transpose(self)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(data, parents, backward_fn, op):
    if not np.all(np.isfinite(data)):
        raise NumericError(f"non-finite result in op '{op}'")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out._op = op
    out._consumed = False
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` undoing numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


def _broadcast_shape(a, b, op):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ContractError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# -- elementwise ---------------------------------------------------------
def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _record(a.data + b.data, (a, b), bw, "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")

    def bw(g):
        return _unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)

    return _record(a.data - b.data, (a, b), bw, "sub")


def mul(a, b):
    """Elementwise product; ``b`` may be a python scalar."""
    if not isinstance(b, Tensor) and np.ndim(b) == 0:
        s = float(b)
        a = as_tensor(a)
        return _record(a.data * s, (a,), lambda g: (g * s,), "scale")
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _record(a.data * b.data, (a, b), bw, "mul")


def relu(x):
    x = as_tensor(x)
    if _KINK_MONITOR is not None:
        _KINK_MONITOR.observe(x.data)
    mask = x.data > 0
    return _record(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


def sigmoid(x):
    x = as_tensor(x)
    y = _sigmoid(x.data)
    return _record(y, (x,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


# -- linear algebra ------------------------------------------------------
def matmul(a, b):
    """``np.matmul`` semantics for operands with ndim >= 2 (batch dims broadcast)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ContractError(f"matmul needs ndim >= 2, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ContractError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ContractError(f"matmul: batch dims differ, {a.shape} @ {b.shape}") from None

    def bw(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _record(np.matmul(a.data, b.data), (a, b), bw, "matmul")


def transpose(x):
    """Swap the last two axes."""
    x = as_tensor(x)
    if x.ndim < 2:
        raise ContractError("transpose needs ndim >= 2")
    return _record(np.swapaxes(x.data, -1, -2), (x,), lambda g: (np.swapaxes(g, -1, -2),), "transpose")


def reshape(x, shape):
    x = as_tensor(x)
    try:
        y = x.data.reshape(shape)
    except ValueError:
        raise ContractError(f"cannot reshape {x.shape} to {shape}") from None
    return _record(y, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def sym_inv_sqrt(a, eps=1e-8):
    """Inverse square root of a batch of symmetric matrices.

    Eigenvalues are clamped to ``>= eps`` before inversion. The backward pass
    uses the divided-difference (Daleckii-Krein) formula for matrix functions.
    """
    a = as_tensor(a)
    if a.ndim < 2 or a.shape[-1] != a.shape[-2]:
        raise ContractError(f"sym_inv_sqrt needs square trailing dims, got {a.shape}")
    sym = 0.5 * (a.data + np.swapaxes(a.data, -1, -2))
    w, q = np.linalg.eigh(sym)
    wc = np.maximum(w, eps)
    f = wc ** -0.5
    y = np.matmul(q * f[..., None, :], np.swapaxes(q, -1, -2))

    def bw(g):
        gs = 0.5 * (g + np.swapaxes(g, -1, -2))
        m = np.matmul(np.swapaxes(q, -1, -2), np.matmul(gs, q))
        fprime = np.where(w > eps, -0.5 * wc ** -1.5, 0.0)
        dw = w[..., :, None] - w[..., None, :]
        df = f[..., :, None] - f[..., None, :]
        scale = np.maximum(np.abs(w[..., :, None]), np.abs(w[..., None, :]))
        close = np.abs(dw) <= 1e-12 * np.maximum(scale, 1.0)
        k = np.where(close, 0.5 * (fprime[..., :, None] + fprime[..., None, :]),
                     df / np.where(close, 1.0, dw))
        ga = np.matmul(q, np.matmul(k * m, np.swapaxes(q, -1, -2)))
        return (ga,)

    return _record(y, (a,), bw, "sym_inv_sqrt")


# -- reductions ----------------------------------------------------------
def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum_(x, axis=None, keepdims=False):
    x = as_tensor(x)
    axes = _norm_axis(axis, x.ndim)
    y = x.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _record(np.asarray(y, dtype=np.float64), (x,), bw, "sum")


def mean(x, axis=None, keepdims=False):
    x = as_tensor(x)
    axes = _norm_axis(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    return mul(sum_(x, axis=axis, keepdims=keepdims), 1.0 / count)


def softmax(x, axis=-1):
    """Numerically stable softmax along ``axis`` (rows by default)."""
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _record(y, (x,), bw, "softmax")


def squared_error(pred, target):
    """Sum of squared differences, a scalar."""
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise ContractError(f"squared_error: shapes differ {pred.shape} vs {target.shape}")
    diff = pred.data - target.data

    def bw(g):
        return 2.0 * g * diff, -2.0 * g * diff

    return _record(np.asarray(np.sum(diff * diff)), (pred, target), bw, "squared_error")


def bce_with_logits(logits, targets):
    """Mean binary cross-entropy over every entry, computed from logits."""
    logits = as_tensor(logits)
    t = np.asarray(targets.data if isinstance(targets, Tensor) else targets, dtype=np.float64)
    if t.shape != logits.shape:
        raise ContractError(f"bce_with_logits: shapes differ {logits.shape} vs {t.shape}")
    x = logits.data
    n = x.size
    loss = np.maximum(x, 0.0) - x * t + np.log1p(np.exp(-np.abs(x)))

    def bw(g):
        return (g * (_sigmoid(x) - t) / n,)

    return _record(np.asarray(loss.mean()), (logits,), bw, "bce_with_logits")


# -- structural ----------------------------------------------------------
def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    try:
        y = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ContractError(f"concat: {exc}") from None
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return _record(y, tensors, bw, "concat")


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    try:
        y = np.stack([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ContractError(f"stack: {exc}") from None

    def bw(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _record(y, tensors, bw, "stack")


def take(x, index, axis=0):
    """Gather slices of ``x`` along ``axis`` (index may repeat)."""
    x = as_tensor(x)
    index = np.asarray(index, dtype=np.intp)
    axis = axis % x.ndim
    if index.size and (index.min() < 0 or index.max() >= x.shape[axis]):
        raise ContractError("take: index out of range")

    def bw(g):
        out = np.zeros_like(x.data)
        np.add.at(np.moveaxis(out, axis, 0), index, np.moveaxis(g, axis, 0))
        return (out,)

    return _record(np.take(x.data, index, axis=axis), (x,), bw, "take")


def index_add(x, index, size, axis=0):
    """Scatter-add slices of ``x`` into a zero array with ``size`` slots on ``axis``."""
    x = as_tensor(x)
    index = np.asarray(index, dtype=np.intp)
    axis = axis % x.ndim
    if index.shape != (x.shape[axis],):
        raise ContractError("index_add: index length must match the scattered axis")
    if index.size and (index.min() < 0 or index.max() >= size):
        raise ContractError("index_add: index out of range")
    shape = list(x.shape)
    shape[axis] = size
    out = np.zeros(shape)
    np.add.at(np.moveaxis(out, axis, 0), index, np.moveaxis(x.data, axis, 0))
    return _record(out, (x,), lambda g: (np.take(g, index, axis=axis),), "index_add")


# -- reverse pass --------------------------------------------------------
def _topological(root):
    order, seen = [], set()
    stack_ = [(root, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack_.append((p, False))
    return order


def backward(loss, params=None):
    """Propagate d(loss)/d(leaf) into every leaf's ``.grad``.

    When ``params`` is given its gradient slots are zeroed first, so after the
    call they hold exactly the gradient of ``loss``. The tape is consumed: a
    second call over any part of it raises :class:`ContractError`.
    """
    if not isinstance(loss, Tensor) or loss.size != 1:
        raise ContractError("backward needs a scalar tensor")
    if loss._consumed:
        raise ContractError("tape already consumed by a previous backward pass")
    if params is not None:
        params.zero_grad()
    if not loss.requires_grad:
        return
    order = _topological(loss)
    for node in order:
        if node._consumed:
            raise ContractError("tape already consumed by a previous backward pass")
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if node._backward is None:
            if g is not None:
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        if g is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if pg.shape != parent.shape:
                pg = pg.reshape(parent.shape)
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg
    for node in order:
        if node._backward is not None:
            node._backward = None
            node._parents = ()
            node._consumed = True
    loss._consumed = True


# -- parameters and optimisation ------------------------------------------
def glorot_uniform(rng, shape, fan_in=None, fan_out=None):
    """uniform(-a, a) with a = sqrt(6 / (fan_in + fan_out))."""
    fan_in = shape[-2] if fan_in is None else fan_in
    fan_out = shape[-1] if fan_out is None else fan_out
    a = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=shape)


class ParamStore:
    """Named trainable tensors with gradient and Adam moment slots."""

    def __init__(self):
        self._params = OrderedDict()
        self.m = {}
        self.v = {}
        self.step = 0

    def add(self, name, value):
        if name in self._params:
            raise ContractError(f"duplicate parameter name '{name}'")
        t = Tensor(value, requires_grad=True, name=name)
        t.grad = np.zeros_like(t.data)
        self._params[name] = t
        self.m[name] = np.zeros_like(t.data)
        self.v[name] = np.zeros_like(t.data)
        return t

    def __getitem__(self, name):
        return self._params[name]

    def __contains__(self, name):
        return name in self._params

    def __iter__(self):
        return iter(self._params)

    def __len__(self):
        return len(self._params)

    def items(self):
        return self._params.items()

    def names(self):
        return list(self._params)

    def zero_grad(self):
        for t in self._params.values():
            t.grad = np.zeros_like(t.data)

    def grads(self):
        return {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in self._params.items()}

    def state(self):
        """Copy of the parameter values keyed by name."""
        return OrderedDict((k, t.data.copy()) for k, t in self._params.items())

    def load_state(self, state):
        for k, arr in state.items():
            if k not in self._params:
                raise ContractError(f"unknown parameter '{k}'")
            if np.shape(arr) != self._params[k].shape:
                raise ContractError(f"shape mismatch for '{k}'")
            self._params[k].data = np.array(arr, dtype=np.float64)

    def num_values(self):
        return sum(t.size for t in self._params.values())


@dataclass
class AdamConfig:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(params, lr, cfg=AdamConfig()):
    """One bias-corrected Adam update using the stored gradients."""
    if not lr > 0:
        raise ConfigError(f"learning rate must be positive, got {lr}")
    params.step += 1
    t = params.step
    c1 = 1.0 - cfg.beta1 ** t
    c2 = 1.0 - cfg.beta2 ** t
    for name, p in params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        m = params.m[name]
        v = params.v[name]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * g * g
        update = lr * (m / c1) / (np.sqrt(v / c2) + cfg.eps)
        if not np.all(np.isfinite(update)):
            raise NumericError(f"non-finite Adam update for '{name}'")
        p.data = p.data - update
    return params


# -- finite differences ----------------------------------------------------
@dataclass
class GradCheckReport:
    tol: float
    h: float
    max_rel_error: dict = field(default_factory=dict)
    passed: dict = field(default_factory=dict)
    kink_margin: float = math.inf

    @property
    def ok(self):
        return all(self.passed.values())

    @property
    def worst(self):
        return max(self.max_rel_error.values(), default=0.0)

    def near_kink(self, kink_tol=1e-6):
        return self.kink_margin < kink_tol

    def lines(self):
        for name, err in self.max_rel_error.items():
            yield f"{'PASS' if self.passed[name] else 'FAIL'} {name} max_rel_err={err:.3e}"


def finite_diff_check(loss_fn, params, h=1e-5, tol=1e-4, names=None, analytic=None,
                      atol=1e-7, max_entries=None, rng=None):
    """Compare analytic gradients with central differences, parameter by parameter.

    ``loss_fn`` takes no arguments and returns a scalar Tensor built from
    ``params``. The relative error of one entry is
    ``|a - n| / max(|a|, |n|, atol)``. ``analytic`` overrides the backward pass
    (used to check that a wrong gradient is caught). ``max_entries`` samples a
    subset of coordinates per parameter with ``rng``.
    """
    if not h > 0:
        raise ConfigError("finite-difference step must be positive")
    names = params.names() if names is None else list(names)
    report = GradCheckReport(tol=tol, h=h)
    if analytic is None:
        with kink_monitor() as mon:
            loss = loss_fn()
        backward(loss, params)
        analytic = {k: params[k].grad.copy() for k in names}
        report.kink_margin = mon.margin
    with no_grad():
        for name in names:
            p = params[name]
            flat = p.data.reshape(-1)
            idx = np.arange(flat.size)
            if max_entries is not None and flat.size > max_entries:
                rng = rng or np.random.default_rng(0)
                idx = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
            a_flat = np.asarray(analytic[name]).reshape(-1)
            worst = 0.0
            for i in idx:
                orig = flat[i]
                flat[i] = orig + h
                fp = loss_fn().item()
                flat[i] = orig - h
                fm = loss_fn().item()
                flat[i] = orig
                num = (fp - fm) / (2.0 * h)
                a = a_flat[i]
                err = abs(a - num) / max(abs(a), abs(num), atol)
                worst = max(worst, err)
            report.max_rel_error[name] = worst
            report.passed[name] = worst <= tol
    return report
