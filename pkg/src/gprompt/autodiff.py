"""Dense 2-D tensors with a reverse-mode gradient tape.

Ops run eagerly on numpy arrays. When a :class:`Tape` is active and at least
one input requires a gradient, the op is appended to the tape together with a
closure mapping the upstream gradient to input gradients. Outside a tape the
same code path is plain inference.

    >>> w = Tensor([[2.0]], requires_grad=True)
    >>> with Tape() as tape:
    ...     y = mul(w, w)
    >>> tape.gradients(y, [w])[0]
    array([[4.]])
"""

from __future__ import annotations

import math

import numpy as np

from .errors import FrozenModelError, LabelError, NumericError, ShapeError

PROB_EPS = 1e-7

_TAPES: list["Tape"] = []


class Tensor:
    __slots__ = ("value", "requires_grad", "grad", "name", "frozen")

    def __init__(self, value, requires_grad=False, name=None):
        arr = np.array(value, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        self.value = arr
        self.requires_grad = requires_grad
        self.grad = None
        self.name = name
        self.frozen = False

    @property
    def shape(self):
        return self.value.shape

    def item(self):
        if self.value.size != 1:
            raise ShapeError(f"item() needs a single value, got shape {self.shape}")
        return float(self.value.reshape(-1)[0])

    def numpy(self):
        return self.value

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def parameter(value, name=None):
    return Tensor(value, requires_grad=True, name=name)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """Records primitive ops in execution order; replays them backwards."""

    def __init__(self):
        self.ops = []

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.remove(self)
        return False

    def record(self, out, inputs, backward):
        self.ops.append((out, inputs, backward))

    def backward(self, loss, seed=None):
        """Propagate from ``loss``; returns {id(tensor): grad} for every reached tensor."""
        grads = {id(loss): np.ones_like(loss.value) if seed is None else np.asarray(seed, dtype=np.float64)}
        for out, inputs, fn in reversed(self.ops):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for inp, gi in zip(inputs, fn(g)):
                if gi is None or not inp.requires_grad:
                    continue
                if gi.shape != inp.shape:
                    raise ShapeError(f"gradient shape {gi.shape} does not match input {inp.shape}")
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        return grads

    def gradients(self, loss, params):
        """Gradients of ``loss`` for ``params`` (zeros where unreached); also stored on ``.grad``."""
        grads = self.backward(loss)
        out = []
        for p in params:
            g = grads.get(id(p))
            if g is None:
                g = np.zeros_like(p.value)
            p.grad = g
            out.append(g)
        return out


def _make(value, inputs, backward, op):
    # the sum is non-finite whenever an entry is; recheck entrywise only then
    if not np.isfinite(value.sum()) and not np.all(np.isfinite(value)):
        raise NumericError(f"non-finite value produced by {op}")
    out = Tensor.__new__(Tensor)
    out.value = value
    out.grad = None
    out.name = None
    out.frozen = False
    out.requires_grad = False
    if _TAPES and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        _TAPES[-1].record(out, inputs, backward)
    return out


def _broadcast_shape(a, b, op):
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"{op}: expected 2-D operands, got {a.shape} and {b.shape}")
    shape = []
    for da, db in zip(a.shape, b.shape):
        if da == db or db == 1:
            shape.append(da)
        elif da == 1:
            shape.append(db)
        else:
            raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} are not compatible")
    return tuple(shape)


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    return g.sum(axis=axes, keepdims=True)


# ---- primitives ----

def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.value, b.value
    if av.ndim != 2 or bv.ndim != 2 or av.shape[1] != bv.shape[0]:
        raise ShapeError(f"matmul: shapes {av.shape} and {bv.shape} are not aligned")
    return _make(av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g), "matmul")


def sparse_matmul(S, b):
    """``S @ b`` for a constant scipy sparse ``S``; gradient flows to ``b`` only."""
    b = as_tensor(b)
    if S.shape[1] != b.shape[0]:
        raise ShapeError(f"sparse_matmul: shapes {S.shape} and {b.shape} are not aligned")
    return _make(np.asarray(S @ b.value), (b,), lambda g: (np.asarray(S.T @ g),), "sparse_matmul")


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.value, b.value, "add")
    sa, sb = a.shape, b.shape
    return _make(a.value + b.value, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.value, b.value, "sub")
    sa, sb = a.shape, b.shape
    return _make(a.value - b.value, (a, b),
                 lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)), "sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.value, b.value, "mul")
    av, bv = a.value, b.value
    return _make(av * bv, (a, b),
                 lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)), "mul")


def scale(a, c):
    a = as_tensor(a)
    c = float(c)
    return _make(a.value * c, (a,), lambda g: (g * c,), "scale")


def row_softmax(a):
    a = as_tensor(a)
    z = a.value - a.value.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=1, keepdims=True)
    return _make(s, (a,), lambda g: (s * (g - (g * s).sum(axis=1, keepdims=True)),), "row_softmax")


def log_softmax(a):
    a = as_tensor(a)
    z = a.value - a.value.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    out = z - lse
    s = np.exp(out)
    return _make(out, (a,), lambda g: (g - s * g.sum(axis=1, keepdims=True),), "log_softmax")


def relu(a):
    a = as_tensor(a)
    mask = a.value > 0
    return _make(a.value * mask, (a,), lambda g: (g * mask,), "relu")


def sigmoid(a):
    a = as_tensor(a)
    x = a.value
    s = np.empty_like(x)
    pos = x >= 0
    s[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    s[~pos] = ex / (1.0 + ex)
    return _make(s, (a,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def softplus(a):
    """``log(1 + exp(a))`` without overflow."""
    a = as_tensor(a)
    x = a.value
    out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    s = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    return _make(out, (a,), lambda g: (g * s,), "softplus")


def exp(a):
    a = as_tensor(a)
    e = np.exp(a.value)
    return _make(e, (a,), lambda g: (g * e,), "exp")


def log(a):
    a = as_tensor(a)
    x = a.value
    if np.any(x <= 0):
        raise NumericError("log of non-positive value")
    return _make(np.log(x), (a,), lambda g: (g / x,), "log")


def square(a):
    a = as_tensor(a)
    x = a.value
    return _make(x * x, (a,), lambda g: (2.0 * g * x,), "square")


def mean(a):
    a = as_tensor(a)
    n = a.value.size
    shape = a.shape
    return _make(np.array([[a.value.mean()]]), (a,), lambda g: (np.full(shape, g.item() / n),), "mean")


def total(a):
    a = as_tensor(a)
    shape = a.shape
    return _make(np.array([[a.value.sum()]]), (a,), lambda g: (np.full(shape, g.item()),), "sum")


def sum_rows(a):
    """Sum over the row axis: R x C -> 1 x C."""
    a = as_tensor(a)
    shape = a.shape
    return _make(a.value.sum(axis=0, keepdims=True), (a,),
                 lambda g: (np.broadcast_to(g, shape).copy(),), "sum_rows")


def sum_cols(a):
    """Sum over the column axis: R x C -> R x 1."""
    a = as_tensor(a)
    shape = a.shape
    return _make(a.value.sum(axis=1, keepdims=True), (a,),
                 lambda g: (np.broadcast_to(g, shape).copy(),), "sum_cols")


def concat_rows(parts):
    parts = [as_tensor(p) for p in parts]
    cols = {p.shape[1] for p in parts}
    if len(cols) != 1:
        raise ShapeError(f"concat_rows: column counts differ {[p.shape for p in parts]}")
    bounds = np.cumsum([0] + [p.shape[0] for p in parts])

    def back(g):
        return tuple(g[bounds[i]:bounds[i + 1]] for i in range(len(parts)))

    return _make(np.vstack([p.value for p in parts]), tuple(parts), back, "concat_rows")


def take_rows(a, idx):
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.int64)
    shape = a.shape

    def back(g):
        out = np.zeros(shape)
        np.add.at(out, idx, g)
        return (out,)

    return _make(a.value[idx], (a,), back, "take_rows")


def reshape(a, shape):
    a = as_tensor(a)
    old = a.shape
    try:
        v = a.value.reshape(shape)
    except ValueError as e:
        raise ShapeError(f"reshape: cannot view {old} as {shape}") from e
    return _make(v, (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a):
    a = as_tensor(a)
    return _make(a.value.T.copy(), (a,), lambda g: (g.T,), "transpose")


def clamp(a, lo, hi):
    a = as_tensor(a)
    x = a.value
    inside = (x >= lo) & (x <= hi)
    return _make(np.clip(x, lo, hi), (a,), lambda g: (g * inside,), "clamp")


def minimum(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"minimum: shapes {a.shape} and {b.shape} differ")
    pick_a = a.value <= b.value
    return _make(np.where(pick_a, a.value, b.value), (a, b),
                 lambda g: (g * pick_a, g * ~pick_a), "minimum")


def dropout(a, rate, seed=None, training=True):
    """Inverted dropout; identity when not training or rate == 0.

    ``seed`` may be an int or a ``numpy.random.Generator``.
    """
    a = as_tensor(a)
    if not training or rate <= 0.0:
        return a
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    keep = (rng.random(a.shape) >= rate) / (1.0 - rate)
    return _make(a.value * keep, (a,), lambda g: (g * keep,), "dropout")


# ---- losses ----

def bce(probs, labels):
    probs = as_tensor(probs)
    y = np.asarray(labels, dtype=np.float64).reshape(probs.shape)
    if not np.all((y == 0) | (y == 1)):
        raise LabelError("bce labels must be 0 or 1")
    p = clamp(probs, PROB_EPS, 1.0 - PROB_EPS)
    ll = add(mul(log(p), y), mul(log(sub(1.0, p)), 1.0 - y))
    return scale(mean(ll), -1.0)


def bce_with_logits(logits, labels):
    """BCE on raw scores: ``mean(softplus(s) - y s)``; no clamp, so saturated scores keep a gradient."""
    logits = as_tensor(logits)
    y = np.asarray(labels, dtype=np.float64).reshape(logits.shape)
    if not np.all((y == 0) | (y == 1)):
        raise LabelError("bce labels must be 0 or 1")
    return mean(sub(softplus(logits), mul(logits, y)))


def _check_classes(labels, num_classes):
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    if np.any(y < 0) or np.any(y >= num_classes):
        raise LabelError(f"class labels must lie in [0, {num_classes}), got {sorted(set(y.tolist()))}")
    return y


def cross_entropy(logits, labels):
    logits = as_tensor(logits)
    n, c = logits.shape
    y = _check_classes(labels, c)
    if y.size != n:
        raise ShapeError(f"cross_entropy: {n} rows of logits but {y.size} labels")
    onehot = np.zeros((n, c))
    onehot[np.arange(n), y] = 1.0
    return scale(total(mul(log_softmax(logits), onehot)), -1.0 / n)


def per_sample_cross_entropy(logits, labels):
    """Untaped per-row cross-entropy, used for reward computation."""
    v = logits.value if isinstance(logits, Tensor) else np.asarray(logits, dtype=np.float64)
    y = _check_classes(labels, v.shape[1])
    z = v - v.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    return lse - z[np.arange(len(y)), y]


def mse(pred, target):
    return mean(square(sub(pred, target)))


# ---- verification ----

def grad_check(fn, params, h=1e-5):
    """Max relative error between tape and central-difference gradients.

    ``fn`` takes no arguments and returns a 1x1 tensor built from ``params``.
    The error per coordinate is ``|g_ad - g_fd| / max(1, |g_ad|, |g_fd|)``.
    """
    if not 1e-6 <= h <= 1e-4:
        raise ValueError(f"step h must lie in [1e-6, 1e-4], got {h}")
    with Tape() as tape:
        out = fn()
    analytic = tape.gradients(out, params)
    worst = 0.0
    for p, g_ad in zip(params, analytic):
        flat = p.value.reshape(-1)
        g_flat = g_ad.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            f_plus = fn().item()
            flat[i] = orig - h
            f_minus = fn().item()
            flat[i] = orig
            if not (math.isfinite(f_plus) and math.isfinite(f_minus)):
                raise NumericError("non-finite function value during grad_check")
            g_fd = (f_plus - f_minus) / (2.0 * h)
            err = abs(g_flat[i] - g_fd) / max(1.0, abs(g_flat[i]), abs(g_fd))
            worst = max(worst, err)
    return worst


# ---- optimizers ----

class SGD:
    def __init__(self, params, lr, momentum=0.0, weight_decay=0.0):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self._velocity = [np.zeros_like(p.value) for p in self.params]

    def step(self, grads):
        for p, g, v in zip(self.params, grads, self._velocity):
            if p.frozen:
                raise FrozenModelError(f"parameter {p.name or '?'} is frozen")
            if self.weight_decay:
                g = g + self.weight_decay * p.value
            if self.momentum:
                v *= self.momentum
                v += g
                g = v
            p.value -= self.lr * g


class Adam:
    def __init__(self, params, lr, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self._m = [np.zeros_like(p.value) for p in self.params]
        self._v = [np.zeros_like(p.value) for p in self.params]

    def step(self, grads):
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, g, m, v in zip(self.params, grads, self._m, self._v):
            if p.frozen:
                raise FrozenModelError(f"parameter {p.name or '?'} is frozen")
            if self.weight_decay:
                g = g + self.weight_decay * p.value
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p.value -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def make_optimizer(kind, params, lr, momentum=0.9, weight_decay=0.0):
    if kind == "sgd":
        return SGD(params, lr, weight_decay=weight_decay)
    if kind == "momentum":
        return SGD(params, lr, momentum=momentum, weight_decay=weight_decay)
    if kind == "adam":
        return Adam(params, lr, weight_decay=weight_decay)
    raise ValueError(f"unknown optimizer {kind!r}")
