"""A small dense-tensor engine with reverse-mode differentiation.

Every op records its parents and a closure that pushes the output gradient
back to them. Broadcasting is limited to scalar operands and a trailing
row vector against a matrix; anything else must go through `broadcast_to`.
"""

from __future__ import annotations

import contextlib

import numpy as np
from scipy import sparse

_GRAD_ENABLED = True
_KINK_LOG = None  # list while record_kinks() is active


@contextlib.contextmanager
def no_grad():
    """Evaluate ops without recording the graph."""
    global _GRAD_ENABLED
    prev, _GRAD_ENABLED = _GRAD_ENABLED, False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


@contextlib.contextmanager
def record_kinks():
    """Collect the branch pattern of every non-smooth op (relu, abs, max_pool).

    Two evaluations with equal logs lie on the same smooth piece of the
    function, which is what a finite-difference comparison needs.
    """
    global _KINK_LOG
    prev, _KINK_LOG = _KINK_LOG, []
    try:
        yield _KINK_LOG
    finally:
        _KINK_LOG = prev


def _log_branch(pattern):
    if _KINK_LOG is not None:
        _KINK_LOG.append(np.ascontiguousarray(pattern).tobytes())


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad=False, _parents=(), op=""):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = None
        self.op = op

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    def numpy(self):
        return self.data

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        if self.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {self.shape}")
        order = _topological_order(self)
        for node in order:
            if node._parents:
                node.grad = None
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

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

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    @property
    def T(self):
        return transpose(self)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _topological_order(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _accumulate(t, g):
    if not t.requires_grad:
        return
    # gradients are never modified in place, so the first one can be stored as is
    if t.grad is None:
        t.grad = g
    else:
        t.grad = t.grad + g


def _make(data, parents, backward, op):
    parents = tuple(p for p in parents if p.requires_grad) if _GRAD_ENABLED else ()
    out = Tensor(data, requires_grad=bool(parents), _parents=parents, op=op)
    if parents:
        out._backward = backward
    return out


def _check_finite(data, op):
    if not np.all(np.isfinite(data)):
        raise FloatingPointError(f"non-finite values produced by {op}")


# ----------------------------------------------------------------------------
# elementwise binary ops


def _binary_shapes(a, b, op):
    sa, sb = a.shape, b.shape
    if sa == sb or a.size == 1 and a.ndim == 0 or b.size == 1 and b.ndim == 0:
        return
    if b.ndim == 1 and a.ndim >= 1 and sa[-1:] == sb:
        return
    if a.ndim == 1 and b.ndim >= 1 and sb[-1:] == sa:
        return
    raise ShapeError(f"{op}: incompatible shapes {sa} and {sb}")


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    if len(shape) == 0:
        return np.sum(g)
    # trailing row vector
    return np.sum(g.reshape(-1, shape[-1]), axis=0)


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b, "add")

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    return _make(a.data + b.data, (a, b), backward, "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b, "sub")

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, -_unbroadcast(g, b.shape))

    return _make(a.data - b.data, (a, b), backward, "sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b, "mul")

    def backward(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g * a.data, b.shape))

    return _make(a.data * b.data, (a, b), backward, "mul")


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b, "div")
    if np.any(b.data == 0):
        raise FloatingPointError("div: division by zero")
    out = a.data / b.data

    def backward(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(-g * out / b.data, b.shape))

    return _make(out, (a, b), backward, "div")


def scale(a, c: float):
    a = as_tensor(a)
    c = float(c)

    def backward(g):
        _accumulate(a, g * c)

    return _make(a.data * c, (a,), backward, "scale")


# ----------------------------------------------------------------------------
# elementwise unary ops


def exp(a):
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    _check_finite(out, "exp")

    def backward(g):
        _accumulate(a, g * out)

    return _make(out, (a,), backward, "exp")


def log(a):
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise FloatingPointError("log: non-positive argument")

    def backward(g):
        _accumulate(a, g / a.data)

    return _make(np.log(a.data), (a,), backward, "log")


def sqrt(a):
    a = as_tensor(a)
    if np.any(a.data < 0):
        raise FloatingPointError("sqrt: negative argument")
    out = np.sqrt(a.data)

    def backward(g):
        if np.any(out == 0):
            raise FloatingPointError("sqrt: gradient undefined at zero")
        _accumulate(a, g * 0.5 / out)

    return _make(out, (a,), backward, "sqrt")


def abs_(a):
    a = as_tensor(a)
    _log_branch(np.sign(a.data).astype(np.int8))

    def backward(g):
        _accumulate(a, g * np.sign(a.data))

    return _make(np.abs(a.data), (a,), backward, "abs")


def relu(a):
    a = as_tensor(a)
    mask = a.data > 0
    _log_branch(mask)

    def backward(g):
        _accumulate(a, g * mask)

    return _make(a.data * mask, (a,), backward, "relu")


# ----------------------------------------------------------------------------
# shape ops


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def backward(g):
        if a.requires_grad:
            _accumulate(a, g @ b.data.T)
        if b.requires_grad:
            _accumulate(b, a.data.T @ g)

    return _make(a.data @ b.data, (a, b), backward, "matmul")


def transpose(a, axes=None):
    a = as_tensor(a)
    inv = None if axes is None else np.argsort(axes)

    def backward(g):
        _accumulate(a, np.transpose(g, inv))

    return _make(np.transpose(a.data, axes), (a,), backward, "transpose")


def reshape(a, shape):
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot reshape {a.shape} to {shape}") from exc

    def backward(g):
        _accumulate(a, g.reshape(a.shape))

    return _make(out, (a,), backward, "reshape")


def broadcast_to(a, shape):
    a = as_tensor(a)
    try:
        out = np.broadcast_to(a.data, shape)
    except ValueError as exc:
        raise ShapeError(f"broadcast_to: cannot expand {a.shape} to {shape}") from exc
    lead = len(shape) - a.ndim
    axes = tuple(range(lead)) + tuple(
        lead + i for i, s in enumerate(a.shape) if s == 1 and shape[lead + i] != 1
    )

    def backward(g):
        gs = np.sum(g, axis=axes, keepdims=True)
        _accumulate(a, gs.reshape(a.shape))

    return _make(np.array(out), (a,), backward, "broadcast_to")


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {exc}") from exc
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def backward(g):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                _accumulate(t, np.take(g, np.arange(lo, hi), axis=axis))

    return _make(out, tensors, backward, "concat")


def getitem(a, index):
    """Basic (slice) indexing."""
    a = as_tensor(a)
    out = a.data[index]

    def backward(g):
        full = np.zeros_like(a.data)
        full[index] += g
        _accumulate(a, full)

    return _make(np.array(out), (a,), backward, "getitem")


def gather_rows(a, index):
    """out[i, j] = a[index[i, j]] for an (N, d) tensor and integer index table."""
    a = as_tensor(a)
    index = np.asarray(index, dtype=np.int64)
    if a.ndim != 2:
        raise ShapeError(f"gather_rows: expects a 2-D tensor, got {a.shape}")
    if index.size and (index.min() < 0 or index.max() >= a.shape[0]):
        raise IndexError("gather_rows: index out of range")
    flat = index.reshape(-1)

    def backward(g):
        # scatter-add as a sparse (N_src, N_out) product; much faster than np.add.at
        scatter = sparse.csr_matrix(
            (np.ones(flat.size), (flat, np.arange(flat.size))), shape=(a.shape[0], flat.size)
        )
        _accumulate(a, np.asarray(scatter @ g.reshape(-1, a.shape[1])))

    return _make(a.data[index], (a,), backward, "gather_rows")


def max_pool(a, axis=1):
    """Max over one axis; the gradient goes to the first maximal entry."""
    a = as_tensor(a)
    arg = np.argmax(a.data, axis=axis)
    _log_branch(arg)
    out = np.take_along_axis(a.data, np.expand_dims(arg, axis), axis=axis)

    def backward(g):
        full = np.zeros_like(a.data)
        np.put_along_axis(full, np.expand_dims(arg, axis), np.expand_dims(g, axis), axis=axis)
        _accumulate(a, full)

    return _make(np.squeeze(out, axis=axis), (a,), backward, "max_pool")


# ----------------------------------------------------------------------------
# reductions


def sum_(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(a, np.broadcast_to(g, a.shape))

    return _make(out, (a,), backward, "sum")


def normalize(a, axis):
    """a divided by its sums along `axis`; one Sinkhorn half-step."""
    a = as_tensor(a)
    total = np.sum(a.data, axis=axis, keepdims=True)
    if np.any(total == 0):
        raise FloatingPointError("normalize: zero sum")
    out = a.data / total

    def backward(g):
        _accumulate(a, (g - np.sum(g * out, axis=axis, keepdims=True)) / total)

    return _make(out, (a,), backward, "normalize")


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    count = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return scale(sum_(a, axis, keepdims), 1.0 / count)


# ----------------------------------------------------------------------------
# fused layers


def softmax(a, axis=-1, temperature=1.0):
    """softmax(a / temperature) along `axis`, max-shifted for stability."""
    a = as_tensor(a)
    if not temperature > 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    z = a.data / temperature
    z = z - np.max(z, axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / np.sum(e, axis=axis, keepdims=True)

    def backward(g):
        inner = np.sum(g * out, axis=axis, keepdims=True)
        _accumulate(a, out * (g - inner) / temperature)

    return _make(out, (a,), backward, "softmax")


def layer_norm(a, gain, bias, eps=1e-5):
    """Per-row normalisation over the last axis with learnable gain and bias."""
    a, gain, bias = as_tensor(a), as_tensor(gain), as_tensor(bias)
    d = a.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: gain/bias must have shape ({d},)")
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def backward(g):
        if gain.requires_grad:
            _accumulate(gain, np.sum((g * xhat).reshape(-1, d), axis=0))
        if bias.requires_grad:
            _accumulate(bias, np.sum(g.reshape(-1, d), axis=0))
        if a.requires_grad:
            gh = g * gain.data
            ga = inv * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
            _accumulate(a, ga)

    return _make(out, (a, gain, bias), backward, "layer_norm")


# ----------------------------------------------------------------------------
# gradient checking


def grad_check(fn, params, eps=1e-5, n_samples=100, rng=None, scale_floor=1e-5, retries=3):
    """Max relative error between analytic and central-difference gradients.

    `fn` takes no arguments and returns a scalar Tensor built from `params`.
    Up to `n_samples` randomly chosen entries are compared.

    Relative error is |a - n| / max(|a| + |n|, scale_floor * max(1, |L|)).
    Round-off in L limits central differences to roughly 1e-16 * |L| / eps
    absolute accuracy, so gradients far below |L| are judged on that scale.
    When a perturbation flips a relu, abs or max-pool branch the difference
    straddles a kink; the step is then divided by 10, up to `retries` times,
    and entries that still straddle one are left out.
    """
    report = grad_check_report(fn, params, eps, n_samples, rng, scale_floor, retries)
    return report["max_rel_error"]


def grad_check_report(fn, params, eps=1e-5, n_samples=100, rng=None, scale_floor=1e-5, retries=3):
    """Like grad_check, returning {max_rel_error, checked, skipped_kinks, worst}."""
    if not eps > 0:
        raise ValueError("eps must be positive")
    params = list(params)
    rng = np.random.default_rng(0) if rng is None else rng
    for p in params:
        p.grad = None
    with record_kinks() as base_log:
        loss = fn()
    if not np.isfinite(loss.data).all():
        raise FloatingPointError("grad_check: non-finite loss")
    loss.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    floor = scale_floor * max(1.0, abs(float(loss.data)))

    sizes = np.array([p.size for p in params])
    total = int(sizes.sum())
    picks = rng.choice(total, size=min(n_samples, total), replace=False)
    offsets = np.cumsum(sizes) - sizes
    worst, worst_at, checked, skipped = 0.0, None, 0, 0

    def evaluate():
        with no_grad(), record_kinks() as log:
            value = float(fn().data)
        return value, log

    for flat in np.sort(picks):
        k = int(np.searchsorted(offsets, flat, side="right") - 1)
        p, j = params[k], int(flat - offsets[k])
        view = p.data.reshape(-1)
        if not np.shares_memory(view, p.data):
            raise ValueError("grad_check needs contiguous parameter arrays")
        orig = view[j]
        num, h = None, eps
        for _ in range(retries + 1):
            view[j] = orig + h
            fp, log_p = evaluate()
            view[j] = orig - h
            fm, log_m = evaluate()
            view[j] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise FloatingPointError("grad_check: non-finite loss under perturbation")
            if log_p == base_log and log_m == base_log:
                num = (fp - fm) / (2 * h)
                break
            h /= 10.0
        if num is None:
            skipped += 1
            continue
        a = analytic[k].reshape(-1)[j]
        err = abs(a - num) / max(floor, abs(a) + abs(num))
        checked += 1
        if err > worst:
            worst, worst_at = err, (k, j, float(a), float(num))
    return {"max_rel_error": worst, "checked": checked, "skipped_kinks": skipped, "worst": worst_at}
