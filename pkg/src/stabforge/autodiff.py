"""Minimal reverse-mode autodiff over dense float64 arrays.

A dynamic tape: every op returns a new :class:`Tensor` holding its inputs and
a local backward rule, so the graph is rebuilt on each forward pass.
``backward`` topologically sorts that implicit graph and visits each node
exactly once in reverse order, accumulating gradients into every
``requires_grad`` leaf.

Broadcasting is restricted to scalar-tensor and trailing-axis (row bias)
forms; model code materialises anything else to explicit shapes first.
"""

import contextlib

import numpy as np

from . import kernels


class ShapeError(ValueError):
    pass


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable tape recording (forward values only) inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """Dense float64 array plus gradient accumulator and tape linkage."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def accumulate(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, scale(other, -1.0))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return take(self, key)


def _result(data, parents, backward_fn):
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# ops


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    bias = a.shape != b.shape
    if bias and not (b.data.ndim == 1 and a.shape[-1:] == b.shape):
        raise ShapeError(f"add: incompatible shapes {a.shape} and {b.shape}")

    def bwd(g, out):
        if a.requires_grad:
            a.accumulate(g)
        if b.requires_grad:
            if bias:
                b.accumulate(g.reshape(-1, b.shape[0]).sum(axis=0))
            else:
                b.accumulate(g)

    return _result(a.data + b.data, (a, b), bwd)


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"mul: incompatible shapes {a.shape} and {b.shape}")

    def bwd(g, out):
        if a.requires_grad:
            a.accumulate(g * b.data)
        if b.requires_grad:
            b.accumulate(g * a.data)

    return _result(a.data * b.data, (a, b), bwd)


def scale(a, s):
    a = _as_tensor(a)
    s = float(s)

    def bwd(g, out):
        if a.requires_grad:
            a.accumulate(g * s)

    return _result(a.data * s, (a,), bwd)


def matmul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def bwd(g, out):
        if a.requires_grad:
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            a.accumulate(_reduce_to(ga, a.shape))
        if b.requires_grad:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            b.accumulate(_reduce_to(gb, b.shape))

    return _result(np.matmul(a.data, b.data), (a, b), bwd)


def _reduce_to(g, shape):
    # collapse batch dims introduced by matmul broadcasting
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def exp(a):
    a = _as_tensor(a)
    val = np.exp(a.data)

    def bwd(g, out):
        if a.requires_grad:
            a.accumulate(g * val)

    return _result(val, (a,), bwd)


def log(a):
    a = _as_tensor(a)

    def bwd(g, out):
        if a.requires_grad:
            a.accumulate(g / a.data)

    return _result(np.log(a.data), (a,), bwd)


def relu(a):
    a = _as_tensor(a)
    keep = a.data > 0

    def bwd(g, out):
        if a.requires_grad:
            a.accumulate(g * keep)

    return _result(a.data * keep, (a,), bwd)


def softmax(a, axis=-1):
    a = _as_tensor(a)
    moved = axis not in (-1, a.data.ndim - 1)
    x = np.moveaxis(a.data, axis, -1) if moved else a.data
    flat = np.ascontiguousarray(x.reshape(-1, x.shape[-1]))
    y = kernels.softmax_rows(flat).reshape(x.shape)
    if moved:
        y = np.moveaxis(y, -1, axis)

    def bwd(g, out):
        if not a.requires_grad:
            return
        yy, gg = (np.moveaxis(y, axis, -1), np.moveaxis(g, axis, -1)) if moved else (y, g)
        d = yy.shape[-1]
        gx = kernels.softmax_rows_grad(
            np.ascontiguousarray(yy.reshape(-1, d)), np.ascontiguousarray(gg.reshape(-1, d))
        ).reshape(yy.shape)
        if moved:
            gx = np.moveaxis(gx, -1, axis)
        a.accumulate(gx)

    return _result(y, (a,), bwd)


def layer_norm(x, gain, bias, eps=1e-5):
    """Normalise the last axis to zero mean / unit variance, then affine."""
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: gain/bias must be ({d},)")
    flat = np.ascontiguousarray(x.data.reshape(-1, d))
    out, xhat, inv_std = kernels.layer_norm_rows(flat, gain.data, bias.data, eps)

    def bwd(g, out_):
        gflat = np.ascontiguousarray(g.reshape(-1, d))
        gx, ggain, gbias = kernels.layer_norm_rows_grad(xhat, inv_std, gain.data, gflat)
        if x.requires_grad:
            x.accumulate(gx.reshape(x.shape))
        if gain.requires_grad:
            gain.accumulate(ggain)
        if bias.requires_grad:
            bias.accumulate(gbias)

    return _result(out.reshape(x.shape), (x, gain, bias), bwd)


def embedding_gather(table, indices):
    """Select rows ``table[indices]``; gradients scatter-add back."""
    table = _as_tensor(table)
    idx = np.asarray(indices, dtype=np.int64)

    def bwd(g, out):
        if table.requires_grad:
            gt = np.zeros_like(table.data)
            np.add.at(gt, idx.ravel(), g.reshape(-1, table.shape[-1]))
            table.accumulate(gt)

    return _result(table.data[idx], (table,), bwd)


def embedding_mix(weights, table):
    """Weighted aggregation of embedding rows: ``weights @ table``.

    ``weights`` is [positions x vocab]; a one-hot row reproduces the
    corresponding table row exactly.
    """
    weights, table = _as_tensor(weights), _as_tensor(table)
    if weights.shape[-1] != table.shape[0] or table.data.ndim != 2:
        raise ShapeError(f"embedding_mix: incompatible shapes {weights.shape} and {table.shape}")
    return matmul(weights, table)


def cross_entropy(logits, targets, mask=None):
    """Mean negative log-likelihood of ``targets`` under softmaxed ``logits``.

    ``logits`` is (..., vocab); ``targets`` integer (...); ``mask`` optional
    0/1 float (...) selecting the positions that count (padding excluded).
    Returns a scalar tensor.
    """
    logits = _as_tensor(logits)
    v = logits.shape[-1]
    idx = np.asarray(targets, dtype=np.int64).ravel()
    flat = np.ascontiguousarray(logits.data.reshape(-1, v))
    if idx.shape[0] != flat.shape[0]:
        raise ShapeError(f"cross_entropy: {logits.shape} logits vs {idx.shape[0]} targets")
    losses, probs = kernels.cross_entropy_rows(flat, idx)
    if mask is None:
        w = np.ones_like(losses)
    else:
        w = np.asarray(mask, dtype=np.float64).ravel()
    denom = w.sum()
    if denom <= 0:
        raise ShapeError("cross_entropy: mask selects no positions")
    value = float((losses * w).sum() / denom)

    def bwd(g, out):
        if logits.requires_grad:
            gl = probs.copy()
            gl[np.arange(gl.shape[0]), idx] -= 1.0
            gl *= (w / denom)[:, None] * float(g)
            logits.accumulate(gl.reshape(logits.shape))

    return _result(value, (logits,), bwd)


def concat(tensors, axis=0):
    tensors = [_as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g, out):
        for t, start, stop in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(start, stop)
                t.accumulate(g[tuple(sl)])

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tensors, bwd)


def take(a, key):
    """Basic slicing/indexing with gradient scatter back into the source."""
    a = _as_tensor(a)

    def bwd(g, out):
        if a.requires_grad:
            ga = np.zeros_like(a.data)
            np.add.at(ga, key, g)
            a.accumulate(ga)

    return _result(a.data[key], (a,), bwd)


def reshape(a, shape):
    a = _as_tensor(a)

    def bwd(g, out):
        if a.requires_grad:
            a.accumulate(g.reshape(a.shape))

    return _result(a.data.reshape(shape), (a,), bwd)


def transpose(a, axes=None):
    a = _as_tensor(a)
    if axes is None:
        axes = tuple(range(a.data.ndim))[::-1]
    inv = np.argsort(axes)

    def bwd(g, out):
        if a.requires_grad:
            a.accumulate(np.transpose(g, inv))

    return _result(np.transpose(a.data, axes), (a,), bwd)


def mean(a):
    a = _as_tensor(a)
    n = a.data.size

    def bwd(g, out):
        if a.requires_grad:
            a.accumulate(np.full(a.shape, float(g) / n))

    return _result(float(a.data.mean()), (a,), bwd)


def sum_all(a):
    a = _as_tensor(a)

    def bwd(g, out):
        if a.requires_grad:
            a.accumulate(np.full(a.shape, float(g)))

    return _result(float(a.data.sum()), (a,), bwd)


# ---------------------------------------------------------------------------
# backward pass


def backward(t):
    """Populate ``.grad`` on every reachable requires_grad tensor.

    ``t`` must be scalar (single element).  Repeated calls without clearing
    gradients accumulate.
    """
    if t.data.size != 1:
        raise ShapeError(f"backward requires a scalar, got shape {t.shape}")
    order = []
    seen = set()
    stack = [(t, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen and (p.requires_grad or p._parents):
                stack.append((p, False))
    t.accumulate(np.ones_like(t.data))
    for node in reversed(order):
        if node._backward is not None:
            node._backward(node.grad, node.data)


def grad_check(f, tensors, eps=1e-6):
    """Max relative error between analytic gradients of ``f()`` and central
    finite differences over every requires_grad tensor in ``tensors``.

    Error per coordinate is |a - n| / max(|a|, |n|, 1e-3).
    """
    tensors = [t for t in tensors if t.requires_grad]
    for t in tensors:
        t.zero_grad()
    out = f()
    backward(out)
    analytic = [t.grad.copy() if t.grad is not None else np.zeros_like(t.data) for t in tensors]
    worst = 0.0
    for t, ga in zip(tensors, analytic):
        flat = t.data.ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            with no_grad():
                hi = f().item
            flat[i] = orig - eps
            with no_grad():
                lo = f().item
            flat[i] = orig
            num = (hi - lo) / (2 * eps)
            a = ga.ravel()[i]
            err = abs(a - num) / max(abs(a), abs(num), 1e-3)
            worst = max(worst, err)
    return worst
