"""A small reverse-mode autodiff engine over float64 numpy arrays.

Every op returns a new ``Tensor`` carrying a closure that pushes its output
gradient into its parents. ``Tensor.backward`` walks the graph in reverse
topological order. Ops that are awkward to express as compositions (losses,
batch norm, segment softmax) are fused with hand-written backward passes.
"""
from __future__ import annotations

import numpy as np
import scipy.sparse as sp


class NumericalError(FloatingPointError):
    """Raised when a loss or gradient stops being finite."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, name=None, _parents=(), _backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in _parents)
        self._parents = _parents if self.requires_grad else ()
        self._backward = _backward if self.requires_grad else None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        self.grad = None

    def _accum(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    def item(self):
        return float(self.data)

    def backward(self, grad=None):
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
        self._accum(grad)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return neg(self)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g, b.shape))

    return Tensor(a.data + b.data, _parents=(a, b), _backward=backward)


def neg(a):
    return Tensor(-a.data, _parents=(a,), _backward=lambda g: a._accum(-g))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g * a.data, b.shape))

    return Tensor(a.data * b.data, _parents=(a, b), _backward=backward)


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")

    def backward(g):
        if a.requires_grad:
            a._accum(g @ b.data.T)
        if b.requires_grad:
            b._accum(a.data.T @ g)

    return Tensor(a.data @ b.data, _parents=(a, b), _backward=backward)


def linear(x, weight, bias=None):
    """``x @ weight + bias`` for a row-major batch ``x`` of shape (N, F_in)."""
    x = as_tensor(x)
    if x.data.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ValueError(f"linear dimension mismatch: input {x.shape}, weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[1],):
        raise ValueError(f"linear bias shape {bias.shape} does not match {weight.shape[1]} outputs")
    out = x.data @ weight.data
    if bias is not None:
        out = out + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        if x.requires_grad:
            x._accum(g @ weight.data.T)
        if weight.requires_grad:
            weight._accum(x.data.T @ g)
        if bias is not None and bias.requires_grad:
            bias._accum(g.sum(axis=0))

    return Tensor(out, _parents=parents, _backward=backward)


def relu(x):
    mask = x.data > 0
    return Tensor(np.where(mask, x.data, 0.0), _parents=(x,), _backward=lambda g: x._accum(g * mask))


def sparse_matmul(matrix, x):
    """Left-multiply ``x`` by a constant scipy sparse matrix."""
    matrix = sp.csr_matrix(matrix)
    return Tensor(matrix @ x.data, _parents=(x,), _backward=lambda g: x._accum(matrix.T @ g))


def gather_rows(x, index):
    index = np.asarray(index, dtype=np.int64)
    n = x.shape[0]

    def backward(g):
        scatter = sp.csr_matrix(
            (np.ones(len(index)), (index, np.arange(len(index)))), shape=(n, len(index))
        )
        x._accum(scatter @ g)

    return Tensor(x.data[index], _parents=(x,), _backward=backward)


def concat(tensors, axis=1):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        for t, part in zip(tensors, np.split(g, splits, axis=axis)):
            if t.requires_grad:
                t._accum(part)

    return Tensor(np.concatenate([t.data for t in tensors], axis=axis), _parents=tuple(tensors),
                  _backward=backward)


def sum_all(x):
    return Tensor(x.data.sum(), _parents=(x,), _backward=lambda g: x._accum(np.broadcast_to(g, x.shape)))


def mean_all(x):
    n = x.data.size
    return Tensor(x.data.mean(), _parents=(x,),
                  _backward=lambda g: x._accum(np.broadcast_to(g / n, x.shape)))


def scale(x, factor):
    factor = float(factor)
    return Tensor(x.data * factor, _parents=(x,), _backward=lambda g: x._accum(g * factor))


def sigmoid(x):
    out = _stable_sigmoid(x.data)
    return Tensor(out, _parents=(x,), _backward=lambda g: x._accum(g * out * (1.0 - out)))


def _stable_sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def softmax(logits):
    """Row-wise softmax on a plain array."""
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def log_softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def segment_softmax_pool(values, scores, segment_ids, n_segments):
    """Per-segment softmax over ``scores`` used to average rows of ``values``.

    values: (R, H), scores: (R, 1), segment_ids: (R,) sorted or not, each in
    [0, n_segments). Returns (n_segments, H); empty segments yield zeros.
    """
    seg = np.asarray(segment_ids, dtype=np.int64)
    s = scores.data[:, 0]
    seg_max = np.full(n_segments, -np.inf)
    np.maximum.at(seg_max, seg, s)
    e = np.exp(s - seg_max[seg])
    denom = np.bincount(seg, weights=e, minlength=n_segments)
    w = e / denom[seg]
    pool = sp.csr_matrix((w, (seg, np.arange(len(seg)))), shape=(n_segments, len(seg)))
    out = pool @ values.data

    def backward(g):
        if values.requires_grad:
            values._accum(pool.T @ g)
        if scores.requires_grad:
            # d out_k / d s_r = w_r (v_r - out_k)
            gv = np.einsum("rh,rh->r", g[seg], values.data - out[seg])
            scores._accum((w * gv)[:, None])

    return Tensor(out, _parents=(values, scores), _backward=backward)


def softmax_cross_entropy(logits, labels, ignore_id):
    """Mean negative log-likelihood over rows whose label is not ``ignore_id``."""
    labels = np.asarray(labels, dtype=np.int64)
    n, c = logits.shape
    keep = labels != ignore_id
    if not keep.any():
        raise ValueError("cross entropy over an empty set: every label is ignored")
    bad = keep & ((labels < 0) | (labels >= c))
    if bad.any():
        raise ValueError(f"label out of range [0, {c}) at row {int(np.flatnonzero(bad)[0])}")
    rows = np.flatnonzero(keep)
    lsm = log_softmax(logits.data)
    count = len(rows)
    loss = -lsm[rows, labels[rows]].sum() / count

    def backward(g):
        grad = np.zeros_like(logits.data)
        p = np.exp(lsm[rows])
        p[np.arange(count), labels[rows]] -= 1.0
        grad[rows] = p / count
        logits._accum(g * grad)

    return Tensor(loss, _parents=(logits,), _backward=backward)


def sigmoid_bce(logits, targets):
    """Mean binary cross entropy in the log-sum-exp form ``max(z,0) - z*t + log1p(exp(-|z|))``."""
    z = logits.data.reshape(-1)
    t = np.asarray(targets, dtype=np.float64).reshape(-1)
    if z.size == 0:
        raise ValueError("binary cross entropy over an empty set")
    if z.shape != t.shape:
        raise ValueError(f"logits {z.shape} and targets {t.shape} differ")
    if not np.all((t == 0) | (t == 1)):
        raise ValueError("binary cross entropy targets must be 0 or 1")
    loss = np.mean(np.maximum(z, 0) - z * t + np.log1p(np.exp(-np.abs(z))))

    def backward(g):
        logits._accum((g * (_stable_sigmoid(z) - t) / z.size).reshape(logits.shape))

    return Tensor(loss, _parents=(logits,), _backward=backward)


def mean_entropy(logits):
    """Mean Shannon entropy (nats) of the row-wise softmax of ``logits``."""
    lsm = log_softmax(logits.data)
    p = np.exp(lsm)
    ent = -(p * lsm).sum(axis=1)
    n = logits.shape[0]

    def backward(g):
        logits._accum(g * (-p * (lsm + ent[:, None])) / n)

    return Tensor(ent.mean(), _parents=(logits,), _backward=backward)


def check_finite(t, what="loss"):
    if not np.all(np.isfinite(t.data)):
        raise NumericalError(f"non-finite {what}: {t.data if t.data.size == 1 else 'array'}")
    return t
