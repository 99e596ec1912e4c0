"""Reverse-mode automatic differentiation over dense float64 arrays.

Every operation returns a new :class:`Tensor` that remembers its parents and a
backward rule. :func:`backward` collects the recorded graph into a
:class:`Tape` (topological order) and sweeps it once in reverse.

Shapes are never broadcast implicitly. Scaling by a Python scalar is the only
shape-free operation; bias rows and batched products have dedicated ops.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractError, DimensionError, NumericError
from .projections import softmax_rows, sparsemax_rows


class Tensor:
    """A dense array that can participate in reverse-mode differentiation."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self.data

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar; all of these route through the explicit ops below
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return hadamard(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, parents, backward_fn):
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    live = tuple(p for p in parents if p.requires_grad or p._backward is not None)
    out.requires_grad = bool(live)
    if live:
        out._parents = parents
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    return out


def _same_shape(a, b, op):
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ")


# --------------------------------------------------------------------------
# elementwise


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "add")
    return _result(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "sub")
    return _result(a.data - b.data, (a, b), lambda g: (g, -g))


def hadamard(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "hadamard")
    ad, bd = a.data, b.data
    return _result(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(a, c):
    if isinstance(c, Tensor) or np.ndim(c) != 0:
        raise DimensionError("scale takes a Python scalar; use hadamard for tensors")
    c = float(c)
    return _result(a.data * c, (a,), lambda g: (g * c,))


def tanh(a):
    y = np.tanh(a.data)
    return _result(y, (a,), lambda g: (g * (1.0 - y * y),))


def relu(a):
    mask = a.data > 0.0  # subgradient 0 at the kink
    return _result(a.data * mask, (a,), lambda g: (g * mask,))


def sigmoid(a):
    y = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _result(y, (a,), lambda g: (g * y * (1.0 - y),))


def identity(a):
    return a


ACTIVATIONS = {"tanh": tanh, "relu": relu, "sigmoid": sigmoid, "identity": identity, None: identity}


def abs_(a):
    sign = np.sign(a.data)
    return _result(np.abs(a.data), (a,), lambda g: (g * sign,))


# --------------------------------------------------------------------------
# linear algebra


def matmul(a, b):
    """Plain 2-D matrix product."""
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: inner extents {a.shape[1]} and {b.shape[0]} differ")
    ad, bd = a.data, b.data
    return _result(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def bmm(a, b):
    """Batched product of stacks of matrices: (B,r,k) x (B,k,c) -> (B,r,c)."""
    if a.ndim != 3 or b.ndim != 3:
        raise DimensionError(f"bmm expects 3-D operands, got {a.shape} and {b.shape}")
    if a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
        raise DimensionError(f"bmm: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        return g @ bd.transpose(0, 2, 1), ad.transpose(0, 2, 1) @ g

    return _result(ad @ bd, (a, b), backward)


def add_row(x, bias):
    """Add the vector ``bias`` to every row of ``x`` (last axis must match)."""
    if bias.ndim != 1 or x.shape[-1] != bias.shape[0]:
        raise DimensionError(f"add_row: bias {bias.shape} does not fit rows of {x.shape}")
    axes = tuple(range(x.ndim - 1))
    return _result(x.data + bias.data, (x, bias), lambda g: (g, g.sum(axis=axes)))


def expand_add(x, b, axis):
    """Add ``b`` to ``x`` after inserting ``axis`` into ``b`` (explicit broadcast)."""
    axis = axis % x.ndim
    expected = x.shape[:axis] + x.shape[axis + 1 :]
    if b.shape != expected:
        raise DimensionError(f"expand_add: {b.shape} does not match {x.shape} without axis {axis}")
    return _result(
        x.data + np.expand_dims(b.data, axis), (x, b), lambda g: (g, g.sum(axis=axis))
    )


def linear(x, weight, bias=None):
    """Affine map on the last axis. ``weight`` is (in, out)."""
    if weight.ndim != 2 or x.shape[-1] != weight.shape[0]:
        raise DimensionError(f"linear: input {x.shape} does not chain with weight {weight.shape}")
    lead = x.shape[:-1]
    flat = reshape(x, (-1, weight.shape[0])) if x.ndim != 2 else x
    y = matmul(flat, weight)
    if bias is not None:
        y = add_row(y, bias)
    if x.ndim != 2:
        y = reshape(y, lead + (weight.shape[1],))
    return y


# --------------------------------------------------------------------------
# shape plumbing


def reshape(a, shape):
    old = a.shape
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a, axes=None):
    """Swap the last two axes (or apply an explicit permutation)."""
    if axes is None:
        if a.ndim < 2:
            raise DimensionError("transpose needs at least 2 axes")
        axes = tuple(range(a.ndim - 2)) + (a.ndim - 1, a.ndim - 2)
    inverse = tuple(np.argsort(axes))
    return _result(a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),))


def take(a, index):
    shape = a.shape

    def backward(g):
        full = np.zeros(shape)
        np.add.at(full, index, g)
        return (full,)

    return _result(a.data[index], (a,), backward)


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), backward)


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]

    def backward(g):
        return tuple(np.moveaxis(g, axis, 0))

    return _result(np.stack([t.data for t in tensors], axis=axis), tuple(tensors), backward)


# --------------------------------------------------------------------------
# reductions and losses


def sum_(a, axis=None):
    shape = a.shape

    def backward(g):
        if axis is None:
            return (np.full(shape, float(g)),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _result(np.asarray(a.data.sum(axis=axis), dtype=np.float64), (a,), backward)


def mean(a):
    n = a.size
    shape = a.shape
    return _result(np.asarray(a.data.mean()), (a,), lambda g: (np.full(shape, float(g) / n),))


def mse(pred, target):
    """Mean squared error against a constant target array."""
    target = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=np.float64)
    if pred.shape != target.shape:
        raise DimensionError(f"mse: prediction {pred.shape} vs target {target.shape}")
    diff = pred.data - target
    n = diff.size
    return _result(np.asarray(np.mean(diff * diff)), (pred,), lambda g: (g * 2.0 * diff / n,))


def bce_with_logits(logits, labels):
    """Mean binary cross-entropy of constant 0/1 ``labels`` under ``logits``."""
    y = np.asarray(labels, dtype=np.float64)
    if logits.shape != y.shape:
        raise DimensionError(f"bce: logits {logits.shape} vs labels {y.shape}")
    x = logits.data
    loss = np.maximum(x, 0.0) - x * y + np.log1p(np.exp(-np.abs(x)))
    p = 0.5 * (1.0 + np.tanh(0.5 * x))
    n = x.size
    return _result(np.asarray(loss.mean()), (logits,), lambda g: (g * (p - y) / n,))


# --------------------------------------------------------------------------
# simplex projections along the last axis


def softmax(a):
    y = softmax_rows(a.data)

    def backward(g):
        return (y * (g - np.sum(g * y, axis=-1, keepdims=True)),)

    return _result(y, (a,), backward)


def sparsemax(a):
    y = sparsemax_rows(a.data)
    # support from the forward threshold; this fixes the subgradient at splitting points
    s = (y > 0.0).astype(np.float64)
    count = s.sum(axis=-1, keepdims=True)

    def backward(g):
        vhat = np.sum(g * s, axis=-1, keepdims=True) / count
        return (s * (g - vhat),)

    return _result(y, (a,), backward)


PROJECTIONS = {"softmax": softmax, "sparsemax": sparsemax}


# --------------------------------------------------------------------------
# small networks


def mlp_forward(layers, x):
    """Run ``x`` through a list of ``(weight, bias, activation)`` triples."""
    h = x
    for depth, (w, b, act) in enumerate(layers):
        if h.shape[-1] != w.shape[0]:
            raise DimensionError(
                f"mlp layer {depth}: input width {h.shape[-1]} does not match weight {w.shape}"
            )
        h = linear(h, w, b)
        h = ACTIVATIONS[act](h)
    return h


# --------------------------------------------------------------------------
# the tape


class Tape:
    """Recorded operations reachable from an output, in topological order."""

    def __init__(self, nodes):
        self.nodes = nodes

    @classmethod
    def from_output(cls, out):
        order, seen = [], set()
        stack = [(out, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in reversed(node._parents):
                if id(parent) not in seen:
                    stack.append((parent, False))
        return cls(order)

    def __len__(self):
        return len(self.nodes)

    def leaves(self):
        return [t for t in self.nodes if t._backward is None and t.requires_grad]


def backward(loss):
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf that requires it."""
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any tensor that requires grad")
    tape = Tape.from_output(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.requires_grad:
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if not (parent.requires_grad or parent._backward is not None):
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = np.asarray(pg, dtype=np.float64)
    return tape


# --------------------------------------------------------------------------
# finite-difference checking


def gradcheck(f, point, h=1e-6, tol=1e-5, atol=1e-6):
    """Compare tape gradients of scalar ``f`` at ``point`` with central differences.

    ``f`` maps a Tensor to a scalar Tensor. Returns a dict with the analytic and
    numeric gradients, the per-coordinate relative error and a pass flag.
    Relative error is ``|a - n| / max(|a|, |n|, atol)``; the ``atol`` floor keeps
    round-off in the differences from dominating near-zero gradient entries.
    """
    x0 = np.array(point.data if isinstance(point, Tensor) else point, dtype=np.float64)
    x = Tensor(x0, requires_grad=True)
    out = f(x)
    if not np.isfinite(out.data).all():
        raise NumericError("function value is not finite at the check point")
    backward(out)
    analytic = x.grad if x.grad is not None else np.zeros_like(x0)

    numeric = np.zeros_like(x0)
    flat = numeric.reshape(-1)
    for i in range(x0.size):
        xp = x0.copy().reshape(-1)
        xm = x0.copy().reshape(-1)
        xp[i] += h
        xm[i] -= h
        fp = f(Tensor(xp.reshape(x0.shape))).data
        fm = f(Tensor(xm.reshape(x0.shape))).data
        if not (np.isfinite(fp).all() and np.isfinite(fm).all()):
            raise NumericError(f"non-finite value while perturbing coordinate {i}")
        flat[i] = (float(fp) - float(fm)) / (2.0 * h)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), atol)
    rel = np.abs(analytic - numeric) / denom
    max_rel = float(rel.max()) if rel.size else 0.0
    return {
        "analytic": analytic,
        "numeric": numeric,
        "relative_error": rel,
        "max_relative_error": max_rel,
        "passed": max_rel <= tol,
    }
