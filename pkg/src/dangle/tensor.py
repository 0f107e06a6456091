"""Dense tensors with reverse-mode automatic differentiation.

Every piece of model math in this package is expressed through the
operations here. Data lives in numpy arrays (float32 for training,
float64 for gradient-check builds); a result participates in the
gradient graph whenever one of its inputs has ``requires_grad`` set.
Gradients accumulate by summation across multiple uses of a tensor.
"""

from __future__ import annotations

import numpy as np

from . import kernels


class ShapeError(ValueError):
    """Operand shapes do not conform to an operation."""


_GRAD_ENABLED = True


class no_grad:
    """Context manager that skips gradient-graph construction."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


class Tensor:
    """A dense array plus an optional slot in the gradient graph."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, name=None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self):
        return self.data.item()

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{tag})"

    def zero_grad(self):
        self.grad = None

    def backward(self):
        """Backpropagate from a scalar, accumulating into ``.grad``."""
        if self.data.size != 1:
            raise ShapeError(f"backward() needs a scalar, got shape {self.data.shape}")
        topo = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
                # interior activations do not need to keep their gradient
                if not node.requires_grad:
                    node.grad = None

    # operator sugar; scalars and ndarrays are wrapped as constants
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(other, mul(self, -1.0))

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return slice_(self, key)


def parameter(data, name=None):
    return Tensor(np.asarray(data), requires_grad=True, name=name)


def _as_tensor(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _accumulate(t: Tensor, g: np.ndarray):
    # accumulation rebinds rather than mutates, so aliasing g is safe
    if t.grad is None:
        t.grad = g
    else:
        t.grad = t.grad + g


def _make(data, parents, backward):
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad or p._parents for p in parents):
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _tracked(*tensors):
    return _GRAD_ENABLED and any(t.requires_grad or t._parents for t in tensors)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Reduce a broadcast gradient back to ``shape`` by summation."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def add(a, b):
    a = _as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, like=a)
    try:
        data = a.data + b.data
    except ValueError:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} do not broadcast")
    if not _tracked(a, b):
        return Tensor(data)

    def backward(g):
        if a.requires_grad or a._parents:
            _accumulate(a, _unbroadcast(g, a.shape))
        if b.requires_grad or b._parents:
            _accumulate(b, _unbroadcast(g, b.shape))

    return _make(data, (a, b), backward)


def mul(a, b):
    a = _as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, like=a)
    try:
        data = a.data * b.data
    except ValueError:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} do not broadcast")
    if not _tracked(a, b):
        return Tensor(data)

    def backward(g):
        if a.requires_grad or a._parents:
            _accumulate(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad or b._parents:
            _accumulate(b, _unbroadcast(g * a.data, b.shape))

    return _make(data, (a, b), backward)


def matmul(a, b):
    a = _as_tensor(a)
    b = _as_tensor(b)
    if a.data.ndim < 1 or b.data.ndim < 1 or a.shape[-1] != b.shape[-2 if b.data.ndim > 1 else -1]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not conform")
    data = np.matmul(a.data, b.data)
    if not _tracked(a, b):
        return Tensor(data)

    def backward(g):
        if a.requires_grad or a._parents:
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            _accumulate(a, _unbroadcast(ga, a.shape))
        if b.requires_grad or b._parents:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            _accumulate(b, _unbroadcast(gb, b.shape))

    return _make(data, (a, b), backward)


def relu(x):
    x = _as_tensor(x)
    data = np.maximum(x.data, 0)
    if not _tracked(x):
        return Tensor(data)

    def backward(g):
        _accumulate(x, g * (x.data > 0))

    return _make(data, (x,), backward)


def softmax(x, axis=-1):
    """Softmax along ``axis``; numerically stable, kernels do the hot path."""
    x = _as_tensor(x)
    if axis not in (-1, x.data.ndim - 1):
        moved = np.ascontiguousarray(np.moveaxis(x.data, axis, -1))
    else:
        moved = np.ascontiguousarray(x.data)
    flat = moved.reshape(-1, moved.shape[-1])
    y_flat = kernels.softmax_forward(flat)
    y = y_flat.reshape(moved.shape)
    if axis not in (-1, x.data.ndim - 1):
        y = np.moveaxis(y, -1, axis)
    if not _tracked(x):
        return Tensor(y)

    def backward(g):
        if axis not in (-1, x.data.ndim - 1):
            g_m = np.ascontiguousarray(np.moveaxis(g, axis, -1))
            y_m = np.ascontiguousarray(np.moveaxis(y, axis, -1))
        else:
            g_m, y_m = np.ascontiguousarray(g), y_flat.reshape(moved.shape)
        dx = kernels.softmax_backward(
            y_m.reshape(-1, y_m.shape[-1]), g_m.reshape(-1, g_m.shape[-1])
        ).reshape(g_m.shape)
        if axis not in (-1, x.data.ndim - 1):
            dx = np.moveaxis(dx, -1, axis)
        _accumulate(x, dx)

    return _make(y, (x,), backward)


def layer_norm(x, gain, bias, eps=1e-5):
    """Normalize over the last axis: gain * (x - mean) / sqrt(var + eps) + bias."""
    x = _as_tensor(x)
    gain = _as_tensor(gain, like=x)
    bias = _as_tensor(bias, like=x)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(
            f"layer_norm: gain/bias shapes {gain.shape}/{bias.shape} do not match last axis {d}"
        )
    flat = np.ascontiguousarray(x.data).reshape(-1, d)
    y_flat, mean, rstd = kernels.layernorm_forward(flat, gain.data, bias.data, eps)
    y = y_flat.reshape(x.shape)
    if not _tracked(x, gain, bias):
        return Tensor(y)

    def backward(g):
        g2 = np.ascontiguousarray(g).reshape(-1, d)
        dx, dgain, dbias = kernels.layernorm_backward(flat, gain.data, mean, rstd, g2)
        if x.requires_grad or x._parents:
            _accumulate(x, dx.reshape(x.shape))
        if gain.requires_grad or gain._parents:
            _accumulate(gain, dgain)
        if bias.requires_grad or bias._parents:
            _accumulate(bias, dbias)

    return _make(y, (x, gain, bias), backward)


def embedding(table, ids):
    """Row lookup ``table[ids]`` with scatter-add gradient accumulation."""
    table = _as_tensor(table)
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        bad = ids[(ids < 0) | (ids >= table.shape[0])].ravel()[0]
        raise IndexError(f"embedding: id {int(bad)} outside table of {table.shape[0]} rows")
    data = table.data[ids]
    if not _tracked(table):
        return Tensor(data)

    def backward(g):
        dtable = np.zeros_like(table.data)
        kernels.scatter_add_rows(
            dtable,
            np.ascontiguousarray(ids.reshape(-1), dtype=np.int64),
            np.ascontiguousarray(g.reshape(-1, table.shape[-1])),
        )
        _accumulate(table, dtable)

    return _make(data, (table,), backward)


def concat(tensors, axis=0):
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat: empty input list")
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: shapes {[t.shape for t in tensors]} do not align on axis {axis}")
    if not _tracked(*tensors):
        return Tensor(data)

    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad or t._parents:
                index = [slice(None)] * g.ndim
                index[axis] = slice(lo, hi)
                _accumulate(t, g[tuple(index)])

    return _make(data, tuple(tensors), backward)


def slice_(x, key):
    """Basic indexing (ints and slices); gradient scatters into the source."""
    x = _as_tensor(x)
    data = x.data[key]
    if not _tracked(x):
        return Tensor(data)

    def backward(g):
        dx = np.zeros_like(x.data)
        dx[key] = g
        _accumulate(x, dx)

    return _make(data, (x,), backward)


def reshape(x, shape):
    x = _as_tensor(x)
    data = x.data.reshape(shape)
    if not _tracked(x):
        return Tensor(data)

    def backward(g):
        _accumulate(x, g.reshape(x.shape))

    return _make(data, (x,), backward)


def swapaxes(x, a, b):
    x = _as_tensor(x)
    data = np.swapaxes(x.data, a, b)
    if not _tracked(x):
        return Tensor(data)

    def backward(g):
        _accumulate(x, np.swapaxes(g, a, b))

    return _make(data, (x,), backward)


def sum_(x, axis=None, keepdims=False):
    x = _as_tensor(x)
    data = x.data.sum(axis=axis, keepdims=keepdims)
    if not _tracked(x):
        return Tensor(data)

    def backward(g):
        if axis is None:
            _accumulate(x, np.broadcast_to(g, x.shape).astype(x.dtype, copy=True))
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
            _accumulate(x, np.broadcast_to(gg, x.shape).astype(x.dtype, copy=True))

    return _make(data, (x,), backward)


def mean_(x, axis=None, keepdims=False):
    x = _as_tensor(x)
    count = x.size if axis is None else x.shape[axis]
    return mul(sum_(x, axis=axis, keepdims=keepdims), 1.0 / count)


def dropout(x, rate, rng):
    """Inverted dropout; identity when rate == 0."""
    if rate <= 0.0:
        return x
    x = _as_tensor(x)
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)
    return mul(x, Tensor(keep))


def relative_scores(q, rel):
    """Per-head query/relative-embedding scores.

    q: [B, H, L, dh], rel: [B, L, M, dh] -> scores [B, H, L, M], where
    scores[b,h,i,j] = sum_d q[b,h,i,d] * rel[b,i,j,d].
    """
    q = _as_tensor(q)
    rel = _as_tensor(rel)
    data = np.einsum("bhid,bijd->bhij", q.data, rel.data, optimize=True)
    if not _tracked(q, rel):
        return Tensor(data)

    def backward(g):
        if q.requires_grad or q._parents:
            _accumulate(q, np.einsum("bhij,bijd->bhid", g, rel.data, optimize=True))
        if rel.requires_grad or rel._parents:
            _accumulate(rel, np.einsum("bhij,bhid->bijd", g, q.data, optimize=True))

    return _make(data, (q, rel), backward)


def cross_entropy(logits, targets):
    """Mean cross-entropy of integer ``targets`` under rows of ``logits``.

    logits: [N, V] (or [V] for a single row); targets: int array [N].
    """
    logits = _as_tensor(logits)
    squeeze = logits.data.ndim == 1
    rows = logits.data.reshape(1, -1) if squeeze else logits.data
    targets = np.atleast_1d(np.asarray(targets, dtype=np.int64))
    n, v = rows.shape
    if targets.shape != (n,):
        raise ShapeError(f"cross_entropy: {n} logit rows vs targets shape {targets.shape}")
    if targets.min() < 0 or targets.max() >= v:
        raise IndexError(f"cross_entropy: target {int(targets.max())} outside vocab of {v}")
    m = rows.max(axis=-1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(rows - m).sum(axis=-1))
    losses = lse - rows[np.arange(n), targets]
    data = np.asarray(losses.mean(), dtype=rows.dtype)
    if not _tracked(logits):
        return Tensor(data)

    def backward(g):
        p = np.exp(rows - m)
        p /= p.sum(axis=-1, keepdims=True)
        p[np.arange(n), targets] -= 1.0
        dl = p * (g / n)
        _accumulate(logits, dl[0] if squeeze else dl)

    return _make(data, (logits,), backward)


def grad_check(f, params, eps=1e-5):
    """Max relative error between analytic and central-difference gradients.

    ``f()`` evaluates a scalar loss from the current values of ``params``
    (Tensors with requires_grad). Use float64 data throughout; float32
    round-off swamps the comparison.
    """
    if eps <= 0:
        raise ValueError("grad_check: eps must be positive")
    for p in params:
        p.grad = None
    loss = f()
    if not np.isfinite(loss.data):
        raise FloatingPointError("grad_check: non-finite loss")
    loss.backward()
    worst = 0.0
    for p in params:
        if p.grad is None:
            raise ValueError(f"grad_check: no gradient reached parameter {p.name or p.shape}")
        flat = p.data.reshape(-1)
        gflat = p.grad.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = float(f().data)
            flat[i] = orig - eps
            lo = float(f().data)
            flat[i] = orig
            numeric = (hi - lo) / (2.0 * eps)
            analytic = float(gflat[i])
            if not (np.isfinite(numeric) and np.isfinite(analytic)):
                raise FloatingPointError("grad_check: non-finite gradient value")
            err = abs(analytic - numeric) / (abs(analytic) + abs(numeric) + 1e-12)
            worst = max(worst, err)
    return worst
