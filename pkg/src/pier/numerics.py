"""Dense tensor math with reverse-mode differentiation.

A Tensor wraps a numpy array and, when gradients are requested, remembers the
operation that produced it as a list of (parent, vjp) pairs.  The recorded
links form an implicit acyclic graph; `backward` replays it once in reverse
topological order, so every reachable parameter is visited exactly once and
unreachable parameters come back with zero gradient.

Leading axes broadcast in the numpy sense; the ops only promise what the
model formulas need (matrix products, row softmax, elementwise arithmetic,
gathers).  All math is done in the dtype of the inputs: float64 in tests,
float32 in the training pipeline.
"""

import numpy as np

from .errors import ContractError, DimensionError, NumericError


class Tensor:
    __slots__ = ("data", "requires_grad", "name", "_links")

    def __init__(self, data, requires_grad=False, name=None, _links=()):
        self.data = data if isinstance(data, np.ndarray) else np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.name = name
        self._links = _links  # tuple of (parent Tensor, vjp(grad) -> grad wrt parent)

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={tuple(self.shape)}, dtype={self.data.dtype}{tag})"

    # Convenience operators; the module-level functions are the real API.
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def tensor(data, dtype=None, name=None):
    arr = np.asarray(data, dtype=dtype)
    if arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(np.float64)
    return Tensor(arr, name=name)


def parameter(data, name=None, dtype=None):
    arr = np.array(data, dtype=dtype if dtype is not None else np.float64)
    return Tensor(arr, requires_grad=True, name=name)


def _result(data, links):
    links = tuple((p, vjp) for p, vjp in links if p.requires_grad)
    if links:
        return Tensor(data, requires_grad=True, _links=links)
    return Tensor(data)


def _unbroadcast(grad, shape):
    """Sum `grad` down to `shape` after numpy broadcasting."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _check_broadcast(a, b, opname):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{opname}: shapes {tuple(a.shape)} and {tuple(b.shape)} do not broadcast")


def add(a, b):
    _check_broadcast(a, b, "add")
    return _result(a.data + b.data, (
        (a, lambda g: _unbroadcast(g, a.shape)),
        (b, lambda g: _unbroadcast(g, b.shape)),
    ))


def sub(a, b):
    _check_broadcast(a, b, "sub")
    return _result(a.data - b.data, (
        (a, lambda g: _unbroadcast(g, a.shape)),
        (b, lambda g: -_unbroadcast(g, b.shape)),
    ))


def mul(a, b):
    _check_broadcast(a, b, "mul")
    return _result(a.data * b.data, (
        (a, lambda g: _unbroadcast(g * b.data, a.shape)),
        (b, lambda g: _unbroadcast(g * a.data, b.shape)),
    ))


def neg(a):
    return _result(-a.data, ((a, lambda g: -g),))


def scale(a, s):
    s = float(s)
    return _result(a.data * s, ((a, lambda g: g * s),))


def matmul(a, b):
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise DimensionError(f"matmul: needs matrices, got shapes {tuple(a.shape)} and {tuple(b.shape)}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: inner dimensions differ, {tuple(a.shape)} vs {tuple(b.shape)}")

    def grad_a(g):
        return _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)

    def grad_b(g):
        return _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)

    return _result(np.matmul(a.data, b.data), ((a, grad_a), (b, grad_b)))


def transpose_last(a):
    """Swap the trailing two axes (the K in Q Kᵀ)."""
    if a.data.ndim < 2:
        raise DimensionError(f"transpose_last: needs >= 2 axes, got shape {tuple(a.shape)}")
    return _result(np.swapaxes(a.data, -1, -2), ((a, lambda g: np.swapaxes(g, -1, -2)),))


def relu(a):
    out = np.maximum(a.data, 0)
    return _result(out, ((a, lambda g: g * (a.data > 0)),))


def sigmoid(a):
    out = 1.0 / (1.0 + np.exp(-a.data))
    return _result(out, ((a, lambda g: g * out * (1.0 - out)),))


def exp(a):
    out = np.exp(a.data)
    return _result(out, ((a, lambda g: g * out),))


def log(a):
    return _result(np.log(a.data), ((a, lambda g: g / a.data),))


def clip(a, lo, hi):
    """Clamp values; gradient passes through the interior, zero outside."""
    out = np.clip(a.data, lo, hi)
    inside = (a.data >= lo) & (a.data <= hi)
    return _result(out, ((a, lambda g: g * inside),))


def cast(a, dtype):
    """Dtype conversion; gradients cast back on the way down."""
    dtype = np.dtype(dtype)
    src = a.data.dtype
    return _result(a.data.astype(dtype), ((a, lambda g: g.astype(src)),))


def reshape(a, shape):
    if int(np.prod(a.shape)) != int(np.prod(shape)) and -1 not in shape:
        raise DimensionError(f"reshape: cannot view {tuple(a.shape)} as {tuple(shape)}")
    old = a.shape
    return _result(a.data.reshape(shape), ((a, lambda g: g.reshape(old)),))


def concat(tensors, axis=-1):
    datas = [t.data for t in tensors]
    sizes = [d.shape[axis] for d in datas]
    offsets = np.cumsum([0] + sizes)

    def make_vjp(i):
        lo, hi = offsets[i], offsets[i + 1]

        def vjp(g):
            index = [slice(None)] * g.ndim
            index[axis if axis >= 0 else g.ndim + axis] = slice(lo, hi)
            return g[tuple(index)]

        return vjp

    links = tuple((t, make_vjp(i)) for i, t in enumerate(tensors))
    return _result(np.concatenate(datas, axis=axis), links)


def stack(tensors, axis=0):
    def make_vjp(i):
        return lambda g: np.take(g, i, axis=axis)

    links = tuple((t, make_vjp(i)) for i, t in enumerate(tensors))
    return _result(np.stack([t.data for t in tensors], axis=axis), links)


def gather_rows(a, idx):
    """Index axis 0 with an integer array; grads scatter-add back."""
    idx = np.asarray(idx)

    def vjp(g):
        acc = np.zeros(a.shape, dtype=g.dtype)
        np.add.at(acc, idx, g)
        return acc

    return _result(a.data[idx], ((a, vjp),))


def repeat_rows(a, n):
    """Tile each axis-0 row n times in place: (m, ...) -> (m*n, ...)."""
    m = a.shape[0]
    return _result(
        np.repeat(a.data, n, axis=0),
        ((a, lambda g: g.reshape((m, n) + g.shape[1:]).sum(axis=1)),),
    )


def segment_sum(a, segment_ids, num_segments):
    """Sum axis-0 rows into ``num_segments`` buckets; empty buckets stay zero."""
    ids = np.asarray(segment_ids)
    if ids.ndim != 1 or ids.shape[0] != a.shape[0]:
        raise DimensionError(f"segment_sum: ids shape {ids.shape} does not index {a.shape[0]} rows")
    if ids.size and (ids.min() < 0 or ids.max() >= num_segments):
        raise ContractError(f"segment_sum: ids outside [0, {num_segments})")
    out = np.zeros((num_segments,) + a.shape[1:], dtype=a.data.dtype)
    np.add.at(out, ids, a.data)
    return _result(out, ((a, lambda g: g[ids]),))


def sum_axis(a, axis):
    def vjp(g):
        return np.broadcast_to(np.expand_dims(g, axis), a.shape).copy()

    return _result(a.data.sum(axis=axis), ((a, vjp),))


def mean_axis(a, axis):
    n = a.shape[axis]

    def vjp(g):
        return np.broadcast_to(np.expand_dims(g, axis), a.shape) / n

    return _result(a.data.mean(axis=axis), ((a, vjp),))


def sum_all(a):
    return _result(np.asarray(a.data.sum()), ((a, lambda g: np.broadcast_to(g, a.shape).copy()),))


def mean_all(a):
    n = a.data.size
    return _result(np.asarray(a.data.mean()), ((a, lambda g: np.broadcast_to(g / n, a.shape).copy()),))


def softmax_rows(a):
    """Softmax along the last axis, max-shifted for stability."""
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        return out * (g - (g * out).sum(axis=-1, keepdims=True))

    return _result(out, ((a, vjp),))


def scaled_dot_attention(q, k, v):
    """softmax(Q Kᵀ / sqrt(D)) V over the trailing two axes."""
    if q.shape[-1] != k.shape[-1]:
        raise DimensionError(f"attention: query dim {q.shape[-1]} != key dim {k.shape[-1]}")
    scores = scale(matmul(q, transpose_last(k)), 1.0 / np.sqrt(q.shape[-1]))
    return matmul(softmax_rows(scores), v)


_ACTIVATIONS = {
    "relu": relu,
    "sigmoid": sigmoid,
    "identity": lambda t: t,
}


def mlp_forward(x, layers):
    """Apply (W, b, activation) layers in order.

    Each W is (n_in, n_out), b is (n_out,), activation one of
    'relu' | 'sigmoid' | 'identity'.  x has shape (..., n_in).
    """
    out = x
    for w, b, act in layers:
        if out.shape[-1] != w.shape[0]:
            raise DimensionError(f"mlp_forward: input dim {out.shape[-1]} != weight rows {w.shape[0]}")
        if act not in _ACTIVATIONS:
            raise ContractError(f"mlp_forward: unknown activation {act!r}")
        out = _ACTIVATIONS[act](add(matmul(out, w), b))
    return out


def backward(loss, params):
    """Gradient of a scalar loss for each tensor in `params`.

    Returns {param: Tensor(grad)}.  Parameters the loss never touched get a
    zero gradient of matching shape.
    """
    if loss.data.size != 1:
        raise DimensionError(f"backward: loss must be scalar, got shape {tuple(loss.shape)}")

    order = []
    seen = set()
    stack_ = [(loss, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for parent, _ in node._links:
            if id(parent) not in seen:
                stack_.append((parent, False))

    param_ids = {id(p) for p in params}
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        # Keep parameter grads for collection; free intermediates eagerly.
        if id(node) in param_ids:
            g = grads.get(id(node))
        else:
            g = grads.pop(id(node), None)
        if g is None:
            continue
        for parent, vjp in node._links:
            contribution = vjp(g)
            slot = grads.get(id(parent))
            if slot is None:
                grads[id(parent)] = contribution
            else:
                # Fresh array: vjp outputs may alias their input or each other.
                grads[id(parent)] = slot + contribution

    out = {}
    for p in params:
        g = grads.get(id(p))
        if g is None:
            g = np.zeros_like(p.data)
        out[p] = Tensor(np.asarray(g))
    return out


def grad_check(f, params, eps=1e-5):
    """Max relative disagreement between autodiff and central differences.

    `f` must be a deterministic closure over `params` returning a scalar
    Tensor.  Relative error per entry is |analytic - numeric| / max(1, |analytic|);
    the max over all entries of all params comes back.  Use float64 params:
    central differences drown in float32 rounding.
    """
    if not (1e-7 <= eps <= 1e-3):
        raise ContractError(f"grad_check: eps {eps} outside [1e-7, 1e-3]")

    loss = f()
    if not np.isfinite(loss.data).all():
        raise NumericError("grad_check: loss is non-finite")
    analytic = backward(loss, params)
    for p in params:
        if not np.isfinite(analytic[p].data).all():
            raise NumericError(f"grad_check: non-finite gradient for parameter {p.name!r}")

    worst = 0.0
    for p in params:
        for idx in np.ndindex(p.data.shape):
            keep = p.data[idx]
            p.data[idx] = keep + eps
            hi = float(f().data)
            p.data[idx] = keep - eps
            lo = float(f().data)
            p.data[idx] = keep
            numeric = (hi - lo) / (2.0 * eps)
            if not np.isfinite(numeric):
                raise NumericError(f"grad_check: non-finite finite-difference for parameter {p.name!r}")
            a = float(analytic[p].data[idx])
            err = abs(a - numeric) / max(1.0, abs(a))
            if err > worst:
                worst = err
    return worst
