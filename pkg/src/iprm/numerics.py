"""Dense-array math with reverse-mode differentiation.

Everything runs on numpy arrays wrapped in ``Tensor`` nodes. A fresh graph
is built dynamically on every forward pass; ``backward()`` on a scalar loss
walks it once in reverse topological order and accumulates gradients into
every reachable tensor with ``requires_grad``. 64-bit floats are the default
so finite-difference checks are meaningful; float32 models work the same way
and are a little faster to train.

Deliberately not here: GPU execution, operator fusion, sparse tensors,
mixed precision, higher-order derivatives. Correctness over speed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

DEFAULT_DTYPE = np.float64

# Additive fill for blocked attention logits. Finite (instead of -inf) so
# float32 runs stay NaN-free; exp() underflows to exactly 0.0 either way.
MASK_FILL = -1e30


class NumericsError(Exception):
    """Shape mismatches, masking violations, bad losses and the like."""


def _as_float_array(data, dtype=None):
    arr = np.asarray(data)
    if dtype is not None:
        return arr.astype(dtype) if arr.dtype != np.dtype(dtype) else arr
    if arr.dtype.kind != "f":
        return arr.astype(DEFAULT_DTYPE)
    return arr


class Tensor:
    """A node in the computation graph: numpy data plus backward plumbing.

    Leaf tensors created with ``requires_grad=True`` accumulate into ``grad``
    across repeated ``backward()`` calls until ``zero_grad()``. Internal nodes
    are created by the ops below and reset their gradient on every backward.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, dtype=None):
        self.data = _as_float_array(data, dtype)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

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
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        """Populate gradients of every reachable ``requires_grad`` tensor.

        Only defined for scalar outputs. Repeated calls without ``zero_grad``
        keep accumulating into leaf gradients.
        """
        if self.data.size != 1:
            raise NumericsError(
                f"backward() needs a scalar loss, got shape {tuple(self.shape)}"
            )
        order = _toposort(self)
        for node in order:
            if node._backward is not None:
                node.grad = None
        seed = np.ones_like(self.data)
        if self._backward is None:
            self.grad = seed if self.grad is None else self.grad + seed
            return
        self.grad = seed
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # Operator sugar; the module-level functions are the real op library.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def __sub__(self, other):
        return add(self, neg(_coerce(other, self.dtype)))

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, shape):
        return reshape(self, shape)

    def __repr__(self):
        flag = ", requires_grad" if self.requires_grad else ""
        return f"Tensor(shape={tuple(self.shape)}, dtype={self.data.dtype}{flag})"


def _coerce(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _node(data, parents, backward_fn) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = True
    out._parents = parents
    out._backward = backward_fn
    return out


def _accum(node: Tensor, grad: np.ndarray):
    # Never mutates gradient arrays in place: contributions may be aliased.
    if not node.requires_grad:
        return
    node.grad = grad if node.grad is None else node.grad + grad


def _toposort(root: Tensor):
    """Iterative DFS postorder; unrolled step loops go deeper than the
    interpreter recursion limit."""
    order = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))
    return order


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Sum a gradient back down to the pre-broadcast shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _check_broadcast(a: Tensor, b: Tensor, opname: str):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise NumericsError(
            f"{opname}: incompatible broadcast shapes "
            f"{tuple(a.shape)} vs {tuple(b.shape)}"
        ) from None


# ---------------------------------------------------------------------------
# Elementwise ops
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a = _coerce(a, DEFAULT_DTYPE)
    b = _coerce(b, a.dtype)
    _check_broadcast(a, b, "add")
    data = a.data + b.data
    if not (a.requires_grad or b.requires_grad):
        return Tensor(data)

    def backward(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g, a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g, b.data.shape))

    return _node(data, (a, b), backward)


def neg(a) -> Tensor:
    a = _coerce(a, DEFAULT_DTYPE)
    if not a.requires_grad:
        return Tensor(-a.data)

    def backward(g):
        _accum(a, -g)

    return _node(-a.data, (a,), backward)


def mul(a, b) -> Tensor:
    a = _coerce(a, DEFAULT_DTYPE)
    b = _coerce(b, a.dtype)
    _check_broadcast(a, b, "mul")
    data = a.data * b.data
    if not (a.requires_grad or b.requires_grad):
        return Tensor(data)

    def backward(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return _node(data, (a, b), backward)


def tanh(a) -> Tensor:
    a = _coerce(a, DEFAULT_DTYPE)
    data = np.tanh(a.data)
    if not a.requires_grad:
        return Tensor(data)

    def backward(g):
        _accum(a, g * (1.0 - data * data))

    return _node(data, (a,), backward)


def sigmoid(a) -> Tensor:
    a = _coerce(a, DEFAULT_DTYPE)
    x = a.data
    data = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                    np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    if not a.requires_grad:
        return Tensor(data)

    def backward(g):
        _accum(a, g * data * (1.0 - data))

    return _node(data, (a,), backward)


def relu(a) -> Tensor:
    a = _coerce(a, DEFAULT_DTYPE)
    data = np.maximum(a.data, 0.0)
    if not a.requires_grad:
        return Tensor(data)

    def backward(g):
        _accum(a, g * (a.data > 0))

    return _node(data, (a,), backward)


def rsqrt(a) -> Tensor:
    """x ** -0.5, used for normalization layers."""
    a = _coerce(a, DEFAULT_DTYPE)
    data = a.data ** -0.5
    if not a.requires_grad:
        return Tensor(data)

    def backward(g):
        _accum(a, g * (-0.5) * data ** 3)

    return _node(data, (a,), backward)


PHI_FUNCTIONS = {"tanh": tanh, "relu": relu, "sigmoid": sigmoid}


def nonlin_phi(a, kind: str = "tanh") -> Tensor:
    """The execution-stage key nonlinearity; a config constant so ablations
    can swap it without touching the model code."""
    try:
        fn = PHI_FUNCTIONS[kind]
    except KeyError:
        raise NumericsError(f"unknown nonlinearity {kind!r}") from None
    return fn(a)


def elementwise(op: str, *args) -> Tensor:
    """Dispatch by name: one of add, mul, tanh, nonlin_phi."""
    table = {"add": add, "mul": mul, "tanh": tanh, "nonlin_phi": nonlin_phi}
    try:
        fn = table[op]
    except KeyError:
        raise NumericsError(f"unknown elementwise op {op!r}") from None
    return fn(*args)


# ---------------------------------------------------------------------------
# Structural ops
# ---------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    """Matrix product with numpy batch broadcasting on leading axes.

    a [..., m, k] @ b [..., k, n] -> [..., m, n]; either side may omit batch
    axes (the plain weight-matrix case).
    """
    a = _coerce(a, DEFAULT_DTYPE)
    b = _coerce(b, a.dtype)
    if a.ndim < 2 or b.ndim < 2:
        raise NumericsError(
            f"matmul needs rank >= 2 operands, got {tuple(a.shape)} x {tuple(b.shape)}"
        )
    if a.shape[-1] != b.shape[-2]:
        raise NumericsError(
            f"matmul inner dimensions disagree: {tuple(a.shape)} x {tuple(b.shape)}"
        )
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise NumericsError(
            f"matmul: batch axes do not broadcast: {tuple(a.shape)} x {tuple(b.shape)}"
        ) from None

    if b.ndim == 2:
        # Weight-matrix case: one flat GEMM beats numpy's batched loop.
        k, n = b.shape
        flat = a.data.reshape(-1, k)
        data = (flat @ b.data).reshape(*a.shape[:-1], n)
        if not (a.requires_grad or b.requires_grad):
            return Tensor(data)

        def backward(g):
            g2 = g.reshape(-1, n)
            if a.requires_grad:
                _accum(a, (g2 @ b.data.T).reshape(a.data.shape))
            if b.requires_grad:
                _accum(b, flat.T @ g2)

        return _node(data, (a, b), backward)

    data = a.data @ b.data
    if not (a.requires_grad or b.requires_grad):
        return Tensor(data)

    def backward(g):
        if a.requires_grad:
            ga = g @ np.swapaxes(b.data, -1, -2)
            _accum(a, _unbroadcast(ga, a.data.shape))
        if b.requires_grad:
            gb = np.swapaxes(a.data, -1, -2) @ g
            _accum(b, _unbroadcast(gb, b.data.shape))

    return _node(data, (a, b), backward)


def linear(x, w: Tensor, b: Tensor) -> Tensor:
    """Fused x @ w + b for 2-D w [k, n] and bias b [n]; one graph node."""
    x = _coerce(x, DEFAULT_DTYPE)
    if x.ndim < 2 or x.shape[-1] != w.shape[0]:
        raise NumericsError(
            f"linear: input {tuple(x.shape)} does not match weight {tuple(w.shape)}"
        )
    k, n = w.shape
    flat = x.data.reshape(-1, k)
    data = (flat @ w.data + b.data).reshape(*x.shape[:-1], n)
    if not (x.requires_grad or w.requires_grad or b.requires_grad):
        return Tensor(data)

    def backward(g):
        g2 = g.reshape(-1, n)
        if x.requires_grad:
            _accum(x, (g2 @ w.data.T).reshape(x.data.shape))
        if w.requires_grad:
            _accum(w, flat.T @ g2)
        if b.requires_grad:
            _accum(b, g2.sum(axis=0))

    return _node(data, (x, w, b), backward)


def concat(tensors, axis: int) -> Tensor:
    """Contiguous concatenation; backward splits the gradient."""
    tensors = [_coerce(t, DEFAULT_DTYPE) for t in tensors]
    if not tensors:
        raise NumericsError("concat of an empty list")
    ndim = tensors[0].ndim
    axis = axis % ndim
    ref = list(tensors[0].shape)
    for t in tensors[1:]:
        if t.ndim != ndim:
            raise NumericsError(
                f"concat rank mismatch: {tuple(tensors[0].shape)} vs {tuple(t.shape)}"
            )
        for d in range(ndim):
            if d != axis and t.shape[d] != ref[d]:
                raise NumericsError(
                    f"concat off-axis dimension mismatch on axis {d}: "
                    f"{tuple(tensors[0].shape)} vs {tuple(t.shape)}"
                )
    data = np.concatenate([t.data for t in tensors], axis=axis)
    if not any(t.requires_grad for t in tensors):
        return Tensor(data)
    sizes = [t.shape[axis] for t in tensors]

    def backward(g):
        offset = 0
        for t, s in zip(tensors, sizes):
            if t.requires_grad:
                index = [slice(None)] * ndim
                index[axis] = slice(offset, offset + s)
                _accum(t, g[tuple(index)])
            offset += s

    return _node(data, tuple(tensors), backward)


def slice_axis(a, axis: int, start: int, stop: int) -> Tensor:
    """Contiguous slice along one axis; the counterpart of concat."""
    a = _coerce(a, DEFAULT_DTYPE)
    axis = axis % a.ndim
    index = [slice(None)] * a.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)
    data = a.data[index]
    if not a.requires_grad:
        return Tensor(data)

    def backward(g):
        ga = np.zeros_like(a.data)
        ga[index] = g
        _accum(a, ga)

    return _node(data, (a,), backward)


def reshape(a, shape) -> Tensor:
    a = _coerce(a, DEFAULT_DTYPE)
    data = a.data.reshape(shape)
    if not a.requires_grad:
        return Tensor(data)

    def backward(g):
        _accum(a, g.reshape(a.data.shape))

    return _node(data, (a,), backward)


def transpose(a, axes) -> Tensor:
    a = _coerce(a, DEFAULT_DTYPE)
    axes = tuple(axes)
    data = np.transpose(a.data, axes)
    if not a.requires_grad:
        return Tensor(data)
    inverse = tuple(np.argsort(axes))

    def backward(g):
        _accum(a, np.transpose(g, inverse))

    return _node(data, (a,), backward)


def broadcast_to(a, shape) -> Tensor:
    """Explicit expansion; backward sums over the broadcast axes."""
    a = _coerce(a, DEFAULT_DTYPE)
    shape = tuple(shape)
    try:
        data = np.broadcast_to(a.data, shape)
    except ValueError:
        raise NumericsError(
            f"broadcast_to: cannot expand {tuple(a.shape)} to {shape}"
        ) from None
    if not a.requires_grad:
        return Tensor(np.ascontiguousarray(data))

    def backward(g):
        _accum(a, _unbroadcast(g, a.data.shape))

    return _node(np.ascontiguousarray(data), (a,), backward)


def reduce_sum(a, axis=None, keepdims=False) -> Tensor:
    a = _coerce(a, DEFAULT_DTYPE)
    data = a.data.sum(axis=axis, keepdims=keepdims)
    if not a.requires_grad:
        return Tensor(data)

    def backward(g):
        if axis is None:
            _accum(a, np.broadcast_to(g, a.data.shape).copy())
            return
        if not keepdims:
            g = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(g, a.data.shape).copy())

    return _node(data, (a,), backward)


def reduce_mean(a, axis=None, keepdims=False) -> Tensor:
    a = _coerce(a, DEFAULT_DTYPE)
    if axis is None:
        count = a.size
    elif isinstance(axis, int):
        count = a.shape[axis]
    else:
        count = int(np.prod([a.shape[d] for d in axis]))
    return mul(reduce_sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


# ---------------------------------------------------------------------------
# Softmax, losses, lookups
# ---------------------------------------------------------------------------


def softmax_lastdim(a, mask=None) -> Tensor:
    """Numerically stable softmax over the last axis.

    ``mask`` entries of 1 block a position via an additive ``MASK_FILL``
    before exponentiation, so blocked weights are exactly 0. A slice with
    every position blocked is an error.
    """
    a = _coerce(a, DEFAULT_DTYPE)
    logits = a.data
    if mask is not None:
        md = mask.data if isinstance(mask, Tensor) else np.asarray(mask)
        md = md.astype(logits.dtype, copy=False)
        try:
            full = np.broadcast_to(md, logits.shape)
        except ValueError:
            raise NumericsError(
                f"softmax mask shape {md.shape} does not broadcast to "
                f"{tuple(logits.shape)}"
            ) from None
        if full.shape[-1] and bool(np.any(full.min(axis=-1) >= 0.5)):
            raise NumericsError("fully masked attention row")
        logits = logits + md * MASK_FILL
    m = logits.max(axis=-1, keepdims=True)
    e = np.exp(logits - m)
    out = e / e.sum(axis=-1, keepdims=True)
    if not a.requires_grad:
        return Tensor(out)

    def backward(g):
        inner = (g * out).sum(axis=-1, keepdims=True)
        _accum(a, out * (g - inner))

    return _node(out, (a,), backward)


def cross_entropy(logits, labels) -> Tensor:
    """Mean softmax cross-entropy. logits [b, c], labels int [b] -> scalar."""
    logits = _coerce(logits, DEFAULT_DTYPE)
    labels = np.asarray(labels)
    if logits.ndim != 2:
        raise NumericsError(f"cross_entropy expects [batch, classes], got {tuple(logits.shape)}")
    b, c = logits.shape
    if labels.shape != (b,):
        raise NumericsError(f"labels shape {labels.shape} does not match batch {b}")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise NumericsError("label id out of range")
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - lse
    rows = np.arange(b)
    data = np.asarray(-logp[rows, labels].mean() if b else 0.0, dtype=logits.dtype)
    if not logits.requires_grad:
        return Tensor(data)

    def backward(g):
        grad = np.exp(logp)
        grad[rows, labels] -= 1.0
        _accum(logits, (float(g) / b) * grad)

    return _node(data, (logits,), backward)


def embedding(table, ids) -> Tensor:
    """Row lookup table [v, d] by integer ids [...] -> [..., d]."""
    table = _coerce(table, DEFAULT_DTYPE)
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise NumericsError(
            f"embedding id out of range for table of {table.shape[0]} rows"
        )
    data = table.data[ids]
    if not table.requires_grad:
        return Tensor(data)

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids, g)
        _accum(table, gt)

    return _node(data, (table,), backward)


def backward(loss: Tensor):
    """Free-function alias for ``Tensor.backward``."""
    loss.backward()


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------


@dataclass
class Parameter:
    """A named trainable tensor; ``value.requires_grad`` is always true."""

    name: str
    value: Tensor


class ParameterRegistry:
    """Every trainable tensor of a model, exactly once, keyed by unique name."""

    def __init__(self):
        self._params: dict[str, Parameter] = {}

    def create(self, name: str, values) -> Parameter:
        if name in self._params:
            raise NumericsError(f"duplicate parameter name: {name}")
        tensor = Tensor(values)
        tensor.requires_grad = True
        param = Parameter(name, tensor)
        self._params[name] = param
        return param

    def get(self, name: str) -> Parameter:
        return self._params[name]

    def names(self):
        return list(self._params)

    def parameters(self):
        return list(self._params.values())

    def count_values(self) -> int:
        return sum(p.value.size for p in self._params.values())

    def zero_grad(self):
        for p in self._params.values():
            p.value.grad = None

    def __len__(self):
        return len(self._params)

    def __iter__(self):
        return iter(self._params.values())

    def __contains__(self, name):
        return name in self._params


class Linear:
    """Affine map ``x @ w + b`` with fan-based uniform init, zero bias."""

    def __init__(self, registry: ParameterRegistry, name: str, d_in: int,
                 d_out: int, rng: np.random.Generator, dtype=DEFAULT_DTYPE):
        limit = math.sqrt(6.0 / (d_in + d_out))
        w = rng.uniform(-limit, limit, size=(d_in, d_out)).astype(dtype)
        self.w = registry.create(f"{name}.w", w)
        self.b = registry.create(f"{name}.b", np.zeros(d_out, dtype=dtype))

    def __call__(self, x) -> Tensor:
        return linear(x, self.w.value, self.b.value)


# ---------------------------------------------------------------------------
# Finite differences
# ---------------------------------------------------------------------------


def finite_difference_check(f, param: Parameter, h: float = 1e-5) -> float:
    """Max relative error between backprop and central differences over every
    coordinate of ``param``. ``f`` must rebuild its graph on each call and
    return a scalar Tensor.
    """
    if h <= 0:
        raise NumericsError("finite_difference_check needs h > 0")

    def run() -> float:
        out = f()
        value = float(out.data.reshape(()))
        if not np.isfinite(value):
            raise NumericsError("non-finite objective during finite differences")
        return value

    param.value.zero_grad()
    loss = f()
    if loss.data.size != 1:
        raise NumericsError("finite_difference_check objective must be scalar")
    if not np.isfinite(float(loss.data.reshape(()))):
        raise NumericsError("non-finite objective during finite differences")
    loss.backward()
    if param.value.grad is None:
        analytic = np.zeros_like(param.value.data)
    else:
        analytic = param.value.grad.copy()

    flat = param.value.data.reshape(-1)
    analytic_flat = analytic.reshape(-1)
    worst = 0.0
    for i in range(flat.size):
        saved = flat[i]
        flat[i] = saved + h
        up = run()
        flat[i] = saved - h
        down = run()
        flat[i] = saved
        numeric = (up - down) / (2.0 * h)
        denom = max(abs(analytic_flat[i]), abs(numeric), 1e-8)
        worst = max(worst, abs(analytic_flat[i] - numeric) / denom)
    param.value.zero_grad()
    return worst


def finite_difference_sweep(f, params, h: float = 1e-5) -> dict:
    """finite_difference_check over a collection; returns name -> max error."""
    return {p.name: finite_difference_check(f, p, h) for p in params}
