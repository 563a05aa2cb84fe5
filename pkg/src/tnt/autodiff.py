"""Dense float64 tensors with a reverse-mode gradient tape.

Every differentiable op produces a new :class:`Tensor` that remembers its
parents, the op name and whatever the backward rule needs.  Backward rules
live in :data:`BACKWARD_RULES`, keyed by op name, so a rule can be looked up
(or swapped out in a test) by name.

Storage is a numpy array; numpy does the kernels, the differentiation is ours.
"""
from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

DTYPE = np.float64
_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)

BACKWARD_RULES: dict[str, Callable] = {}

_state = threading.local()


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


class NonScalarLoss(ValueError):
    pass


def grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording on the current thread."""
    prev = grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


def backward_rule(op: str):
    def register(fn):
        BACKWARD_RULES[op] = fn
        return fn

    return register


class Tensor:
    """An n-dimensional float64 array that may take part in the gradient tape."""

    __slots__ = ("data", "requires_grad", "grad", "op", "parents", "ctx")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.op: str | None = None
        self.parents: tuple[Tensor, ...] = ()
        self.ctx = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f", op={self.op}" if self.op else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, _as_tensor(other))

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, scale(_as_tensor(other), -1.0))

    def __rsub__(self, other):
        return add(_as_tensor(other), scale(self, -1.0))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return multiply(self, _as_tensor(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return slice_(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, op: str, parents: Sequence[Tensor], ctx=None) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    track = grad_enabled() and any(p.requires_grad for p in parents)
    out.requires_grad = track
    if track:
        out.op = op
        out.parents = tuple(parents)
        out.ctx = ctx
    else:
        out.op = None
        out.parents = ()
        out.ctx = None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: cannot combine shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("add", a, b)
    return _make(a.data + b.data, "add", (a, b))


@backward_rule("add")
def _add_backward(ctx, g, parents):
    a, b = parents
    return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)


def multiply(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("multiply", a, b)
    return _make(a.data * b.data, "multiply", (a, b))


@backward_rule("multiply")
def _multiply_backward(ctx, g, parents):
    a, b = parents
    return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)


def scale(x: Tensor, factor: float) -> Tensor:
    return _make(x.data * factor, "scale", (x,), factor)


@backward_rule("scale")
def _scale_backward(factor, g, parents):
    return (g * factor,)


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, ``x * Phi(x)`` with Phi from erf."""
    cdf = 0.5 * (1.0 + erf(x.data / _SQRT2))
    return _make(x.data * cdf, "gelu", (x,), cdf)


@backward_rule("gelu")
def _gelu_backward(cdf, g, parents):
    x = parents[0].data
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
    return (g * (cdf + x * pdf),)


def sigmoid(x: Tensor) -> Tensor:
    y = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _make(y, "sigmoid", (x,), y)


@backward_rule("sigmoid")
def _sigmoid_backward(y, g, parents):
    return (g * y * (1.0 - y),)


# ---------------------------------------------------------------- reductions


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, x.ndim)
    return _make(x.data.sum(axis=axes, keepdims=keepdims), "sum", (x,), (axes, keepdims))


@backward_rule("sum")
def _sum_backward(ctx, g, parents):
    axes, keepdims = ctx
    x = parents[0]
    if not keepdims:
        g = np.expand_dims(g, axes)
    return (np.broadcast_to(g, x.shape).copy(),)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    return _make(x.data.mean(axis=axes, keepdims=keepdims), "mean", (x,), (axes, keepdims, count))


@backward_rule("mean")
def _mean_backward(ctx, g, parents):
    axes, keepdims, count = ctx
    x = parents[0]
    if not keepdims:
        g = np.expand_dims(g, axes)
    return (np.broadcast_to(g / count, x.shape).copy(),)


# ---------------------------------------------------------------- shape ops


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    try:
        data = x.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot view {x.shape} as {shape}") from None
    return _make(data, "reshape", (x,), x.shape)


@backward_rule("reshape")
def _reshape_backward(in_shape, g, parents):
    return (g.reshape(in_shape),)


def vectorize(x: Tensor, trailing: int) -> Tensor:
    """Row-major flatten of the last ``trailing`` axes into one."""
    lead = x.shape[: x.ndim - trailing]
    return reshape(x, lead + (int(np.prod(x.shape[x.ndim - trailing :])),))


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None or len(axes) == 0:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(int(a) % x.ndim for a in axes)
    if sorted(axes) != list(range(x.ndim)):
        raise DimensionError(f"transpose: {axes} is not a permutation for shape {x.shape}")
    return _make(np.ascontiguousarray(x.data.transpose(axes)), "transpose", (x,), axes)


@backward_rule("transpose")
def _transpose_backward(axes, g, parents):
    return (g.transpose(np.argsort(axes)),)


def swap_last(x: Tensor) -> Tensor:
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, axes)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    ref = tensors[0]
    axis = axis % ref.ndim
    for t in tensors[1:]:
        if t.ndim != ref.ndim or any(
            t.shape[i] != ref.shape[i] for i in range(ref.ndim) if i != axis
        ):
            raise DimensionError(f"concat: shapes {ref.shape} and {t.shape} differ off axis {axis}")
    sizes = [t.shape[axis] for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    return _make(data, "concat", tensors, (axis, sizes))


@backward_rule("concat")
def _concat_backward(ctx, g, parents):
    axis, sizes = ctx
    return tuple(np.split(g, np.cumsum(sizes)[:-1], axis=axis))


def slice_(x: Tensor, index) -> Tensor:
    return _make(np.array(x.data[index]), "slice", (x,), index)


@backward_rule("slice")
def _slice_backward(index, g, parents):
    full = np.zeros(parents[0].shape, dtype=DTYPE)
    np.add.at(full, index, g)
    return (full,)


def split(x: Tensor, sizes: Sequence[int], axis: int = 0) -> list[Tensor]:
    axis = axis % x.ndim
    if sum(sizes) != x.shape[axis]:
        raise DimensionError(f"split: sizes {list(sizes)} do not cover axis {axis} of {x.shape}")
    out, start = [], 0
    for n in sizes:
        idx = [slice(None)] * x.ndim
        idx[axis] = slice(start, start + n)
        out.append(slice_(x, tuple(idx)))
        start += n
    return out


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: inner dimensions disagree, {a.shape} @ {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise DimensionError(f"matmul: batch dims not broadcastable, {a.shape} @ {b.shape}") from None
    return _make(np.matmul(a.data, b.data), "matmul", (a, b))


@backward_rule("matmul")
def _matmul_backward(ctx, g, parents):
    a, b = parents
    ga = np.matmul(g, np.swapaxes(b.data, -1, -2)) if a.requires_grad else None
    gb = np.matmul(np.swapaxes(a.data, -1, -2), g) if b.requires_grad else None
    return (
        None if ga is None else _unbroadcast(ga, a.shape),
        None if gb is None else _unbroadcast(gb, b.shape),
    )


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ W + b`` over the last axis of ``x``; ``W`` is (in, out)."""
    if weight.ndim != 2 or x.shape[-1] != weight.shape[0]:
        raise DimensionError(f"linear: input {x.shape} does not fit weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[1],):
        raise DimensionError(f"linear: bias {bias.shape} does not fit weight {weight.shape}")
    out = x.data @ weight.data
    parents = (x, weight)
    if bias is not None:
        out = out + bias.data
        parents = (x, weight, bias)
    return _make(out, "linear", parents)


@backward_rule("linear")
def _linear_backward(ctx, g, parents):
    x, w = parents[0], parents[1]
    g2 = g.reshape(-1, g.shape[-1])
    gx = g @ w.data.T if x.requires_grad else None
    gw = x.data.reshape(-1, x.shape[-1]).T @ g2 if w.requires_grad else None
    if len(parents) == 3:
        return gx, gw, g2.sum(axis=0)
    return gx, gw


# ---------------------------------------------------------------- normalizers


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    axis = _norm_axis(axis, x.ndim)[0]
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    return _make(y, "softmax", (x,), (axis, y))


@backward_rule("softmax")
def _softmax_backward(ctx, g, parents):
    axis, y = ctx
    return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    axis = _norm_axis(axis, x.ndim)[0]
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse
    return _make(y, "log_softmax", (x,), (axis, y))


@backward_rule("log_softmax")
def _log_softmax_backward(ctx, g, parents):
    axis, y = ctx
    return (g - np.exp(y) * g.sum(axis=axis, keepdims=True),)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis with the biased variance, eps inside the root."""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(f"layer_norm: affine {gamma.shape}/{beta.shape} vs input {x.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    return _make(xhat * gamma.data + beta.data, "layer_norm", (x, gamma, beta), (xhat, inv))


@backward_rule("layer_norm")
def _layer_norm_backward(ctx, g, parents):
    xhat, inv = ctx
    x, gamma, _ = parents
    gx = None
    if x.requires_grad:
        gh = g * gamma.data
        gx = inv * (
            gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True)
        )
    d = x.shape[-1]
    ggamma = (g * xhat).reshape(-1, d).sum(axis=0)
    gbeta = g.reshape(-1, d).sum(axis=0)
    return gx, ggamma, gbeta


# ---------------------------------------------------------------- tape


class Tape:
    """Topologically ordered record of the ops that produced a tensor.

    ``nodes`` lists every tracked tensor reachable from the root exactly once,
    each after all of its parents.
    """

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def trace(cls, root: Tensor) -> Tape:
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node.parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        return cls(order)

    def __len__(self) -> int:
        return len(self.nodes)

    def ops(self) -> list[str]:
        return [n.op for n in self.nodes if n.op is not None]


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf that requires it."""
    if loss.data.size != 1:
        raise NonScalarLoss(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss is not on the tape (no input requires grad)")
    tape = Tape.trace(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape, dtype=DTYPE)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.op is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        in_grads = BACKWARD_RULES[node.op](node.ctx, g, node.parents)
        for parent, pg in zip(node.parents, in_grads):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


def parameters_of(tensors: Iterable[Tensor]) -> list[Tensor]:
    return [t for t in tensors if t.requires_grad]
