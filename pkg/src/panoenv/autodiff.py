"""Reverse-mode automatic differentiation over dense float64 arrays.

Every op returns a new :class:`Tensor`. When at least one input requires a
gradient the output remembers its parents and a closure that maps the output
gradient to input gradients; :func:`backward` walks that graph once in reverse
topological order. Graphs are per-expression, so independent computations in
different threads never share state.
"""

from __future__ import annotations

import contextlib
import math
import threading
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "NumericError",
    "tensor",
    "parameter",
    "matmul",
    "add",
    "sub",
    "mul",
    "neg",
    "relu",
    "gelu",
    "tanh",
    "exp",
    "log",
    "elementwise",
    "sum",
    "mean",
    "reshape",
    "transpose",
    "expand",
    "take",
    "concat",
    "softmax",
    "log_softmax",
    "softmax_cross_entropy",
    "kl_divergence",
    "backward",
    "zero_grad",
    "sgd_step",
    "Adam",
    "no_grad",
]

_state = threading.local()


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Within the block, ops record no graph (inference only). Thread-local."""
    prev = getattr(_state, "disabled", False)
    _state.disabled = True
    try:
        yield
    finally:
        _state.disabled = prev


class NumericError(FloatingPointError):
    """Raised when an op produces NaN or Inf."""


def _check_finite(data: np.ndarray, op: str) -> np.ndarray:
    if not np.all(np.isfinite(data)):
        raise NumericError(f"{op} produced non-finite values")
    return data


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        _parents: tuple["Tensor", ...] = (),
        _backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None,
        name: str | None = None,
    ):
        arr = np.asarray(data, dtype=np.float64)
        if arr.size == 0:
            raise ValueError("tensors must have at least one element")
        self.data = _check_finite(arr, name or "tensor")
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents = _parents
        self._backward = _backward
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError("item() requires a single-element tensor")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

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
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return data if isinstance(data, Tensor) else Tensor(data, requires_grad=requires_grad)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64, copy=True), requires_grad=True, name=name)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, op: str, parents: tuple[Tensor, ...], grad_fn) -> Tensor:
    if not getattr(_state, "disabled", False) and any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, _parents=parents, _backward=grad_fn, name=op)
    return Tensor(data, name=op)


# ---------------------------------------------------------------------------
# elementwise


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape == b.shape or a.data.ndim == 0 or b.data.ndim == 0:
        return
    raise ValueError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def _reduce_to(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    return np.asarray(grad.sum()).reshape(shape)


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "add")

    def grad_fn(g):
        return _reduce_to(g, a.shape), _reduce_to(g, b.shape)

    return _make(a.data + b.data, "add", (a, b), grad_fn)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "sub")

    def grad_fn(g):
        return _reduce_to(g, a.shape), _reduce_to(-g, b.shape)

    return _make(a.data - b.data, "sub", (a, b), grad_fn)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "mul")

    def grad_fn(g):
        return _reduce_to(g * b.data, a.shape), _reduce_to(g * a.data, b.shape)

    return _make(a.data * b.data, "mul", (a, b), grad_fn)


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _make(-a.data, "neg", (a,), lambda g: (-g,))


def relu(a) -> Tensor:
    a = _as_tensor(a)
    on = a.data > 0
    return _make(np.where(on, a.data, 0.0), "relu", (a,), lambda g: (g * on,))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a) -> Tensor:
    """GELU, tanh approximation."""
    a = _as_tensor(a)
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x**3)
    th = np.tanh(inner)
    out = 0.5 * x * (1.0 + th)

    def grad_fn(g):
        d_inner = _GELU_C * (1.0 + 3 * 0.044715 * x**2)
        return (g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th**2) * d_inner),)

    return _make(out, "gelu", (a,), grad_fn)


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, "tanh", (a,), lambda g: (g * (1.0 - out**2),))


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.data)
    return _make(out, "exp", (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = _as_tensor(a)
    if np.any(a.data <= 0):
        raise NumericError("log of non-positive value")
    return _make(np.log(a.data), "log", (a,), lambda g: (g / a.data,))


_ELEMENTWISE = {"add": add, "mul": mul, "sub": sub, "relu": relu, "gelu": gelu, "gelu_tanh_approx": gelu, "tanh": tanh}


def elementwise(op: str, *args) -> Tensor:
    """Dispatch an elementwise op by name (``add``, ``mul``, ``relu``, ``gelu_tanh_approx`` ...)."""
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    return fn(*args)


# ---------------------------------------------------------------------------
# linear algebra and shape ops


def matmul(a, b) -> Tensor:
    """Matrix product. ``a`` may carry leading batch dims; ``b`` is 2-D or has the same batch dims."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul needs at least 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    if b.ndim > 2 and b.shape[:-2] != a.shape[:-2]:
        raise ValueError(f"matmul: batch dimensions differ, {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def grad_fn(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        if b.ndim == 2 and gb.ndim > 2:
            gb = gb.reshape(-1, *b.shape).sum(axis=0)
        return ga, gb

    return _make(out, "matmul", (a, b), grad_fn)


def sum(a, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = _as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def grad_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(np.asarray(out), "sum", (a,), grad_fn)


def mean(a, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    if axis is None:
        count = a.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([a.shape[i] for i in axes]))
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = _as_tensor(a)
    out = a.data.reshape(shape)
    return _make(out, "reshape", (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes: Sequence[int] | None = None) -> Tensor:
    a = _as_tensor(a)
    if axes is None:
        axes = tuple(range(a.ndim))[:-2] + (a.ndim - 1, a.ndim - 2)
    inv = np.argsort(axes)
    return _make(np.transpose(a.data, axes), "transpose", (a,), lambda g: (np.transpose(g, inv),))


def expand(a, shape: Sequence[int]) -> Tensor:
    """Explicit numpy-style broadcast; elementwise ops never broadcast implicitly."""
    a = _as_tensor(a)
    shape = tuple(shape)
    out = np.broadcast_to(a.data, shape).copy()
    lead = len(shape) - a.ndim

    def grad_fn(g):
        g = g.sum(axis=tuple(range(lead))) if lead else g
        axes = tuple(i for i, n in enumerate(a.shape) if n == 1 and g.shape[i] != 1)
        if axes:
            g = g.sum(axis=axes, keepdims=True)
        return (g,)

    return _make(out, "expand", (a,), grad_fn)


def take(table, ids) -> Tensor:
    """Gather rows of ``table`` (embedding lookup)."""
    table = _as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError("take: row index out of range")

    def grad_fn(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids, g)
        return (gt,)

    return _make(table.data[ids], "take", (table,), grad_fn)


def concat(tensors: Iterable, axis: int = -1) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in ts], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def grad_fn(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(out, "concat", tuple(ts), grad_fn)


# ---------------------------------------------------------------------------
# probabilistic heads


def _log_softmax_np(x: np.ndarray, axis: int) -> np.ndarray:
    shifted = x - x.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def softmax(a, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(_log_softmax_np(a.data, axis))

    def grad_fn(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, "softmax", (a,), grad_fn)


def log_softmax(a, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    out = _log_softmax_np(a.data, axis)
    p = np.exp(out)

    def grad_fn(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return _make(out, "log_softmax", (a,), grad_fn)


def softmax_cross_entropy(logits, targets) -> Tensor:
    """Mean over rows of ``-log softmax(logits)[target]``."""
    logits = _as_tensor(logits)
    if logits.ndim != 2:
        raise ValueError("softmax_cross_entropy expects n x c logits")
    n, c = logits.shape
    if c < 2:
        raise ValueError("softmax_cross_entropy needs at least two classes")
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    if targets.shape[0] != n:
        raise ValueError("one target per row required")
    if np.any(targets < 0) or np.any(targets >= c):
        raise IndexError("target class out of range")
    logp = _log_softmax_np(logits.data, 1)
    rows = np.arange(n)
    loss = -logp[rows, targets].mean()

    def grad_fn(g):
        d = np.exp(logp)
        d[rows, targets] -= 1.0
        return (g * d / n,)

    return _make(np.asarray(loss), "softmax_cross_entropy", (logits,), grad_fn)


def kl_divergence(target_probs, predicted_log_probs) -> Tensor:
    """Mean over rows of ``sum_j P_j (log P_j - log Q_j)``; zero-probability targets contribute 0."""
    p = _as_tensor(target_probs)
    lq = _as_tensor(predicted_log_probs)
    if p.shape != lq.shape or p.ndim != 2:
        raise ValueError("kl_divergence expects matching n x c operands")
    if np.any(p.data < 0):
        raise ValueError("target probabilities must be non-negative")
    if np.any(np.abs(p.data.sum(axis=1) - 1.0) > 1e-6):
        raise ValueError("target rows must sum to 1")
    n = p.shape[0]
    pos = p.data > 0
    logp = np.where(pos, np.log(np.where(pos, p.data, 1.0)), 0.0)
    terms = np.where(pos, p.data * (logp - lq.data), 0.0)
    loss = terms.sum() / n

    def grad_fn(g):
        gp = np.where(pos, logp + 1.0 - lq.data, 0.0) * g / n
        gq = -p.data * g / n
        return gp, gq

    return _make(np.asarray(loss), "kl_divergence", (p, lq), grad_fn)


# ---------------------------------------------------------------------------
# backward pass and optimisers


def _topo_order(root: Tensor) -> list[Tensor]:
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
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Accumulate d(loss)/d(leaf) into every reachable leaf's ``.grad``.

    Returns the gradients contributed by this call, keyed by leaf. Interior
    nodes drop their closures afterwards, so a graph can be walked only once.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return {}
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    contributed: dict[Tensor, np.ndarray] = {}
    for node in reversed(_topo_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g.copy() if node.grad is None else node.grad + g
            contributed[node] = g
            continue
        parent_grads = node._backward(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            if id(parent) in grads:
                grads[id(parent)] = grads[id(parent)] + pg
            else:
                grads[id(parent)] = pg
        node._parents = ()
        node._backward = None
    return contributed


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


def sgd_step(params: Sequence[Tensor], grads: Sequence[np.ndarray | None], lr: float) -> None:
    """In-place ``p <- p - lr * g``. Missing gradients leave the parameter untouched."""
    if lr < 0:
        raise ValueError("learning rate must be non-negative")
    if len(params) != len(grads):
        raise ValueError("params and grads differ in length")
    for p, g in zip(params, grads):
        if g is None:
            continue
        if np.shape(g) != p.shape:
            raise ValueError(f"gradient shape {np.shape(g)} != parameter shape {p.shape}")
        p.data = _check_finite(p.data - lr * np.asarray(g), "sgd_step")


class Adam:
    """Adam with bias correction; defaults follow the agent training recipe (beta2 = 0.98)."""

    def __init__(self, params: Sequence[Tensor], lr: float = 1e-3, betas=(0.9, 0.98), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            g = p.grad
            self.m[i] = self.b1 * self.m[i] + (1 - self.b1) * g
            self.v[i] = self.b2 * self.v[i] + (1 - self.b2) * g * g
            update = self.lr * (self.m[i] / c1) / (np.sqrt(self.v[i] / c2) + self.eps)
            p.data = _check_finite(p.data - update, "adam")

    def zero_grad(self) -> None:
        zero_grad(self.params)
