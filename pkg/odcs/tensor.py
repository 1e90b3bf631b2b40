"""
Dense tensors with reverse-mode differentiation
===============================================

A :class:`Tensor` wraps a ``numpy`` array. Primitive operations executed while a
:class:`Graph` is active append a node to that graph; :func:`backward` then walks
the nodes in exact reverse execution order and accumulates gradients.

    >>> from odcs.tensor import Tensor, Graph, backward
    >>> x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    >>> with Graph() as graph:
    ...     loss = (x * x).sum()
    >>> backward(loss, graph)
    >>> x.grad
    array([2., 4., 6.], dtype=float32)

Outside a graph nothing is recorded, which is how inference runs.
"""

import contextlib
from contextvars import ContextVar
from dataclasses import dataclass
from typing import Callable, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import ContractError, DimensionError, NonFiniteError

SUPPORTED_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))

Number = Union[int, float]
BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]

_active_graph: "ContextVar[Optional[Graph]]" = ContextVar("odcs_active_graph", default=None)
_debug: ContextVar[bool] = ContextVar("odcs_debug", default=False)


class Tensor:
    """
    Dense N-dimensional array with optional gradient tracking.

    Args:
        data: anything ``numpy.asarray`` accepts
        requires_grad: whether :func:`backward` should populate ``grad``
        dtype: ``float32`` (default) or ``float64``
    """

    def __init__(self, data, requires_grad: bool = False, dtype=np.float32):
        dtype = np.dtype(dtype)
        if dtype not in SUPPORTED_DTYPES:
            raise ContractError(f"unsupported tensor dtype {dtype}; use float32 or float64")
        self.data: np.ndarray = np.array(data, dtype=dtype)
        if any(d <= 0 for d in self.data.shape):
            raise DimensionError(f"tensor dimensions must be positive, got {self.data.shape}")
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._node: Optional["Node"] = None

    @classmethod
    def _wrap(cls, array: np.ndarray) -> "Tensor":
        out = cls.__new__(cls)
        out.data = array
        out.requires_grad = False
        out.grad = None
        out._node = None
        return out

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        """Same values, no history, no gradient tracking"""
        return Tensor._wrap(self.data)

    def zero_grad(self):
        if self.grad is not None:
            self.grad = np.zeros_like(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # Operators

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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def sum(self, axis=None) -> "Tensor":
        return tensor_sum(self, axis)

    def mean(self) -> "Tensor":
        return mean(self)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


@dataclass
class Node:
    """One executed primitive: its inputs, its output and its vector-Jacobian product"""

    op: str
    inputs: Tuple[Tensor, ...]
    output: Tensor
    backward: BackwardFn


class Graph:
    """
    Append-only record of executed primitives.

    Use as a context manager; primitives run inside the ``with`` block are
    recorded when at least one input requires a gradient.

    Args:
        debug: check every op's output for NaN/Inf and raise :class:`NonFiniteError`
    """

    def __init__(self, debug: bool = False):
        self.nodes: List[Node] = []
        self.debug = debug
        self._tokens: list = []

    def __enter__(self) -> "Graph":
        self._tokens.append(_active_graph.set(self))
        return self

    def __exit__(self, *exc):
        _active_graph.reset(self._tokens.pop())
        return False

    def __len__(self):
        return len(self.nodes)

    def append(self, node: Node):
        self.nodes.append(node)


def current_graph() -> Optional[Graph]:
    return _active_graph.get()


@contextlib.contextmanager
def debug_mode(enabled: bool = True) -> Iterator[None]:
    """Check every op's output for NaN/Inf, also outside a graph"""
    token = _debug.set(enabled)
    try:
        yield
    finally:
        _debug.reset(token)


def record(op: str, inputs: Sequence[Tensor], data: np.ndarray, vjp: BackwardFn) -> Tensor:
    """
    Build the output tensor of a primitive and record it in the active graph.

    ``vjp`` maps the output gradient to one gradient (or None) per input.
    """
    data = np.asarray(data)
    graph = _active_graph.get()
    if (graph is not None and graph.debug) or _debug.get():
        if not np.all(np.isfinite(data)):
            raise NonFiniteError(op)
    out = Tensor._wrap(data)
    if graph is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        node = Node(op, tuple(inputs), out, vjp)
        out._node = node
        graph.append(node)
    return out


def backward(loss: Tensor, graph: Optional[Graph] = None):
    """
    Populate ``grad`` on every leaf tensor with ``requires_grad`` reachable from ``loss``.

    The seed gradient is 1.0. Leaf gradients accumulate across calls; clear them
    with :func:`odcs.optim.zero_grad`.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a single-element loss, got shape {loss.shape}")
    if loss._node is None:
        raise ContractError("loss was not produced by recorded operations inside a Graph")
    if graph is None:
        graph = _active_graph.get()
    if graph is None:
        raise ContractError("backward needs the Graph the loss was recorded in")

    grads = {id(loss): np.ones(loss.shape, dtype=loss.dtype)}
    leaves = {}
    for node in reversed(graph.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        for inp, ig in zip(node.inputs, node.backward(g)):
            if ig is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + ig
            else:
                grads[key] = ig
            if inp._node is None:
                leaves[key] = inp

    for key, leaf in leaves.items():
        g = np.asarray(grads[key], dtype=leaf.dtype).reshape(leaf.shape)
        leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g


# Elementwise and reduction primitives


def as_tensor(value, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    dtype = like.dtype if like is not None else np.float32
    return Tensor._wrap(np.asarray(value, dtype=dtype))


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``"""
    if grad.shape == shape:
        return grad
    dtype = grad.dtype
    lead = grad.ndim - len(shape)
    if lead > 0:
        grad = grad.sum(axis=tuple(range(lead)), dtype=np.float64)
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True, dtype=np.float64)
    return grad.reshape(shape).astype(dtype)


def _pair(a, b) -> Tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, as_tensor(b, a)
    b = as_tensor(b)
    return as_tensor(a, b), b


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> Tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError as e:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from e


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast("add", a, b)

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return record("add", (a, b), a.data + b.data, vjp)


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast("sub", a, b)

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return record("sub", (a, b), a.data - b.data, vjp)


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast("mul", a, b)

    def vjp(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return record("mul", (a, b), a.data * b.data, vjp)


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast("div", a, b)
    out = a.data / b.data

    def vjp(g):
        return _unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)

    return record("div", (a, b), out, vjp)


def neg(a: Tensor) -> Tensor:
    return record("neg", (a,), -a.data, lambda g: (-g,))


def square(a: Tensor) -> Tensor:
    return record("square", (a,), a.data * a.data, lambda g: (2.0 * a.data * g,))


def tensor_sum(a: Tensor, axis=None) -> Tensor:
    """Sum over ``axis`` (all axes when None); accumulates in 64-bit"""
    if isinstance(axis, int):
        axis = (axis,)
    if axis is not None:
        axis = tuple(ax % a.ndim for ax in axis)
    out = np.sum(a.data, axis=axis, dtype=np.float64).astype(a.dtype)

    def vjp(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).astype(a.dtype),)

    return record("sum", (a,), np.asarray(out), vjp)


def mean(a: Tensor) -> Tensor:
    n = a.size
    out = np.asarray(np.mean(a.data, dtype=np.float64), dtype=a.dtype)
    return record("mean", (a,), out, lambda g: (np.full(a.shape, g / n, dtype=a.dtype),))


def reshape(a: Tensor, shape) -> Tensor:
    try:
        out = a.data.reshape(shape)
    except ValueError as e:
        raise DimensionError(f"reshape: cannot view {a.shape} as {tuple(shape)}") from e
    return record("reshape", (a,), out, lambda g: (g.reshape(a.shape),))


def zeros(shape, requires_grad: bool = False, dtype=np.float32) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=requires_grad, dtype=dtype)


def ones(shape, requires_grad: bool = False, dtype=np.float32) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=requires_grad, dtype=dtype)
