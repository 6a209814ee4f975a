"""
Dense float64 tensors with reverse-mode automatic differentiation.

A `Tensor` wraps a C-ordered numpy float64 array. Operations are `Function`
subclasses: `forward` works on raw arrays, `backward` maps the gradient of
the output to gradients of the inputs. `Tensor.backward` walks the recorded
graph in a fixed topological order, so accumulation is deterministic.
"""
from __future__ import annotations

import contextlib
from typing import Any, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import DimensionError

ArrayLike = Union[np.ndarray, Sequence, float, int]

_grad_enabled = True


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block (inference, teacher forwards)."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


def is_grad_enabled() -> bool:
    return _grad_enabled


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Function:
    """
    Base class for differentiable operations.

    Subclasses implement `forward(*arrays, **kwargs) -> np.ndarray` and
    `backward(grad) -> tuple` with one entry (array or None) per input tensor.
    """

    def __init__(self, *tensors: "Tensor"):
        self.parents = tensors

    def forward(self, *args: np.ndarray, **kwargs: Any) -> np.ndarray:
        raise NotImplementedError(f"{type(self).__name__} has no forward pass")

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        raise NotImplementedError(f"{type(self).__name__} has no backward pass")

    @classmethod
    def apply(cls, *tensors: "Tensor", **kwargs: Any) -> "Tensor":
        func = cls(*tensors)
        out_data = func.forward(*(t.data for t in tensors), **kwargs)
        requires_grad = _grad_enabled and any(t.requires_grad for t in tensors)
        return Tensor(out_data, requires_grad=requires_grad, _ctx=func if requires_grad else None)


class Tensor:
    """N-dimensional float64 value participating in the gradient tape."""

    def __init__(self, data: ArrayLike, requires_grad: bool = False, _ctx: Optional[Function] = None):
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._ctx = _ctx

    # --------- construction helpers ---------

    @staticmethod
    def zeros(*shape: int, requires_grad: bool = False) -> "Tensor":
        return Tensor(np.zeros(shape), requires_grad=requires_grad)

    @staticmethod
    def ensure(value: Union["Tensor", ArrayLike]) -> "Tensor":
        return value if isinstance(value, Tensor) else Tensor(value)

    # --------- metadata ---------

    @property
    def shape(self) -> Tuple[int, ...]:
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
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # --------- arithmetic ---------

    def __add__(self, other):
        return Add.apply(self, Tensor.ensure(other))

    __radd__ = __add__

    def __sub__(self, other):
        return Sub.apply(self, Tensor.ensure(other))

    def __rsub__(self, other):
        return Sub.apply(Tensor.ensure(other), self)

    def __mul__(self, other):
        return Mul.apply(self, Tensor.ensure(other))

    __rmul__ = __mul__

    def __truediv__(self, other: float):
        if isinstance(other, Tensor):
            raise TypeError("division is only defined by Python scalars")
        return Mul.apply(self, Tensor(1.0 / other))

    def __neg__(self):
        return Neg.apply(self)

    def __matmul__(self, other):
        other = Tensor.ensure(other)
        if self.ndim < 2 or other.ndim < 2 or self.shape[-1] != other.shape[-2]:
            raise DimensionError("matmul", self.shape, other.shape)
        return MatMul.apply(self, other)

    def __getitem__(self, index):
        return Index.apply(self, index=index)

    # --------- shape ops ---------

    def reshape(self, *shape: int) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return Reshape.apply(self, shape=shape)

    def transpose(self, *axes: int) -> "Tensor":
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        return Transpose.apply(self, axes=axes)

    @property
    def T(self) -> "Tensor":
        return self.transpose()

    # --------- reductions / elementwise ---------

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return Sum.apply(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        count = self.size if axis is None else int(np.prod([self.shape[a] for a in np.atleast_1d(axis)]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    def exp(self) -> "Tensor":
        return Exp.apply(self)

    def log(self) -> "Tensor":
        return Log.apply(self)

    def tanh(self) -> "Tensor":
        return Tanh.apply(self)

    # --------- autodiff ---------

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad: Optional[ArrayLike] = None) -> None:
        """Accumulate d(self)/d(leaf) into `.grad` of every leaf requiring grad."""
        if grad is None:
            if self.size != 1:
                raise ValueError("backward() without a gradient needs a scalar tensor")
            grad = np.ones_like(self.data)
        grads = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in reversed(_topological_order(self)):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._ctx is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, parent_grad in zip(node._ctx.parents, node._ctx.backward(g)):
                if parent_grad is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = parent_grad if key not in grads else grads[key] + parent_grad


def _topological_order(root: Tensor) -> List[Tensor]:
    order: List[Tensor] = []
    visited = set()
    stack: List[Tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        if node._ctx is not None:
            for parent in node._ctx.parents:
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))
    return order


# ============ primitive functions ============

class Add(Function):
    def forward(self, a, b):
        self.shapes = (a.shape, b.shape)
        return a + b

    def backward(self, grad):
        return _unbroadcast(grad, self.shapes[0]), _unbroadcast(grad, self.shapes[1])


class Sub(Function):
    def forward(self, a, b):
        self.shapes = (a.shape, b.shape)
        return a - b

    def backward(self, grad):
        return _unbroadcast(grad, self.shapes[0]), _unbroadcast(-grad, self.shapes[1])


class Mul(Function):
    def forward(self, a, b):
        self.a, self.b = a, b
        return a * b

    def backward(self, grad):
        return _unbroadcast(grad * self.b, self.a.shape), _unbroadcast(grad * self.a, self.b.shape)


class Neg(Function):
    def forward(self, a):
        return -a

    def backward(self, grad):
        return (-grad,)


class MatMul(Function):
    def forward(self, a, b):
        self.a, self.b = a, b
        return np.matmul(a, b)

    def backward(self, grad):
        grad_a = np.matmul(grad, np.swapaxes(self.b, -1, -2))
        grad_b = np.matmul(np.swapaxes(self.a, -1, -2), grad)
        return _unbroadcast(grad_a, self.a.shape), _unbroadcast(grad_b, self.b.shape)


class Sum(Function):
    def forward(self, a, axis=None, keepdims=False):
        self.shape, self.axis, self.keepdims = a.shape, axis, keepdims
        return np.asarray(a.sum(axis=axis, keepdims=keepdims))

    def backward(self, grad):
        if self.axis is not None and not self.keepdims:
            grad = np.expand_dims(grad, self.axis)
        return (np.broadcast_to(grad, self.shape).copy(),)


class Reshape(Function):
    def forward(self, a, shape):
        self.shape = a.shape
        return a.reshape(shape)

    def backward(self, grad):
        return (grad.reshape(self.shape),)


class Transpose(Function):
    def forward(self, a, axes):
        self.axes = tuple(axes)
        return np.ascontiguousarray(np.transpose(a, self.axes))

    def backward(self, grad):
        return (np.ascontiguousarray(np.transpose(grad, np.argsort(self.axes))),)


class Index(Function):
    def forward(self, a, index):
        self.shape, self.index = a.shape, index
        return np.ascontiguousarray(a[index])

    def backward(self, grad):
        out = np.zeros(self.shape)
        np.add.at(out, self.index, grad)
        return (out,)


class ScatterRows(Function):
    """Place `src` rows at `index` inside a zero tensor with `num_rows` rows."""

    def forward(self, src, index, num_rows):
        self.index = index
        out = np.zeros((num_rows,) + src.shape[1:])
        out[index] = src
        return out

    def backward(self, grad):
        return (grad[self.index],)


class Exp(Function):
    def forward(self, a):
        self.out = np.exp(a)
        return self.out

    def backward(self, grad):
        return (grad * self.out,)


class Log(Function):
    def forward(self, a):
        self.a = a
        return np.log(a)

    def backward(self, grad):
        return (grad / self.a,)


class Tanh(Function):
    def forward(self, a):
        self.out = np.tanh(a)
        return self.out

    def backward(self, grad):
        return (grad * (1.0 - self.out ** 2),)


def scatter_rows(src: Tensor, index: np.ndarray, num_rows: int) -> Tensor:
    return ScatterRows.apply(src, index=np.asarray(index, dtype=np.int64), num_rows=num_rows)
