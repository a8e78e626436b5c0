"""Tensor type and the reverse-mode sweep.

Every primitive in :mod:`rnnvo.autodiff.ops` produces a :class:`Tensor` that
remembers its parents and a closure mapping the output gradient to parent
gradients. :meth:`Tensor.backward` walks that DAG in reverse topological
order, visiting each node once.
"""
from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterator, Optional, Sequence

import numpy as np


class NonFiniteError(FloatingPointError):
    """A primitive produced NaN or Inf."""


class ShapeError(ValueError):
    """Operand shapes do not conform for a primitive."""


_state = threading.local()


def _get(name, default):
    return getattr(_state, name, default)


def get_default_dtype() -> np.dtype:
    return np.dtype(_get("dtype", np.float32))


def set_default_dtype(dtype) -> None:
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported precision {dtype}")
    _state.dtype = dtype


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily switch the dtype new tensors are created with."""
    old = get_default_dtype()
    set_default_dtype(dtype)
    try:
        yield
    finally:
        _state.dtype = old


def is_grad_enabled() -> bool:
    return _get("grad_enabled", True)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    old = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = old


BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tensor:
    """Dense real array with an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: Optional[str] = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype if dtype is not None else get_default_dtype())
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError("tensor created from non-finite values")
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward: Optional[BackwardFn] = None
        self.op = "leaf"
        self.name = name

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- reverse sweep ------------------------------------------------------
    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        """Populate ``.grad`` on every reachable leaf that requires grad.

        Leaf gradients accumulate across calls; call :meth:`zero_grad` (or
        :func:`zero_grads`) to reset them.
        """
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(f"backward() on non-scalar tensor of shape {self.shape}")
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=self.data.dtype)
            if grad.shape != self.shape:
                raise ShapeError(f"seed gradient shape {grad.shape} != {self.shape}")
        if not self.requires_grad:
            return

        order = _topological_order(self)
        grads = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # operators are attached in ops.py to keep primitives in one place


def _topological_order(root: Tensor) -> list:
    """Iterative DFS post-order; deep recurrent graphs overflow recursion."""
    order: list = []
    visited: set = set()
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


def make_result(data: np.ndarray, parents: Sequence[Tensor], backward: BackwardFn, op: str) -> Tensor:
    """Wrap a primitive's output, recording it in the graph when needed."""
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite output from {op}")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out.op = op
    rg = is_grad_enabled() and any(p.requires_grad for p in parents)
    out.requires_grad = rg
    if rg:
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if dtype is None and isinstance(x, np.ndarray) and x.dtype in (np.float32, np.float64):
        dtype = x.dtype
    return Tensor(x, dtype=dtype)


def zero_grads(tensors) -> None:
    for t in tensors:
        t.grad = None
