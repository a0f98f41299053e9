"""Dense tensor with a reverse-mode gradient tape.

A :class:`Tensor` wraps a numpy array. Operations in :mod:`pmtrans.functional`
attach a :class:`Node` to their output whenever an input requires a gradient;
:func:`backward` linearises the resulting graph into a
:class:`ComputationTape` and replays it in reverse.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Iterable, Iterator, Optional, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class ContractError(ValueError):
    """A precondition of an operation was violated."""


class ConfigError(ValueError):
    """Invalid configuration value."""


_grad_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_grad_state, "enabled", True)


@contextmanager
def no_grad() -> Iterator[None]:
    """Disable tape recording on the current thread."""
    prev = is_grad_enabled()
    _grad_state.enabled = False
    try:
        yield
    finally:
        _grad_state.enabled = prev


BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


@dataclass(eq=False)
class Node:
    """One recorded operation: its kind, inputs and backward rule.

    ``backward`` receives the gradient with respect to the node's output and
    returns one gradient (or ``None``) per input. Intermediates needed by the
    rule are captured in its closure.
    """

    op: str
    inputs: tuple["Tensor", ...]
    backward: BackwardFn


class Tensor:
    __array_priority__ = 1000
    __slots__ = ("data", "grad", "requires_grad", "_node")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.array(data, dtype=dtype, copy=True)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self._node: Optional[Node] = None

    @classmethod
    def _wrap(cls, arr: np.ndarray, node: Optional[Node] = None) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.grad = None
        t.requires_grad = node is not None
        t._node = node
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_item(self)

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # operators delegate to functional; imported lazily to avoid a cycle
    def __add__(self, other):
        from . import functional as F

        return F.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import functional as F

        return F.sub(self, other)

    def __rsub__(self, other):
        from . import functional as F

        return F.sub(other, self)

    def __mul__(self, other):
        from . import functional as F

        return F.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        from . import functional as F

        if isinstance(other, Tensor):
            raise TypeError("division is only supported by scalars")
        return F.mul(self, 1.0 / float(other))

    def __neg__(self):
        from . import functional as F

        return F.mul(self, -1.0)

    def __matmul__(self, other):
        from . import functional as F

        return F.matmul(self, other)

    def sum(self, axis=None, keepdims: bool = False):
        from . import functional as F

        return F.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        from . import functional as F

        return F.mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        from . import functional as F

        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return F.reshape(self, shape)

    def transpose(self, *axes):
        from . import functional as F

        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return F.transpose(self, axes or None)

    @property
    def T(self):
        return self.transpose()

    def backward(self, leaves: Iterable["Tensor"] = ()) -> None:
        backward(self, leaves=leaves)


def _raise_item(t: Tensor):
    raise ContractError(f"item() needs a single-element tensor, got shape {t.shape}")


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def make_result(
    data: np.ndarray,
    inputs: Sequence[Tensor],
    op: str,
    backward_fn: Callable[[], BackwardFn] | BackwardFn,
) -> Tensor:
    """Wrap ``data`` and record a node when any input requires a gradient."""
    if is_grad_enabled() and any(t.requires_grad for t in inputs):
        return Tensor._wrap(data, Node(op, tuple(inputs), backward_fn))
    return Tensor._wrap(data)


class ComputationTape:
    """Operation nodes in topological order (inputs before consumers).

    Built fresh from the output of each forward pass.
    """

    def __init__(self, outputs: list[Tensor]):
        self.outputs = outputs

    @classmethod
    def record(cls, root: Tensor) -> "ComputationTape":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            t, expanded = stack.pop()
            if expanded:
                order.append(t)
                continue
            if id(t) in seen or t._node is None:
                continue
            seen.add(id(t))
            stack.append((t, True))
            for inp in t._node.inputs:
                if inp._node is not None and id(inp) not in seen:
                    stack.append((inp, False))
        return cls(order)

    @property
    def nodes(self) -> list[Node]:
        return [t._node for t in self.outputs]

    def __len__(self) -> int:
        return len(self.outputs)


def backward(
    loss: Tensor,
    tape: Optional[ComputationTape] = None,
    leaves: Iterable[Tensor] = (),
) -> ComputationTape:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

    Tensors listed in ``leaves`` that the loss does not depend on receive a
    zero gradient.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if tape is None:
        tape = ComputationTape.record(loss)

    seed = np.ones_like(loss.data)
    if loss._node is None:
        if loss.requires_grad:
            _accumulate(loss, seed)
    else:
        grads: dict[int, np.ndarray] = {id(loss): seed}
        for out in reversed(tape.outputs):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            node = out._node
            for inp, ig in zip(node.inputs, node.backward(g)):
                if ig is None or not inp.requires_grad:
                    continue
                if inp._node is None:
                    _accumulate(inp, ig)
                else:
                    prev = grads.get(id(inp))
                    grads[id(inp)] = ig if prev is None else prev + ig

    for leaf in leaves:
        if leaf.grad is None:
            leaf.grad = np.zeros_like(leaf.data)
    return tape


def _accumulate(leaf: Tensor, g: np.ndarray) -> None:
    g = np.asarray(g, dtype=leaf.data.dtype).reshape(leaf.data.shape)
    if leaf.grad is None:
        leaf.grad = g.copy()
    else:
        leaf.grad = leaf.grad + g
