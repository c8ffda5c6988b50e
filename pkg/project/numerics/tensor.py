from contextlib import contextmanager
from contextvars import ContextVar
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from project.errors import NotScalarError

# backward closures map the output gradient onto one gradient (or None) per input
BackwardFn = Callable[[np.ndarray], Sequence[np.ndarray | None]]

_grad_enabled: ContextVar[bool] = ContextVar("grad_enabled", default=True)


@contextmanager
def no_grad():
    """Disable recording of operations, e.g. for target network evaluation."""
    token = _grad_enabled.set(False)

    try:
        yield
    finally:
        _grad_enabled.reset(token)


def is_grad_enabled() -> bool:
    return _grad_enabled.get()


def unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Remove broadcasted dimensions by summing along them."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)

    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)

    return g


class Tensor:
    """Dense row-major array of 64-bit floats that records the operations applied to it."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple["Tensor", ...] = ()
        self._backward: BackwardFn | None = None

    @classmethod
    def from_op(cls, data: np.ndarray, parents: Sequence["Tensor"], backward: BackwardFn) -> "Tensor":
        out = cls.__new__(cls)
        out.data = np.asarray(data, dtype=np.float64)
        out.grad = None
        out.name = None
        out._parents = ()
        out._backward = None
        out.requires_grad = False

        if is_grad_enabled() and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward

        return out

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
    def T(self) -> "Tensor":
        from project.numerics import functional as F

        return F.transpose(self)

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        from project.numerics import functional as F

        return F.add(self, other)

    def __radd__(self, other):
        from project.numerics import functional as F

        return F.add(other, self)

    def __sub__(self, other):
        from project.numerics import functional as F

        return F.sub(self, other)

    def __rsub__(self, other):
        from project.numerics import functional as F

        return F.sub(other, self)

    def __mul__(self, other):
        from project.numerics import functional as F

        return F.mul(self, other)

    def __rmul__(self, other):
        from project.numerics import functional as F

        return F.mul(other, self)

    def __truediv__(self, other):
        from project.numerics import functional as F

        return F.div(self, other)

    def __neg__(self):
        from project.numerics import functional as F

        return F.neg(self)

    def __pow__(self, exponent: float):
        from project.numerics import functional as F

        return F.power(self, exponent)

    def __matmul__(self, other):
        from project.numerics import functional as F

        return F.matmul(self, other)

    def sum(self, axis=None, keepdims: bool = False):
        from project.numerics import functional as F

        return F.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        from project.numerics import functional as F

        return F.mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        from project.numerics import functional as F

        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])

        return F.reshape(self, shape)


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


@dataclass(frozen=True)
class TapeRecord:
    output: Tensor
    inputs: tuple[Tensor, ...]
    backward: BackwardFn


class Tape:
    """Ordered record of the primitive operations that produced a tensor, in topological order."""

    def __init__(self, records: list[TapeRecord]):
        self.records = records

    def __len__(self):
        return len(self.records)

    @classmethod
    def trace(cls, output: Tensor) -> "Tape":
        order: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(output, False)]

        while stack:
            t, expanded = stack.pop()

            if expanded:
                order.append(t)
                continue

            if id(t) in visited or t._backward is None:
                continue

            visited.add(id(t))
            stack.append((t, True))

            for parent in t._parents:
                if parent._backward is not None and id(parent) not in visited:
                    stack.append((parent, False))

        return cls([TapeRecord(t, t._parents, t._backward) for t in order])

    def backward(self, loss: Tensor):
        if loss.size != 1:
            raise NotScalarError(f"backward requires a scalar loss, got shape {loss.shape}")

        seed = np.ones_like(loss.data)

        if loss._backward is None:
            # the loss itself is a leaf
            if loss.requires_grad:
                loss.grad = seed if loss.grad is None else loss.grad + seed
            return

        grads: dict[int, np.ndarray] = {id(loss): seed}

        for record in reversed(self.records):
            g = grads.pop(id(record.output), None)

            if g is None:
                continue

            for inp, g_in in zip(record.inputs, record.backward(g)):
                if g_in is None or not inp.requires_grad:
                    continue

                if inp._backward is None:
                    inp.grad = g_in.copy() if inp.grad is None else inp.grad + g_in
                elif id(inp) in grads:
                    grads[id(inp)] = grads[id(inp)] + g_in
                else:
                    grads[id(inp)] = g_in


def backward(loss: Tensor) -> Tape:
    """Populate `grad` of every leaf tensor that requires gradients with d(loss)/d(leaf)."""
    tape = Tape.trace(loss)
    tape.backward(loss)

    return tape
