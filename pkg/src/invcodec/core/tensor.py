"""Tensors, parameters and the recording tape behind reverse-mode gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np


class NonFiniteError(ArithmeticError):
    """Raised when an operation produces NaN or Inf."""


class TapeError(RuntimeError):
    pass


_CHECK_FINITE = True


def set_finite_checks(enabled: bool) -> bool:
    """Toggle per-op NaN/Inf checking; returns the previous setting."""
    global _CHECK_FINITE
    previous = _CHECK_FINITE
    _CHECK_FINITE = bool(enabled)
    return previous


def check_finite(data: np.ndarray, op: str) -> None:
    if _CHECK_FINITE and not np.isfinite(data).all():
        bad = int(np.size(data) - np.count_nonzero(np.isfinite(data)))
        raise NonFiniteError(f"{op} produced {bad} non-finite value(s)")


class Tensor:
    """A dense array plus an optional gradient slot.

    Activations are NCHW. ``requires_grad`` marks tensors whose gradient the
    tape should propagate to; leaves accumulate into ``grad``.
    """

    __slots__ = ("data", "requires_grad", "grad", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    # operator sugar; the implementations live in ops
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from . import ops
        return ops.scale(self, -1.0)


class Parameter(Tensor):
    """A named, trainable tensor with Adam moment slots."""

    __slots__ = ("name", "adam_m", "adam_v", "adam_step", "version")

    def __init__(self, name: str, data, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)
        self.name = name
        self.adam_m: np.ndarray | None = None
        self.adam_v: np.ndarray | None = None
        self.adam_step = 0
        # bumped whenever the value changes; consumers cache derived values on it
        self.version = 0

    def assign(self, value: np.ndarray) -> None:
        value = np.asarray(value, dtype=self.data.dtype)
        if value.shape != self.data.shape:
            raise ValueError(f"{self.name}: shape {value.shape} != {self.data.shape}")
        self.data = value.copy()
        self.version += 1

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape}, dtype={self.dtype})"


class _Node:
    __slots__ = ("out", "inputs", "vjp")

    def __init__(self, out: Tensor, inputs: Sequence[Tensor], vjp: Callable):
        self.out = out
        self.inputs = tuple(inputs)
        self.vjp = vjp


class Tape:
    """Ordered record of executed ops.

    Use as a context manager; ops executed inside are recorded when any of
    their inputs requires a gradient. ``backward`` walks the record in reverse
    execution order (a valid reverse topological order) and then clears it.
    """

    _stack: list["Tape"] = []

    def __init__(self):
        self.nodes: list[_Node] = []
        self.cleared = False

    def __enter__(self) -> "Tape":
        Tape._stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        Tape._stack.remove(self)

    def record(self, out: Tensor, inputs: Sequence[Tensor], vjp: Callable) -> None:
        if self.cleared:
            raise TapeError("cannot record on a cleared tape")
        self.nodes.append(_Node(out, inputs, vjp))

    def clear(self) -> None:
        self.nodes = []
        self.cleared = True

    def backward(self, loss: Tensor, visit: Callable[[_Node], None] | None = None) -> None:
        if self.cleared:
            raise TapeError("backward called on a cleared tape")
        if loss.data.size != 1:
            raise ValueError(f"loss must be scalar, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            if visit is not None:
                visit(node)
            input_grads = node.vjp(g)
            for inp, gi in zip(node.inputs, input_grads):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        # whatever remains belongs to leaves (parameters or user inputs)
        leaves = {}
        for node in self.nodes:
            for inp in node.inputs:
                if inp.requires_grad:
                    leaves[id(inp)] = inp
        if loss.requires_grad and id(loss) in grads and id(loss) not in leaves:
            leaves[id(loss)] = loss
        for key, g in grads.items():
            leaf = leaves.get(key)
            if leaf is None:
                continue
            g = np.asarray(g, dtype=leaf.data.dtype).reshape(leaf.data.shape)
            leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
        self.clear()


def current_tape() -> Tape | None:
    return Tape._stack[-1] if Tape._stack else None


def backward(loss: Tensor, tape: Tape | None = None) -> None:
    """Populate ``grad`` on every leaf reachable from ``loss``."""
    tape = tape or current_tape()
    if tape is None:
        raise TapeError("no tape recorded")
    tape.backward(loss)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype) if dtype is not None else np.asarray(x))
