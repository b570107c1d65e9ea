"""Tensor container and the recording tape used for reverse-mode autodiff."""

from __future__ import annotations

import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Any, Callable, Iterator, Optional, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible with an operation."""


class Tensor:
    """An n-dimensional array with an optional gradient slot.

    ``data`` is a numpy array whose dtype is the tensor precision. Float64
    tensors are only needed for gradient checking; everything else runs in
    float32.
    """

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data: Any, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data: np.ndarray = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def values(self) -> np.ndarray:
        """Flat row-major view of the data."""
        return self.data.reshape(-1)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, g: np.ndarray) -> None:
        if g.shape != self.data.shape:
            raise ShapeError(f"gradient shape {g.shape} does not match tensor shape {self.shape}")
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label}, requires_grad={self.requires_grad})"


BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


@dataclass
class Node:
    op_kind: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward_fn: BackwardFn
    saved_context: dict = field(default_factory=dict)


_state = threading.local()


def _stack() -> list:
    if not hasattr(_state, "tapes"):
        _state.tapes = []
        _state.disabled = 0
    return _state.tapes


def active_tape() -> Optional["Tape"]:
    stack = _stack()
    if not stack or _state.disabled:
        return None
    return stack[-1]


@contextmanager
def no_grad() -> Iterator[None]:
    """Suspend recording on whatever tape is active in this thread."""
    _stack()
    _state.disabled += 1
    try:
        yield
    finally:
        _state.disabled -= 1


class Tape:
    """Ordered record of forward operations, replayed in reverse by ``backward``.

    Use as a context manager; ops executed inside the block whose inputs
    require gradients are appended in execution order, so the node list is
    topologically sorted by construction.
    """

    def __init__(self) -> None:
        self.nodes: list[Node] = []
        self._produced: set[int] = set()

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _stack()
        assert stack and stack[-1] is self
        stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, node: Node) -> None:
        self.nodes.append(node)
        self._produced.add(id(node.output))

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf requiring grad.

        Intermediate gradients live only for the duration of the call. The
        tape is left intact, so calling this twice doubles the leaf grads.
        """
        if loss.data.size != 1 or loss.ndim > 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        if id(loss) not in self._produced:
            raise ValueError("loss was not produced on this tape")
        pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g_out = pending.pop(id(node.output), None)
            if g_out is None:
                continue
            g_inputs = node.backward_fn(g_out)
            for inp, g in zip(node.inputs, g_inputs):
                if g is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in self._produced:
                    if key in pending:
                        pending[key] = pending[key] + g
                    else:
                        pending[key] = g
                else:
                    inp.accumulate_grad(g)


def backward(tape: Tape, loss: Tensor) -> None:
    tape.backward(loss)


def record_op(
    op_kind: str,
    inputs: Sequence[Tensor],
    out_data: np.ndarray,
    backward_fn: BackwardFn,
    **saved_context,
) -> Tensor:
    """Wrap ``out_data`` in a Tensor and record it on the active tape if needed.

    ``backward_fn`` receives the output gradient and returns one entry per
    input (``None`` for non-differentiable inputs).
    """
    out = Tensor(out_data)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(Node(op_kind, tuple(inputs), out, backward_fn, saved_context))
    return out


def as_tensor(x: Any, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)
