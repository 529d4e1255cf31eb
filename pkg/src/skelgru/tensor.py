"""Dense float64 tensors and the tape that makes them differentiable.

Every operation in :mod:`skelgru.ops` computes its result eagerly with
numpy and, when a tape is active and an input is tracked, appends one
record holding the local gradient rule. Replaying the tape in reverse
is reverse-mode differentiation; unrolled recurrences therefore get
backpropagation through time for free.
"""

from __future__ import annotations

import itertools
import threading

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are inconsistent with the requested operation."""


class MaskError(ValueError):
    """A softmax row contained no unmasked (finite) entry."""


class TapeError(RuntimeError):
    """Backward pass invoked on an ill-formed tape or loss."""


_tensor_ids = itertools.count(1)


class Tensor:
    """A dense n-dimensional array of 64-bit floats, row-major.

    ``data`` is always a C-contiguous float64 ndarray. ``grad`` starts as
    None and is populated (same shape as ``data``) by :func:`backward`.
    Outputs of recorded ops are treated as immutable; parameters (leaves)
    may be rewritten in place between training steps.
    """

    __slots__ = ("data", "requires_grad", "grad", "tid")

    def __init__(self, values, requires_grad: bool = False):
        arr = np.asarray(values, dtype=np.float64)
        if not (arr.flags["C_CONTIGUOUS"] and arr.flags["WRITEABLE"]):
            arr = arr.copy()  # keeps 0-d scalars 0-d, unlike ascontiguousarray
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.tid = next(_tensor_ids)

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
    def values(self) -> np.ndarray:
        """Flat row-major view of the value buffer."""
        return self.data.reshape(-1)

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(())[()] if self.data.ndim else self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={list(self.shape)}{flag}, id={self.tid})"


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=np.float64), requires_grad)


def ones(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape, dtype=np.float64), requires_grad)


def scalar(value: float, requires_grad: bool = False) -> Tensor:
    return Tensor(np.float64(value), requires_grad)


class Record:
    """One executed operation: output = op(inputs).

    ``backward_fn`` maps the output gradient to one gradient per input
    (None for inputs that need none); saved intermediates live in its
    closure.
    """

    __slots__ = ("op", "inputs", "output", "backward_fn")

    def __init__(self, op, inputs, output, backward_fn):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn

    def __repr__(self):
        ins = ",".join(str(t.tid) for t in self.inputs)
        return f"<{self.op} ({ins})->{self.output.tid}>"


_tape_stack = threading.local()


def _stack() -> list:
    if not hasattr(_tape_stack, "tapes"):
        _tape_stack.tapes = []
    return _tape_stack.tapes


def active_tape():
    stack = _stack()
    return stack[-1] if stack else None


class Tape:
    """Ordered log of recorded operations, single-owner.

    Records are appended in execution order, so every record's inputs were
    produced earlier or are leaves; a reverse sweep visits each record
    exactly once. Use as a context manager::

        with Tape() as tape:
            loss = ...
        backward(tape, loss)
    """

    __slots__ = ("records", "_output_ids")

    def __init__(self):
        self.records: list[Record] = []
        self._output_ids: set[int] = set()

    def record(self, op: str, inputs, output: Tensor, backward_fn):
        assert output.tid not in self._output_ids, "tensor produced twice on one tape"
        self._output_ids.add(output.tid)
        self.records.append(Record(op, tuple(inputs), output, backward_fn))

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _stack().pop()
        assert popped is self
        return False

    def __len__(self):
        return len(self.records)


def backward(tape: Tape, loss: Tensor) -> None:
    """Populate ``grad`` on every tracked tensor reachable from ``loss``.

    The loss must be a scalar produced on (or fed by) this tape. Tracked
    leaves that never influence the loss end up with an all-zero gradient.
    """
    if loss.size != 1:
        raise TapeError(f"loss must be scalar, got shape {list(loss.shape)}")
    if not loss.requires_grad:
        raise TapeError("loss does not depend on any tracked tensor")

    for rec in tape.records:
        rec.output.grad = np.zeros_like(rec.output.data)
        for t in rec.inputs:
            if t.requires_grad:
                t.grad = np.zeros_like(t.data)
    loss.grad = np.ones_like(loss.data)

    for rec in reversed(tape.records):
        grads = rec.backward_fn(rec.output.grad)
        for t, g in zip(rec.inputs, grads):
            if g is None or not t.requires_grad:
                continue
            if g.shape != t.data.shape:
                raise TapeError(
                    f"gradient shape {list(g.shape)} != tensor shape "
                    f"{list(t.data.shape)} in op '{rec.op}'"
                )
            t.grad += g


def first_invalid_record(tape: Tape) -> str | None:
    """Name the first record whose output holds NaN or +inf, if any.

    -inf is excluded: it is the sanctioned masking sentinel for attention
    logits.
    """
    for rec in tape.records:
        d = rec.output.data
        if np.isnan(d).any() or np.isposinf(d).any():
            return f"{rec.op}#{rec.output.tid}"
    return None
