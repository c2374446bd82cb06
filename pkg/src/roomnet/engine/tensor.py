"""Tensor and tape: the reverse-mode core.

Operations are only recorded while a :class:`Tape` is active::

    with Tape() as tape:
        loss = ops.sum(ops.relu(x))
    backward(tape, loss)

Outside a tape every op runs as a plain numpy computation, which is how
inference is done.
"""
from __future__ import annotations

import itertools
import threading
from dataclasses import dataclass, field
from typing import Any, Callable, Optional, Sequence

import numpy as np

from roomnet.errors import InvalidArgumentError

_node_ids = itertools.count()
_local = threading.local()


def _as_float_array(data, dtype=None) -> np.ndarray:
    arr = np.asarray(data)
    if dtype is not None:
        return np.asarray(arr, dtype=dtype, order="C")
    if arr.dtype.kind != "f":
        arr = arr.astype(np.float64)
    return np.asarray(arr, order="C")


class Tensor:
    """An n-dimensional float array that can take part in differentiation."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: Optional[str] = None):
        self.data = _as_float_array(data, dtype)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name
        self.node = next(_node_ids)
        # set when the tensor is the output of a recorded op
        self.is_op_output = False

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label}, requires_grad={self.requires_grad})"

    # arithmetic is forwarded to ops, imported lazily to avoid the cycle
    def __add__(self, other):
        from roomnet.engine import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from roomnet.engine import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from roomnet.engine import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from roomnet.engine import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from roomnet.engine import ops
        return ops.mul(self, -1.0)

    def sum(self):
        from roomnet.engine import ops
        return ops.sum(self)

    def reshape(self, *shape):
        from roomnet.engine import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)


def as_tensor(value, dtype=None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value, dtype=dtype)


@dataclass
class OpRecord:
    op: str
    inputs: tuple
    output: Tensor
    backward: Callable[[np.ndarray, dict], Sequence[Optional[np.ndarray]]]
    context: dict = field(default_factory=dict)


class Tape:
    """Ordered log of differentiable op applications.

    Records are appended in execution order, so every record's inputs are
    produced by earlier records (or are leaves).
    """

    def __init__(self):
        self.records: list[OpRecord] = []

    def __enter__(self) -> "Tape":
        stack = getattr(_local, "tapes", None)
        if stack is None:
            stack = _local.tapes = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.tapes.pop()

    def __len__(self) -> int:
        return len(self.records)

    def record(self, op: str, inputs: tuple, output: Tensor, backward_fn, **context) -> None:
        output.requires_grad = True
        output.is_op_output = True
        self.records.append(OpRecord(op, inputs, output, backward_fn, context))

    def backward(self, loss: Tensor) -> None:
        backward(self, loss)


def active_tape() -> Optional[Tape]:
    stack = getattr(_local, "tapes", None)
    return stack[-1] if stack else None


def record(op: str, inputs: tuple, output: Tensor, backward_fn, **context) -> Tensor:
    """Log ``output = op(inputs)`` on the active tape if any input needs gradients."""
    tape = active_tape()
    if tape is not None and any(isinstance(t, Tensor) and t.requires_grad for t in inputs):
        tape.record(op, inputs, output, backward_fn, **context)
    return output


def backward(tape: Tape, loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

    Intermediate gradients live only for the duration of the call, so a
    second call on the same tape adds the same amount again to the leaves.
    """
    if loss.data.size != 1:
        raise InvalidArgumentError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {loss.node: np.ones_like(loss.data)}
    if not loss.is_op_output and loss.requires_grad:
        _accumulate_leaf(loss, grads.pop(loss.node))
        return
    for rec in reversed(tape.records):
        g = grads.pop(rec.output.node, None)
        if g is None:
            continue
        in_grads = rec.backward(g, rec.context)
        for inp, gi in zip(rec.inputs, in_grads):
            if gi is None or not isinstance(inp, Tensor) or not inp.requires_grad:
                continue
            if inp.is_op_output:
                prev = grads.get(inp.node)
                grads[inp.node] = gi if prev is None else prev + gi
            else:
                _accumulate_leaf(inp, gi)


def _accumulate_leaf(t: Tensor, g: np.ndarray) -> None:
    g = np.asarray(g, dtype=t.data.dtype).reshape(t.shape)
    if t.grad is None:
        t.grad = g.copy()
    else:
        t.grad = t.grad + g


# Optional log of piecewise-linear branch decisions (relu masks, pooling
# argmaxes).  With ``replay`` set, ops reuse the given decisions instead of
# recomputing them, so the graph stays on one smooth branch; gradient
# checking relies on this.
def decision_log() -> Optional[list]:
    return getattr(_local, "decisions", None)


class DecisionRecorder:
    def __init__(self, replay: Optional[list] = None):
        self.replay = replay

    def __enter__(self) -> list:
        self._prev = (getattr(_local, "decisions", None), getattr(_local, "replay", None))
        _local.decisions = []
        _local.replay = None if self.replay is None else iter(self.replay)
        return _local.decisions

    def __exit__(self, *exc) -> None:
        _local.decisions, _local.replay = self._prev


def log_decision(arr: Any) -> Any:
    """Record ``arr``; during a replay return the stored decision instead."""
    log = decision_log()
    if log is None:
        return arr
    replay = getattr(_local, "replay", None)
    if replay is not None:
        stored = next(replay, None)
        if stored is None or stored.shape != np.shape(arr):
            raise RuntimeError("decision replay does not match the recorded graph")
        arr = stored
    log.append(np.array(arr, copy=True))
    return arr
