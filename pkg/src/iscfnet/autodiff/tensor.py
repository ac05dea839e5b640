"""Immutable dense tensors and the reverse-mode gradient tape.

A :class:`Tensor` wraps a write-protected numpy array. Operations (see
:mod:`iscfnet.autodiff.ops`) always return new tensors; when an operand is
tracked on the active :class:`Tape`, the result is tracked too and records a
backward closure. A tape is confined to a single training step on a single
thread; tensors themselves are safe to share.
"""

from __future__ import annotations

from typing import Callable, Optional

import numpy as np

FLOAT_DTYPES = (np.float64, np.float32)


class ShapeMismatch(ValueError):
    """Operand shapes do not conform for the requested operation."""


class NonIntegralOutputExtent(ValueError):
    """Convolution geometry does not produce whole output extents."""


class CountMismatch(ValueError):
    """Reshape target does not preserve the element count."""


class InvalidPermutation(ValueError):
    """Axis order is not a permutation of the input axes."""


class NotScalar(ValueError):
    """backward() requires a tensor with exactly one element."""


class DetachedFromTape(RuntimeError):
    """The tensor does not participate in the tape being differentiated."""


class Tensor:
    """Dense n-dimensional float value, optionally tracked on a tape.

    The payload is float64 by default (float32 is permitted for checkpoint
    and benchmark use) and is frozen after construction: every operation
    produces a new tensor, never a mutation.
    """

    __slots__ = ("data", "node_id", "tape")

    def __init__(self, data, dtype=np.float64):
        arr = np.array(data, dtype=dtype, order="C")
        arr.flags.writeable = False
        self.data: np.ndarray = arr
        self.node_id: Optional[int] = None
        self.tape: Optional["Tape"] = None

    @staticmethod
    def _wrap(arr: np.ndarray, node_id=None, tape=None) -> "Tensor":
        """Adopt ``arr`` without copying (internal: arr must be fresh or frozen)."""
        arr = np.ascontiguousarray(arr)
        if arr.dtype not in FLOAT_DTYPES:
            arr = arr.astype(np.float64)
        arr.flags.writeable = False
        t = object.__new__(Tensor)
        t.data = arr
        t.node_id = node_id
        t.tape = tape
        return t

    @property
    def shape(self) -> tuple:
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

    def item(self) -> float:
        if self.data.size != 1:
            raise NotScalar(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def tolist(self):
        return self.data.tolist()

    def __repr__(self) -> str:
        tracked = f", node_id={self.node_id}" if self.node_id is not None else ""
        return f"Tensor(shape={self.shape}{tracked})"

    # Arithmetic sugar; the named functions in ops.py are the primary API.
    def __add__(self, other):
        from . import ops

        return ops.add(self, _coerce(other))

    __radd__ = __add__

    def __mul__(self, other):
        from . import ops

        if isinstance(other, (int, float)):
            return ops.scale(self, float(other))
        return ops.mul(self, _coerce(other))

    __rmul__ = __mul__

    def __neg__(self):
        from . import ops

        return ops.scale(self, -1.0)

    def __sub__(self, other):
        from . import ops

        return ops.add(self, ops.scale(_coerce(other), -1.0))

    def __matmul__(self, other):
        from . import ops

        return ops.matmul(self, _coerce(other))


def _coerce(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def tensor(data, dtype=np.float64) -> Tensor:
    """Create an untracked constant tensor."""
    return Tensor(data, dtype=dtype)


class _Node:
    __slots__ = ("kind", "inputs", "backward")

    def __init__(self, kind: str, inputs: tuple, backward: Optional[Callable]):
        self.kind = kind
        self.inputs = inputs  # node ids aligned with the op's tensor operands
        self.backward = backward  # grad -> per-input grad arrays, None for leaves


_TAPE_STACK: list["Tape"] = []


def active_tape() -> Optional["Tape"]:
    """The innermost tape opened with ``with Tape():``, if any."""
    return _TAPE_STACK[-1] if _TAPE_STACK else None


class Tape:
    """Append-only operation record; creation order is topological order."""

    def __init__(self):
        self._nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _TAPE_STACK.pop()
        assert popped is self, "tapes must be exited in reverse entry order"
        return False

    def __len__(self) -> int:
        return len(self._nodes)

    def _record(self, kind: str, input_ids: tuple, backward) -> int:
        self._nodes.append(_Node(kind, input_ids, backward))
        return len(self._nodes) - 1

    def watch(self, t: Tensor) -> Tensor:
        """Return a leaf alias of ``t`` tracked on this tape (shares data)."""
        nid = self._record("leaf", (), None)
        return Tensor._wrap(t.data, node_id=nid, tape=self)

    def gradients(self, loss: Tensor) -> "Gradients":
        """Reverse sweep from ``loss``; gradients accumulate by addition."""
        if loss.tape is not self or loss.node_id is None:
            raise DetachedFromTape("loss does not participate in this tape")
        if loss.data.size != 1:
            raise NotScalar(f"loss must be scalar, got shape {loss.shape}")
        slots: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
        for nid in range(loss.node_id, -1, -1):
            grad = slots.get(nid)
            if grad is None:
                continue
            node = self._nodes[nid]
            if node.backward is None:
                continue
            for input_id, g in zip(node.inputs, node.backward(grad)):
                if input_id is None or g is None:
                    continue
                held = slots.get(input_id)
                slots[input_id] = g if held is None else held + g
        return Gradients(self, slots)


class Gradients:
    """Gradient slots keyed by node id, as produced by one backward sweep."""

    def __init__(self, tape: Tape, slots: dict):
        self._tape = tape
        self._slots = slots

    def wrt(self, t: Tensor) -> np.ndarray:
        """Gradient with respect to ``t`` (zeros if unreachable from the loss)."""
        if t.tape is not self._tape or t.node_id is None:
            raise DetachedFromTape("tensor is not tracked on the differentiated tape")
        g = self._slots.get(t.node_id)
        return np.zeros_like(t.data) if g is None else g

    def by_id(self, node_id: int) -> Optional[np.ndarray]:
        return self._slots.get(node_id)


def backward(loss: Tensor) -> Gradients:
    """Differentiate ``loss`` (a scalar tracked tensor) over its tape."""
    if loss.tape is None or loss.node_id is None:
        raise DetachedFromTape("loss was computed without an active tape")
    return loss.tape.gradients(loss)


class Parameter:
    """Named trainable value; names are unique within a parameter store."""

    __slots__ = ("name", "value", "trainable")

    def __init__(self, name: str, value: Tensor, trainable: bool = True):
        self.name = name
        self.value = value
        self.trainable = trainable

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.value.shape})"
