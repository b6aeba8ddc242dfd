"""Tensor container, gradient tape and the multiply-accumulate counting hook.

A :class:`Tensor` is a thin wrapper around a contiguous numpy array.  When a
:class:`GradTape` is active on the current thread, every primitive whose
inputs require gradients appends one record to the tape; ``tape.backward``
replays those records in reverse to accumulate vector-Jacobian products.
"""

from __future__ import annotations

import contextlib
import threading
from collections import defaultdict
from dataclasses import dataclass
from typing import Callable, Iterator, Sequence

import numpy as np

from ..errors import ContractError, NumericError

_DTYPES = (np.float32, np.float64)

_local = threading.local()


def _as_array(data, dtype=None) -> np.ndarray:
    arr = np.asarray(data, dtype=dtype)
    if dtype is None and arr.dtype not in _DTYPES:
        arr = arr.astype(np.float64)
    if arr.dtype not in _DTYPES:
        raise TypeError(f"unsupported dtype {arr.dtype}; use float32 or float64")
    return np.ascontiguousarray(arr)


class Tensor:
    """Dense real array with optional participation in a gradient tape."""

    __slots__ = ("data", "requires_grad", "grad", "name", "__weakref__")

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = _as_array(data, dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: Tensor | None = None
        self.name = name

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data.item())

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __len__(self) -> int:
        return self.shape[0]

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # -- operator sugar (implemented in ops) -------------------------------
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

    def __truediv__(self, other):
        from . import ops
        return ops.div(self, other)

    def __rtruediv__(self, other):
        from . import ops
        return ops.div(other, self)

    def __neg__(self):
        from . import ops
        return ops.neg(self)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def __getitem__(self, index):
        from . import ops
        return ops.getitem(self, index)

    def reshape(self, *shape):
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def transpose(self, *axes):
        from . import ops
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return ops.transpose(self, axes or None)

    def sum(self, axis=None, keepdims: bool = False):
        from . import ops
        return ops.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        from . import ops
        return ops.mean(self, axis=axis, keepdims=keepdims)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


# ---------------------------------------------------------------------------
# Gradient tape
# ---------------------------------------------------------------------------

VJP = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


@dataclass
class _Record:
    output: Tensor
    inputs: tuple[Tensor, ...]
    vjp: VJP


class GradTape:
    """Append-only record of primitive applications, consumed by one backward pass.

    Usage::

        with GradTape() as tape:
            loss = f(params)
        tape.backward(loss)
    """

    def __init__(self):
        self._records: list[_Record] = []
        self._consumed = False
        self._open = False

    def __enter__(self) -> "GradTape":
        stack = _tape_stack()
        if stack:
            raise ContractError("nested gradient tapes are not supported")
        stack.append(self)
        self._open = True
        return self

    def __exit__(self, *exc) -> None:
        _tape_stack().pop()
        self._open = False

    def __len__(self) -> int:
        return len(self._records)

    def record(self, output: Tensor, inputs: tuple[Tensor, ...], vjp: VJP) -> None:
        if self._consumed:
            raise ContractError("tape already consumed")
        self._records.append(_Record(output, inputs, vjp))

    def backward(self, loss: Tensor) -> None:
        """Populate ``.grad`` on every grad-requiring tensor reachable from ``loss``."""
        if self._consumed:
            raise ContractError("a gradient tape can be consumed only once")
        if loss.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        if not np.isfinite(loss.data).all():
            raise NumericError("non-finite loss passed to backward")
        self._consumed = True
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        touched: dict[int, Tensor] = {id(loss): loss}
        for rec in reversed(self._records):
            g = grads.pop(id(rec.output), None)
            if g is None:
                continue
            in_grads = rec.vjp(g)
            for t, gi in zip(rec.inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
                    touched[key] = t
            if rec.output.requires_grad:
                _accumulate(rec.output, g)
        for key, g in grads.items():
            _accumulate(touched[key], g)
        self._records.clear()


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    g = np.asarray(g, dtype=t.dtype).reshape(t.shape)
    if t.grad is None:
        t.grad = Tensor(g)
    else:
        t.grad = Tensor(t.grad.data + g)


def _tape_stack() -> list[GradTape]:
    stack = getattr(_local, "tapes", None)
    if stack is None:
        stack = _local.tapes = []
    return stack


def active_tape() -> GradTape | None:
    stack = _tape_stack()
    return stack[-1] if stack else None


def make_result(data: np.ndarray, inputs: Sequence[Tensor], vjp: VJP) -> Tensor:
    """Wrap a primitive's output and record it on the active tape if needed."""
    needs = any(t.requires_grad for t in inputs)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = needs
    out.grad = None
    out.name = None
    if needs:
        tape = active_tape()
        if tape is not None:
            tape.record(out, tuple(inputs), vjp)
    return out


@contextlib.contextmanager
def no_record() -> Iterator[None]:
    """Temporarily detach the active tape (forward-only evaluation)."""
    stack = _tape_stack()
    saved = list(stack)
    stack.clear()
    try:
        yield
    finally:
        stack.extend(saved)


# ---------------------------------------------------------------------------
# Multiply-accumulate counting hook
# ---------------------------------------------------------------------------

class MacCounter:
    """Accumulates MACs reported by primitives, keyed by the active scope name."""

    def __init__(self):
        self.rows: dict[str, int] = defaultdict(int)

    @property
    def total(self) -> int:
        return sum(self.rows.values())

    def add(self, macs: int) -> None:
        self.rows[current_scope()] += int(macs)


def _counter_stack() -> list[MacCounter]:
    stack = getattr(_local, "counters", None)
    if stack is None:
        stack = _local.counters = []
    return stack


def _scope_stack() -> list[str]:
    stack = getattr(_local, "scopes", None)
    if stack is None:
        stack = _local.scopes = []
    return stack


@contextlib.contextmanager
def counting_macs() -> Iterator[MacCounter]:
    """Enable the op-counting hook for the duration of the block."""
    counter = MacCounter()
    _counter_stack().append(counter)
    try:
        yield counter
    finally:
        _counter_stack().pop()


def counting_enabled() -> bool:
    return bool(_counter_stack())


def active_counter() -> MacCounter:
    stack = _counter_stack()
    if not stack:
        raise ContractError("MAC counting hook is not enabled; wrap the call in counting_macs()")
    return stack[-1]


@contextlib.contextmanager
def mac_scope(name: str) -> Iterator[None]:
    """Attribute MACs registered inside the block to ``name`` (innermost scope wins)."""
    _scope_stack().append(name)
    try:
        yield
    finally:
        _scope_stack().pop()


def current_scope() -> str:
    stack = _scope_stack()
    return stack[-1] if stack else "unscoped"


def register_macs(macs: int) -> None:
    stack = _counter_stack()
    if stack:
        stack[-1].add(macs)


def check_finite(t: Tensor, where: str) -> Tensor:
    if not np.isfinite(t.data).all():
        raise NumericError(f"non-finite values in {where}")
    return t
