"""Dense matrices, trainable parameters, and the reverse-mode gradient tape.

Every value the engine computes is a 2-D float array wrapped in a
:class:`Tensor`.  The differentiable operations in :mod:`memmixer.ops`
record one closure per executed op on the active :class:`Tape`;
:func:`backward` replays those closures in exact reverse execution order
and accumulates the resulting gradients into :class:`Parameter` objects.

Precision is a global mode (32-bit for training, 64-bit for gradient
checking), switched with :func:`set_precision`.
"""

from __future__ import annotations

import math
import threading
from contextlib import contextmanager

import numpy as np

from .errors import ConfigError, NonFiniteError, ShapeError, TapeError

_PRECISION = 32
_FINITE_CHECKS = True

_tls = threading.local()


def _tape_stack() -> list:
    stack = getattr(_tls, "tapes", None)
    if stack is None:
        stack = []
        _tls.tapes = stack
    return stack


def set_precision(bits: int) -> None:
    """Select 32- or 64-bit floats for all tensors created afterwards."""
    global _PRECISION
    if bits not in (32, 64):
        raise ConfigError(f"precision must be 32 or 64, got {bits!r}")
    _PRECISION = bits


def get_precision() -> int:
    return _PRECISION


def active_dtype() -> np.dtype:
    return np.dtype(np.float64 if _PRECISION == 64 else np.float32)


@contextmanager
def precision(bits: int):
    """Temporarily switch the global precision mode."""
    prev = _PRECISION
    set_precision(bits)
    try:
        yield
    finally:
        set_precision(prev)


def set_finite_checks(enabled: bool) -> None:
    """Toggle the per-operation NaN/Inf guard (on by default)."""
    global _FINITE_CHECKS
    _FINITE_CHECKS = bool(enabled)


def finite_checks_enabled() -> bool:
    return _FINITE_CHECKS


def assert_finite(arr: np.ndarray, context: str) -> None:
    # The full-array sum is finite iff every entry is, barring totals large
    # enough to overflow -- which are equally fatal and reported as such.
    if not math.isfinite(float(arr.sum())):
        if not np.isfinite(arr).all():
            raise NonFiniteError(f"non-finite values produced by {context}")
        raise NonFiniteError(f"overflow detected in {context}")


class Tensor:
    """A dense row-major matrix in the active precision.

    Scalars promote to shape (1, 1) and flat vectors to a (1, n) row, so
    every value in the engine is a matrix.  ``param`` points back at the
    owning :class:`Parameter` for leaves, else is None.
    """

    __slots__ = ("data", "param")

    def __init__(self, data):
        arr = np.array(data, dtype=active_dtype())
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        elif arr.ndim != 2:
            raise ShapeError(f"tensors are 2-D matrices; got shape {arr.shape}")
        if arr.size == 0:
            raise ShapeError("tensors must have positive extents")
        self.data = arr
        self.param = None

    @classmethod
    def wrap(cls, arr: np.ndarray) -> "Tensor":
        """Adopt an array that is already 2-D and correctly typed (no copy)."""
        t = object.__new__(cls)
        t.data = arr
        t.param = None
        return t

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def item(self) -> float:
        if self.data.shape != (1, 1):
            raise ShapeError(f"item() needs a scalar tensor, got {self.data.shape}")
        return float(self.data[0, 0])

    def copy(self) -> "Tensor":
        return Tensor.wrap(self.data.copy())

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype})"


def zeros(rows: int, cols: int) -> Tensor:
    return Tensor.wrap(np.zeros((rows, cols), dtype=active_dtype()))


class Parameter:
    """A named trainable tensor with an accumulating gradient.

    ``grad`` has the same shape as ``value`` and starts (and is reset) at
    exactly zero; :func:`backward` adds into it, so callers control when
    accumulation restarts via :meth:`zero_grad`.
    """

    __slots__ = ("name", "value", "grad")

    def __init__(self, value, name: str):
        self.value = value if isinstance(value, Tensor) else Tensor(value)
        self.grad = Tensor.wrap(np.zeros_like(self.value.data))
        self.name = name
        self.value.param = self

    def zero_grad(self) -> None:
        self.grad.data[...] = 0.0

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.value.data.shape})"


def zero_grads(params) -> None:
    for p in params:
        p.zero_grad()


class Tape:
    """Ordered record of executed operations for one reverse sweep.

    Used as a context manager; ops executed inside the block register an
    ``(output, adjoint_fn)`` pair.  A tape is consumed by its first
    :func:`backward`; running it twice is an error.
    """

    __slots__ = ("_records", "_consumed")

    def __init__(self):
        self._records = []
        self._consumed = False

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        stack = _tape_stack()
        if not stack or stack[-1] is not self:
            raise TapeError("tape context exited out of order")
        stack.pop()
        return False

    def record(self, out: Tensor, adjoint_fn) -> None:
        self._records.append((out, adjoint_fn))

    def __len__(self) -> int:
        return len(self._records)


def active_tape():
    stack = getattr(_tls, "tapes", None)
    if stack:
        return stack[-1]
    return None


def accumulate(adjoints: dict, t: Tensor, g: np.ndarray) -> None:
    """Add a gradient contribution for ``t``, copying on first insert.

    The copy matters for pass-through adjoints: the same upstream buffer may
    be handed to several tensors, and later in-place accumulation must not
    corrupt the others.
    """
    cur = adjoints.get(t)
    if cur is None:
        adjoints[t] = np.array(g)
    else:
        cur += g


def accumulate_raw(adjoints: dict, t: Tensor, g: np.ndarray) -> None:
    """Like :func:`accumulate` but adopts ``g`` without copying.

    Only valid when ``g`` is freshly allocated by the calling adjoint (or a
    view of a popped adjoint buffer no other tensor aliases), inserted at
    most once per closure invocation.
    """
    cur = adjoints.get(t)
    if cur is None:
        adjoints[t] = g
    else:
        cur += g


def backward(tape: Tape, loss: Tensor) -> None:
    """Replay the tape in reverse and accumulate into Parameter.grad.

    ``loss`` must be a scalar (1x1) tensor produced while the tape was
    active.  Gradients add (+=) into parameters; the tape is consumed.
    """
    if tape._consumed:
        raise TapeError("tape already consumed; record a fresh forward pass first")
    if not isinstance(loss, Tensor) or loss.data.shape != (1, 1):
        got = loss.data.shape if isinstance(loss, Tensor) else type(loss)
        raise TapeError(f"backward needs a scalar (1x1) loss, got {got}")
    tape._consumed = True

    adjoints: dict = {loss: np.ones((1, 1), dtype=loss.data.dtype)}
    for out, adjoint_fn in reversed(tape._records):
        d = adjoints.pop(out, None)
        if d is None:
            continue  # not on the path from loss
        adjoint_fn(d, adjoints)

    # Everything left in the dict belongs to leaves; fold parameter leaves
    # into their grads.
    for t, d in adjoints.items():
        p = t.param
        if p is not None:
            p.grad.data += d
