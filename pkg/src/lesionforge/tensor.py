"""Tensors, the gradient tape, and the ``LTD1`` binary container.

A :class:`Tensor` wraps a read-only numpy array. Differentiable operations
(see :mod:`lesionforge.ops`) append a record to the active
:class:`GradientTape`; :func:`backward` replays those records in reverse.
"""
from __future__ import annotations

import itertools
import struct
import threading
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, FormatError, NumericError, StateError

MAGIC = b"LTD1"
DTYPE_CODES = {np.dtype("<f4"): 1, np.dtype("<f8"): 2}
CODE_DTYPES = {code: dt for dt, code in DTYPE_CODES.items()}

_ids = itertools.count()
_local = threading.local()


def _as_float_array(data, dtype=None) -> np.ndarray:
    arr = np.asarray(data)
    if dtype is not None:
        arr = arr.astype(dtype, copy=False)
    elif arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(np.float32)
    return arr


class Tensor:
    """Immutable N-d array of float32 or float64 values.

    ``requires_grad`` marks tensors whose gradient flows through the tape,
    either because they are named leaves (parameters, watched inputs) or
    because they were produced from such tensors while a tape was active.
    """

    __slots__ = ("data", "name", "requires_grad", "id")

    def __init__(self, data, *, name: str | None = None, requires_grad: bool = False, dtype=None):
        arr = _as_float_array(data, dtype)
        if 0 in arr.shape:
            raise DimensionError(f"tensor dims must be >= 1, got shape {arr.shape}")
        if arr.flags.writeable:
            arr = arr.view()
            arr.flags.writeable = False
        self.data = arr
        self.name = name
        self.requires_grad = requires_grad
        self.id = next(_ids)

    @property
    def shape(self) -> tuple[int, ...]:
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

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.size == 1 else float("nan")

    def is_finite(self) -> bool:
        return bool(np.isfinite(self.data).all())

    def check_finite(self, what: str = "tensor") -> "Tensor":
        if not self.is_finite():
            raise NumericError(f"{what} contains NaN or Inf")
        return self

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype), name=self.name, requires_grad=self.requires_grad)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    # arithmetic sugar; the implementations live in ops
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    def __neg__(self):
        from . import ops
        return ops.scale(self, -1.0)


class Parameter(Tensor):
    """Named trainable leaf. Optimizers rebind ``data`` via :meth:`assign`."""

    __slots__ = ()

    def __init__(self, data, name: str, dtype=None):
        super().__init__(data, name=name, requires_grad=True, dtype=dtype)

    def assign(self, value: np.ndarray) -> None:
        value = np.array(value, dtype=self.data.dtype, copy=True)
        if value.shape != self.data.shape:
            raise DimensionError(f"{self.name}: cannot assign shape {value.shape} to {self.data.shape}")
        value.flags.writeable = False
        self.data = value


BackwardFn = Callable[[np.ndarray], Sequence[np.ndarray | None]]


class _Record:
    __slots__ = ("op", "inputs", "output", "backward")

    def __init__(self, op: str, inputs: tuple[Tensor, ...], output: Tensor, backward: BackwardFn):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward = backward


class GradientTape:
    """Ordered record of the differentiable operations run inside ``with tape:``.

    The tape is reusable: :func:`backward` may be called any number of times
    on the same recording and returns the same gradients each time.
    """

    def __init__(self):
        self.records: list[_Record] = []
        self._outputs: set[int] = set()

    def __enter__(self) -> "GradientTape":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _stack()
        if not stack or stack[-1] is not self:
            raise StateError("gradient tapes exited out of order")
        stack.pop()

    def __len__(self) -> int:
        return len(self.records)

    def watch(self, tensor: Tensor, name: str | None = None) -> Tensor:
        """Return a differentiable alias of ``tensor`` (e.g. a model input)."""
        return Tensor(tensor.data, name=name or tensor.name, requires_grad=True)

    def record(self, op: str, inputs: Iterable[Tensor], output: Tensor, backward: BackwardFn) -> None:
        self.records.append(_Record(op, tuple(inputs), output, backward))
        self._outputs.add(output.id)

    def op_names(self) -> list[str]:
        return [r.op for r in self.records]

    def gradient(self, loss: Tensor, sources: Sequence[Tensor]) -> list[Tensor]:
        """Gradients of ``loss`` with respect to each tensor in ``sources``."""
        grads = self._accumulate(loss)
        return [Tensor(grads.get(s.id, np.zeros_like(s.data)), dtype=s.dtype) for s in sources]

    def _accumulate(self, loss: Tensor, visit: Callable[[_Record], None] | None = None) -> dict[int, np.ndarray]:
        if loss.shape != ():
            raise ContractError(f"loss must be a rank-0 scalar, got shape {loss.shape}")
        if loss.id not in self._outputs:
            raise ContractError("loss was not produced by an operation recorded on this tape")
        grads: dict[int, np.ndarray] = {loss.id: np.ones((), dtype=loss.dtype)}
        for rec in reversed(self.records):
            if visit is not None:
                visit(rec)
            g = grads.get(rec.output.id)
            if g is None:
                continue
            for inp, gi in zip(rec.inputs, rec.backward(g)):
                if gi is None or not inp.requires_grad:
                    continue
                if gi.shape != inp.shape:
                    raise DimensionError(f"{rec.op}: gradient shape {gi.shape} != input shape {inp.shape}")
                prev = grads.get(inp.id)
                grads[inp.id] = gi if prev is None else prev + gi
        return grads


def _stack() -> list[GradientTape]:
    if not hasattr(_local, "stack"):
        _local.stack = []
    return _local.stack


def active_tape() -> GradientTape | None:
    stack = _stack()
    return stack[-1] if stack else None


def backward(tape: GradientTape, loss: Tensor) -> dict[str, Tensor]:
    """Return ``d loss / d param`` for every named leaf the recorded pass touched.

    Named leaves recorded on the tape but not on the path to ``loss`` get
    zero gradients.
    """
    grads = tape._accumulate(loss)
    leaves: dict[str, Tensor] = {}
    for rec in tape.records:
        for inp in rec.inputs:
            if inp.requires_grad and inp.name is not None and inp.id not in tape._outputs:
                seen = leaves.get(inp.name)
                if seen is not None and seen.id != inp.id:
                    raise ContractError(f"two distinct leaves share the name {inp.name!r}")
                leaves[inp.name] = inp
    return {
        name: Tensor(grads.get(t.id, np.zeros_like(t.data)), dtype=t.dtype)
        for name, t in leaves.items()
    }


def save_tensor(path: str | Path, tensor: Tensor | np.ndarray) -> None:
    """Write ``tensor`` in the ``LTD1`` container."""
    Path(path).write_bytes(encode_tensor(tensor))


def load_tensor(path: str | Path) -> Tensor:
    return decode_tensor(Path(path).read_bytes(), source=str(path))


def encode_tensor(tensor: Tensor | np.ndarray) -> bytes:
    arr = tensor.data if isinstance(tensor, Tensor) else np.asarray(tensor)
    dt = arr.dtype.newbyteorder("<")
    if dt not in DTYPE_CODES:
        raise FormatError(f"unsupported dtype {arr.dtype} for LTD1 (float32/float64 only)")
    if arr.ndim > 255:
        raise FormatError("rank exceeds 255")
    header = MAGIC + struct.pack("<BB", DTYPE_CODES[dt], arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + np.ascontiguousarray(arr, dtype=dt).tobytes()


def decode_tensor(blob: bytes, source: str = "<bytes>") -> Tensor:
    if len(blob) < 6 or blob[:4] != MAGIC:
        raise FormatError(f"{source}: missing LTD1 magic")
    code, rank = struct.unpack_from("<BB", blob, 4)
    if code not in CODE_DTYPES:
        raise FormatError(f"{source}: unknown dtype code {code}")
    dt = CODE_DTYPES[code]
    offset = 6 + 4 * rank
    if len(blob) < offset:
        raise FormatError(f"{source}: truncated header")
    dims = struct.unpack_from(f"<{rank}I", blob, 6)
    count = int(np.prod(dims, dtype=np.int64)) if rank else 1
    if len(blob) != offset + count * dt.itemsize:
        raise FormatError(f"{source}: payload size does not match dims {dims}")
    arr = np.frombuffer(blob, dtype=dt, count=count, offset=offset).reshape(dims)
    return Tensor(arr.astype(dt.newbyteorder("="), copy=True))
