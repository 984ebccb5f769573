"""Minimal reverse-mode autodiff over numpy arrays.

A Tensor wraps one ndarray (float32 or float64). Operations from
:mod:`splitformer.ops` record themselves onto the innermost active Tape;
``backward`` then replays the records in reverse, accumulating gradients
into the ``.grad`` slot of every tensor that asked for them. There is no
graph retention beyond the tape and no higher-order differentiation,
which keeps the whole engine small enough to audit in one sitting.

Tensors are never mutated by ops (optimizer steps update ``.data`` in
place between tapes, which is outside the recorded region). A tape may
be replayed exactly once.

The module also owns the on-disk tensor dump: a little binary format
(magic ``MSDT``) holding dtype, shape and raw row-major data, used both
stand-alone and as the payload unit inside checkpoint files.
"""

from __future__ import annotations

import struct
from typing import BinaryIO, Callable, Iterable, Sequence

import numpy as np

_ALLOWED_DTYPES = (np.float32, np.float64)


class Tensor:
    """An ndarray plus a gradient slot."""

    __slots__ = ("data", "requires_grad", "grad", "tape")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.tape: Tape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        """Copy of the underlying array, detached from any tape."""
        return self.data.copy()

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}{flag})"


class TapeRecord:
    """One recorded op: inputs, output, and a closure pushing grads back."""

    __slots__ = ("op", "inputs", "output", "backward_fn")

    def __init__(
        self,
        op: str,
        inputs: Sequence[Tensor],
        output: Tensor,
        backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]],
    ):
        self.op = op
        self.inputs = tuple(inputs)
        self.output = output
        self.backward_fn = backward_fn


_TAPE_STACK: list["Tape"] = []


class Tape:
    """Ordered log of ops, usable as a context manager.

    Entering pushes the tape onto a module-level stack; ops record onto
    the innermost active tape whenever some input requires gradients.
    """

    __slots__ = ("records", "_consumed")

    def __init__(self):
        self.records: list[TapeRecord] = []
        self._consumed = False

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _TAPE_STACK.pop()
        if popped is not self:
            raise RuntimeError("tape stack corrupted: exited out of order")

    def __len__(self) -> int:
        return len(self.records)


def active_tape() -> Tape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def record(
    op: str,
    inputs: Sequence[Tensor],
    output: Tensor,
    backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]],
) -> Tensor:
    """Attach *output* to the active tape if any input tracks gradients.

    ``backward_fn`` receives the gradient w.r.t. the output and must
    return one array (or None) per input, in order. Called by every op
    in :mod:`splitformer.ops`; user code rarely needs it directly.
    """
    tape = active_tape()
    if tape is None:
        return output
    if not any(t.requires_grad for t in inputs):
        return output
    output.requires_grad = True
    output.tape = tape
    tape.records.append(TapeRecord(op, inputs, output, backward_fn))
    return output


def backward(loss: Tensor, params: Iterable[Tensor] | None = None) -> None:
    """Reverse-replay the tape that produced *loss*.

    *loss* must be scalar. Gradients accumulate across fan-out and land
    in the ``.grad`` slot of every tensor with ``requires_grad``. Params
    listed explicitly are guaranteed a grad afterwards, zero-filled when
    the loss does not depend on them. Each tape replays exactly once.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = loss.tape
    if tape is None:
        raise RuntimeError("loss is not attached to a tape; run the forward pass inside `with Tape():`")
    if tape._consumed:
        raise RuntimeError("tape already replayed; build a fresh tape per backward pass")
    tape._consumed = True

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    owners: dict[int, Tensor] = {id(loss): loss}

    for rec in reversed(tape.records):
        out_grad = grads.pop(id(rec.output), None)
        if out_grad is None:
            continue  # output never influenced the loss
        in_grads = rec.backward_fn(out_grad)
        if len(in_grads) != len(rec.inputs):
            raise RuntimeError(f"op {rec.op!r} returned {len(in_grads)} grads for {len(rec.inputs)} inputs")
        for tensor, g in zip(rec.inputs, in_grads):
            if g is None or not tensor.requires_grad:
                continue
            if g.shape != tensor.data.shape:
                raise RuntimeError(f"op {rec.op!r} produced grad of shape {g.shape} for input of shape {tensor.data.shape}")
            key = id(tensor)
            if key in grads:
                grads[key] = grads[key] + g
            else:
                grads[key] = g
                owners[key] = tensor

    for key, g in grads.items():
        tensor = owners[key]
        if tensor.grad is None:
            tensor.grad = g.astype(tensor.data.dtype, copy=False)
        else:
            tensor.grad = tensor.grad + g.astype(tensor.data.dtype, copy=False)

    if params is not None:
        for p in params:
            if p.grad is None:
                p.grad = np.zeros_like(p.data)


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


# ---------------------------------------------------------------------------
# Tensor dump format
#
#   magic   4 bytes  b"MSDT"
#   dtype   u8       0 = float32, 1 = float64
#   rank    u32 LE
#   shape   rank x u64 LE
#   data    row-major, little-endian
# ---------------------------------------------------------------------------

_MSDT_MAGIC = b"MSDT"
_DTYPE_TAGS = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_TAG_FOR_DTYPE = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


def write_msdt_stream(f: BinaryIO, arr: np.ndarray) -> None:
    if arr.dtype not in _TAG_FOR_DTYPE:
        raise ValueError(f"tensor dump supports float32/float64, got {arr.dtype}")
    f.write(_MSDT_MAGIC)
    f.write(struct.pack("<B", _TAG_FOR_DTYPE[arr.dtype]))
    f.write(struct.pack("<I", arr.ndim))
    f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    f.write(np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes())


def read_msdt_stream(f: BinaryIO) -> np.ndarray:
    magic = f.read(4)
    if magic != _MSDT_MAGIC:
        raise ValueError(f"bad tensor dump magic {magic!r}")
    (tag,) = struct.unpack("<B", f.read(1))
    if tag not in _DTYPE_TAGS:
        raise ValueError(f"unknown dtype tag {tag}")
    dtype = _DTYPE_TAGS[tag]
    (rank,) = struct.unpack("<I", f.read(4))
    shape = struct.unpack(f"<{rank}Q", f.read(8 * rank)) if rank else ()
    count = int(np.prod(shape, dtype=np.int64)) if rank else 1
    raw = f.read(count * dtype.itemsize)
    if len(raw) != count * dtype.itemsize:
        raise ValueError("truncated tensor dump")
    arr = np.frombuffer(raw, dtype=dtype).reshape(shape)
    return arr.astype(dtype.newbyteorder("="), copy=True)


def write_msdt(path, arr: np.ndarray) -> None:
    """Dump one array to *path* in the MSDT binary format."""
    with open(path, "wb") as f:
        write_msdt_stream(f, arr)


def read_msdt(path) -> np.ndarray:
    """Load one array from an MSDT file."""
    with open(path, "rb") as f:
        arr = read_msdt_stream(f)
        if f.read(1):
            raise ValueError(f"{path}: trailing bytes after tensor payload")
    return arr
