"""Dense fp64 tensors with tape-based reverse-mode differentiation.

Operations record onto the innermost active :class:`GradTape` whenever one of
their inputs requires a gradient. ``backward(loss)`` replays the tape in
reverse, fills ``.grad`` on every reachable tensor that requires one, and
clears the tape.

    >>> x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    >>> with GradTape():
    ...     loss = (x * x).sum()
    ...     backward(loss)
    >>> x.grad
    array([2., 4., 6.])
"""
from __future__ import annotations

import struct
from typing import BinaryIO, Callable, Sequence

import numpy as np

__all__ = [
    "Tensor", "GradTape", "TapeError", "NoTapeError", "NonScalarLossError",
    "as_tensor", "elementwise", "matmul", "reduce", "backward", "record",
    "exp", "log", "relu", "reshape", "transpose", "stack", "unbroadcast",
    "tensor_to_bytes", "tensor_from_bytes", "write_tensor", "read_tensor",
]


class TapeError(RuntimeError):
    pass


class NoTapeError(TapeError):
    pass


class NonScalarLossError(TapeError, ValueError):
    pass


_TAPES: list["GradTape"] = []


class _Node:
    __slots__ = ("inputs", "output", "backward_fn")

    def __init__(self, inputs, output, backward_fn):
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn


class GradTape:
    """Ordered record of differentiable operations for one forward pass."""

    def __init__(self) -> None:
        self.nodes: list[_Node] = []

    def __enter__(self) -> "GradTape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)

    def clear(self) -> None:
        for node in self.nodes:
            node.output._tape = None
        self.nodes.clear()

    def backward(self, loss: "Tensor") -> None:
        backward(loss)


def active_tape() -> GradTape | None:
    return _TAPES[-1] if _TAPES else None


class Tensor:
    """An N-d fp64 array, optionally linked into the active gradient tape."""

    __slots__ = ("data", "requires_grad", "grad", "_tape", "__weakref__")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False) -> None:
        arr = np.asarray(data.data if isinstance(data, Tensor) else data, dtype=np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._tape: GradTape | None = None

    # -- introspection -------------------------------------------------
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
    def tape_node(self) -> GradTape | None:
        return self._tape

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def __array__(self, dtype=None, copy=None):
        return self.data if dtype is None else self.data.astype(dtype)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({np.array2string(self.data, precision=4)}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    # -- arithmetic ----------------------------------------------------
    def __add__(self, other):
        return elementwise("add", self, other)

    def __radd__(self, other):
        return elementwise("add", other, self)

    def __sub__(self, other):
        return elementwise("sub", self, other)

    def __rsub__(self, other):
        return elementwise("sub", other, self)

    def __mul__(self, other):
        return elementwise("mul", self, other)

    def __rmul__(self, other):
        return elementwise("mul", other, self)

    def __truediv__(self, other):
        return elementwise("div", self, other)

    def __rtruediv__(self, other):
        return elementwise("div", other, self)

    def __neg__(self):
        return elementwise("mul", self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return reduce("sum", self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce("mean", self, axis, keepdims)

    def max(self, axis=None, keepdims=False):
        return reduce("max", self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)

    def backward(self) -> None:
        backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def record(output: Tensor, inputs: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    """Link ``output`` into the active tape.

    ``backward_fn(grad_output)`` must return one gradient (or ``None``) per
    entry of ``inputs``, already shaped like that input.
    """
    tape = active_tape()
    if tape is None or not any(t.requires_grad for t in inputs):
        return output
    output.requires_grad = True
    output._tape = tape
    tape.nodes.append(_Node(tuple(inputs), output, backward_fn))
    return output


def unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` over the axes that were broadcast."""
    if grad.shape == tuple(shape):
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"shape mismatch: {a.shape} and {b.shape} are not broadcastable") from None


def elementwise(kind: str, a, b) -> Tensor:
    """Broadcasting add/sub/mul/div. Division by zero follows IEEE semantics."""
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)
    ad, bd = a.data, b.data
    with np.errstate(divide="ignore", invalid="ignore"):
        if kind == "add":
            out = ad + bd
            fn = lambda g: (unbroadcast(g, a.shape), unbroadcast(g, b.shape))
        elif kind == "sub":
            out = ad - bd
            fn = lambda g: (unbroadcast(g, a.shape), unbroadcast(-g, b.shape))
        elif kind == "mul":
            out = ad * bd
            fn = lambda g: (unbroadcast(g * bd, a.shape), unbroadcast(g * ad, b.shape))
        elif kind == "div":
            out = ad / bd

            def fn(g):
                with np.errstate(divide="ignore", invalid="ignore"):
                    return (unbroadcast(g / bd, a.shape), unbroadcast(-g * ad / (bd * bd), b.shape))
        else:
            raise ValueError(f"unknown elementwise op {kind!r}")
    return record(Tensor(out), (a, b), fn)


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return record(Tensor(out), (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    xd = x.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(xd)
    return record(Tensor(out), (x,), lambda g: (g / xd,))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return record(Tensor(x.data * mask), (x,), lambda g: (g * mask,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over the last two axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ValueError(f"matmul batch dimensions differ: {a.shape} @ {b.shape}") from None
    ad, bd = a.data, b.data

    def fn(g):
        ga = unbroadcast(g @ np.swapaxes(bd, -1, -2), a.shape) if a.requires_grad else None
        gb = unbroadcast(np.swapaxes(ad, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return record(Tensor(ad @ bd), (a, b), fn)


def _norm_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    axes = (axis,) if isinstance(axis, (int, np.integer)) else tuple(axis)
    out = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise ValueError(f"axis {ax} is out of range for a rank-{ndim} tensor")
        out.append(int(ax) % ndim)
    if len(set(out)) != len(out):
        raise ValueError(f"repeated axis in {axis}")
    return tuple(sorted(out))


def reduce(kind: str, a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    """sum / mean / max over ``axis``.

    Max sends the whole upstream gradient to one element per reduced block:
    the lowest flat (row-major) index among the tied maxima.
    """
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    kept_shape = tuple(1 if i in axes else n for i, n in enumerate(a.shape))

    def restore(g):
        return g.reshape(kept_shape)

    if kind == "sum":
        out = a.data.sum(axis=axes, keepdims=keepdims)
        fn = lambda g: (np.broadcast_to(restore(g), a.shape).copy(),)
    elif kind == "mean":
        count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
        out = a.data.mean(axis=axes, keepdims=keepdims)
        fn = lambda g: (np.broadcast_to(restore(g) / count, a.shape).copy(),)
    elif kind == "max":
        rest = tuple(i for i in range(a.ndim) if i not in axes)
        moved = np.transpose(a.data, rest + axes)
        lead = moved.shape[: len(rest)]
        flat = moved.reshape(lead + (-1,))
        idx = np.argmax(flat, axis=-1)
        out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
        out = out.reshape(kept_shape) if keepdims else out

        def fn(g):
            gflat = np.zeros(flat.shape)
            np.put_along_axis(gflat, idx[..., None], np.reshape(g, lead)[..., None], axis=-1)
            gmoved = gflat.reshape(moved.shape)
            return (np.transpose(gmoved, np.argsort(rest + axes)),)
    else:
        raise ValueError(f"unknown reduction {kind!r}")
    return record(Tensor(out), (a,), fn)


def reshape(a: Tensor, shape) -> Tensor:
    a = as_tensor(a)
    out = a.data.reshape(shape)
    return record(Tensor(out), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(range(a.ndim))[::-1]
    inv = np.argsort(axes)
    return record(Tensor(np.transpose(a.data, axes)), (a,), lambda g: (np.transpose(g, inv),))


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in tensors], axis=axis)

    def fn(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return record(Tensor(out), tensors, fn)


def backward(loss: Tensor) -> None:
    """Reverse-mode sweep from a scalar ``loss``; clears the tape afterwards."""
    if loss.size != 1:
        raise NonScalarLossError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = loss._tape
    if tape is None:
        raise NoTapeError("loss is not linked to an active gradient tape")

    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape)}
    leaves: dict[int, Tensor] = {}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        node.output.grad = g
        for inp, gi in zip(node.inputs, node.backward_fn(g)):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            if inp._tape is None:
                leaves[key] = inp
            prev = grads.get(key)
            grads[key] = gi if prev is None else prev + gi
    for key, t in leaves.items():
        t.grad = grads[key]
    tape.clear()


# -- serialization ---------------------------------------------------------

_MAGIC = b"TNSR"
_VERSION = 1


def tensor_to_bytes(t) -> bytes:
    arr = np.ascontiguousarray(np.asarray(t, dtype=np.float64))
    head = _MAGIC + struct.pack("<II", _VERSION, arr.ndim)
    head += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head + arr.astype("<f8").tobytes()


def read_tensor(f: BinaryIO) -> Tensor:
    magic = f.read(4)
    if magic != _MAGIC:
        raise ValueError(f"bad tensor magic {magic!r}")
    version, rank = struct.unpack("<II", f.read(8))
    if version != _VERSION:
        raise ValueError(f"unsupported tensor version {version}")
    dims = struct.unpack(f"<{rank}Q", f.read(8 * rank))
    count = int(np.prod(dims)) if rank else 1
    raw = f.read(8 * count)
    if len(raw) != 8 * count:
        raise ValueError("truncated tensor payload")
    return Tensor(np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(dims))


def write_tensor(f: BinaryIO, t) -> None:
    f.write(tensor_to_bytes(t))


def tensor_from_bytes(buf: bytes) -> Tensor:
    import io

    return read_tensor(io.BytesIO(buf))
