"""Dense tensors with define-by-run reverse-mode differentiation.

A :class:`Tensor` wraps a row-major numpy array. Every differentiable op in
:mod:`flowdet.ops` produces a new tensor that remembers its parents and a
backward rule; :func:`trace` recovers the graph in topological order and
:meth:`Tensor.backward` walks it in reverse.
"""

from __future__ import annotations

import contextlib
import struct
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPES = {"f32": np.float32, "f64": np.float64}
_DTYPE_TAGS = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_TAG_DTYPES = {v: k for k, v in _DTYPE_TAGS.items()}
TENSOR_MAGIC = b"FDTENSOR"

_grad_enabled = True
# op name -> factor applied to that op's input gradients (negative-control hook)
_sabotaged: dict[str, float] = {}


class ShapeError(ValueError):
    """Operand shapes are incompatible; ``axis`` names the offending axis."""

    def __init__(self, op: str, message: str, axis: str | int | None = None):
        self.op = op
        self.axis = axis
        where = f" (axis {axis})" if axis is not None else ""
        super().__init__(f"{op}: {message}{where}")


class NonFiniteError(FloatingPointError):
    def __init__(self, op: str, count: int):
        self.op = op
        super().__init__(f"{op}: produced {count} non-finite value(s)")


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "op", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _DTYPE_TAGS:
            arr = arr.astype(np.float64 if dtype is None else dtype)
        self.data: np.ndarray = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
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
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op}{rg})"

    def __len__(self) -> int:
        return len(self.data)

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into ``.grad`` of every requires_grad leaf."""
        if self.data.size != 1:
            raise ShapeError("backward", f"loss must be scalar, got shape {self.shape}")
        graph = trace(self)
        grads = graph.run_backward()
        for node in graph.nodes:
            if node.is_leaf and node.requires_grad:
                g = grads.get(id(node))
                if g is None:
                    g = np.zeros_like(node.data)
                node.grad = g if node.grad is None else node.grad + g

    # operator sugar; implementations live in flowdet.ops
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
        return ops.scale(self, -1.0)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def __getitem__(self, index):
        from . import ops
        return ops.index(self, index)

    def sum(self, axis=None, keepdims=False):
        from . import ops
        return ops.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        from . import ops
        return ops.mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def transpose(self, *axes):
        from . import ops
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return ops.transpose(self, axes)


@dataclass
class Graph:
    """Nodes reachable from ``output``, inputs always before their consumers."""

    output: Tensor
    nodes: list[Tensor] = field(default_factory=list)

    def run_backward(self, seed: np.ndarray | None = None) -> dict[int, np.ndarray]:
        out = self.output
        grads: dict[int, np.ndarray] = {
            id(out): np.ones_like(out.data) if seed is None else seed
        }
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None) if not node.is_leaf else grads.get(id(node))
            if g is None or node.is_leaf:
                continue
            parent_grads = node._backward(g)
            factor = _sabotaged.get(node.op)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                if factor is not None:
                    pg = pg * factor
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        return grads


def trace(output: Tensor) -> Graph:
    """Topologically ordered graph of everything ``output`` depends on."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(output, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in reversed(node._parents):
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return Graph(output, order)


def grad(output: Tensor, inputs: Sequence[Tensor]) -> list[np.ndarray]:
    """Gradients of scalar ``output`` w.r.t. ``inputs``; zeros where no path exists."""
    if output.data.size != 1:
        raise ShapeError("grad", f"loss must be scalar, got shape {output.shape}")
    grads = trace(output).run_backward() if output.requires_grad else {}
    return [grads.get(id(t), np.zeros_like(t.data)) for t in inputs]


def make_node(data: np.ndarray, parents: Iterable[Tensor], backward: Callable, op: str) -> Tensor:
    """Wrap an op result, recording the backward rule when gradients are needed."""
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(op, int(np.size(data) - np.count_nonzero(np.isfinite(data))))
    parents = tuple(parents)
    out = Tensor(data)
    out.op = op
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


@contextlib.contextmanager
def no_grad():
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


@contextlib.contextmanager
def sabotage(op: str, factor: float = 0.5):
    """Deliberately corrupt the backward rule of ``op`` (gradcheck negative control)."""
    _sabotaged[op] = factor
    try:
        yield
    finally:
        _sabotaged.pop(op, None)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if dtype is None and isinstance(x, (int, float)):
        return Tensor(np.asarray(x, dtype=np.float64))
    return Tensor(np.asarray(x, dtype=dtype))


# ---------------------------------------------------------------------------
# binary dump: b"FDTENSOR", u32 rank, u32 extents..., u8 dtype tag, LE elements


def dump_tensor(t: Tensor | np.ndarray) -> bytes:
    arr = t.data if isinstance(t, Tensor) else np.asarray(t)
    if arr.dtype not in _DTYPE_TAGS:
        raise TypeError(f"cannot dump dtype {arr.dtype}")
    header = TENSOR_MAGIC + struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape)
    header += struct.pack("<B", _DTYPE_TAGS[arr.dtype])
    return header + np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes()


def load_tensor(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Parse one dumped tensor starting at ``offset``; returns (array, next offset)."""
    if buf[offset:offset + 8] != TENSOR_MAGIC:
        raise ValueError(f"bad tensor magic at byte {offset}")
    pos = offset + 8
    (rank,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    shape = struct.unpack_from(f"<{rank}I", buf, pos)
    pos += 4 * rank
    (tag,) = struct.unpack_from("<B", buf, pos)
    pos += 1
    if tag not in _TAG_DTYPES:
        raise ValueError(f"unknown dtype tag {tag}")
    dt = _TAG_DTYPES[tag].newbyteorder("<")
    count = int(np.prod(shape, dtype=np.int64))
    arr = np.frombuffer(buf, dtype=dt, count=count, offset=pos).reshape(shape)
    pos += count * dt.itemsize
    return arr.astype(_TAG_DTYPES[tag]), pos


def save_tensor(path, t: Tensor | np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(dump_tensor(t))


def read_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        arr, _ = load_tensor(fh.read())
    return arr
