"""Tensor type, computation graph and reverse-mode differentiation.

Every value is a float64 numpy array. A tensor produced by a differentiable
op carries a :class:`Node` recording its inputs and a closure computing the
vector-Jacobian product. :func:`backward` walks those nodes once each in
reverse topological order.
"""
from __future__ import annotations

import contextlib
import itertools
import struct
from dataclasses import dataclass
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Node",
    "ShapeError",
    "GraphError",
    "tensor",
    "no_grad",
    "is_grad_enabled",
    "backward",
    "graph_nodes",
    "GradCheckReport",
    "grad_check",
    "near_points",
    "tensor_to_bytes",
    "tensor_from_bytes",
    "TensorFormatError",
]

DTYPE = np.float64

_node_ids = itertools.count()
_grad_enabled = True


class ShapeError(ValueError):
    """Operand shapes are incompatible with an operation."""


class GraphError(RuntimeError):
    """Misuse of the computation graph (non-scalar loss, freed graph)."""


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


class Node:
    """One recorded operation: inputs, output and the backward closure."""

    __slots__ = ("id", "op", "inputs", "backward_fn", "freed")

    def __init__(self, op: str, inputs: tuple, backward_fn: Callable):
        self.id = next(_node_ids)
        self.op = op
        self.inputs = inputs
        self.backward_fn = backward_fn
        self.freed = False

    def __repr__(self) -> str:
        return f"Node({self.id}, {self.op!r}, inputs={[id(t) for t in self.inputs]})"


class Tensor:
    """N-dimensional float64 array with an optional gradient.

    ``grad`` is populated on leaf tensors (those not produced by a recorded
    op) by :func:`backward`. Intermediate tensors keep their gradient only
    after :meth:`retain_grad`.
    """

    __slots__ = ("data", "requires_grad", "grad", "_node", "_retain", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        arr = np.asarray(data, dtype=DTYPE)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._node: Optional[Node] = None
        self._retain = False
        self.name = name

    # -- basic properties -------------------------------------------------
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
    def node(self) -> Optional[Node]:
        return self._node

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def retain_grad(self) -> "Tensor":
        self._retain = True
        return self

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, retain_graph: bool = False) -> int:
        return backward(self, retain_graph=retain_graph)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

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
        return ops.mul(self, -1.0)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def sum(self, axis=None, keepdims: bool = False):
        from . import ops
        return ops.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        from . import ops
        return ops.mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def make_result(data: np.ndarray, inputs: Sequence[Tensor], op: str, backward_fn: Callable) -> Tensor:
    """Wrap ``data`` as the output of ``op``; record a node when needed."""
    needs = _grad_enabled and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs)
    if needs:
        out._node = Node(op, tuple(inputs), backward_fn)
    return out


def graph_nodes(root: Tensor) -> list:
    """Tensors reachable from ``root`` in topological order (inputs first)."""
    order: list = []
    seen: set = set()
    stack = [(root, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        if t._node is not None:
            for inp in t._node.inputs:
                if inp.requires_grad and id(inp) not in seen:
                    stack.append((inp, False))
    return order


def backward(loss: Tensor, retain_graph: bool = False) -> int:
    """Accumulate d(loss)/d(leaf) into every reachable leaf's ``grad``.

    Returns the number of node backward closures executed, which equals the
    number of recorded nodes reachable from ``loss``.
    """
    if loss.data.size != 1:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise GraphError("loss does not require grad; nothing was recorded")
    order = graph_nodes(loss)
    for t in order:
        if t._node is not None and t._node.freed:
            raise GraphError(
                "graph already freed by a previous backward; pass retain_graph=True "
                "to differentiate twice"
            )
    grads = {id(loss): np.ones_like(loss.data)}
    executed = 0
    for t in reversed(order):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        if t._node is None or t._retain:
            t.grad = g.copy() if t.grad is None else t.grad + g
        node = t._node
        if node is None:
            continue
        in_grads = node.backward_fn(g)
        executed += 1
        for inp, gi in zip(node.inputs, in_grads):
            if gi is None or not inp.requires_grad:
                continue
            if gi.shape != inp.data.shape:
                raise ShapeError(
                    f"{node.op}: backward produced shape {gi.shape} for input of shape {inp.shape}"
                )
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
        if not retain_graph:
            node.freed = True
            node.backward_fn = _freed_backward
    return executed


def _freed_backward(g):  # pragma: no cover - guarded by the freed check
    raise GraphError("graph freed")


# -- gradient checking ------------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_error: float
    passed: bool
    n_checked: int
    n_excluded: int
    worst_index: Optional[tuple]
    tolerance: float

    def __str__(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (
            f"{status} max_rel_error={self.max_rel_error:.3e} tol={self.tolerance:.1e} "
            f"checked={self.n_checked} excluded={self.n_excluded}"
        )


def near_points(x: np.ndarray, points: Sequence[float] = (0.0,), radius: float = 1e-4) -> np.ndarray:
    """Mask of elements within ``radius`` of a non-differentiable point."""
    x = np.asarray(x)
    mask = np.zeros(x.shape, dtype=bool)
    for p in points:
        mask |= np.abs(x - p) <= radius
    return mask


def grad_check(
    f: Callable[[Tensor], Tensor],
    x: np.ndarray,
    step: float = 1e-4,
    tolerance: float = 1e-4,
    exclude: Optional[np.ndarray] = None,
    indices: Optional[Sequence[tuple]] = None,
    floor: float = 1e-6,
) -> GradCheckReport:
    """Compare the analytic gradient of scalar ``f`` against central differences.

    The relative error per element is ``|a - n| / max(|a|, |n|, floor)``.
    ``f`` must be deterministic; a stochastic ``f`` gives meaningless results.
    Elements flagged in ``exclude`` (e.g. ``near_points(x)`` for relu/max
    kinks, where the derivative does not exist) are skipped. ``indices``
    restricts the check to a subset of elements.
    """
    x = np.array(x, dtype=DTYPE)
    xt = Tensor(x, requires_grad=True)
    out = f(xt)
    backward(out)
    analytic = xt.grad if xt.grad is not None else np.zeros_like(x)

    if indices is None:
        indices = list(np.ndindex(x.shape))
    excl = np.zeros(x.shape, dtype=bool) if exclude is None else np.asarray(exclude, dtype=bool)

    worst, worst_idx, checked, skipped = 0.0, None, 0, 0
    with no_grad():
        for idx in indices:
            idx = tuple(idx)
            if excl[idx]:
                skipped += 1
                continue
            orig = x[idx]
            x[idx] = orig + step
            fp = f(Tensor(x)).item()
            x[idx] = orig - step
            fm = f(Tensor(x)).item()
            x[idx] = orig
            numeric = (fp - fm) / (2.0 * step)
            a = analytic[idx]
            err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
            checked += 1
            if err > worst:
                worst, worst_idx = err, idx
    return GradCheckReport(worst, worst <= tolerance, checked, skipped, worst_idx, tolerance)


# -- serialization ----------------------------------------------------------

MAGIC = b"AGT1"


class TensorFormatError(ValueError):
    """A serialized tensor record is malformed or truncated."""


def tensor_to_bytes(t) -> bytes:
    """Encode as ``AGT1`` | u8 rank | u32 extents | float64 little-endian values."""
    arr = t.data if isinstance(t, Tensor) else np.asarray(t, dtype=DTYPE)
    if arr.ndim > 255:
        raise ShapeError("rank above 255 cannot be serialized")
    head = MAGIC + struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype="<f8").tobytes()


def tensor_from_bytes(buf: bytes, offset: int = 0) -> tuple:
    """Decode one record starting at ``offset``; returns ``(array, next_offset)``."""
    if len(buf) - offset < 5:
        raise TensorFormatError("truncated tensor header")
    if buf[offset:offset + 4] != MAGIC:
        raise TensorFormatError(f"bad tensor magic {buf[offset:offset + 4]!r}")
    rank = buf[offset + 4]
    pos = offset + 5
    if len(buf) - pos < 4 * rank:
        raise TensorFormatError("truncated tensor extents")
    shape = struct.unpack_from(f"<{rank}I", buf, pos)
    pos += 4 * rank
    count = int(np.prod(shape, dtype=np.int64)) if rank else 1
    nbytes = 8 * count
    if len(buf) - pos < nbytes:
        raise TensorFormatError("truncated tensor payload")
    arr = np.frombuffer(buf, dtype="<f8", count=count, offset=pos).astype(DTYPE).reshape(shape)
    return arr, pos + nbytes
