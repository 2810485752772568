"""Tensor value type and the tape that records differentiable operations."""

from __future__ import annotations

from typing import Callable, Iterable, Optional, Sequence

import numpy as np


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


class NumericError(ArithmeticError):
    """Raised on non-finite values where finite ones are required."""


BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]

_TAPES: list["Tape"] = []

# op names whose backward rule is deliberately corrupted (gradient checker sensitivity tests)
_FAULTS: set[str] = set()


def inject_fault(op: str) -> None:
    _FAULTS.add(op)


def clear_faults() -> None:
    _FAULTS.clear()


def faulty(op: str) -> bool:
    return op in _FAULTS


class Tensor:
    """Dense row-major array with an optional link into the active tape.

    ``data`` is a numpy array and is treated as immutable once the tensor
    exists. ``grad`` is filled in for leaves by :meth:`Tape.backward`.
    """

    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward", "_op")

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None
        self._op: str | None = None

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
        return float(self.data.item())

    def __len__(self) -> int:
        return self.data.shape[0]

    def __repr__(self) -> str:
        tag = f", op={self._op}" if self._op else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    def backward(self) -> None:
        tape = active_tape()
        if tape is None:
            raise RuntimeError("backward() needs the tape that recorded this tensor")
        tape.backward(self)

    # arithmetic sugar; the op implementations live in ops.py
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    def __radd__(self, other):
        from . import ops
        return ops.add(other, self)

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    def __rmul__(self, other):
        from . import ops
        return ops.mul(other, self)

    def __truediv__(self, other):
        from . import ops
        return ops.div(self, other)

    def __neg__(self):
        from . import ops
        return ops.neg(self)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def __getitem__(self, index):
        from . import ops
        return ops.getitem(self, index)

    @property
    def T(self):
        from . import ops
        return ops.transpose(self)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if dtype is None and isinstance(x, (int, float)):
        return Tensor(np.asarray(x, dtype=np.float64))
    return Tensor(x, dtype=dtype)


class Tape:
    """Append-only record of operations for reverse-mode differentiation.

    Use as a context manager; operations executed inside the block whose
    inputs require gradients are appended to ``nodes`` in execution order,
    which is a topological order by construction.
    """

    def __init__(self):
        self.nodes: list[Tensor] = []

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)

    def record(self, out: Tensor) -> None:
        self.nodes.append(out)

    def backward(self, root: Tensor, grad: np.ndarray | None = None) -> dict[int, np.ndarray]:
        """Accumulate d(root)/d(leaf) into ``leaf.grad`` for every leaf reached.

        Returns the mapping ``id(tensor) -> gradient`` for all tensors touched
        (intermediates included), mostly useful for tests.
        """
        if grad is None:
            if root.data.size != 1:
                raise DimensionError(f"backward() needs a scalar root, got shape {root.shape}")
            grad = np.ones_like(root.data)
        grads: dict[int, np.ndarray] = {id(root): np.asarray(grad, dtype=root.data.dtype)}
        leaves: dict[int, Tensor] = {}
        if root._backward is None and root.requires_grad:
            leaves[id(root)] = root
        for node in reversed(self.nodes):
            g = grads.get(id(node))
            if g is None:
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
                if parent._backward is None:
                    leaves[key] = parent
        for key, leaf in leaves.items():
            leaf.grad = grads[key]
        return grads


def active_tape() -> Tape | None:
    return _TAPES[-1] if _TAPES else None


def backward(tape: Tape, root: Tensor) -> dict[int, np.ndarray]:
    """Run the reverse sweep of ``tape`` from scalar ``root``."""
    return tape.backward(root)


def make_node(data: np.ndarray, parents: Iterable[Tensor], backward_fn: BackwardFn, op: str) -> Tensor:
    parents = tuple(parents)
    if op in _FAULTS:
        backward_fn = _corrupt(backward_fn)
    out = Tensor(data)
    tape = active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
        out._op = op
        tape.record(out)
    return out


def _corrupt(fn: BackwardFn) -> BackwardFn:
    def wrapped(g):
        return [None if pg is None else 1.5 * pg for pg in fn(g)]
    return wrapped


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None
