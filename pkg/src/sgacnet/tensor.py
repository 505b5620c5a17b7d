"""Tensor values and the reverse-mode tape.

A :class:`Tensor` wraps a numpy array. Operations in :mod:`sgacnet.functional`
record themselves on the innermost active :class:`Tape` whenever one of their
inputs requires a gradient; outside a tape they are plain array computations.

>>> from sgacnet import functional as F
>>> x = Tensor(np.zeros((1, 1, 1, 1)), requires_grad=True)
>>> with Tape() as tape:
...     y = F.sigmoid(x)
>>> float(tape.backward(y)[x].ravel()[0])
0.25
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import DimensionError, StateError

_TAPES: list["Tape"] = []


class Tensor:
    """Dense array plus autodiff bookkeeping.

    Tensors compare and hash by identity so they can key gradient maps.
    """

    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if arr.dtype.kind not in "fiub":
            raise TypeError(f"unsupported dtype {arr.dtype}")
        if arr.dtype.kind != "f" and requires_grad:
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
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

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return self.data.item()

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        label = f"{self.name!r}, " if self.name else ""
        return f"Tensor({label}shape={self.shape}, dtype={self.dtype}{flag})"

    def __add__(self, other):
        from . import functional as F
        return F.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import functional as F
        return F.sub(self, other)

    def __mul__(self, other):
        from . import functional as F
        return F.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from . import functional as F
        return F.scale(self, -1.0)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def check_4d(x: Tensor, what: str = "input") -> None:
    """Validate the rank-4 (n, c, h, w) layout shared by every spatial op."""
    if x.ndim != 4:
        raise DimensionError(f"{what} must be rank 4 (n, c, h, w), got shape {x.shape}", axis="rank")
    for axis, size in zip("nchw", x.shape):
        if size < 1:
            raise DimensionError(f"{what} has empty axis {axis}: shape {x.shape}", axis=axis)


@dataclass
class Node:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    adjoint: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Ordered record of differentiable operations.

    Nodes are appended in execution order, so the list is topologically sorted
    by construction. A tape supports exactly one :meth:`backward` call.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self._consumed = False

    def __enter__(self) -> "Tape":
        if self._consumed:
            raise StateError("tape already consumed by a backward pass")
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.remove(self)
        return False

    def record(self, op, inputs, output, adjoint) -> None:
        if self._consumed:
            raise StateError("cannot record onto a tape after backward()")
        self.nodes.append(Node(op, tuple(inputs), output, adjoint))

    def backward(self, output: Tensor, seed=None) -> dict[Tensor, np.ndarray]:
        """Propagate ``seed`` (default ones) from ``output`` to every leaf.

        Returns a map from each leaf tensor requiring a gradient (parameters
        and inputs that were not produced by a recorded op) to its gradient.
        Fan-out contributions are summed.
        """
        if self._consumed:
            raise StateError("backward() already ran on this tape; record a new forward pass")
        if seed is None:
            seed = np.ones_like(output.data)
        else:
            seed = np.asarray(seed.data if isinstance(seed, Tensor) else seed, dtype=output.dtype)
            if seed.shape != output.shape:
                raise DimensionError(
                    f"seed shape {seed.shape} does not match output shape {output.shape}", axis="seed")
        self._consumed = True

        produced = {id(node.output) for node in self.nodes}
        grads: dict[int, np.ndarray] = {id(output): seed}
        leaves: dict[int, Tensor] = {}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.output), None)
            for t in node.inputs:
                if t.requires_grad and id(t) not in produced:
                    leaves.setdefault(id(t), t)
            if g is None:
                continue
            for t, gi in zip(node.inputs, node.adjoint(g)):
                if gi is None or not t.requires_grad:
                    continue
                if gi.shape != t.shape:
                    raise DimensionError(
                        f"adjoint of {node.op} produced shape {gi.shape} for input {t.shape}", axis="adjoint")
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        self.nodes = []
        out = {}
        for key, t in leaves.items():
            g = grads.get(key)
            out[t] = np.zeros_like(t.data) if g is None else g.astype(t.dtype, copy=False)
        if output.requires_grad and id(output) not in produced:
            out[output] = seed
        return out


def active_tape() -> Tape | None:
    return _TAPES[-1] if _TAPES else None


def make_output(op: str, data: np.ndarray, inputs: Sequence[Tensor], adjoint) -> Tensor:
    """Wrap ``data`` and record the node when any input needs a gradient."""
    tape = active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs)
    if needs:
        tape.record(op, inputs, out, adjoint)
    return out


class no_grad:
    """Suspend recording on every active tape."""

    def __enter__(self):
        self._saved = list(_TAPES)
        _TAPES.clear()

    def __exit__(self, *exc):
        _TAPES.extend(self._saved)
        return False
