"""Tensor, tape and primitive dispatch for the reverse-mode engine.

Every differentiable operation is a :class:`Primitive`: a pure forward
function on numpy arrays plus a backward rule. Calling :func:`apply` runs the
forward function and, when a :class:`Tape` is active and some input requires
gradients, appends a :class:`Node` to that tape. Outside a tape nothing is
recorded, which doubles as the inference (no-grad) mode.
"""

from __future__ import annotations

import threading
from collections import Counter
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Any, Callable, Iterator, Sequence

import numpy as np

from ..errors import UsageError

_state = threading.local()


def _tape_stack() -> list["Tape"]:
    stack = getattr(_state, "tapes", None)
    if stack is None:
        stack = _state.tapes = []
    return stack


def _counter_stack() -> list[Counter]:
    stack = getattr(_state, "counters", None)
    if stack is None:
        stack = _state.counters = []
    return stack


class Tensor:
    """Dense float64 array with an optional gradient slot."""

    __slots__ = ("data", "requires_grad", "grad", "name", "__weakref__")

    def __init__(self, data: Any, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # Operator sugar. The ops module imports this one, so import lazily.
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

    def __neg__(self):
        from . import ops

        return ops.scale(self, -1.0)

    def __getitem__(self, index):
        from . import ops

        return ops.take(self, index)


def as_tensor(value: Any) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


@dataclass(frozen=True)
class Primitive:
    """A forward function on arrays and its vector-Jacobian product.

    ``forward(*arrays, **attrs)`` returns ``(output, saved)`` where output is
    an array, or a tuple of arrays when ``n_out > 1``. ``backward(grad_out,
    saved, arrays, attrs)`` returns one gradient (or None) per input.
    """

    name: str
    forward: Callable[..., tuple[Any, Any]]
    backward: Callable[..., Sequence[np.ndarray | None]]
    n_out: int = 1


@dataclass
class Node:
    primitive: Primitive
    inputs: tuple[Tensor, ...]
    attrs: dict
    outputs: tuple[Tensor, ...]
    saved: Any = field(repr=False, default=None)


class Tape:
    """Append-only record of primitive applications.

    Use as a context manager; operations executed inside the ``with`` block
    on tensors that require gradients are recorded in topological order.
    """

    def __init__(self) -> None:
        self.nodes: list[Node] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, node: Node) -> None:
        self.nodes.append(node)

    def backward(self, output: Tensor) -> None:
        backward(self, output)

    def replay(self) -> list[tuple[np.ndarray, ...]]:
        """Re-run every recorded forward from the current leaf values.

        Returns the recomputed outputs node by node; with unchanged leaves
        they equal the recorded outputs bit for bit.
        """
        values: dict[int, np.ndarray] = {}
        results = []
        for node in self.nodes:
            arrays = [values.get(id(t), t.data) for t in node.inputs]
            out, _ = node.primitive.forward(*arrays, **node.attrs)
            outs = out if node.primitive.n_out > 1 else (out,)
            for t, arr in zip(node.outputs, outs):
                values[id(t)] = arr
            results.append(tuple(outs))
        return results


def current_tape() -> Tape | None:
    stack = _tape_stack()
    return stack[-1] if stack else None


@contextmanager
def no_grad() -> Iterator[None]:
    """Suspend recording on the current thread."""
    stack = _tape_stack()
    saved = list(stack)
    stack.clear()
    try:
        yield
    finally:
        stack.extend(saved)


@contextmanager
def count_ops() -> Iterator[Counter]:
    """Count primitive invocations (by name) executed inside the block."""
    counter: Counter = Counter()
    stack = _counter_stack()
    stack.append(counter)
    try:
        yield counter
    finally:
        stack.remove(counter)


def apply(prim: Primitive, inputs: Sequence[Any], **attrs) -> Any:
    tensors = tuple(as_tensor(t) for t in inputs)
    out, saved = prim.forward(*(t.data for t in tensors), **attrs)
    for counter in _counter_stack():
        counter[prim.name] += 1
    tape = current_tape()
    track = tape is not None and any(t.requires_grad for t in tensors)
    if prim.n_out > 1:
        outputs = tuple(Tensor(o, requires_grad=track) for o in out)
    else:
        outputs = (Tensor(out, requires_grad=track),)
    if track:
        tape.record(Node(prim, tensors, attrs, outputs, saved))
    return outputs if prim.n_out > 1 else outputs[0]


def backward(tape: Tape, output: Tensor) -> None:
    """Accumulate d(output)/d(t) into ``t.grad`` for every tracked tensor."""
    if output.size != 1:
        raise UsageError(f"backward() needs a scalar output, got shape {output.shape}")
    grads: dict[int, np.ndarray] = {id(output): np.ones_like(output.data)}
    owners: dict[int, Tensor] = {id(output): output}
    for node in reversed(tape.nodes):
        gouts = [grads.pop(id(o), None) for o in node.outputs]
        if all(g is None for g in gouts):
            continue
        for o, g in zip(node.outputs, gouts):
            owners.pop(id(o), None)
            if g is not None:
                o.grad = g if o.grad is None else o.grad + g
        if node.primitive.n_out > 1:
            gout = tuple(np.zeros_like(o.data) if g is None else g for o, g in zip(node.outputs, gouts))
        else:
            gout = gouts[0]
        arrays = [t.data for t in node.inputs]
        in_grads = node.primitive.backward(gout, node.saved, arrays, node.attrs)
        for t, g in zip(node.inputs, in_grads):
            if g is None or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + g
            else:
                grads[key] = g
                owners[key] = t
    # what remains belongs to leaves (tensors not produced on this tape)
    for key, g in grads.items():
        t = owners[key]
        t.grad = g if t.grad is None else t.grad + g
