"""Dense tensor with tape-based reverse-mode differentiation.

Operations record onto the innermost active :class:`Tape` only when at
least one input requires a gradient, so inference outside a tape builds
no graph at all.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np


class ConfigurationError(ValueError):
    """Raised on shape or hyperparameter mismatches between operands."""


class NonFiniteError(FloatingPointError):
    """Raised when a forward operation produces NaN or Inf."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64 if dtype is None else dtype)
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
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

    def zero_grad(self) -> None:
        self.grad = None

    def item(self) -> float:
        if self.data.size != 1:
            raise ConfigurationError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # operator sugar; the named functions in ``ops`` are canonical
    def __add__(self, other):
        from .ops import add

        return add(self, other)

    def __sub__(self, other):
        from .ops import sub

        return sub(self, other)

    def __mul__(self, other):
        from .ops import mul

        return mul(self, other)


class Node:
    __slots__ = ("inputs", "output", "backward_fn")

    def __init__(self, inputs: Sequence[Tensor], output: Tensor, backward_fn: Callable):
        self.inputs = tuple(inputs)
        self.output = output
        self.backward_fn = backward_fn


_TAPES: list["Tape"] = []


class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager; the recording order is a valid topological
    order, so ``backward`` simply walks it in reverse.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self._consumed = False

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, node: Node) -> None:
        self.nodes.append(node)

    def backward(self, loss: Tensor) -> None:
        backward(loss, self)

    def reset(self) -> None:
        self.nodes = []
        self._consumed = False


def active_tape() -> Tape | None:
    return _TAPES[-1] if _TAPES else None


def check_finite(arr: np.ndarray, op: str) -> np.ndarray:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"{op} produced non-finite values")
    return arr


def make_result(
    data: np.ndarray,
    inputs: Sequence[Tensor],
    backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]],
    op: str,
) -> Tensor:
    """Wrap a forward result and record it if any input needs a gradient.

    ``backward_fn(grad_out)`` returns one gradient (or ``None``) per input.
    """
    check_finite(data, op)
    tape = active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs)
    if needs:
        tape.record(Node(inputs, out, backward_fn))
    return out


def backward(loss: Tensor, tape: Tape) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every requires_grad leaf.

    The tape is consumed: its nodes are released afterwards.
    """
    if loss.data.size != 1:
        raise ConfigurationError(f"backward needs a scalar loss, got shape {loss.shape}")
    if tape._consumed:
        raise RuntimeError("tape already consumed by a previous backward call")

    produced = {id(n.output) for n in tape.nodes}
    if id(loss) not in produced and not loss.requires_grad:
        raise ConfigurationError("loss was not recorded on this tape")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g_out = grads.pop(id(node.output), None)
        if g_out is None:
            continue
        in_grads = node.backward_fn(g_out)
        for t, g in zip(node.inputs, in_grads):
            if g is None or not t.requires_grad:
                continue
            key = id(t)
            if key in produced:
                if key in grads:
                    grads[key] = grads[key] + g
                else:
                    grads[key] = g
            else:
                t.grad = g.copy() if t.grad is None else t.grad + g

    if id(loss) not in produced and loss.requires_grad:
        # loss is itself a leaf
        g = grads[id(loss)]
        loss.grad = g if loss.grad is None else loss.grad + g

    tape.nodes = []
    tape._consumed = True


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)
