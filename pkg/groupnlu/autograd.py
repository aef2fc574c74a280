"""Reverse-mode differentiation over float64 numpy arrays.

Operations record themselves on the active ``Tape`` (see ``recording``) when at
least one input requires a gradient. ``backward`` replays the tape in reverse
and accumulates gradients into every ``Variable`` that asked for one. Outside a
``recording`` block the same functions only compute values.
"""

import contextlib
import threading
from dataclasses import dataclass
from typing import Callable, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from groupnlu.errors import ContractError, DimensionError, VocabError

Tensor = np.ndarray
DTYPE = np.float64

ArrayLike = Union["Variable", np.ndarray, float, int, Sequence[float]]
BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Variable:
    __slots__ = ("data", "_grad", "requires_grad", "node_id", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None) -> None:
        self.data: Tensor = np.asarray(data, dtype=DTYPE)
        self._grad: Optional[Tensor] = None
        self.requires_grad = requires_grad
        self.node_id: Optional[int] = None
        self.name = name

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def grad(self) -> Tensor:
        if self._grad is None:
            return np.zeros_like(self.data)
        return self._grad

    def zero_grad(self) -> None:
        self._grad = None

    def accumulate(self, grad: np.ndarray) -> None:
        if grad.shape != self.data.shape:
            raise ContractError(f"gradient shape {grad.shape} does not match value shape {self.data.shape}")
        if self._grad is None:
            self._grad = np.array(grad, dtype=DTYPE)
        else:
            self._grad = self._grad + grad

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Variable(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    def __add__(self, other: ArrayLike) -> "Variable":
        return add(self, other)

    def __radd__(self, other: ArrayLike) -> "Variable":
        return add(other, self)

    def __sub__(self, other: ArrayLike) -> "Variable":
        return sub(self, other)

    def __rsub__(self, other: ArrayLike) -> "Variable":
        return sub(other, self)

    def __mul__(self, other: ArrayLike) -> "Variable":
        return mul(self, other)

    def __rmul__(self, other: ArrayLike) -> "Variable":
        return mul(other, self)

    def __neg__(self) -> "Variable":
        return neg(self)

    def __matmul__(self, other: ArrayLike) -> "Variable":
        return matmul(self, other)

    def __getitem__(self, key) -> "Variable":
        return index(self, key)


@dataclass
class Node:
    node_id: int
    op: str
    inputs: Tuple[Variable, ...]
    output: Variable
    backward: BackwardFn


class Tape:
    def __init__(self) -> None:
        self.nodes: List[Node] = []

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, op: str, inputs: Sequence[Variable], output: Variable, backward: BackwardFn) -> None:
        node = Node(len(self.nodes), op, tuple(inputs), output, backward)
        output.node_id = node.node_id
        self.nodes.append(node)


_state = threading.local()


def _tape_stack() -> List[Optional[Tape]]:
    stack = getattr(_state, "stack", None)
    if stack is None:
        stack = []
        _state.stack = stack
    return stack


def current_tape() -> Optional[Tape]:
    stack = _tape_stack()
    return stack[-1] if stack else None


@contextlib.contextmanager
def recording(tape: Optional[Tape] = None) -> Iterator[Tape]:
    tape = tape if tape is not None else Tape()
    stack = _tape_stack()
    stack.append(tape)
    try:
        yield tape
    finally:
        stack.pop()


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    stack = _tape_stack()
    stack.append(None)
    try:
        yield
    finally:
        stack.pop()


def constant(values) -> Variable:
    return Variable(values, requires_grad=False)


def parameter(values, name: Optional[str] = None) -> Variable:
    return Variable(np.array(values, dtype=DTYPE), requires_grad=True, name=name)


def _as_var(value: ArrayLike) -> Variable:
    if isinstance(value, Variable):
        return value
    return Variable(value, requires_grad=False)


def _emit(op: str, inputs: Sequence[Variable], values: np.ndarray, backward: BackwardFn) -> Variable:
    out = Variable(values)
    tape = current_tape()
    if tape is not None and any(v.requires_grad for v in inputs):
        out.requires_grad = True
        tape.record(op, inputs, out, backward)
    return out


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(a: Variable, b: Variable, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise DimensionError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from exc


def backward(loss: Variable, tape: Optional[Tape] = None) -> None:
    """Accumulate d(loss)/d(v) into ``v.grad`` for every reachable variable."""
    if loss.data.size != 1:
        raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
    tape = tape if tape is not None else current_tape()
    loss.accumulate(np.ones_like(loss.data))
    if tape is None or loss.node_id is None:
        return
    for node in reversed(tape.nodes[: loss.node_id + 1]):
        upstream = node.output._grad
        if upstream is None:
            continue
        for var, grad in zip(node.inputs, node.backward(upstream)):
            if grad is None or not var.requires_grad:
                continue
            var.accumulate(grad)


# Elementwise arithmetic


def add(a: ArrayLike, b: ArrayLike) -> Variable:
    a, b = _as_var(a), _as_var(b)
    _broadcast_shape(a, b, "add")

    def grads(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _emit("add", (a, b), a.data + b.data, grads)


def sub(a: ArrayLike, b: ArrayLike) -> Variable:
    a, b = _as_var(a), _as_var(b)
    _broadcast_shape(a, b, "sub")

    def grads(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _emit("sub", (a, b), a.data - b.data, grads)


def mul(a: ArrayLike, b: ArrayLike) -> Variable:
    a, b = _as_var(a), _as_var(b)
    _broadcast_shape(a, b, "mul")

    def grads(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _emit("mul", (a, b), a.data * b.data, grads)


def neg(x: ArrayLike) -> Variable:
    x = _as_var(x)
    return _emit("neg", (x,), -x.data, lambda g: (-g,))


def scale(x: ArrayLike, factor: float) -> Variable:
    x = _as_var(x)
    factor = float(factor)
    return _emit("scale", (x,), x.data * factor, lambda g: (g * factor,))


def exp(x: ArrayLike) -> Variable:
    x = _as_var(x)
    out = np.exp(x.data)
    return _emit("exp", (x,), out, lambda g: (g * out,))


def log(x: ArrayLike) -> Variable:
    x = _as_var(x)
    return _emit("log", (x,), np.log(x.data), lambda g: (g / x.data,))


def sigmoid(x: ArrayLike) -> Variable:
    x = _as_var(x)
    out = np.exp(-np.logaddexp(0.0, -x.data))
    return _emit("sigmoid", (x,), out, lambda g: (g * out * (1.0 - out),))


def tanh(x: ArrayLike) -> Variable:
    x = _as_var(x)
    out = np.tanh(x.data)
    return _emit("tanh", (x,), out, lambda g: (g * (1.0 - out * out),))


# Linear algebra and shape plumbing


def _rowwise_matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``a @ b`` with every row of ``a`` taken as its own vector-matrix product.

    A row's result is then the same whatever other rows share the batch, so
    padding never changes the values of real positions.
    """
    if a.size == 0 or b.size == 0:
        return np.matmul(a, b)
    rows = np.ascontiguousarray(a).reshape(-1, 1, a.shape[-1])
    return np.matmul(rows, b).reshape(a.shape[:-1] + (b.shape[-1],))


def matmul(a: ArrayLike, b: ArrayLike) -> Variable:
    a, b = _as_var(a), _as_var(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise DimensionError(f"matmul needs operands of rank >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner extents differ: {a.shape} x {b.shape}")
    try:
        values = _rowwise_matmul(a.data, b.data) if b.data.ndim == 2 else np.matmul(a.data, b.data)
    except ValueError as exc:
        raise DimensionError(f"matmul batch extents differ: {a.shape} x {b.shape}") from exc

    def grads(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _emit("matmul", (a, b), values, grads)


def reshape(x: ArrayLike, shape: Tuple[int, ...]) -> Variable:
    x = _as_var(x)
    try:
        values = x.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"cannot reshape {x.shape} into {shape}") from exc
    return _emit("reshape", (x,), values, lambda g: (g.reshape(x.shape),))


def transpose(x: ArrayLike, axes: Optional[Sequence[int]] = None) -> Variable:
    x = _as_var(x)
    axes = tuple(axes) if axes is not None else tuple(reversed(range(x.data.ndim)))
    inverse = tuple(np.argsort(axes))
    return _emit("transpose", (x,), np.transpose(x.data, axes), lambda g: (np.transpose(g, inverse),))


def swapaxes(x: ArrayLike, axis1: int, axis2: int) -> Variable:
    x = _as_var(x)
    axes = list(range(x.data.ndim))
    axes[axis1], axes[axis2] = axes[axis2], axes[axis1]
    return transpose(x, axes)


def index(x: ArrayLike, key) -> Variable:
    x = _as_var(x)
    values = np.array(x.data[key], dtype=DTYPE)

    def grads(g):
        full = np.zeros_like(x.data)
        np.add.at(full, key, g)
        return (full,)

    return _emit("index", (x,), values, grads)


def concat(parts: Sequence[ArrayLike], axis: int = -1) -> Variable:
    parts = [_as_var(p) for p in parts]
    if not parts:
        raise DimensionError("concat of an empty list")
    try:
        values = np.concatenate([p.data for p in parts], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat shapes differ off axis {axis}: {[p.shape for p in parts]}") from exc
    sizes = [p.shape[axis] for p in parts]
    cuts = np.cumsum(sizes)[:-1]

    def grads(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _emit("concat", parts, values, grads)


def split(x: ArrayLike, sizes: Sequence[int], axis: int = -1) -> List[Variable]:
    x = _as_var(x)
    if int(np.sum(sizes)) != x.shape[axis]:
        raise DimensionError(f"split sizes {list(sizes)} do not cover extent {x.shape[axis]}")
    axis = axis % x.data.ndim
    out = []
    start = 0
    for size in sizes:
        key = (slice(None),) * axis + (slice(start, start + size),)
        out.append(index(x, key))
        start += size
    return out


def stack(parts: Sequence[ArrayLike], axis: int = 0) -> Variable:
    parts = [_as_var(p) for p in parts]
    if not parts:
        raise DimensionError("stack of an empty list")
    try:
        values = np.stack([p.data for p in parts], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"stack shapes differ: {[p.shape for p in parts]}") from exc

    def grads(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(parts)))

    return _emit("stack", parts, values, grads)


# Reductions


def _expand(g: np.ndarray, shape: Tuple[int, ...], axis, keepdims: bool) -> np.ndarray:
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def sum(x: ArrayLike, axis=None, keepdims: bool = False) -> Variable:  # noqa: A001
    x = _as_var(x)
    values = np.sum(x.data, axis=axis, keepdims=keepdims)
    return _emit("sum", (x,), values, lambda g: (_expand(g, x.shape, axis, keepdims),))


def mean(x: ArrayLike, axis=None, keepdims: bool = False) -> Variable:
    x = _as_var(x)
    count = x.data.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return scale(sum(x, axis=axis, keepdims=keepdims), 1.0 / max(count, 1))


def _ordered_sum(values: np.ndarray, axis) -> np.ndarray:
    # Left-to-right along a single axis, so trailing masked zeros leave the total unchanged.
    if not isinstance(axis, (int, np.integer)) or values.shape[axis] == 0:
        return np.sum(values, axis=axis)
    slabs = np.moveaxis(values, axis, 0)
    total = np.array(slabs[0], dtype=DTYPE)
    for slab in slabs[1:]:
        total = total + slab
    return total


def masked_sum(x: ArrayLike, mask: np.ndarray, axis=None) -> Variable:
    x = _as_var(x)
    mask = np.asarray(mask, dtype=DTYPE)
    try:
        weight = np.broadcast_to(mask, x.shape)
    except ValueError as exc:
        raise DimensionError(f"mask shape {mask.shape} does not fit {x.shape}") from exc
    values = _ordered_sum(x.data * weight, axis)
    return _emit("masked_sum", (x,), values, lambda g: (_expand(g, x.shape, axis, False) * weight,))


def log_sum_exp(x: ArrayLike, axis: int = -1, keepdims: bool = False) -> Variable:
    x = _as_var(x)
    if x.data.ndim == 0 or x.shape[axis] == 0:
        raise DimensionError(f"log_sum_exp over an empty axis of shape {x.shape}")
    peak = np.max(x.data, axis=axis, keepdims=True)
    shifted = np.exp(x.data - peak)
    total = np.sum(shifted, axis=axis, keepdims=True)
    values = peak + np.log(total)
    weights = shifted / total
    if not keepdims:
        values = np.squeeze(values, axis=axis)

    def grads(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * weights,)

    return _emit("log_sum_exp", (x,), values, grads)


def softmax(x: ArrayLike, axis: int = -1) -> Variable:
    x = _as_var(x)
    shifted = np.exp(x.data - np.max(x.data, axis=axis, keepdims=True))
    out = shifted / np.sum(shifted, axis=axis, keepdims=True)

    def grads(g):
        return (out * (g - np.sum(g * out, axis=axis, keepdims=True)),)

    return _emit("softmax", (x,), out, grads)


def log_softmax(x: ArrayLike, axis: int = -1) -> Variable:
    x = _as_var(x)
    peak = np.max(x.data, axis=axis, keepdims=True)
    lse = peak + np.log(np.sum(np.exp(x.data - peak), axis=axis, keepdims=True))
    out = x.data - lse
    probs = np.exp(out)

    def grads(g):
        return (g - probs * np.sum(g, axis=axis, keepdims=True),)

    return _emit("log_softmax", (x,), out, grads)


# Layer-level primitives


def dropout(x: ArrayLike, rate: float, rng: Optional[np.random.Generator], training: bool) -> Variable:
    """Inverted dropout; the identity when ``training`` is false or ``rate`` is 0."""
    x = _as_var(x)
    if not training or rate <= 0.0:
        return x
    if not 0.0 <= rate < 1.0:
        raise ContractError(f"dropout rate must be in [0, 1), got {rate}")
    if rng is None:
        raise ContractError("dropout at train time needs a random generator")
    keep = (rng.random(x.shape) >= rate).astype(DTYPE) / (1.0 - rate)
    return _emit("dropout", (x,), x.data * keep, lambda g: (g * keep,))


def grad_reverse(x: ArrayLike) -> Variable:
    x = _as_var(x)
    return _emit("grad_reverse", (x,), x.data.copy(), lambda g: (-g,))


def embedding_lookup(table: Variable, ids: np.ndarray, padding_idx: Optional[int] = 0) -> Variable:
    ids = np.asarray(ids, dtype=np.int64)
    vocab_size = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= vocab_size):
        bad = int(ids.max()) if ids.max() >= vocab_size else int(ids.min())
        raise VocabError(f"id {bad} outside vocabulary of size {vocab_size}")

    def grads(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids, g)
        if padding_idx is not None:
            full[padding_idx] = 0.0
        return (full,)

    return _emit("embedding_lookup", (table,), table.data[ids], grads)


def cross_entropy(logits: ArrayLike, targets: np.ndarray) -> Variable:
    """Per-row negative log-likelihood of integer ``targets`` under softmax(logits)."""
    logits = _as_var(logits)
    targets = np.asarray(targets, dtype=np.int64)
    if logits.shape[:-1] != targets.shape:
        raise DimensionError(f"logits {logits.shape} do not match targets {targets.shape}")
    if targets.size and (targets.min() < 0 or targets.max() >= logits.shape[-1]):
        raise ContractError(f"target ids must lie in [0, {logits.shape[-1]})")
    log_probs = log_softmax(logits, axis=-1)
    rows = np.arange(targets.size).reshape(targets.shape)
    flat = reshape(log_probs, (targets.size, logits.shape[-1]))
    return neg(reshape(index(flat, (rows.reshape(-1), targets.reshape(-1))), targets.shape))
