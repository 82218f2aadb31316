"""
Reverse-mode automatic differentiation over numpy arrays.

Operations executed while a `Tape` is active and touching a tensor that
requires gradients are recorded on that tape; `backward` replays the tape
in reverse and accumulates exact analytic gradients. Outside a tape the
same functions only compute values, which is what inference uses.
"""

from __future__ import annotations

import json
import logging
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Optional, Sequence, Union

import numpy as np

from .errors import ConfigError, DivergenceError, DomainError, UsageError

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "gsnop-checkpoint"
CHECKPOINT_VERSION = 1

BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]
Operand = Union["Tensor", np.ndarray, float, int]


class Tensor:
    __slots__ = ("value", "requires_grad", "name", "node_id", "tape", "_grad")

    def __init__(
        self, value: Operand, requires_grad: bool = False, name: str | None = None
    ) -> None:
        if isinstance(value, Tensor):
            value = value.value
        self.value: np.ndarray = np.asarray(value, dtype=np.float64)
        self.requires_grad = requires_grad
        self.name = name
        self.node_id: int | None = None
        self.tape: Tape | None = None
        self._grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def grad(self) -> np.ndarray:
        if self._grad is None:
            self._grad = np.zeros_like(self.value)
        return self._grad

    @grad.setter
    def grad(self, value: np.ndarray) -> None:
        self._grad = value

    def zero_grad(self) -> None:
        self._grad = None

    def item(self) -> float:
        return float(self.value.reshape(-1)[0])

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label})"

    def __add__(self, other: Operand) -> Tensor:
        return add(self, other)

    def __radd__(self, other: Operand) -> Tensor:
        return add(other, self)

    def __sub__(self, other: Operand) -> Tensor:
        return sub(self, other)

    def __rsub__(self, other: Operand) -> Tensor:
        return sub(other, self)

    def __mul__(self, other: Operand) -> Tensor:
        return mul(self, other)

    def __rmul__(self, other: Operand) -> Tensor:
        return mul(other, self)

    def __truediv__(self, other: Operand) -> Tensor:
        return div(self, other)

    def __matmul__(self, other: Operand) -> Tensor:
        return matmul(self, other)

    def __neg__(self) -> Tensor:
        return scale(self, -1.0)


@dataclass
class Node:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: BackwardFn


class Tape:
    """Ordered record of the primitive operations of one computation."""

    def __init__(self) -> None:
        self.nodes: list[Node] = []

    def record(
        self, op: str, inputs: Sequence[Tensor], output: Tensor, backward: BackwardFn
    ) -> None:
        output.node_id = len(self.nodes)
        output.tape = self
        output.requires_grad = True
        self.nodes.append(Node(op, tuple(inputs), output, backward))

    def __len__(self) -> int:
        return len(self.nodes)

    def __enter__(self) -> Tape:
        _stack().append(self)
        return self

    def __exit__(self, *exc: object) -> None:
        _stack().pop()


_local = threading.local()


def _stack() -> list[Tape | None]:
    if not hasattr(_local, "stack"):
        _local.stack = []
    return _local.stack


def active_tape() -> Tape | None:
    stack = _stack()
    return stack[-1] if stack else None


class paused:
    """Context manager that suspends recording, e.g. for a value-only solve."""

    def __enter__(self) -> None:
        _stack().append(None)

    def __exit__(self, *exc: object) -> None:
        _stack().pop()


def as_tensor(value: Operand) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def custom_op(
    op: str, value: np.ndarray, inputs: Sequence[Tensor], backward: BackwardFn
) -> Tensor:
    """Wrap `value` as the output of an operation with a hand-written backward rule."""
    out = Tensor(value)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        tape.record(op, inputs, out, backward)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_check(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ConfigError(f"{op}: shapes {a.shape} and {b.shape} do not conform") from exc


# Primitive operations


def matmul(a: Operand, b: Operand) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ConfigError(f"matmul: shapes {a.shape} and {b.shape} do not conform")
    av, bv = a.value, b.value
    return custom_op(
        "matmul", av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g)
    )


def add(a: Operand, b: Operand) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("add", a, b)
    sa, sb = a.shape, b.shape
    return custom_op(
        "add",
        a.value + b.value,
        (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)),
    )


def sub(a: Operand, b: Operand) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("sub", a, b)
    sa, sb = a.shape, b.shape
    return custom_op(
        "sub",
        a.value - b.value,
        (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)),
    )


def mul(a: Operand, b: Operand) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("mul", a, b)
    av, bv = a.value, b.value
    return custom_op(
        "mul",
        av * bv,
        (a, b),
        lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)),
    )


def div(a: Operand, b: Operand) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("div", a, b)
    av, bv = a.value, b.value
    if np.any(bv == 0.0):
        raise DomainError("div: division by zero")
    out = av / bv
    return custom_op(
        "div",
        out,
        (a, b),
        lambda g: (
            _unbroadcast(g / bv, av.shape),
            _unbroadcast(-g * out / bv, bv.shape),
        ),
    )


def scale(a: Operand, c: float) -> Tensor:
    a = as_tensor(a)
    return custom_op("scale", a.value * c, (a,), lambda g: (g * c,))


def concat(parts: Sequence[Operand], axis: int = -1) -> Tensor:
    tensors = [as_tensor(p) for p in parts]
    try:
        value = np.concatenate([t.value for t in tensors], axis=axis)
    except ValueError as exc:
        shapes = [t.shape for t in tensors]
        raise ConfigError(f"concat: shapes {shapes} do not conform") from exc
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return custom_op(
        "concat", value, tensors, lambda g: tuple(np.split(g, splits, axis=axis))
    )


def mean_rows(a: Operand) -> Tensor:
    a = as_tensor(a)
    n = a.shape[0]
    if n == 0:
        raise ConfigError("mean_rows: no rows")
    return custom_op(
        "mean_rows",
        a.value.mean(axis=0, keepdims=True),
        (a,),
        lambda g: (np.broadcast_to(g / n, a.shape).copy(),),
    )


def sum(a: Operand) -> Tensor:  # pylint: disable=redefined-builtin
    a = as_tensor(a)
    shape = a.shape
    return custom_op(
        "sum",
        np.asarray(a.value.sum()),
        (a,),
        lambda g: (np.full(shape, float(g)),),
    )


def tanh(a: Operand) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.value)
    return custom_op("tanh", out, (a,), lambda g: (g * (1.0 - out * out),))


def relu(a: Operand) -> Tensor:
    a = as_tensor(a)
    mask = a.value > 0.0
    return custom_op("relu", a.value * mask, (a,), lambda g: (g * mask,))


def _logistic(x: np.ndarray) -> np.ndarray:
    # Split by sign so exp never overflows.
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Operand) -> Tensor:
    a = as_tensor(a)
    out = _logistic(a.value)
    return custom_op("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def cos(a: Operand) -> Tensor:
    a = as_tensor(a)
    av = a.value
    return custom_op("cos", np.cos(av), (a,), lambda g: (-g * np.sin(av),))


def log(a: Operand) -> Tensor:
    a = as_tensor(a)
    av = a.value
    if np.any(av <= 0.0):
        raise DomainError("log: input must be strictly positive")
    return custom_op("log", np.log(av), (a,), lambda g: (g / av,))


def clip(a: Operand, lo: float, hi: float) -> Tensor:
    a = as_tensor(a)
    av = a.value
    inside = (av >= lo) & (av <= hi)
    return custom_op("clip", np.clip(av, lo, hi), (a,), lambda g: (g * inside,))


def take_rows(a: Operand, rows: np.ndarray) -> Tensor:
    a = as_tensor(a)
    rows = np.asarray(rows, dtype=np.int64)
    shape = a.shape

    def backward(g: np.ndarray) -> tuple[np.ndarray]:
        out = np.zeros(shape)
        np.add.at(out, rows, g)
        return (out,)

    return custom_op("take_rows", a.value[rows], (a,), backward)


def columns(a: Operand, start: int, stop: int) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    def backward(g: np.ndarray) -> tuple[np.ndarray]:
        out = np.zeros(shape)
        out[:, start:stop] = g
        return (out,)

    return custom_op("columns", a.value[:, start:stop], (a,), backward)


def segment_mean(a: Operand, segments: np.ndarray, num_segments: int) -> Tensor:
    """Mean of the rows of `a` grouped by `segments`; empty groups yield zeros."""
    a = as_tensor(a)
    segments = np.asarray(segments, dtype=np.int64)
    counts = np.bincount(segments, minlength=num_segments).astype(np.float64)
    denom = np.maximum(counts, 1.0)[:, None]
    total = np.zeros((num_segments,) + a.shape[1:])
    np.add.at(total, segments, a.value)
    return custom_op(
        "segment_mean", total / denom, (a,), lambda g: ((g / denom)[segments],)
    )


def scatter_rows(base: Operand, rows: np.ndarray, values: Operand) -> Tensor:
    """Copy of `base` whose `rows` are replaced by `values`."""
    base, values = as_tensor(base), as_tensor(values)
    rows = np.asarray(rows, dtype=np.int64)
    out = base.value.copy()
    out[rows] = values.value

    def backward(g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        g_base = g.copy()
        g_base[rows] = 0.0
        return g_base, g[rows]

    return custom_op("scatter_rows", out, (base, values), backward)


def broadcast_rows(a: Operand, n: int) -> Tensor:
    """Repeat a single-row tensor `n` times."""
    a = as_tensor(a)
    return add(np.zeros((n, a.shape[-1])), a)


# Reverse sweep


def _backprop(
    output: Tensor, seed: np.ndarray
) -> tuple[dict[int, np.ndarray], dict[int, Tensor]]:
    tape = output.tape
    grads: dict[int, np.ndarray] = {id(output): seed}
    tensors: dict[int, Tensor] = {id(output): output}
    for node in reversed(tape.nodes[: output.node_id + 1]):
        g = grads.get(id(node.output))
        if g is None:
            continue
        for inp, in_grad in zip(node.inputs, node.backward(g)):
            if in_grad is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + in_grad
            else:
                grads[key] = in_grad
                tensors[key] = inp
    return grads, tensors


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(tensor) into `.grad` of every tensor reachable from `loss`."""
    if loss.value.size != 1:
        raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.tape is None:
        raise UsageError("backward: loss was not computed on a tape")
    grads, tensors = _backprop(loss, np.ones_like(loss.value))
    for key, g in grads.items():
        tensor = tensors[key]
        tensor.grad = tensor.grad + np.reshape(g, tensor.shape)


def vjp(output: Tensor, inputs: Sequence[Tensor], seed: np.ndarray) -> list[np.ndarray]:
    """Vector-Jacobian product of `output` with respect to `inputs`.

    Unlike `backward`, nothing is written to `.grad`.
    """
    if output.tape is None:
        return [np.zeros_like(t.value) for t in inputs]
    seed = np.reshape(np.asarray(seed, dtype=np.float64), output.shape)
    grads, _ = _backprop(output, seed)
    return [
        np.reshape(grads[id(t)], t.shape) if id(t) in grads else np.zeros_like(t.value)
        for t in inputs
    ]


# Optimisation


@dataclass
class AdamState:
    learning_rate: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    first_moment: dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: dict[str, np.ndarray] = field(default_factory=dict)


def zero_grad(params: Mapping[str, Tensor]) -> None:
    for param in params.values():
        param.zero_grad()


def global_grad_norm(params: Mapping[str, Tensor]) -> float:
    return float(np.sqrt(np.sum([np.sum(p.grad * p.grad) for p in params.values()])))


def clip_grad_norm(params: Mapping[str, Tensor], max_norm: float) -> float:
    """Rescale gradients in place so their global norm is at most `max_norm`."""
    norm = global_grad_norm(params)
    if np.isfinite(norm) and norm > max_norm:
        factor = max_norm / (norm + 1e-12)
        for param in params.values():
            param.grad = param.grad * factor
        logger.debug("clipped gradient norm=%.4g max_norm=%.4g", norm, max_norm)
    return norm


def optimizer_step(params: Mapping[str, Tensor], state: AdamState) -> None:
    for name, param in params.items():
        if not np.all(np.isfinite(param.grad)):
            raise DivergenceError("non-finite gradient", {"parameter": name})
    state.step += 1
    bc1 = 1.0 - state.beta1**state.step
    bc2 = 1.0 - state.beta2**state.step
    for name, param in params.items():
        g = param.grad
        if name not in state.first_moment:
            state.first_moment[name] = np.zeros_like(param.value)
            state.second_moment[name] = np.zeros_like(param.value)
        m = state.first_moment[name]
        v = state.second_moment[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        denom = np.sqrt(v / bc2) + state.epsilon
        param.value = param.value - (state.learning_rate / bc1) * m / denom
    zero_grad(params)


# Persistence


def save_checkpoint(path: Path | str, params: Mapping[str, Tensor]) -> None:
    document = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "params": {
            name: {"shape": list(p.shape), "values": p.value.ravel().tolist()}
            for name, p in params.items()
        },
    }
    with open(path, "w", encoding="utf-8") as file:
        json.dump(document, file)


def load_checkpoint(path: Path | str, params: Mapping[str, Tensor]) -> None:
    """Overwrite `params` in place with the arrays stored at `path`."""
    try:
        with open(path, "r", encoding="utf-8") as file:
            document = json.load(file)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(document, dict) or document.get("format") != CHECKPOINT_FORMAT:
        raise ConfigError(f"{path} is not a checkpoint")
    if document.get("version") != CHECKPOINT_VERSION:
        raise ConfigError(f"unsupported checkpoint version {document.get('version')}")
    stored = document["params"]
    missing = sorted(set(params) - set(stored))
    if missing:
        raise ConfigError(f"checkpoint lacks parameters: {', '.join(missing)}")
    for name, param in params.items():
        shape = tuple(stored[name]["shape"])
        if shape != param.shape:
            raise ConfigError(
                f"checkpoint shape mismatch for {name}: {shape} vs {param.shape}"
            )
        param.value = np.asarray(stored[name]["values"], dtype=np.float64).reshape(shape)

