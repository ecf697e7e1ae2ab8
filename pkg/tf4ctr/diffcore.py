"""Dense-tensor compute core with reverse-mode gradients.

Only the ops the twin-focus network needs are implemented: matmul, elementwise
arithmetic and activations, column concat/slice, row softmax, reductions and
embedding-column gather. A ``Graph`` records ops while it is the active tape;
ops executed outside a graph compute values only, which is the inference path.
"""

from __future__ import annotations

import contextvars
import math
import zlib
from dataclasses import dataclass
from typing import Callable, Iterator, Optional, Sequence, Union

import numpy as np
import structlog
from pydantic import BaseModel, Field

from .errors import (
    ArgumentError,
    DomainError,
    IndexOutOfRangeError,
    NonFiniteError,
    ShapeError,
)

logger = structlog.get_logger(__name__)

# Probabilities are clamped to [PROB_EPS, 1 - PROB_EPS] before any log.
PROB_EPS = 1e-7

_DTYPES = {"float64": np.float64, "float32": np.float32}
_dtype: type = np.float64


def set_precision(name: str) -> None:
    """Select the numeric type used for every new tensor."""
    global _dtype
    if name not in _DTYPES:
        raise ArgumentError(f"Unsupported precision: {name}")
    _dtype = _DTYPES[name]


def get_dtype() -> type:
    return _dtype


class Tensor:
    """A node value: an n-dimensional array plus its accumulated gradient."""

    __slots__ = ("value", "grad", "requires_grad", "name")
    __array_ufunc__ = None  # make numpy defer to the reflected operators

    def __init__(self, value, requires_grad: bool = False, name: Optional[str] = None):
        self.value: np.ndarray = np.asarray(value, dtype=_dtype)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def size(self) -> int:
        return int(self.value.size)

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def item(self) -> float:
        if self.size != 1:
            raise ArgumentError(f"item() needs a single value, got shape {self.shape}")
        return float(self.value.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.value

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


TensorLike = Union[Tensor, np.ndarray, float, int]
Backward = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


def constant(value) -> Tensor:
    """A tensor that never receives a gradient."""
    return Tensor(value, requires_grad=False)


def parameter(value, name: Optional[str] = None) -> Tensor:
    """A trainable leaf tensor."""
    return Tensor(np.array(value, dtype=_dtype), requires_grad=True, name=name)


def _as_tensor(x: TensorLike) -> Tensor:
    return x if isinstance(x, Tensor) else constant(x)


@dataclass(frozen=True)
class Node:
    """One recorded op: kind, input tensors, output tensor and its backward rule."""

    kind: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Backward


_ACTIVE: contextvars.ContextVar[Optional["Graph"]] = contextvars.ContextVar(
    "tf4ctr_active_graph", default=None
)


class Graph:
    """Recording tape for one forward pass.

    Nodes are appended in execution order, so inputs always precede their
    consumers; ``backward`` walks the nodes in exact reverse order.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self._token: Optional[contextvars.Token] = None

    def __enter__(self) -> "Graph":
        self._token = _ACTIVE.set(self)
        return self

    def __exit__(self, *exc_info) -> None:
        if self._token is not None:
            _ACTIVE.reset(self._token)
            self._token = None

    def __len__(self) -> int:
        return len(self.nodes)

    def parameters(self) -> list[Tensor]:
        """Trainable leaves referenced by the recorded ops, in first-use order."""
        produced = {id(node.output) for node in self.nodes}
        leaves: dict[int, Tensor] = {}
        for node in self.nodes:
            for tensor in node.inputs:
                if tensor.requires_grad and id(tensor) not in produced:
                    leaves.setdefault(id(tensor), tensor)
        return list(leaves.values())

    def backward(self, loss: Tensor, wrt: Sequence[Tensor] = ()) -> list[np.ndarray]:
        """Backpropagate from a scalar ``loss``.

        Gradients are added to every trainable leaf's ``.grad`` once, after
        the sweep. Returns the gradients of the tensors listed in ``wrt``.
        """
        if loss.size != 1:
            raise ArgumentError(f"backward needs a scalar loss, got shape {loss.shape}")

        produced = {id(node.output) for node in self.nodes}
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.value)}
        leaves: dict[int, Tensor] = {}

        for node in reversed(self.nodes):
            upstream = grads.get(id(node.output))
            if upstream is None:
                continue
            for tensor, grad in zip(node.inputs, node.backward(upstream)):
                if grad is None or not tensor.requires_grad:
                    continue
                key = id(tensor)
                grads[key] = grads[key] + grad if key in grads else grad
                if key not in produced:
                    leaves[key] = tensor

        for key, leaf in leaves.items():
            grad = grads[key]
            if not np.all(np.isfinite(grad)):
                raise NonFiniteError(f"Non-finite gradient for parameter {leaf.name or key}")
            leaf.grad = grad.copy() if leaf.grad is None else leaf.grad + grad

        return [grads.get(id(t), np.zeros_like(t.value)) for t in wrt]


def record_op(
    kind: str, inputs: Sequence[Tensor], value: np.ndarray, backward: Backward
) -> Tensor:
    """Wrap an op result, recording it on the active graph when it needs a gradient."""
    out = Tensor(value)
    if not np.all(np.isfinite(out.value)):
        raise NonFiniteError(f"{kind} produced non-finite values")
    graph = _ACTIVE.get()
    if graph is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        graph.nodes.append(Node(kind, tuple(inputs), out, backward))
    return out


def _broadcast_shape(a: tuple[int, ...], b: tuple[int, ...]) -> tuple[int, ...]:
    # equal shapes, a size-1 operand, or 2-D singleton-axis (row/column) vectors
    if a == b:
        return a
    if math.prod(a) == 1:
        return b
    if math.prod(b) == 1:
        return a
    if len(a) == len(b) == 2 and all(x == y or x == 1 or y == 1 for x, y in zip(a, b)):
        return (max(a[0], b[0]), max(a[1], b[1]))
    raise ShapeError(f"Cannot broadcast shapes {a} and {b}")


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    if math.prod(shape) == 1:
        return np.asarray(grad.sum()).reshape(shape)
    axes = tuple(i for i, (s, g) in enumerate(zip(shape, grad.shape)) if s == 1 and g != 1)
    return grad.sum(axis=axes, keepdims=True)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} x {b.shape}")
    av, bv = a.value, b.value
    return record_op("matmul", (a, b), av @ bv, lambda g: (g @ bv.T, av.T @ g))


def add(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a.shape, b.shape)
    return record_op(
        "add",
        (a, b),
        a.value + b.value,
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a.shape, b.shape)
    return record_op(
        "sub",
        (a, b),
        a.value - b.value,
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a.shape, b.shape)
    av, bv = a.value, b.value
    return record_op(
        "mul",
        (a, b),
        av * bv,
        lambda g: (_unbroadcast(g * bv, a.shape), _unbroadcast(g * av, b.shape)),
    )


def relu(x: Tensor) -> Tensor:
    mask = x.value > 0
    return record_op("relu", (x,), np.where(mask, x.value, 0.0), lambda g: (g * mask,))


def _sigmoid(v: np.ndarray) -> np.ndarray:
    return np.exp(-np.logaddexp(0.0, -v))


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.value)
    return record_op("sigmoid", (x,), s, lambda g: (g * s * (1.0 - s),))


def softplus(x: Tensor) -> Tensor:
    v = x.value
    return record_op("softplus", (x,), np.logaddexp(0.0, v), lambda g: (g * _sigmoid(v),))


def log(x: Tensor) -> Tensor:
    v = x.value
    if np.any(v <= 0):
        raise DomainError("log of non-positive input; clamp probabilities first")
    return record_op("log", (x,), np.log(v), lambda g: (g / v,))


def pow_scalar(x: Tensor, exponent: float) -> Tensor:
    v = x.value
    exponent = float(exponent)
    if not exponent.is_integer() and np.any(v < 0):
        raise DomainError("fractional power of a negative input")

    def backward(g: np.ndarray):
        if exponent == 0.0:
            return (np.zeros_like(g),)
        return (g * exponent * np.power(v, exponent - 1.0),)

    return record_op("pow_scalar", (x,), np.power(v, exponent), backward)


def clip(x: Tensor, low: float, high: float) -> Tensor:
    v = x.value
    inside = (v >= low) & (v <= high)
    return record_op("clip", (x,), np.clip(v, low, high), lambda g: (g * inside,))


def clamp_probability(p: Tensor) -> Tensor:
    return clip(p, PROB_EPS, 1.0 - PROB_EPS)


_ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "relu": relu,
    "sigmoid": sigmoid,
    "softplus": softplus,
    "log": log,
    "pow_scalar": pow_scalar,
}


def elementwise(kind: str, *args, **kwargs) -> Tensor:
    """Dispatch an elementwise op by name."""
    try:
        op = _ELEMENTWISE[kind]
    except KeyError:
        raise ArgumentError(f"Unknown elementwise op: {kind}") from None
    return op(*args, **kwargs)


def concat(parts: Sequence[Tensor]) -> Tensor:
    """Column-wise concatenation of ``n x d_i`` tensors."""
    if not parts:
        raise ArgumentError("concat needs at least one tensor")
    rows = parts[0].shape[0] if parts[0].ndim == 2 else None
    if any(p.ndim != 2 or p.shape[0] != rows for p in parts):
        raise ShapeError(f"concat needs 2-D parts with equal rows: {[p.shape for p in parts]}")
    widths = [p.shape[1] for p in parts]
    offsets = np.cumsum(widths)[:-1]
    value = np.concatenate([p.value for p in parts], axis=1)
    return record_op("concat", tuple(parts), value, lambda g: np.split(g, offsets, axis=1))


def slice_cols(x: Tensor, start: int, stop: int) -> Tensor:
    if x.ndim != 2 or not 0 <= start < stop <= x.shape[1]:
        raise ShapeError(f"Invalid column slice [{start}:{stop}] of shape {x.shape}")

    def backward(g: np.ndarray):
        full = np.zeros_like(x.value)
        full[:, start:stop] = g
        return (full,)

    return record_op("slice_cols", (x,), x.value[:, start:stop], backward)


def softmax_rows(x: Tensor) -> Tensor:
    if x.ndim != 2 or x.shape[1] < 1:
        raise ShapeError(f"softmax_rows needs an n x k tensor with k >= 1, got {x.shape}")
    shifted = x.value - x.value.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=1, keepdims=True)
    return record_op(
        "softmax_rows", (x,), s, lambda g: (s * (g - (g * s).sum(axis=1, keepdims=True)),)
    )


def sum_all(x: Tensor) -> Tensor:
    return record_op("sum_all", (x,), np.sum(x.value), lambda g: (np.full(x.shape, g),))


def mean_all(x: Tensor) -> Tensor:
    n = x.size
    return record_op("mean_all", (x,), np.mean(x.value), lambda g: (np.full(x.shape, g / n),))


def embedding_lookup(table: Tensor, ids: np.ndarray) -> Tensor:
    """Gather columns ``ids`` of a ``d x s`` table into an ``n x d`` tensor."""
    ids = np.asarray(ids, dtype=np.int64)
    if table.ndim != 2 or ids.ndim != 1:
        raise ShapeError(f"embedding_lookup needs a 2-D table and 1-D ids: {table.shape}")
    size = table.shape[1]
    if ids.size and (ids.min() < 0 or ids.max() >= size):
        raise IndexOutOfRangeError(f"id out of range for a table with {size} columns")

    def backward(g: np.ndarray):
        grad = np.zeros_like(table.value)
        np.add.at(grad.T, ids, g)
        return (grad,)

    value = np.ascontiguousarray(table.value[:, ids].T)
    return record_op("embedding_lookup", (table,), value, backward)


class Rng:
    """Seeded generator with labelled, independent sub-streams."""

    def __init__(self, seed: int, path: tuple[str, ...] = ()):
        self.seed = int(seed) & 0xFFFF_FFFF_FFFF_FFFF
        self.path = path
        spawn_key = tuple(zlib.crc32(label.encode("utf-8")) for label in path)
        sequence = np.random.SeedSequence(entropy=self.seed, spawn_key=spawn_key)
        self.generator = np.random.Generator(np.random.PCG64(sequence))

    def child(self, label: str) -> "Rng":
        return Rng(self.seed, self.path + (label,))

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, path={'/'.join(self.path) or '<root>'})"


def xavier_init(shape: Sequence[int], rng: Rng, name: Optional[str] = None) -> Tensor:
    """Xavier-uniform initialised trainable tensor."""
    if len(shape) != 2:
        raise ArgumentError(f"xavier_init needs a 2-D shape, got {tuple(shape)}")
    fan_in, fan_out = shape
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return parameter(rng.generator.uniform(-bound, bound, size=tuple(shape)), name=name)


class Module:
    """Base class for components that own trainable tensors."""

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        seen: set[int] = set()
        for name, value in vars(self).items():
            yield from _walk(f"{prefix}{name}", value, seen)

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def parameter_count(self) -> int:
        return sum(p.size for p in self.parameters())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.value.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        missing = set(params) - set(state)
        if missing:
            raise ArgumentError(f"State is missing parameters: {sorted(missing)}")
        for name, p in params.items():
            if state[name].shape != p.shape:
                raise ShapeError(f"Shape mismatch for {name}: {state[name].shape} != {p.shape}")
            p.value[...] = state[name]


def _walk(name: str, value, seen: set[int]) -> Iterator[tuple[str, Tensor]]:
    if isinstance(value, Tensor):
        if value.requires_grad and id(value) not in seen:
            seen.add(id(value))
            yield name, value
    elif isinstance(value, Module):
        for child_name, child in vars(value).items():
            yield from _walk(f"{name}.{child_name}", child, seen)
    elif isinstance(value, (list, tuple)):
        for i, item in enumerate(value):
            yield from _walk(f"{name}.{i}", item, seen)


class GradCheckReport(BaseModel):
    """Result of comparing analytic gradients with central differences."""

    max_abs_error: dict[str, float] = Field(..., description="Worst error per parameter")
    eps: float
    tolerance: float
    passed: bool


def grad_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    eps: float = 1e-6,
    tol: float = 1e-5,
) -> GradCheckReport:
    """Check the backward rules reached by ``f`` against central differences.

    ``f`` rebuilds the scalar output from ``params`` on every call. Check
    points should sit away from relu kinks and clamp boundaries.
    """
    if eps <= 0:
        raise ArgumentError("eps must be positive")

    saved = [p.grad for p in params]
    for p in params:
        p.grad = None
    with Graph() as graph:
        out = f()
    if out.size != 1:
        raise ArgumentError(f"grad_check needs a scalar-valued function, got shape {out.shape}")
    graph.backward(out)
    analytic = [p.grad if p.grad is not None else np.zeros_like(p.value) for p in params]

    errors: dict[str, float] = {}
    for i, p in enumerate(params):
        numeric = np.zeros_like(p.value)
        for idx in np.ndindex(p.shape):
            original = p.value[idx]
            p.value[idx] = original + eps
            plus = f().item()
            p.value[idx] = original - eps
            minus = f().item()
            p.value[idx] = original
            numeric[idx] = (plus - minus) / (2.0 * eps)
        error = float(np.max(np.abs(analytic[i] - numeric))) if p.size else 0.0
        key = p.name if p.name and p.name not in errors else f"param_{i}"
        errors[key] = error

    for p, grad in zip(params, saved):
        p.grad = grad

    passed = all(e <= tol for e in errors.values())
    logger.debug("Gradient check finished", passed=passed, worst=max(errors.values(), default=0.0))
    return GradCheckReport(max_abs_error=errors, eps=eps, tolerance=tol, passed=passed)
