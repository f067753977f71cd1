"""
Minimal reverse-mode differentiation over vectors and row-batched matrices.

A ``Node`` holds a float64 value and, after ``backward``, its gradient. Each
non-leaf node keeps the ``Function`` that produced it; the function stores
its parents and knows how to map an output gradient to parent gradients.
Parameter leaves live in a ``ParamStore`` and accumulate gradients across
backward passes until ``zero_grad`` is called.
"""

import contextlib
import json
from abc import ABC, abstractmethod
from pathlib import Path
from typing import Callable, Iterator, NamedTuple, Self

import numpy as np

from src import numerics
from src.errors import DomainError, SchemaError, ShapeError

CHECKPOINT_FORMAT_VERSION = 1

# Names of functions whose local derivative is negated (fault injection).
_flipped: set[str] = set()


@contextlib.contextmanager
def flipped_derivative(name: str) -> Iterator[None]:
    """
    Negate the local derivative of one primitive while the block runs.

    Used to check that gradient checking notices a broken primitive.

    Args:
        name: Class name of the primitive, e.g. ``"Tanh"``.
    """
    _flipped.add(name)
    try:
        yield
    finally:
        _flipped.discard(name)


class Node:
    """
    A value in the computation graph.

    Attributes:
        value (np.ndarray): Forward value, never mutated by graph operations.
        grad (np.ndarray): Gradient of the last backward root with respect to
            this node; accumulated for leaves that require gradients.
        ctx (Function | None): Function that produced the node, None for leaves.
        requires_grad (bool): Whether a leaf accumulates gradients.
        name (str | None): Optional label, used by ParamStore.
    """

    __array_priority__ = 100

    def __init__(self, value, ctx: "Function | None" = None, requires_grad: bool = False, name: str | None = None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)
        self.ctx = ctx
        self.requires_grad = requires_grad
        self.name = name

    def __repr__(self) -> str:
        label = f" {self.name}" if self.name else ""
        return f"<Node{label} shape={self.shape}>"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def item(self) -> float:
        return float(self.value)

    def __float__(self) -> float:
        return self.item()

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.value)

    def __neg__(self) -> "Node":
        return Neg.apply(self)

    def __add__(self, other) -> "Node":
        return Add.apply(self, other)

    def __radd__(self, other) -> "Node":
        return Add.apply(other, self)

    def __sub__(self, other) -> "Node":
        return Sub.apply(self, other)

    def __rsub__(self, other) -> "Node":
        return Sub.apply(other, self)

    def __mul__(self, other) -> "Node":
        return Mul.apply(self, other)

    def __rmul__(self, other) -> "Node":
        return Mul.apply(other, self)

    def __truediv__(self, other) -> "Node":
        return Div.apply(self, other)

    def __rtruediv__(self, other) -> "Node":
        return Div.apply(other, self)

    def __matmul__(self, other) -> "Node":
        return MatMul.apply(self, other)


def as_node(x) -> Node:
    """Wrap constants as gradient-free leaves; nodes pass through."""
    return x if isinstance(x, Node) else Node(x)


def value_of(x) -> np.ndarray:
    return x.value if isinstance(x, Node) else np.asarray(x, dtype=np.float64)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(a: np.ndarray, b: np.ndarray) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"Shape mismatch: {a.shape} and {b.shape}") from None


class Function(ABC):
    """
    Abstract base class for a differentiable primitive.

    Subclasses implement ``forward`` on raw arrays and ``backward`` mapping
    the output gradient to one gradient per parent (None when a parent does
    not need one).
    """

    def __init__(self, *parents: Node, **options):
        self.parents = parents
        self.options = options

    @classmethod
    def apply(cls, *inputs, **options) -> Node:
        """Run the primitive forward and record it on the output node."""
        parents = tuple(as_node(x) for x in inputs)
        ctx = cls(*parents, **options)
        value = ctx.forward(*[p.value for p in parents])
        return Node(value, ctx=ctx)

    @abstractmethod
    def forward(self, *values: np.ndarray) -> np.ndarray:
        raise NotImplementedError("Subclasses must implement this method.")

    @abstractmethod
    def backward(self, grad: np.ndarray) -> tuple[np.ndarray | None, ...]:
        raise NotImplementedError("Subclasses must implement this method.")


class Add(Function):
    def forward(self, a, b):
        _broadcast_shape(a, b)
        return a + b

    def backward(self, grad):
        return grad, grad


class Sub(Function):
    def forward(self, a, b):
        _broadcast_shape(a, b)
        return a - b

    def backward(self, grad):
        return grad, -grad


class Neg(Function):
    def forward(self, a):
        return -a

    def backward(self, grad):
        return (-grad,)


class Mul(Function):
    def forward(self, a, b):
        _broadcast_shape(a, b)
        self.a, self.b = a, b
        return a * b

    def backward(self, grad):
        return grad * self.b, grad * self.a


class Div(Function):
    def forward(self, a, b):
        _broadcast_shape(a, b)
        if np.any(b == 0.0):
            raise DomainError("Division by zero")
        self.a, self.b = a, b
        return a / b

    def backward(self, grad):
        return grad / self.b, -grad * self.a / (self.b * self.b)


class MatMul(Function):
    """Matrix-matrix, matrix-vector and vector-matrix products."""

    def forward(self, a, b):
        if a.ndim not in (1, 2) or b.ndim not in (1, 2) or a.shape[-1] != b.shape[0]:
            raise ShapeError(f"Shape mismatch: {a.shape} and {b.shape}")
        self.a, self.b = a, b
        return a @ b

    def backward(self, grad):
        a, b = self.a, self.b
        if a.ndim == 2 and b.ndim == 2:
            return grad @ b.T, a.T @ grad
        if a.ndim == 2:
            return np.outer(grad, b), a.T @ grad
        if b.ndim == 2:
            return b @ grad, np.outer(a, grad)
        return grad * b, grad * a


class Affine(Function):
    """x @ W + b with the bias broadcast over batch rows."""

    def forward(self, x, w, b):
        if w.ndim != 2 or x.shape[-1] != w.shape[0] or b.shape != (w.shape[1],):
            raise ShapeError(f"Shape mismatch: {x.shape} and {w.shape}")
        self.x, self.w = x, w
        return x @ w + b

    def backward(self, grad):
        x, w = self.x, self.w
        if x.ndim == 2:
            return grad @ w.T, x.T @ grad, grad.sum(axis=0)
        return w @ grad, np.outer(x, grad), grad


class Tanh(Function):
    def forward(self, a):
        self.out = np.tanh(a)
        return self.out

    def backward(self, grad):
        return (grad * (1.0 - self.out**2),)


class Softplus(Function):
    def forward(self, a):
        self.a = a
        return numerics.softplus(a)

    def backward(self, grad):
        return (grad * numerics.stable_sigmoid(self.a),)


class Exp(Function):
    def forward(self, a):
        self.out = np.exp(a)
        return self.out

    def backward(self, grad):
        return (grad * self.out,)


class Log(Function):
    def forward(self, a):
        if np.any(a <= 0.0):
            raise DomainError("log requires positive input")
        self.a = a
        return np.log(a)

    def backward(self, grad):
        return (grad / self.a,)


class Abs(Function):
    def forward(self, a):
        self.a = a
        return np.abs(a)

    def backward(self, grad):
        return (grad * np.sign(self.a),)


class ClampMin(Function):
    """max(a, floor); the gradient is zero where the floor is active."""

    def forward(self, a):
        self.mask = a > self.options["floor"]
        return np.where(self.mask, a, self.options["floor"])

    def backward(self, grad):
        return (grad * self.mask,)


class Sum(Function):
    def forward(self, a):
        self.shape = a.shape
        return np.sum(a, axis=self.options.get("axis"), keepdims=self.options.get("keepdims", False))

    def backward(self, grad):
        axis = self.options.get("axis")
        if axis is not None and not self.options.get("keepdims", False):
            grad = np.expand_dims(grad, axis)
        return (np.broadcast_to(grad, self.shape).copy(),)


class Mean(Function):
    def forward(self, a):
        self.shape = a.shape
        axis = self.options.get("axis")
        self.count = a.size if axis is None else a.shape[axis]
        return np.mean(a, axis=axis, keepdims=self.options.get("keepdims", False))

    def backward(self, grad):
        axis = self.options.get("axis")
        if axis is not None and not self.options.get("keepdims", False):
            grad = np.expand_dims(grad, axis)
        return (np.broadcast_to(grad / self.count, self.shape).copy(),)


class Dot(Function):
    """Inner product of vectors, or row-wise inner products of matrices."""

    def forward(self, a, b):
        if a.shape != b.shape:
            raise ShapeError(f"Shape mismatch: {a.shape} and {b.shape}")
        self.a, self.b = a, b
        return np.sum(a * b, axis=-1)

    def backward(self, grad):
        g = np.expand_dims(grad, -1)
        return g * self.b, g * self.a


class Concat(Function):
    """Concatenation along the last axis."""

    def forward(self, *values):
        leading = {v.shape[:-1] for v in values}
        if len(leading) != 1:
            raise ShapeError(f"Shape mismatch: {' and '.join(str(v.shape) for v in values)}")
        self.sizes = [v.shape[-1] for v in values]
        return np.concatenate(values, axis=-1)

    def backward(self, grad):
        cuts = np.cumsum(self.sizes)[:-1]
        return tuple(np.split(grad, cuts, axis=-1))


class Take(Function):
    """Select columns (last axis) by integer index."""

    def forward(self, a):
        self.shape = a.shape
        self.index = np.asarray(self.options["index"], dtype=int)
        return np.take(a, self.index, axis=-1)

    def backward(self, grad):
        out = np.zeros(self.shape)
        np.add.at(np.moveaxis(out, -1, 0), self.index, np.moveaxis(grad, -1, 0))
        return (out,)


class Sigmoid(Function):
    def forward(self, a):
        self.out = numerics.stable_sigmoid(a)
        return self.out

    def backward(self, grad):
        return (grad * self.out * (1.0 - self.out),)


class LogSigmoid(Function):
    def forward(self, a):
        self.a = a
        return numerics.log_sigmoid(a)

    def backward(self, grad):
        return (grad * numerics.stable_sigmoid(-self.a),)


class Softmax(Function):
    """Softmax along the last axis."""

    def forward(self, a):
        self.out = numerics.softmax(a, axis=-1)
        return self.out

    def backward(self, grad):
        s = self.out
        return (s * (grad - np.sum(grad * s, axis=-1, keepdims=True)),)


class LogGamma(Function):
    def forward(self, a):
        self.a = a
        return np.asarray(numerics.log_gamma(a))

    def backward(self, grad):
        return (grad * numerics.digamma(self.a),)


class Digamma(Function):
    def forward(self, a):
        self.a = a
        return np.asarray(numerics.digamma(a))

    def backward(self, grad):
        return (grad * numerics.trigamma(self.a),)


def add(a, b) -> Node:
    return Add.apply(a, b)


def sub(a, b) -> Node:
    return Sub.apply(a, b)


def mul(a, b) -> Node:
    return Mul.apply(a, b)


def div(a, b) -> Node:
    return Div.apply(a, b)


def matmul(a, b) -> Node:
    return MatMul.apply(a, b)


def affine(x, w, b) -> Node:
    return Affine.apply(x, w, b)


def tanh(a) -> Node:
    return Tanh.apply(a)


def softplus(a) -> Node:
    return Softplus.apply(a)


def exp(a) -> Node:
    return Exp.apply(a)


def log(a) -> Node:
    return Log.apply(a)


def absolute(a) -> Node:
    return Abs.apply(a)


def clamp_min(a, floor: float) -> Node:
    return ClampMin.apply(a, floor=floor)


def relu(a) -> Node:
    return ClampMin.apply(a, floor=0.0)


def sum(a, axis: int | None = None, keepdims: bool = False) -> Node:  # noqa: A001
    return Sum.apply(a, axis=axis, keepdims=keepdims)


def mean(a, axis: int | None = None, keepdims: bool = False) -> Node:
    return Mean.apply(a, axis=axis, keepdims=keepdims)


def dot(a, b) -> Node:
    return Dot.apply(a, b)


def concat(*nodes) -> Node:
    return Concat.apply(*nodes)


def take(a, index) -> Node:
    return Take.apply(a, index=index)


def sigmoid(a) -> Node:
    return Sigmoid.apply(a)


def log_sigmoid(a) -> Node:
    return LogSigmoid.apply(a)


def softmax(a) -> Node:
    return Softmax.apply(a)


def log_gamma(a) -> Node:
    return LogGamma.apply(a)


def digamma(a) -> Node:
    return Digamma.apply(a)


def _topological_order(root: Node) -> list[Node]:
    order: list[Node] = []
    visited: set[int] = set()
    stack: list[tuple[Node, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        if node.ctx is not None:
            for parent in node.ctx.parents:
                if id(parent) not in visited:
                    stack.append((parent, False))
    return order


def backward(output: Node) -> None:
    """
    Propagate d(output)/d(node) to every node reachable from ``output``.

    Leaves with ``requires_grad`` add the result to their ``grad``; running
    backward twice without zeroing doubles their gradients. Intermediate
    nodes get their gradient overwritten.

    Raises:
        ShapeError: If ``output`` is not a scalar.
    """
    if output.ndim != 0:
        raise ShapeError(f"backward needs a scalar output, got shape {output.shape}")
    adjoints: dict[int, np.ndarray] = {id(output): np.ones(())}
    for node in reversed(_topological_order(output)):
        grad = adjoints.pop(id(node), None)
        if grad is None:
            continue
        if node.ctx is None:
            if node.requires_grad:
                node.grad = node.grad + grad
            continue
        node.grad = grad
        parent_grads = node.ctx.backward(grad)
        if type(node.ctx).__name__ in _flipped:
            parent_grads = tuple(None if g is None else -g for g in parent_grads)
        for parent, parent_grad in zip(node.ctx.parents, parent_grads):
            if parent_grad is None:
                continue
            parent_grad = _unbroadcast(np.asarray(parent_grad, dtype=np.float64), parent.shape)
            key = id(parent)
            adjoints[key] = adjoints[key] + parent_grad if key in adjoints else parent_grad


class ParamStore:
    """
    Named parameter leaves with a deterministic iteration order.

    Two stores initialized from the same seed and shape schema are
    element-wise identical.
    """

    def __init__(self, seed: int = 0):
        self.seed = seed
        self._params: dict[str, Node] = {}

    @classmethod
    def initialize(cls, schema: dict[str, tuple[int, ...]], seed: int) -> Self:
        """
        Create a store from a ``name -> shape`` schema.

        Matrices get uniform weights in [-a, a] with
        a = sqrt(6 / (fan_in + fan_out)); vectors (biases) start at zero.
        """
        store = cls(seed)
        rng = np.random.default_rng(seed)
        for name, shape in schema.items():
            if len(shape) == 2:
                limit = np.sqrt(6.0 / (shape[0] + shape[1]))
                value = rng.uniform(-limit, limit, size=shape)
            else:
                value = np.zeros(shape)
            store.add(name, value)
        return store

    def add(self, name: str, value) -> Node:
        if name in self._params:
            raise ValueError(f"Parameter {name} already exists.")
        node = Node(np.array(value, dtype=np.float64), requires_grad=True, name=name)
        self._params[name] = node
        return node

    def __getitem__(self, name: str) -> Node:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[tuple[str, Node]]:
        return iter(self._params.items())

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def schema(self) -> dict[str, tuple[int, ...]]:
        return {name: node.shape for name, node in self._params.items()}

    def zero_grad(self) -> None:
        for node in self._params.values():
            node.zero_grad()

    def zero_(self, prefix: str = "") -> Self:
        """Set every parameter whose name starts with ``prefix`` to zero."""
        for name, node in self._params.items():
            if name.startswith(prefix):
                node.value = np.zeros_like(node.value)
        return self

    def snapshot(self) -> dict[str, np.ndarray]:
        return {name: node.value.copy() for name, node in self._params.items()}

    def restore(self, values: dict[str, np.ndarray]) -> None:
        for name, value in values.items():
            self._params[name].value = np.array(value, dtype=np.float64)

    def equals(self, other: "ParamStore") -> bool:
        if self.names() != other.names():
            return False
        return all(np.array_equal(self[n].value, other[n].value) for n in self.names())

    def to_dict(self, header: dict | None = None) -> dict:
        return {
            "format_version": CHECKPOINT_FORMAT_VERSION,
            "seed": self.seed,
            "header": header or {},
            "names": self.names(),
            "shapes": {name: list(node.shape) for name, node in self},
            "values": {name: node.value.tolist() for name, node in self},
        }

    @classmethod
    def from_dict(cls, data: dict) -> tuple[Self, dict]:
        """Rebuild a store; returns it together with the stored header."""
        version = data.get("format_version")
        if version != CHECKPOINT_FORMAT_VERSION:
            raise SchemaError(
                f"Unsupported checkpoint format {version}, expected {CHECKPOINT_FORMAT_VERSION}"
            )
        store = cls(data["seed"])
        for name in data["names"]:
            value = np.array(data["values"][name], dtype=np.float64).reshape(data["shapes"][name])
            store.add(name, value)
        return store, data.get("header", {})

    def save(self, path: str | Path, header: dict | None = None) -> None:
        Path(path).write_text(json.dumps(self.to_dict(header)))

    @classmethod
    def load(cls, path: str | Path) -> tuple[Self, dict]:
        return cls.from_dict(json.loads(Path(path).read_text()))


class GradCheckReport(NamedTuple):
    """
    Result of comparing analytic and finite-difference gradients.

    Attributes:
        errors (dict[str, float]): Max relative error per parameter.
    """

    errors: dict[str, float]

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def worst(self) -> str | None:
        if not self.errors:
            return None
        return max(self.errors, key=self.errors.get)

    def passes(self, tolerance: float) -> bool:
        return self.max_error <= tolerance


def relative_error(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.abs(a - b) / np.maximum(1e-8, np.abs(a) + np.abs(b))


def grad_check(f: Callable[[ParamStore], Node], params: ParamStore, h: float = 1e-5) -> GradCheckReport:
    """
    Compare analytic gradients of ``f`` against central differences.

    Args:
        f: Builds a scalar node from the parameters; must be deterministic
            (stochastic sampling frozen through fixed noise).
        params: Parameters to check; values are restored afterwards.
        h: Finite-difference step.

    Returns:
        Per-parameter max relative error |a - b| / max(1e-8, |a| + |b|).
    """
    params.zero_grad()
    backward(f(params))
    analytic = {name: node.grad.copy() for name, node in params}
    params.zero_grad()

    errors: dict[str, float] = {}
    for name, node in params:
        numeric = np.zeros_like(node.value)
        for idx in np.ndindex(node.shape):
            original = node.value[idx]
            node.value[idx] = original + h
            f_plus = f(params).item()
            node.value[idx] = original - h
            f_minus = f(params).item()
            node.value[idx] = original
            numeric[idx] = (f_plus - f_minus) / (2.0 * h)
        errors[name] = float(np.max(relative_error(analytic[name], numeric), initial=0.0))
    return GradCheckReport(errors)
