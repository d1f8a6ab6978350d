"""Reverse-mode automatic differentiation on dense float64 arrays.

The engine is deliberately small: tensors are C-order ``numpy`` float64
arrays, graphs are built eagerly (constructing a node computes its value),
and gradients are accumulated by a reverse topological sweep. Elementwise
binary ops accept equal shapes or a Python scalar; ``add``/``sub``
additionally accept matrix + row vector (bias add). No other broadcasting.
"""

from __future__ import annotations

import itertools
from typing import Callable, Mapping

import numpy as np

Tensor = np.ndarray

_NODE_IDS = itertools.count()

# Every op kind the engine can place in a graph. Checks and tests assert
# full coverage against this registry.
OP_KINDS = frozenset(
    {
        "input",
        "matmul",
        "add",
        "sub",
        "mul",
        "div",
        "neg",
        "relu",
        "sigmoid",
        "softmax",
        "log_softmax",
        "softplus",
        "log",
        "exp",
        "clip_min",
        "sum",
        "mean",
        "min",
        "max",
        "concat",
        "detach",
        "straight_through",
        "gumbel_noise_add",
    }
)

# Ops whose analytic gradient is checkable by central finite differences.
# The remainder (input is the thing being differentiated; detach and
# straight_through discard or reroute gradients by contract) get dedicated
# contract tests instead.
FD_CHECKABLE_OP_KINDS = OP_KINDS - {"input", "detach", "straight_through"}


class ShapeMismatchError(ValueError):
    """Raised when operand shapes are incompatible for an op."""

    def __init__(self, op: str, *shapes: tuple[int, ...]):
        self.op = op
        self.shapes = shapes
        super().__init__(f"op '{op}': incompatible shapes {list(shapes)}")


class NonFiniteError(ArithmeticError):
    """Raised when a forward value or gradient contains NaN/inf."""

    def __init__(self, node: "Node", what: str):
        self.node_id = node.id
        self.op = node.op
        super().__init__(f"non-finite {what} at node {node.id} (op '{node.op}')")


def as_tensor(x) -> Tensor:
    """Coerce to a C-order float64 array."""
    return np.ascontiguousarray(np.asarray(x, dtype=np.float64))


class Node:
    """One vertex of a computation graph.

    Holds the op kind, parent references, the cached forward value and the
    gradient accumulated during the backward sweep.
    """

    __slots__ = ("id", "op", "parents", "value", "grad", "name", "trainable", "_forward", "_backward")

    def __init__(self, op: str, parents: tuple["Node", ...] = (), name: str | None = None, trainable: bool = False):
        assert op in OP_KINDS, op
        self.id = next(_NODE_IDS)
        self.op = op
        self.parents = parents
        self.value: Tensor | None = None
        self.grad: Tensor | None = None
        self.name = name
        self.trainable = trainable
        self._forward: Callable[[], Tensor] = lambda: self.value
        self._backward: Callable[[], None] = lambda: None

    def _init(self, forward: Callable[[], Tensor], backward: Callable[[], None]) -> "Node":
        self._forward = forward
        self._backward = backward
        self.value = forward()
        if not np.all(np.isfinite(self.value)):
            raise NonFiniteError(self, "value")
        return self

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    # Operator sugar; scalars stay scalars (they are op parameters, not nodes).
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        shape = None if self.value is None else self.value.shape
        return f"Node(id={self.id}, op={self.op!r}, shape={shape}, name={self.name!r})"


def _accumulate(parent: Node, g: Tensor) -> None:
    if parent.grad is None:
        parent.grad = np.zeros_like(parent.value)
    assert parent.grad.shape == g.shape
    parent.grad += g


def input_node(value, name: str | None = None, trainable: bool = False) -> Node:
    node = Node("input", (), name=name, trainable=trainable)
    arr = as_tensor(value)
    node.value = arr
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(node, "value")
    node._forward = lambda: node.value
    return node


def constant(value) -> Node:
    return input_node(value, name=None, trainable=False)


def matmul(a: Node, b: Node) -> Node:
    if a.value.ndim != 2 or b.value.ndim != 2 or a.value.shape[1] != b.value.shape[0]:
        raise ShapeMismatchError("matmul", a.value.shape, b.value.shape)
    out = Node("matmul", (a, b))

    def bw():
        _accumulate(a, out.grad @ b.value.T)
        _accumulate(b, a.value.T @ out.grad)

    return out._init(lambda: a.value @ b.value, bw)


def _binary_shapes(op: str, a: Node, b: Node, allow_row: bool) -> str:
    if a.value.shape == b.value.shape:
        return "equal"
    if (
        allow_row
        and a.value.ndim == 2
        and b.value.ndim in (1, 2)
        and b.value.shape[-1] == a.value.shape[1]
        and (b.value.ndim == 1 or b.value.shape[0] == 1)
    ):
        return "row"
    raise ShapeMismatchError(op, a.value.shape, b.value.shape)


def _row_reduce(g: Tensor, row_shape: tuple[int, ...]) -> Tensor:
    return g.sum(axis=0).reshape(row_shape)


def add(a: Node, b: Node | float) -> Node:
    if not isinstance(b, Node):
        scalar = float(b)
        out = Node("add", (a,))
        return out._init(lambda: a.value + scalar, lambda: _accumulate(a, out.grad))
    kind = _binary_shapes("add", a, b, allow_row=True)
    out = Node("add", (a, b))

    def bw():
        _accumulate(a, out.grad)
        _accumulate(b, out.grad if kind == "equal" else _row_reduce(out.grad, b.value.shape))

    return out._init(lambda: a.value + b.value, bw)


def sub(a: Node, b: Node | float) -> Node:
    if not isinstance(b, Node):
        scalar = float(b)
        out = Node("sub", (a,))
        return out._init(lambda: a.value - scalar, lambda: _accumulate(a, out.grad))
    kind = _binary_shapes("sub", a, b, allow_row=True)
    out = Node("sub", (a, b))

    def bw():
        _accumulate(a, out.grad)
        _accumulate(b, -out.grad if kind == "equal" else -_row_reduce(out.grad, b.value.shape))

    return out._init(lambda: a.value - b.value, bw)


def mul(a: Node, b: Node | float) -> Node:
    if not isinstance(b, Node):
        scalar = float(b)
        out = Node("mul", (a,))
        return out._init(lambda: a.value * scalar, lambda: _accumulate(a, out.grad * scalar))
    _binary_shapes("mul", a, b, allow_row=False)
    out = Node("mul", (a, b))

    def bw():
        _accumulate(a, out.grad * b.value)
        _accumulate(b, out.grad * a.value)

    return out._init(lambda: a.value * b.value, bw)


def div(a: Node, b: Node | float) -> Node:
    if not isinstance(b, Node):
        scalar = float(b)
        out = Node("div", (a,))
        return out._init(lambda: a.value / scalar, lambda: _accumulate(a, out.grad / scalar))
    _binary_shapes("div", a, b, allow_row=False)
    out = Node("div", (a, b))

    def bw():
        _accumulate(a, out.grad / b.value)
        _accumulate(b, -out.grad * a.value / (b.value * b.value))

    return out._init(lambda: a.value / b.value, bw)


def neg(a: Node) -> Node:
    out = Node("neg", (a,))
    return out._init(lambda: -a.value, lambda: _accumulate(a, -out.grad))


def relu(a: Node) -> Node:
    # Subgradient at 0 is 0.
    out = Node("relu", (a,))
    return out._init(lambda: np.maximum(a.value, 0.0), lambda: _accumulate(a, out.grad * (a.value > 0.0)))


def sigmoid(a: Node) -> Node:
    out = Node("sigmoid", (a,))

    def bw():
        s = out.value
        _accumulate(a, out.grad * s * (1.0 - s))

    def fw():
        return np.where(a.value >= 0, 1.0 / (1.0 + np.exp(-a.value)), np.exp(a.value) / (1.0 + np.exp(a.value)))

    return out._init(fw, bw)


def softmax(a: Node) -> Node:
    """Softmax along the last axis."""
    out = Node("softmax", (a,))

    def fw():
        shifted = a.value - a.value.max(axis=-1, keepdims=True)
        e = np.exp(shifted)
        return e / e.sum(axis=-1, keepdims=True)

    def bw():
        s = out.value
        inner = (out.grad * s).sum(axis=-1, keepdims=True)
        _accumulate(a, s * (out.grad - inner))

    return out._init(fw, bw)


def log_softmax(a: Node) -> Node:
    out = Node("log_softmax", (a,))

    def fw():
        shifted = a.value - a.value.max(axis=-1, keepdims=True)
        return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))

    def bw():
        s = np.exp(out.value)
        _accumulate(a, out.grad - s * out.grad.sum(axis=-1, keepdims=True))

    return out._init(fw, bw)


def softplus(a: Node) -> Node:
    out = Node("softplus", (a,))

    def bw():
        s = np.where(a.value >= 0, 1.0 / (1.0 + np.exp(-a.value)), np.exp(a.value) / (1.0 + np.exp(a.value)))
        _accumulate(a, out.grad * s)

    return out._init(lambda: np.logaddexp(0.0, a.value), bw)


def log(a: Node) -> Node:
    out = Node("log", (a,))
    return out._init(lambda: np.log(a.value), lambda: _accumulate(a, out.grad / a.value))


def exp(a: Node) -> Node:
    out = Node("exp", (a,))
    return out._init(lambda: np.exp(a.value), lambda: _accumulate(a, out.grad * out.value))


def clip_min(a: Node, floor: float) -> Node:
    floor = float(floor)
    out = Node("clip_min", (a,))
    return out._init(lambda: np.maximum(a.value, floor), lambda: _accumulate(a, out.grad * (a.value > floor)))


def reduce_sum(a: Node, axis: int | None = None) -> Node:
    out = Node("sum", (a,))

    def bw():
        if axis is None:
            _accumulate(a, np.full_like(a.value, float(out.grad)))
        else:
            _accumulate(a, np.repeat(np.expand_dims(out.grad, axis), a.value.shape[axis], axis=axis))

    return out._init(lambda: np.sum(a.value, axis=axis), bw)


def reduce_mean(a: Node, axis: int | None = None) -> Node:
    out = Node("mean", (a,))
    count = a.value.size if axis is None else a.value.shape[axis]

    def bw():
        if axis is None:
            _accumulate(a, np.full_like(a.value, float(out.grad) / count))
        else:
            _accumulate(a, np.repeat(np.expand_dims(out.grad / count, axis), count, axis=axis))

    return out._init(lambda: np.mean(a.value, axis=axis), bw)


def _extreme_reduce(kind: str, a: Node, axis: int | None) -> Node:
    pick = np.argmin if kind == "min" else np.argmax
    out = Node(kind, (a,))

    def fw():
        return np.min(a.value, axis=axis) if kind == "min" else np.max(a.value, axis=axis)

    def bw():
        # Subgradient through the selected entry; ties go to the first
        # occurrence (row-major), i.e. the lexicographically smallest index.
        g = np.zeros_like(a.value)
        if axis is None:
            g.flat[pick(a.value)] = float(out.grad)
        else:
            idx = pick(a.value, axis=axis)
            np.put_along_axis(g, np.expand_dims(idx, axis), np.expand_dims(out.grad, axis), axis=axis)
        _accumulate(a, g)

    return out._init(fw, bw)


def reduce_min(a: Node, axis: int | None = None) -> Node:
    return _extreme_reduce("min", a, axis)


def reduce_max(a: Node, axis: int | None = None) -> Node:
    return _extreme_reduce("max", a, axis)


def concat(nodes: list[Node], axis: int = 1) -> Node:
    if not nodes:
        raise ShapeMismatchError("concat")
    ndim = nodes[0].value.ndim
    for n in nodes[1:]:
        if n.value.ndim != ndim or any(
            n.value.shape[d] != nodes[0].value.shape[d] for d in range(ndim) if d != axis
        ):
            raise ShapeMismatchError("concat", *(m.value.shape for m in nodes))
    out = Node("concat", tuple(nodes))
    sizes = [n.value.shape[axis] for n in nodes]

    def bw():
        offsets = np.cumsum([0] + sizes)
        for node, lo, hi in zip(nodes, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * ndim
            sl[axis] = slice(lo, hi)
            _accumulate(node, out.grad[tuple(sl)])

    return out._init(lambda: np.concatenate([n.value for n in nodes], axis=axis), bw)


def detach(a: Node) -> Node:
    """Forward identity, zero gradient (stop-gradient)."""
    out = Node("detach", (a,))
    return out._init(lambda: a.value.copy(), lambda: None)


def straight_through(a: Node) -> Node:
    """Exact one-hot of the per-row argmax; backward is the identity.

    The forward value is built from scratch so hard mode emits bit-exact
    one-hot rows; the gradient is routed to the soft parent unchanged.
    """
    if a.value.ndim != 2:
        raise ShapeMismatchError("straight_through", a.value.shape)
    out = Node("straight_through", (a,))

    def fw():
        hard = np.zeros_like(a.value)
        hard[np.arange(a.value.shape[0]), np.argmax(a.value, axis=1)] = 1.0
        return hard

    return out._init(fw, lambda: _accumulate(a, out.grad))


def gumbel_noise_add(a: Node, noise) -> Node:
    """Add a fixed noise tensor (replayed verbatim on re-evaluation)."""
    noise = as_tensor(noise)
    if noise.shape != a.value.shape:
        raise ShapeMismatchError("gumbel_noise_add", a.value.shape, noise.shape)
    out = Node("gumbel_noise_add", (a,))
    return out._init(lambda: a.value + noise, lambda: _accumulate(a, out.grad))


def topo_order(root: Node) -> list[Node]:
    """Parents-before-children order, deterministic in graph structure."""
    order: list[Node] = []
    seen: set[int] = set()
    stack: list[tuple[Node, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if node.id in seen:
            continue
        seen.add(node.id)
        stack.append((node, True))
        for parent in reversed(node.parents):
            if parent.id not in seen:
                stack.append((parent, False))
    return order


def forward_eval(root: Node, inputs: Mapping[str, Tensor] | None = None) -> Tensor:
    """Re-evaluate the graph, optionally rebinding named input nodes.

    Every name in ``inputs`` must correspond to a named input node in the
    graph, and rebound arrays must keep their original shapes.
    """
    order = topo_order(root)
    if inputs:
        named = {n.name: n for n in order if n.op == "input" and n.name is not None}
        unknown = set(inputs) - set(named)
        if unknown:
            raise KeyError(f"unknown input names: {sorted(unknown)}")
        for name, value in inputs.items():
            node = named[name]
            arr = as_tensor(value)
            if arr.shape != node.value.shape:
                raise ShapeMismatchError("input", node.value.shape, arr.shape)
            node.value = arr
    for node in order:
        if node.op != "input":
            node.value = node._forward()
        if not np.all(np.isfinite(node.value)):
            raise NonFiniteError(node, "value")
    return root.value


def backward_grad(root: Node) -> dict[str, Tensor]:
    """Populate gradients and return those of trainable named inputs.

    Requires a scalar root (size-1 value). Forward values are untouched.
    """
    if root.value.size != 1:
        raise ValueError(f"backward_grad requires a scalar root, got shape {root.value.shape}")
    order = topo_order(root)
    for node in order:
        node.grad = None
    root.grad = np.ones_like(root.value)
    for node in reversed(order):
        if node.grad is None:
            continue
        if not np.all(np.isfinite(node.grad)):
            raise NonFiniteError(node, "gradient")
        node._backward()
    out: dict[str, Tensor] = {}
    for node in order:
        if node.op == "input" and node.trainable and node.name is not None:
            out[node.name] = node.grad if node.grad is not None else np.zeros_like(node.value)
    return out


def finite_diff_check(build: Callable[[Node], Node], point: Tensor, step: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``build`` maps an input node to a scalar root. Returns
    max_i |analytic_i - numeric_i| / (|analytic_i| + 1e-8).
    """
    point = as_tensor(point)
    x = input_node(point, name="__fd__", trainable=True)
    root = build(x)
    if root.value.size != 1:
        raise ValueError("finite_diff_check requires a scalar function")
    analytic = backward_grad(root)["__fd__"]
    numeric = np.zeros_like(point)
    for i in range(point.size):
        for sign in (+1.0, -1.0):
            bumped = point.copy()
            bumped.flat[i] += sign * step
            numeric.flat[i] += sign * float(forward_eval(root, {"__fd__": bumped}))
        numeric.flat[i] /= 2.0 * step
    forward_eval(root, {"__fd__": point})
    return float(np.max(np.abs(analytic - numeric) / (np.abs(analytic) + 1e-8)))
