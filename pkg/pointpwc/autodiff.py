from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Any
from typing import Callable
from typing import Dict
from typing import Iterator
from typing import List
from typing import Sequence
from typing import Tuple

import numpy as np

from pointpwc.errors import GraphError
from pointpwc.errors import ShapeError

Array = np.ndarray
Adjoint = Callable[[Array], Tuple["Array | None", ...]]
PrimitiveFn = Callable[..., Tuple[Array, Adjoint]]

DEFAULT_SLOPE = 0.1


class Tensor:
    __slots__ = ("data", "node_id", "graph")
    __array_ufunc__ = None

    def __init__(self, data: Any, node_id: int | None = None, graph: "Graph | None" = None):
        if isinstance(data, Tensor):
            data = data.data
        array = np.asarray(data, dtype=np.float64)
        # keeps 0-d shape ()
        self.data: Array = array if array.flags.c_contiguous else np.ascontiguousarray(array)
        self.node_id = node_id
        self.graph = graph

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.data.shape)

    @property
    def size(self) -> int:
        return int(self.data.size)

    def item(self) -> float:
        if self.size != 1:
            raise ShapeError("item", [self.shape], "需要标量")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> Array:
        return self.data.copy()

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __add__(self, other: Any) -> "Tensor":
        return add(self, other)

    def __radd__(self, other: Any) -> "Tensor":
        return add(other, self)

    def __sub__(self, other: Any) -> "Tensor":
        return subtract(self, other)

    def __rsub__(self, other: Any) -> "Tensor":
        return subtract(other, self)

    def __mul__(self, other: Any) -> "Tensor":
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return multiply(self, other)

    def __rmul__(self, other: Any) -> "Tensor":
        return self.__mul__(other)

    def __truediv__(self, other: Any) -> "Tensor":
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / float(other))
        return divide(self, other)

    def __rtruediv__(self, other: Any) -> "Tensor":
        return divide(other, self)

    def __matmul__(self, other: Any) -> "Tensor":
        return matmul(self, other)

    def __neg__(self) -> "Tensor":
        return scale(self, -1.0)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, node_id={self.node_id})"


@dataclass
class Node:
    kind: str
    inputs: Tuple[int | None, ...]
    adjoint: Adjoint | None
    value: Array
    scope: str = ""
    name: str = ""


class Graph:
    """Append-only record of primitive applications; insertion order is topological."""

    def __init__(self) -> None:
        self.nodes: List[Node] = []
        self._scopes: List[str] = []

    def leaf(self, data: Any, name: str = "") -> Tensor:
        tensor = Tensor(np.array(data.data if isinstance(data, Tensor) else data, dtype=np.float64))
        node_id = len(self.nodes)
        self.nodes.append(Node(kind="leaf", inputs=(), adjoint=None, value=tensor.data, scope=self.current_scope, name=name))
        tensor.node_id = node_id
        tensor.graph = self
        return tensor

    def record(self, kind: str, inputs: Sequence[Tensor], value: Array, adjoint: Adjoint) -> Tensor:
        input_ids = tuple(item.node_id if item.graph is self else None for item in inputs)
        out = Tensor(value)
        out.node_id = len(self.nodes)
        out.graph = self
        self.nodes.append(Node(kind=kind, inputs=input_ids, adjoint=adjoint, value=out.data, scope=self.current_scope))
        return out

    @property
    def current_scope(self) -> str:
        return "/".join(self._scopes)

    @contextlib.contextmanager
    def scope(self, name: str) -> Iterator[None]:
        self._scopes.append(name)
        try:
            yield
        finally:
            self._scopes.pop()

    def leaf_ids(self) -> List[int]:
        return [index for index, node in enumerate(self.nodes) if node.kind == "leaf"]

    def first_non_finite(self, skip_leaves: bool = False) -> Node | None:
        for node in self.nodes:
            if skip_leaves and node.kind == "leaf":
                continue
            if not np.all(np.isfinite(node.value)):
                return node
        return None

    def __len__(self) -> int:
        return len(self.nodes)


def as_tensor(value: Any) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def _shared_graph(kind: str, tensors: Sequence[Tensor]) -> Graph | None:
    graph: Graph | None = None
    for tensor in tensors:
        if tensor.graph is None:
            continue
        if graph is None:
            graph = tensor.graph
        elif tensor.graph is not graph:
            raise GraphError(f"{kind}: 输入张量属于不同的计算图")
    return graph


def _broadcast_shape(kind: str, a: Array, b: Array) -> tuple[int, ...]:
    try:
        return tuple(np.broadcast_shapes(a.shape, b.shape))
    except ValueError:
        raise ShapeError(kind, [a.shape, b.shape]) from None


def _unbroadcast(grad: Array, shape: tuple[int, ...]) -> Array:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _add(a: Array, b: Array) -> Tuple[Array, Adjoint]:
    _broadcast_shape("add", a, b)

    def adjoint(g: Array):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return a + b, adjoint


def _subtract(a: Array, b: Array) -> Tuple[Array, Adjoint]:
    _broadcast_shape("subtract", a, b)

    def adjoint(g: Array):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return a - b, adjoint


def _multiply(a: Array, b: Array) -> Tuple[Array, Adjoint]:
    _broadcast_shape("multiply", a, b)

    def adjoint(g: Array):
        return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)

    return a * b, adjoint


def _divide(a: Array, b: Array) -> Tuple[Array, Adjoint]:
    _broadcast_shape("divide", a, b)
    out = a / b

    def adjoint(g: Array):
        return _unbroadcast(g / b, a.shape), _unbroadcast(-g * out / b, b.shape)

    return out, adjoint


def _scale(a: Array, factor: float) -> Tuple[Array, Adjoint]:
    def adjoint(g: Array):
        return (g * factor,)

    return a * factor, adjoint


def _matmul(a: Array, b: Array) -> Tuple[Array, Adjoint]:
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", [a.shape, b.shape])
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError("matmul", [a.shape, b.shape], "批维度无法广播") from None

    def adjoint(g: Array):
        grad_a = _unbroadcast(np.matmul(g, np.swapaxes(b, -1, -2)), a.shape)
        grad_b = _unbroadcast(np.matmul(np.swapaxes(a, -1, -2), g), b.shape)
        return grad_a, grad_b

    return np.matmul(a, b), adjoint


def _concat(*parts: Array) -> Tuple[Array, Adjoint]:
    if not parts:
        raise ShapeError("concat", [], "至少需要一个输入")
    lead = parts[0].shape[:-1]
    for part in parts[1:]:
        if part.ndim != parts[0].ndim or part.shape[:-1] != lead:
            raise ShapeError("concat", [parts[0].shape, part.shape])
    widths = [part.shape[-1] for part in parts]
    bounds = np.cumsum([0] + widths)

    def adjoint(g: Array):
        return tuple(g[..., bounds[i] : bounds[i + 1]] for i in range(len(parts)))

    return np.concatenate(parts, axis=-1), adjoint


def _leaky_relu(a: Array, slope: float = DEFAULT_SLOPE) -> Tuple[Array, Adjoint]:
    positive = a > 0

    def adjoint(g: Array):
        return (np.where(positive, g, g * slope),)

    return np.where(positive, a, a * slope), adjoint


def _reduce_sum(a: Array, axis: int | Tuple[int, ...] | None = None, keepdims: bool = False) -> Tuple[Array, Adjoint]:
    out = np.sum(a, axis=axis, keepdims=keepdims)

    def adjoint(g: Array):
        expanded = g if keepdims or axis is None else np.expand_dims(g, axis)
        return (np.broadcast_to(expanded, a.shape).copy(),)

    return np.asarray(out, dtype=np.float64), adjoint


def _reduce_mean(a: Array, axis: int | Tuple[int, ...] | None = None, keepdims: bool = False) -> Tuple[Array, Adjoint]:
    out = np.mean(a, axis=axis, keepdims=keepdims)
    count = a.size // max(1, np.asarray(out).size)

    def adjoint(g: Array):
        expanded = g if keepdims or axis is None else np.expand_dims(g, axis)
        return (np.broadcast_to(expanded / count, a.shape).copy(),)

    return np.asarray(out, dtype=np.float64), adjoint


def _square(a: Array) -> Tuple[Array, Adjoint]:
    def adjoint(g: Array):
        return (2.0 * a * g,)

    return a * a, adjoint


def _sqrt(a: Array) -> Tuple[Array, Adjoint]:
    if np.any(a < 0):
        raise GraphError(f"sqrt: 输入包含负数 (min={float(np.min(a)):.3e})")
    out = np.sqrt(a)

    def adjoint(g: Array):
        safe = np.where(out > 0, out, 1.0)
        return (np.where(out > 0, g / (2.0 * safe), 0.0),)

    return out, adjoint


def _gather_rows(a: Array, index: Array) -> Tuple[Array, Adjoint]:
    index = np.asarray(index, dtype=np.int64)
    if a.ndim < 1 or (index.size and (index.min() < 0 or index.max() >= a.shape[0])):
        raise ShapeError("gather_rows", [a.shape, index.shape], "行索引越界")

    def adjoint(g: Array):
        grad = np.zeros(a.shape, dtype=np.float64)
        np.add.at(grad, index, g)
        return (grad,)

    return a[index], adjoint


def _scatter_add_rows(a: Array, index: Array, n_rows: int) -> Tuple[Array, Adjoint]:
    index = np.asarray(index, dtype=np.int64)
    if a.shape[: index.ndim] != index.shape:
        raise ShapeError("scatter_add_rows", [a.shape, index.shape])
    if index.size and (index.min() < 0 or index.max() >= n_rows):
        raise ShapeError("scatter_add_rows", [a.shape, index.shape], "行索引越界")
    out = np.zeros((n_rows,) + a.shape[index.ndim :], dtype=np.float64)
    np.add.at(out, index, a)

    def adjoint(g: Array):
        return (g[index],)

    return out, adjoint


def _min_axis(a: Array, axis: int) -> Tuple[Array, Adjoint]:
    if a.ndim == 0 or a.shape[axis] == 0:
        raise ShapeError("min_axis", [a.shape], f"axis={axis} 为空")
    # np.argmin returns the first occurrence, so ties go to the lowest index.
    argmin = np.argmin(a, axis=axis)
    out = np.take_along_axis(a, np.expand_dims(argmin, axis), axis=axis).squeeze(axis)

    def adjoint(g: Array):
        grad = np.zeros(a.shape, dtype=np.float64)
        np.put_along_axis(grad, np.expand_dims(argmin, axis), np.expand_dims(g, axis), axis=axis)
        return (grad,)

    return out, adjoint


def _reshape(a: Array, shape: Tuple[int, ...]) -> Tuple[Array, Adjoint]:
    try:
        out = a.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", [a.shape, tuple(shape)]) from None

    def adjoint(g: Array):
        return (g.reshape(a.shape),)

    return out, adjoint


def _swap_last(a: Array) -> Tuple[Array, Adjoint]:
    if a.ndim < 2:
        raise ShapeError("swap_last", [a.shape])

    def adjoint(g: Array):
        return (np.swapaxes(g, -1, -2),)

    return np.swapaxes(a, -1, -2), adjoint


PRIMITIVES: Dict[str, PrimitiveFn] = {
    "add": _add,
    "subtract": _subtract,
    "multiply": _multiply,
    "divide": _divide,
    "scale": _scale,
    "matmul": _matmul,
    "concat": _concat,
    "leaky_relu": _leaky_relu,
    "sum": _reduce_sum,
    "mean": _reduce_mean,
    "square": _square,
    "sqrt": _sqrt,
    "gather_rows": _gather_rows,
    "scatter_add_rows": _scatter_add_rows,
    "min_axis": _min_axis,
    "reshape": _reshape,
    "swap_last": _swap_last,
}


def apply_primitive(kind: str, *inputs: Any, **attrs: Any) -> Tensor:
    primitive = PRIMITIVES.get(kind)
    if primitive is None:
        raise GraphError(f"不支持的 primitive: {kind}")
    tensors = [as_tensor(item) for item in inputs]
    graph = _shared_graph(kind, tensors)
    value, adjoint = primitive(*[tensor.data for tensor in tensors], **attrs)
    if graph is None:
        return Tensor(value)
    return graph.record(kind, tensors, value, adjoint)


def add(a: Any, b: Any) -> Tensor:
    return apply_primitive("add", a, b)


def subtract(a: Any, b: Any) -> Tensor:
    return apply_primitive("subtract", a, b)


def multiply(a: Any, b: Any) -> Tensor:
    return apply_primitive("multiply", a, b)


def divide(a: Any, b: Any) -> Tensor:
    return apply_primitive("divide", a, b)


def scale(a: Any, factor: float) -> Tensor:
    return apply_primitive("scale", a, factor=float(factor))


def matmul(a: Any, b: Any) -> Tensor:
    return apply_primitive("matmul", a, b)


def concat(*parts: Any) -> Tensor:
    return apply_primitive("concat", *parts)


def leaky_relu(a: Any, slope: float = DEFAULT_SLOPE) -> Tensor:
    return apply_primitive("leaky_relu", a, slope=float(slope))


def reduce_sum(a: Any, axis: int | Tuple[int, ...] | None = None, keepdims: bool = False) -> Tensor:
    return apply_primitive("sum", a, axis=axis, keepdims=keepdims)


def reduce_mean(a: Any, axis: int | Tuple[int, ...] | None = None, keepdims: bool = False) -> Tensor:
    return apply_primitive("mean", a, axis=axis, keepdims=keepdims)


def square(a: Any) -> Tensor:
    return apply_primitive("square", a)


def sqrt(a: Any) -> Tensor:
    return apply_primitive("sqrt", a)


def gather_rows(a: Any, index: Array) -> Tensor:
    return apply_primitive("gather_rows", a, index=np.asarray(index, dtype=np.int64))


def scatter_add_rows(a: Any, index: Array, n_rows: int) -> Tensor:
    return apply_primitive("scatter_add_rows", a, index=np.asarray(index, dtype=np.int64), n_rows=int(n_rows))


def min_axis(a: Any, axis: int) -> Tuple[Tensor, Array]:
    tensor = as_tensor(a)
    values = apply_primitive("min_axis", tensor, axis=axis)
    return values, np.argmin(tensor.data, axis=axis)


def reshape(a: Any, shape: Sequence[int]) -> Tensor:
    return apply_primitive("reshape", a, shape=tuple(int(size) for size in shape))


def swap_last(a: Any) -> Tensor:
    return apply_primitive("swap_last", a)


def backward(graph: Graph, root: Tensor) -> Dict[int, Tensor]:
    """Gradient of a scalar ``root`` with respect to every leaf of ``graph``."""
    if root.graph is not graph or root.node_id is None:
        raise GraphError("backward: root 不属于该计算图")
    if root.size != 1:
        raise GraphError(f"backward: root 必须是标量, 实际形状 {root.shape}")

    grads: Dict[int, Array] = {root.node_id: np.ones(root.shape, dtype=np.float64)}
    leaf_grads: Dict[int, Array] = {}
    for node_id in range(root.node_id, -1, -1):
        grad = grads.pop(node_id, None)
        if grad is None:
            continue
        node = graph.nodes[node_id]
        if node.adjoint is None:
            leaf_grads[node_id] = grad
            continue
        for input_id, input_grad in zip(node.inputs, node.adjoint(grad)):
            if input_id is None or input_grad is None:
                continue
            if input_id in grads:
                grads[input_id] = grads[input_id] + input_grad
            else:
                grads[input_id] = input_grad

    result: Dict[int, Tensor] = {}
    for leaf_id in graph.leaf_ids():
        value = leaf_grads.get(leaf_id)
        if value is None:
            value = np.zeros(graph.nodes[leaf_id].value.shape, dtype=np.float64)
        result[leaf_id] = Tensor(value)
    return result


@dataclass
class MlpParams:
    """Stack of (weight out×in, bias out) layers; the final layer is linear."""

    layers: List[Tuple[Tensor, Tensor]]
    slope: float = DEFAULT_SLOPE

    def __post_init__(self) -> None:
        if not self.layers:
            raise ShapeError("mlp", [], "至少需要一层")
        for index, (weight, bias) in enumerate(self.layers):
            if len(weight.shape) != 2 or bias.shape != (weight.shape[0],):
                raise ShapeError("mlp", [weight.shape, bias.shape], f"第 {index} 层")
            if index > 0:
                previous = self.layers[index - 1][0]
                if previous.shape[0] != weight.shape[1]:
                    raise ShapeError("mlp", [previous.shape, weight.shape], f"第 {index} 层输入宽度不衔接")

    @property
    def in_width(self) -> int:
        return self.layers[0][0].shape[1]

    @property
    def out_width(self) -> int:
        return self.layers[-1][0].shape[0]


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    return add(matmul(x, swap_last(weight)), bias)


def mlp_forward(params: MlpParams, x: Any) -> Tensor:
    x = as_tensor(x)
    if not x.shape or x.shape[-1] != params.in_width:
        raise ShapeError("mlp_forward", [x.shape, params.layers[0][0].shape])
    hidden = x
    last = len(params.layers) - 1
    for index, (weight, bias) in enumerate(params.layers):
        hidden = linear(hidden, weight, bias)
        if index < last:
            hidden = leaky_relu(hidden, params.slope)
    return hidden
