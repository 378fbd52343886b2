"""Define-then-run reverse-mode autodiff over dense float64 arrays.

A :class:`Graph` is built once from named nodes and evaluated many times with
different input bindings::

    g = Graph()
    x = g.input("x")
    w = g.param(Tensor(np.ones((3, 2)), requires_grad=True), name="w")
    loss = g.mean(g.relu(x @ w), name="loss")
    values = forward_eval(g, {"x": np.ones((4, 3))})
    backward(g, "loss")          # fills w.grad

Node kinds form a closed set (see ``KINDS``). Inputs are ``constant`` nodes
without a value; they must be bound at evaluation time.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable, Mapping, Sequence

import numpy as np

from . import kernels as K


class GraphError(Exception):
    """Base class for graph construction and evaluation errors."""


class ShapeError(GraphError):
    def __init__(self, node: str, message: str):
        super().__init__(f"shape mismatch at node {node!r}: {message}")
        self.node = node


class NonFiniteError(GraphError):
    def __init__(self, node: str, index: tuple):
        super().__init__(f"non-finite value at node {node!r}, index {index}")
        self.node = node
        self.index = index


class UnboundInputError(GraphError):
    pass


class LossNotScalarError(GraphError):
    pass


class ForwardNotRunError(GraphError):
    pass


class Tensor:
    """Dense float64 array with an optional gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        if any(n < 1 for n in arr.shape):
            raise ValueError(f"every dimension must be >= 1, got {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}, name={self.name!r})"


# ---------------------------------------------------------------------------
# Node kinds. Each op defines shape inference, forward and backward.


def _reduced_shape(shape: tuple, axis, keepdims: bool) -> tuple:
    if axis is None:
        axes = tuple(range(len(shape)))
    else:
        axes = tuple(a % len(shape) for a in (axis if isinstance(axis, tuple) else (axis,)))
    if keepdims:
        out = tuple(1 if i in axes else n for i, n in enumerate(shape))
    else:
        out = tuple(n for i, n in enumerate(shape) if i not in axes)
    return out or (1,)


def _expand_reduced(g: np.ndarray, shape: tuple, axis, keepdims: bool) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(g.reshape((1,) * len(shape)), shape)
    axes = {a % len(shape) for a in (axis if isinstance(axis, tuple) else (axis,))}
    kept = tuple(1 if i in axes else n for i, n in enumerate(shape))
    return np.broadcast_to(g.reshape(kept), shape)


def _shape_broadcast(shapes, attrs):
    try:
        return np.broadcast_shapes(*shapes)
    except ValueError as exc:
        raise ValueError(str(exc)) from None


def _same(shapes, attrs):
    return shapes[0]


def _infer_matmul(shapes, attrs):
    a, b = shapes
    if len(a) < 2 or len(b) < 2:
        raise ValueError(f"matmul needs >= 2-d operands, got {a} and {b}")
    if a[-1] != b[-2]:
        raise ValueError(f"inner dimensions differ: {a} @ {b}")
    batch = np.broadcast_shapes(a[:-2], b[:-2])
    return tuple(batch) + (a[-2], b[-1])


def _infer_correlate(shapes, attrs):
    x, w = shapes
    if len(x) != 4 or len(w) != 4:
        raise ValueError(f"expected x (B,H,W,C) and w (kh,kw,C,O), got {x} and {w}")
    if x[3] != w[2]:
        raise ValueError(f"input channels {x[3]} != kernel channels {w[2]}")
    s, p = attrs["stride"], attrs["pad"]
    ho = K.conv_out_size(x[1], w[0], s, p)
    wo = K.conv_out_size(x[2], w[1], s, p)
    if ho < 1 or wo < 1:
        raise ValueError("kernel larger than padded input")
    return (x[0], ho, wo, w[3])


def _tconv_out_hw(y, w, attrs):
    s, p = attrs["stride"], attrs["pad"]
    if attrs.get("out_hw") is not None:
        return tuple(attrs["out_hw"])
    return ((y[1] - 1) * s + w[0] - 2 * p, (y[2] - 1) * s + w[1] - 2 * p)


def _infer_tconv(shapes, attrs):
    y, w = shapes
    if len(y) != 4 or len(w) != 4:
        raise ValueError(f"expected y (B,Ho,Wo,O) and w (kh,kw,C,O), got {y} and {w}")
    if y[3] != w[3]:
        raise ValueError(f"output channels {y[3]} != kernel channels {w[3]}")
    h, wd = _tconv_out_hw(y, w, attrs)
    s, p = attrs["stride"], attrs["pad"]
    if K.conv_out_size(h, w[0], s, p) != y[1] or K.conv_out_size(wd, w[1], s, p) != y[2]:
        raise ValueError(f"output size {(h, wd)} inconsistent with input {y[1:3]}")
    return (y[0], h, wd, w[2])


def _infer_reduce(shapes, attrs):
    return _reduced_shape(shapes[0], attrs.get("axis"), attrs.get("keepdims", False))


def _infer_concat(shapes, attrs):
    axis = attrs["axis"]
    ref = shapes[0]
    ax = axis % len(ref)
    for s in shapes[1:]:
        if len(s) != len(ref) or any(a != b for i, (a, b) in enumerate(zip(s, ref)) if i != ax):
            raise ValueError(f"cannot concat {shapes} along axis {axis}")
    return ref[:ax] + (sum(s[ax] for s in shapes),) + ref[ax + 1:]


def _infer_reshape(shapes, attrs):
    src = shapes[0]
    target = list(attrs["shape"])
    size = int(np.prod(src))
    if target.count(-1) > 1:
        raise ValueError("at most one -1 in reshape")
    if -1 in target:
        known = int(np.prod([n for n in target if n != -1]))
        if known == 0 or size % known:
            raise ValueError(f"cannot reshape {src} to {tuple(target)}")
        target[target.index(-1)] = size // known
    if int(np.prod(target)) != size:
        raise ValueError(f"cannot reshape {src} to {tuple(target)}")
    return tuple(target)


def _infer_upsample(shapes, attrs):
    x = shapes[0]
    if len(x) != 4:
        raise ValueError(f"expected (B,H,W,C), got {x}")
    return (x[0], 2 * x[1], 2 * x[2], x[3])


def _infer_avgpool(shapes, attrs):
    x = shapes[0]
    if len(x) != 4 or x[1] % 2 or x[2] % 2:
        raise ValueError(f"expected (B,H,W,C) with even H, W, got {x}")
    return (x[0], x[1] // 2, x[2] // 2, x[3])


def _infer_gap(shapes, attrs):
    x = shapes[0]
    if len(x) != 4:
        raise ValueError(f"expected (B,H,W,C), got {x}")
    return (x[0], x[3])


def _infer_cosine(shapes, attrs):
    a, b = shapes
    if a != b:
        raise ValueError(f"operands differ: {a} vs {b}")
    return a[:-1] or (1,)


def _infer_bilinear(shapes, attrs):
    img, off = shapes
    if len(img) not in (3, 4):
        raise ValueError(f"image must be (B,H,W) or (B,H,W,C), got {img}")
    if off != img[:3] + (2,):
        raise ValueError(f"offsets must be {img[:3] + (2,)}, got {off}")
    if img[1] < 2 or img[2] < 2:
        raise ValueError("image must be at least 2x2")
    return img


def _l2n(x):
    with np.errstate(invalid="ignore", divide="ignore"):
        return x / np.sqrt((x * x).sum(axis=-1, keepdims=True))


@dataclass(frozen=True)
class Op:
    arity: int | None  # None = variadic
    infer: Callable
    forward: Callable
    backward: Callable | None  # None = not differentiable (no grads flow)


def _bw_add(g, ins, out, attrs):
    return [K.unbroadcast(g, ins[0].shape), K.unbroadcast(g, ins[1].shape)]


def _bw_sub(g, ins, out, attrs):
    return [K.unbroadcast(g, ins[0].shape), K.unbroadcast(-g, ins[1].shape)]


def _bw_mul(g, ins, out, attrs):
    a, b = ins
    return [K.unbroadcast(g * b, a.shape), K.unbroadcast(g * a, b.shape)]


def _bw_matmul(g, ins, out, attrs):
    a, b = ins
    ga = g @ np.swapaxes(b, -1, -2)
    gb = np.swapaxes(a, -1, -2) @ g
    return [K.unbroadcast(ga, a.shape), K.unbroadcast(gb, b.shape)]


def _bw_correlate(g, ins, out, attrs):
    x, w = ins
    s, p = attrs["stride"], attrs["pad"]
    gx = K.transposed_correlate2d(g, w, s, p, x.shape[1:3])
    gw = K.correlate2d_grad_w(x, g, w.shape, s, p)
    return [gx, gw]


def _fw_tconv(ins, attrs):
    y, w = ins
    return K.transposed_correlate2d(y, w, attrs["stride"], attrs["pad"], _tconv_out_hw(y.shape, w.shape, attrs))


def _bw_tconv(g, ins, out, attrs):
    y, w = ins
    s, p = attrs["stride"], attrs["pad"]
    gy = K.correlate2d(g, w, s, p)
    gw = K.correlate2d_grad_w(g, y, w.shape, s, p)
    return [gy, gw]


def _fw_leaky(ins, attrs):
    x = ins[0]
    return np.where(x > 0, x, attrs["slope"] * x)


def _bw_leaky(g, ins, out, attrs):
    return [g * np.where(ins[0] > 0, 1.0, attrs["slope"])]


def _fw_sigmoid(ins, attrs):
    x = ins[0]
    return np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))


def _fw_mean(ins, attrs):
    x = ins[0]
    out = x.mean(axis=attrs.get("axis"), keepdims=attrs.get("keepdims", False))
    return np.asarray(out, dtype=np.float64).reshape(_reduced_shape(x.shape, attrs.get("axis"), attrs.get("keepdims", False)))


def _bw_mean(g, ins, out, attrs):
    x = ins[0]
    n = x.size // max(out.size, 1) if attrs.get("axis") is not None else x.size
    return [_expand_reduced(g, x.shape, attrs.get("axis"), attrs.get("keepdims", False)) / n]


def _fw_sum(ins, attrs):
    x = ins[0]
    out = x.sum(axis=attrs.get("axis"), keepdims=attrs.get("keepdims", False))
    return np.asarray(out, dtype=np.float64).reshape(_reduced_shape(x.shape, attrs.get("axis"), attrs.get("keepdims", False)))


def _bw_sum(g, ins, out, attrs):
    x = ins[0]
    return [_expand_reduced(g, x.shape, attrs.get("axis"), attrs.get("keepdims", False))]


def _bw_concat(g, ins, out, attrs):
    ax = attrs["axis"] % g.ndim
    cuts = np.cumsum([x.shape[ax] for x in ins])[:-1]
    return list(np.split(g, cuts, axis=ax))


def _bw_l2n(g, ins, out, attrs):
    x = ins[0]
    norm = np.sqrt((x * x).sum(axis=-1, keepdims=True))
    y = out
    return [(g - y * (g * y).sum(axis=-1, keepdims=True)) / norm]


def _fw_cosine(ins, attrs):
    a, b = ins
    # clipped so roundoff never leaves [-1, 1]
    out = np.clip((_l2n(a) * _l2n(b)).sum(axis=-1), -1.0, 1.0)
    return out.reshape(a.shape[:-1] or (1,))


def _bw_cosine(g, ins, out, attrs):
    a, b = ins
    na = np.sqrt((a * a).sum(axis=-1, keepdims=True))
    nb = np.sqrt((b * b).sum(axis=-1, keepdims=True))
    ua, ub = a / na, b / nb
    c = out.reshape(a.shape[:-1] + (1,))
    ge = g.reshape(a.shape[:-1] + (1,))
    return [ge * (ub - c * ua) / na, ge * (ua - c * ub) / nb]


def _bw_bilinear(g, ins, out, attrs):
    gimg, goff = K.bilinear_sample_grads(ins[0], ins[1], g)
    return [gimg, goff]


def _fw_ste(ins, attrs):
    if attrs.get("_surrogate"):
        return ins[0] / attrs["C"]
    return K.ste_quantize(ins[0], attrs["C"])


OPS: dict[str, Op] = {
    "constant": Op(0, None, None, None),
    "parameter": Op(0, None, None, None),
    "add": Op(2, _shape_broadcast, lambda i, a: i[0] + i[1], _bw_add),
    "subtract": Op(2, _shape_broadcast, lambda i, a: i[0] - i[1], _bw_sub),
    "multiply": Op(2, _shape_broadcast, lambda i, a: i[0] * i[1], _bw_mul),
    "matmul": Op(2, _infer_matmul, lambda i, a: i[0] @ i[1], _bw_matmul),
    "correlate2d": Op(2, _infer_correlate, lambda i, a: K.correlate2d(i[0], i[1], a["stride"], a["pad"]), _bw_correlate),
    "transposed_correlate2d": Op(2, _infer_tconv, _fw_tconv, _bw_tconv),
    "relu": Op(1, _same, lambda i, a: np.maximum(i[0], 0.0), lambda g, i, o, a: [g * (i[0] > 0)]),
    "leaky_relu": Op(1, _same, _fw_leaky, _bw_leaky),
    "sigmoid": Op(1, _same, _fw_sigmoid, lambda g, i, o, a: [g * o * (1.0 - o)]),
    "tanh": Op(1, _same, lambda i, a: np.tanh(i[0]), lambda g, i, o, a: [g * (1.0 - o * o)]),
    "log1p": Op(1, _same, lambda i, a: np.log1p(i[0]), lambda g, i, o, a: [g / (1.0 + i[0])]),
    "mean": Op(1, _infer_reduce, _fw_mean, _bw_mean),
    "sum": Op(1, _infer_reduce, _fw_sum, _bw_sum),
    "concat": Op(None, _infer_concat, lambda i, a: np.concatenate(i, axis=a["axis"]), _bw_concat),
    "reshape": Op(1, _infer_reshape, lambda i, a: i[0].reshape(a["_shape"]), lambda g, i, o, a: [g.reshape(i[0].shape)]),
    "upsample2x": Op(1, _infer_upsample, lambda i, a: K.upsample2x(i[0]), lambda g, i, o, a: [K.upsample2x_grad(g)]),
    "avg_pool": Op(1, _infer_avgpool, lambda i, a: K.avg_pool2(i[0]), lambda g, i, o, a: [K.avg_pool2_grad(g)]),
    "global_avg_pool": Op(
        1, _infer_gap, lambda i, a: i[0].mean(axis=(1, 2)),
        lambda g, i, o, a: [np.broadcast_to(g[:, None, None, :], i[0].shape) / (i[0].shape[1] * i[0].shape[2])],
    ),
    "l2_normalize": Op(1, _same, lambda i, a: _l2n(i[0]), _bw_l2n),
    "cosine_similarity": Op(2, _infer_cosine, _fw_cosine, _bw_cosine),
    "bilinear_sample": Op(2, _infer_bilinear, lambda i, a: K.bilinear_sample(i[0], i[1]), _bw_bilinear),
    "ste_quantize": Op(1, _same, _fw_ste, lambda g, i, o, a: [g / a["C"]]),
    "detach": Op(1, _same, lambda i, a: i[0], None),
}

KINDS = frozenset(OPS)
DIFFERENTIABLE_KINDS = frozenset(k for k, op in OPS.items() if op.backward is not None)


# ---------------------------------------------------------------------------


class Node:
    __slots__ = ("graph", "name", "kind", "inputs", "attrs", "tensor", "value", "index", "needs_grad")

    def __init__(self, graph, name, kind, inputs, attrs, tensor=None, value=None):
        self.graph = graph
        self.name = name
        self.kind = kind
        self.inputs: tuple[Node, ...] = tuple(inputs)
        self.attrs = attrs
        self.tensor = tensor
        self.value = value
        self.index = len(graph.nodes)
        if kind == "parameter":
            self.needs_grad = tensor.requires_grad
        elif kind in ("constant", "detach") or OPS[kind].backward is None:
            self.needs_grad = False
        else:
            self.needs_grad = any(n.needs_grad for n in self.inputs)

    def __repr__(self):
        return f"Node({self.name!r}, {self.kind})"

    def __add__(self, other):
        return self.graph.add(self, other)

    def __radd__(self, other):
        return self.graph.add(other, self)

    def __sub__(self, other):
        return self.graph.subtract(self, other)

    def __rsub__(self, other):
        return self.graph.subtract(other, self)

    def __mul__(self, other):
        return self.graph.multiply(self, other)

    def __rmul__(self, other):
        return self.graph.multiply(other, self)

    def __neg__(self):
        return self.graph.multiply(self, -1.0)

    def __matmul__(self, other):
        return self.graph.matmul(self, other)


NodeLike = Any


class Graph:
    """Acyclic computation graph; nodes are appended in topological order."""

    def __init__(self):
        self.nodes: list[Node] = []
        self._by_name: dict[str, Node] = {}
        self._param_nodes: dict[int, Node] = {}
        self._shapes: dict[str, tuple] | None = None
        self._shape_key = None
        self._values: list[np.ndarray] | None = None
        self.backward_order: list[str] = []

    # -- construction -------------------------------------------------------

    def _unique(self, name: str | None, kind: str) -> str:
        if name is None:
            name = f"{kind}_{len(self.nodes)}"
        if name in self._by_name:
            raise GraphError(f"duplicate node name {name!r}")
        return name

    def _add(self, kind: str, inputs: Sequence[NodeLike], name: str | None = None, **attrs) -> Node:
        if kind not in KINDS:
            raise GraphError(f"unknown node kind {kind!r}")
        ins = [self._as_node(x) for x in inputs]
        node = Node(self, self._unique(name, kind), kind, ins, attrs)
        self._register(node)
        return node

    def _register(self, node: Node) -> None:
        self.nodes.append(node)
        self._by_name[node.name] = node
        self._shapes = None

    def _as_node(self, x: NodeLike) -> Node:
        if isinstance(x, Node):
            if x.graph is not self:
                raise GraphError(f"node {x.name!r} belongs to another graph")
            return x
        if isinstance(x, str):
            return self[x]
        return self.constant(x)

    def __getitem__(self, name: str) -> Node:
        return self._by_name[name]

    def __contains__(self, name: str) -> bool:
        return name in self._by_name

    def constant(self, value=None, name: str | None = None) -> Node:
        """Fixed constant, or a named placeholder when ``value`` is None."""
        if value is None and name is None:
            raise GraphError("a placeholder constant needs a name")
        arr = None
        if value is not None:
            arr = np.array(value, dtype=np.float64)
            if arr.ndim == 0:
                arr = arr.reshape(1)
        node = Node(self, self._unique(name, "constant"), "constant", (), {}, value=arr)
        self._register(node)
        return node

    def input(self, name: str) -> Node:
        return self.constant(None, name=name)

    def param(self, tensor: Tensor, name: str | None = None) -> Node:
        """Parameter node for ``tensor``; the same tensor maps to one node."""
        node = self._param_nodes.get(id(tensor))
        if node is not None:
            return node
        name = self._unique(name or tensor.name, "parameter")
        node = Node(self, name, "parameter", (), {}, tensor=tensor)
        self._register(node)
        self._param_nodes[id(tensor)] = node
        return node

    def parameters(self) -> list[Tensor]:
        return [n.tensor for n in self.nodes if n.kind == "parameter"]

    def add(self, a, b, name=None):
        return self._add("add", (a, b), name)

    def subtract(self, a, b, name=None):
        return self._add("subtract", (a, b), name)

    def multiply(self, a, b, name=None):
        return self._add("multiply", (a, b), name)

    def matmul(self, a, b, name=None):
        return self._add("matmul", (a, b), name)

    def correlate2d(self, x, w, stride=1, pad=0, name=None):
        return self._add("correlate2d", (x, w), name, stride=stride, pad=pad)

    def transposed_correlate2d(self, y, w, stride=1, pad=0, out_hw=None, name=None):
        return self._add("transposed_correlate2d", (y, w), name, stride=stride, pad=pad, out_hw=out_hw)

    def relu(self, x, name=None):
        return self._add("relu", (x,), name)

    def leaky_relu(self, x, name=None):
        return self._add("leaky_relu", (x,), name, slope=0.2)

    def sigmoid(self, x, name=None):
        return self._add("sigmoid", (x,), name)

    def tanh(self, x, name=None):
        return self._add("tanh", (x,), name)

    def log1p(self, x, name=None):
        return self._add("log1p", (x,), name)

    def mean(self, x, axis=None, keepdims=False, name=None):
        return self._add("mean", (x,), name, axis=axis, keepdims=keepdims)

    def sum(self, x, axis=None, keepdims=False, name=None):
        return self._add("sum", (x,), name, axis=axis, keepdims=keepdims)

    def concat(self, xs, axis=-1, name=None):
        return self._add("concat", tuple(xs), name, axis=axis)

    def reshape(self, x, shape, name=None):
        return self._add("reshape", (x,), name, shape=tuple(shape))

    def upsample2x(self, x, name=None):
        return self._add("upsample2x", (x,), name)

    def avg_pool(self, x, name=None):
        return self._add("avg_pool", (x,), name)

    def global_avg_pool(self, x, name=None):
        return self._add("global_avg_pool", (x,), name)

    def l2_normalize(self, x, name=None):
        return self._add("l2_normalize", (x,), name)

    def cosine_similarity(self, a, b, name=None):
        return self._add("cosine_similarity", (a, b), name)

    def bilinear_sample(self, img, offsets, name=None):
        return self._add("bilinear_sample", (img, offsets), name)

    def ste_quantize(self, x, C: float, name=None):
        if not C > 0:
            raise ValueError(f"quantization threshold must be positive, got {C}")
        return self._add("ste_quantize", (x,), name, C=float(C))

    def detach(self, x, name=None):
        return self._add("detach", (x,), name)

    # -- evaluation ---------------------------------------------------------

    def infer_shapes(self, bindings: Mapping[str, Any]) -> dict[str, tuple]:
        key = tuple(sorted((k, np.shape(v.data if isinstance(v, Tensor) else v)) for k, v in bindings.items()))
        if self._shapes is not None and self._shape_key == key:
            return self._shapes
        shapes: dict[str, tuple] = {}
        for node in self.nodes:
            if node.kind == "constant":
                if node.value is not None:
                    shapes[node.name] = node.value.shape
                elif node.name in bindings:
                    v = bindings[node.name]
                    s = np.shape(v.data if isinstance(v, Tensor) else v)
                    shapes[node.name] = s if s else (1,)
                else:
                    raise UnboundInputError(f"input {node.name!r} is not bound")
                continue
            if node.kind == "parameter":
                shapes[node.name] = node.tensor.shape
                continue
            op = OPS[node.kind]
            in_shapes = [shapes[n.name] for n in node.inputs]
            if op.arity is not None and len(in_shapes) != op.arity:
                raise ShapeError(node.name, f"expected {op.arity} inputs, got {len(in_shapes)}")
            try:
                shapes[node.name] = tuple(op.infer(in_shapes, node.attrs))
            except ValueError as exc:
                raise ShapeError(node.name, str(exc)) from None
            if node.kind == "reshape":
                node.attrs["_shape"] = shapes[node.name]
        self._shapes = shapes
        self._shape_key = key
        return shapes

    def run(self, bindings: Mapping[str, Any], surrogate: bool = False) -> None:
        """Evaluate every node. ``surrogate`` swaps quantizers for their
        straight-through linear map (used by the gradient checker)."""
        shapes = self.infer_shapes(bindings)
        values: list[np.ndarray] = [None] * len(self.nodes)  # type: ignore[list-item]
        for node in self.nodes:
            if node.kind == "constant":
                v = node.value
                if v is None:
                    b = bindings[node.name]
                    v = np.asarray(b.data if isinstance(b, Tensor) else b, dtype=np.float64)
                    if v.ndim == 0:
                        v = v.reshape(1)
            elif node.kind == "parameter":
                v = node.tensor.data
            else:
                ins = [values[n.index] for n in node.inputs]
                attrs = node.attrs
                if surrogate and node.kind == "ste_quantize":
                    attrs = dict(attrs, _surrogate=True)
                v = OPS[node.kind].forward(ins, attrs)
            if v.shape != shapes[node.name]:
                raise ShapeError(node.name, f"produced {v.shape}, inferred {shapes[node.name]}")
            if not np.isfinite(v).all():
                bad = tuple(int(i) for i in np.argwhere(~np.isfinite(v))[0])
                raise NonFiniteError(node.name, bad)
            values[node.index] = v
        self._values = values

    def value(self, node: NodeLike) -> np.ndarray:
        if self._values is None:
            raise ForwardNotRunError("forward_eval has not been run on this graph")
        return self._values[self._as_node(node).index]

    def backward(self, loss: NodeLike, accumulate: bool = True) -> None:
        """Propagate d(loss)/d(node) and write parameter gradients."""
        if self._values is None:
            raise ForwardNotRunError("forward_eval has not been run on this graph")
        loss = self._as_node(loss)
        lv = self._values[loss.index]
        if lv.size != 1:
            raise LossNotScalarError(f"loss node {loss.name!r} has shape {lv.shape}")
        grads: dict[int, np.ndarray] = {loss.index: np.ones_like(lv)}
        order = []
        for node in reversed(self.nodes[: loss.index + 1]):
            g = grads.pop(node.index, None)
            order.append(node.name)
            if g is None or not node.needs_grad:
                continue
            if node.kind == "parameter":
                t = node.tensor
                if accumulate and t.grad is not None:
                    t.grad = t.grad + g
                else:
                    t.grad = np.array(g, dtype=np.float64)
                continue
            ins = [self._values[n.index] for n in node.inputs]
            in_grads = OPS[node.kind].backward(g, ins, self._values[node.index], node.attrs)
            for inp, gi in zip(node.inputs, in_grads):
                if not inp.needs_grad:
                    continue
                gi = np.asarray(gi, dtype=np.float64)
                if inp.index in grads:
                    grads[inp.index] = grads[inp.index] + gi
                else:
                    grads[inp.index] = gi
        self.backward_order = order


def forward_eval(graph: Graph, bindings: Mapping[str, Any] | None = None, surrogate: bool = False) -> dict[str, Tensor]:
    """Evaluate ``graph``; returns node name -> value."""
    graph.run(bindings or {}, surrogate=surrogate)
    out = {}
    for node, v in zip(graph.nodes, graph._values):
        t = Tensor.__new__(Tensor)
        t.data, t.requires_grad, t.grad, t.name = v, False, None, node.name
        out[node.name] = t
    return out


def backward(graph: Graph, loss: NodeLike) -> None:
    graph.backward(loss)


def zero_grad(params: Sequence[Tensor]) -> None:
    for p in params:
        p.grad = None
