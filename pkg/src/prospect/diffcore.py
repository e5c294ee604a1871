"""Reverse-mode differentiation over dense numpy arrays.

A :class:`Graph` records every primitive application as a node in
topological order.  :func:`backward` walks the node list once in reverse,
summing gradient contributions over all uses of a value.  Convolution
kernels delegate the raw arithmetic to ``torch.ops.aten``; everything else
is plain numpy.

Layout conventions: images and feature maps are ``(N, C, H, W)``; dense
activations are ``(N, features)``; convolution weights are
``(out, in, kh, kw)``.
"""

from __future__ import annotations

import io
import struct
import weakref
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy.special import expit
import torch

torch.use_deterministic_algorithms(True)

PRECISIONS = {"single": np.float32, "double": np.float64}


class ShapeError(ValueError):
    """Raised when operand shapes do not satisfy a primitive's shape rule."""


def _contiguous(array, dtype) -> np.ndarray:
    out = np.asarray(array, dtype=dtype)
    return out if out.flags.c_contiguous else out.copy(order="C")


class Tensor:
    """A value recorded in a :class:`Graph`.

    ``value`` is a C-ordered numpy array, so ``data`` (the flat row-major
    view) always has ``prod(shape)`` entries.
    """

    __slots__ = ("value", "_graph", "index", "requires_grad")

    def __init__(self, value: np.ndarray, graph: "Graph", index: int, requires_grad: bool):
        self.value = value
        # weak, so a finished graph and its saved activations are freed at once
        self._graph = weakref.ref(graph)
        self.index = index
        self.requires_grad = requires_grad

    @property
    def graph(self) -> "Graph":
        g = self._graph()
        if g is None:
            raise RuntimeError("the graph that recorded this tensor no longer exists")
        return g

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def data(self) -> np.ndarray:
        return self.value.reshape(-1)

    @property
    def precision(self) -> str:
        return self.graph.precision

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.graph.nodes[self.index].op})"

    def __add__(self, other):
        return apply_primitive("add", [self, other])

    def __radd__(self, other):
        return apply_primitive("add", [other, self])

    def __sub__(self, other):
        return apply_primitive("subtract", [self, other])

    def __rsub__(self, other):
        return apply_primitive("subtract", [other, self])

    def __mul__(self, other):
        return apply_primitive("multiply", [self, other])

    def __rmul__(self, other):
        return apply_primitive("multiply", [other, self])

    def __truediv__(self, other):
        return apply_primitive("divide", [self, other])

    def __neg__(self):
        return apply_primitive("negate", [self])

    def __matmul__(self, other):
        return apply_primitive("matmul", [self, other])

    def __getitem__(self, index):
        return apply_primitive("slice", [self], index=index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return apply_primitive("reshape", [self], shape=shape)


@dataclass
class Node:
    op: str
    inputs: tuple[int, ...]
    attrs: dict = field(default_factory=dict)
    saved: object = None


class Graph:
    """Records primitive applications for one forward pass.

    A graph belongs to a single thread of control; build a fresh one per
    forward/backward pass.
    """

    def __init__(self, precision: str = "single"):
        if precision not in PRECISIONS:
            raise ValueError(f"unknown precision {precision!r}")
        self.precision = precision
        self.dtype = PRECISIONS[precision]
        self.nodes: list[Node] = []
        self.tensors: list[Tensor] = []
        self.parameters: dict[str, int] = {}

    def _record(self, node: Node, value: np.ndarray, requires_grad: bool) -> Tensor:
        t = Tensor(value, self, len(self.nodes), requires_grad)
        self.nodes.append(node)
        self.tensors.append(t)
        return t

    def parameter(self, name: str, array: np.ndarray) -> Tensor:
        """Register a trainable leaf.  The array is copied in graph precision."""
        if name in self.parameters:
            return self.tensors[self.parameters[name]]
        value = np.array(array, dtype=self.dtype, order="C", copy=True)
        t = self._record(Node("parameter", (), {"name": name}), value, True)
        self.parameters[name] = t.index
        return t

    def constant(self, array) -> Tensor:
        value = _contiguous(array, self.dtype)
        return self._record(Node("constant", ()), value, False)

    def bind(self, weights: Mapping[str, np.ndarray]) -> dict[str, Tensor]:
        return {name: self.parameter(name, arr) for name, arr in weights.items()}

    def apply(self, op: str, inputs: list, **attrs) -> Tensor:
        if op not in PRIMITIVES:
            raise KeyError(f"unknown primitive {op!r}")
        forward, _ = PRIMITIVES[op]
        tensors = [x if isinstance(x, Tensor) else self.constant(x) for x in inputs]
        for x in tensors:
            if x.graph is not self:
                raise ValueError("operands belong to different graphs")
        values = [x.value for x in tensors]
        out, saved = forward(attrs, *values)
        out = _contiguous(out, self.dtype)
        requires_grad = any(x.requires_grad for x in tensors)
        node = Node(op, tuple(x.index for x in tensors), attrs, saved if requires_grad else None)
        return self._record(node, out, requires_grad)


def apply_primitive(op: str, inputs: list, **attrs) -> Tensor:
    """Apply primitive ``op`` and record it in the graph owning the inputs."""
    graph = next((x.graph for x in inputs if isinstance(x, Tensor)), None)
    if graph is None:
        raise ValueError(f"{op}: at least one operand must be a graph Tensor")
    return graph.apply(op, inputs, **attrs)


def stop_gradient(x: Tensor) -> Tensor:
    return x.graph.constant(x.value)


def backward(graph: Graph, loss: Tensor) -> dict[str, np.ndarray]:
    """Gradients of scalar ``loss`` with respect to every graph parameter."""
    if loss.graph is not graph:
        raise ValueError("loss does not belong to this graph")
    if loss.value.size != 1 or loss.value.ndim > 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: list[np.ndarray | None] = [None] * len(graph.nodes)
    grads[loss.index] = np.ones_like(loss.value)
    for i in range(loss.index, -1, -1):
        g = grads[i]
        if g is None:
            continue
        node = graph.nodes[i]
        if not node.inputs:
            continue
        grads[i] = None  # interior gradients are no longer needed
        inputs = [graph.tensors[j] for j in node.inputs]
        needs = [x.requires_grad for x in inputs]
        if not any(needs):
            continue
        _, backward_fn = PRIMITIVES[node.op]
        values = [x.value for x in inputs]
        contributions = backward_fn(node.attrs, node.saved, g, values, needs)
        for x, need, gx in zip(inputs, needs, contributions):
            if not need or gx is None:
                continue
            gx = np.asarray(gx, dtype=graph.dtype)
            if gx.shape != x.value.shape:
                raise ShapeError(f"{node.op}: gradient shape {gx.shape} != operand shape {x.value.shape}")
            grads[x.index] = gx if grads[x.index] is None else grads[x.index] + gx
    out = {}
    for name, idx in graph.parameters.items():
        g = grads[idx]
        out[name] = np.zeros_like(graph.tensors[idx].value) if g is None else g
    return out


# --------------------------------------------------------------------------
# primitives: forward(attrs, *values) -> (out, saved)
#             backward(attrs, saved, grad_out, values, needs) -> grads
# --------------------------------------------------------------------------

PRIMITIVES: dict[str, tuple[Callable, Callable]] = {}


def _primitive(name: str):
    def register(cls):
        PRIMITIVES[name] = (cls.forward, cls.backward)
        return cls

    return register


def _broadcast_shape(op: str, *shapes) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(*shapes)
    except ValueError:
        raise ShapeError(f"{op}: shapes {' and '.join(map(str, shapes))} are not broadcast-compatible") from None


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


@_primitive("add")
class _Add:
    def forward(attrs, a, b):
        _broadcast_shape("add", a.shape, b.shape)
        return a + b, None

    def backward(attrs, saved, g, values, needs):
        a, b = values
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)


@_primitive("subtract")
class _Subtract:
    def forward(attrs, a, b):
        _broadcast_shape("subtract", a.shape, b.shape)
        return a - b, None

    def backward(attrs, saved, g, values, needs):
        a, b = values
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)


@_primitive("multiply")
class _Multiply:
    def forward(attrs, a, b):
        _broadcast_shape("multiply", a.shape, b.shape)
        return a * b, None

    def backward(attrs, saved, g, values, needs):
        a, b = values
        ga = _unbroadcast(g * b, a.shape) if needs[0] else None
        gb = _unbroadcast(g * a, b.shape) if needs[1] else None
        return ga, gb


@_primitive("divide")
class _Divide:
    def forward(attrs, a, b):
        _broadcast_shape("divide", a.shape, b.shape)
        return a / b, None

    def backward(attrs, saved, g, values, needs):
        a, b = values
        ga = _unbroadcast(g / b, a.shape) if needs[0] else None
        gb = _unbroadcast(-g * a / (b * b), b.shape) if needs[1] else None
        return ga, gb


@_primitive("negate")
class _Negate:
    def forward(attrs, a):
        return -a, None

    def backward(attrs, saved, g, values, needs):
        return (-g,)


@_primitive("matmul")
class _Matmul:
    """``a @ b`` with ``b`` two-dimensional; ``a`` may carry leading batch axes."""

    def forward(attrs, a, b):
        if b.ndim != 2 or a.ndim < 1 or a.shape[-1] != b.shape[0]:
            raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not conform")
        return a @ b, None

    def backward(attrs, saved, g, values, needs):
        a, b = values
        ga = g @ b.T if needs[0] else None
        gb = None
        if needs[1]:
            gb = a.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        return ga, gb


@_primitive("relu")
class _Relu:
    def forward(attrs, a):
        return np.maximum(a, 0), None

    def backward(attrs, saved, g, values, needs):
        return (g * (values[0] > 0),)


@_primitive("tanh")
class _Tanh:
    def forward(attrs, a):
        out = np.tanh(a)
        return out, out

    def backward(attrs, saved, g, values, needs):
        return (g * (1 - saved * saved),)


@_primitive("sigmoid")
class _Sigmoid:
    def forward(attrs, a):
        out = expit(a)
        return out, out

    def backward(attrs, saved, g, values, needs):
        return (g * saved * (1 - saved),)


@_primitive("exp")
class _Exp:
    def forward(attrs, a):
        out = np.exp(a)
        return out, out

    def backward(attrs, saved, g, values, needs):
        return (g * saved,)


@_primitive("log")
class _Log:
    def forward(attrs, a):
        return np.log(a), None

    def backward(attrs, saved, g, values, needs):
        return (g / values[0],)


@_primitive("abs")
class _Abs:
    def forward(attrs, a):
        return np.abs(a), None

    def backward(attrs, saved, g, values, needs):
        return (g * np.sign(values[0]),)


@_primitive("clip")
class _Clip:
    """Clamp to ``[lo, hi]``; gradient passes only where the input is inside."""

    def forward(attrs, a):
        return np.clip(a, attrs.get("lo", -np.inf), attrs.get("hi", np.inf)), None

    def backward(attrs, saved, g, values, needs):
        a = values[0]
        inside = (a >= attrs.get("lo", -np.inf)) & (a <= attrs.get("hi", np.inf))
        return (g * inside,)


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


@_primitive("sum")
class _Sum:
    def forward(attrs, a):
        return np.sum(a, axis=attrs.get("axis"), keepdims=attrs.get("keepdims", False)), None

    def backward(attrs, saved, g, values, needs):
        a = values[0]
        axes = _norm_axis(attrs.get("axis"), a.ndim)
        if not attrs.get("keepdims", False):
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape),)


@_primitive("mean")
class _Mean:
    def forward(attrs, a):
        return np.mean(a, axis=attrs.get("axis"), keepdims=attrs.get("keepdims", False)), None

    def backward(attrs, saved, g, values, needs):
        a = values[0]
        axes = _norm_axis(attrs.get("axis"), a.ndim)
        count = int(np.prod([a.shape[i] for i in axes]))
        if not attrs.get("keepdims", False):
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, a.shape),)


class _Extremum:
    """Max/min over one axis; the gradient goes to the first extremal index."""

    pick = staticmethod(np.argmax)

    @classmethod
    def forward(cls, attrs, a):
        axis = attrs.get("axis", -1)
        idx = cls.pick(a, axis=axis)
        out = np.take_along_axis(a, np.expand_dims(idx, axis), axis=axis)
        if not attrs.get("keepdims", False):
            out = np.squeeze(out, axis=axis)
        return out, idx

    @classmethod
    def backward(cls, attrs, idx, g, values, needs):
        a = values[0]
        axis = attrs.get("axis", -1)
        if not attrs.get("keepdims", False):
            g = np.expand_dims(g, axis)
        out = np.zeros_like(a)
        np.put_along_axis(out, np.expand_dims(idx, axis), g, axis=axis)
        return (out,)


@_primitive("max")
class _Max(_Extremum):
    pick = staticmethod(np.argmax)


@_primitive("min")
class _Min(_Extremum):
    pick = staticmethod(np.argmin)


@_primitive("concat")
class _Concat:
    def forward(attrs, *arrays):
        axis = attrs.get("axis", 0)
        ref = arrays[0].shape
        for x in arrays[1:]:
            if x.ndim != len(ref) or any(
                p != q for i, (p, q) in enumerate(zip(ref, x.shape)) if i != axis % len(ref)
            ):
                raise ShapeError(f"concat: shapes {[a.shape for a in arrays]} disagree off axis {axis}")
        return np.concatenate(arrays, axis=axis), None

    def backward(attrs, saved, g, values, needs):
        axis = attrs.get("axis", 0)
        splits = np.cumsum([v.shape[axis] for v in values])[:-1]
        return tuple(np.split(g, splits, axis=axis))


@_primitive("slice")
class _Slice:
    def forward(attrs, a):
        return a[attrs["index"]], None

    def backward(attrs, saved, g, values, needs):
        out = np.zeros_like(values[0])
        if _fancy(attrs["index"]):
            np.add.at(out, attrs["index"], g)
        else:
            out[attrs["index"]] = g
        return (out,)


def _fancy(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


@_primitive("reshape")
class _Reshape:
    def forward(attrs, a):
        try:
            return a.reshape(attrs["shape"]), None
        except ValueError:
            raise ShapeError(f"reshape: cannot reshape {a.shape} to {attrs['shape']}") from None

    def backward(attrs, saved, g, values, needs):
        return (g.reshape(values[0].shape),)


@_primitive("transpose")
class _Transpose:
    def forward(attrs, a):
        return np.transpose(a, attrs["axes"]), None

    def backward(attrs, saved, g, values, needs):
        return (np.transpose(g, np.argsort(attrs["axes"])),)


@_primitive("broadcast")
class _Broadcast:
    def forward(attrs, a):
        shape = tuple(attrs["shape"])
        if _broadcast_shape("broadcast", a.shape, shape) != shape:
            raise ShapeError(f"broadcast: {a.shape} cannot expand to {shape}")
        return np.broadcast_to(a, shape), None

    def backward(attrs, saved, g, values, needs):
        return (_unbroadcast(g, values[0].shape),)


@_primitive("softmax")
class _Softmax:
    def forward(attrs, a):
        axis = attrs.get("axis", -1)
        z = a - a.max(axis=axis, keepdims=True)
        e = np.exp(z)
        out = e / e.sum(axis=axis, keepdims=True)
        return out, out

    def backward(attrs, saved, g, values, needs):
        axis = attrs.get("axis", -1)
        s = saved
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)


@_primitive("upsample2")
class _Upsample2:
    """Nearest-neighbour x2 upsampling of the two trailing axes."""

    def forward(attrs, a):
        return a.repeat(2, axis=-2).repeat(2, axis=-1), None

    def backward(attrs, saved, g, values, needs):
        s = g.shape
        return (g.reshape(*s[:-2], s[-2] // 2, 2, s[-1] // 2, 2).sum(axis=(-3, -1)),)


def _t(x: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(x))


def _conv_forward(x, w, stride, padding):
    return torch.ops.aten.convolution(
        _t(x), _t(w), None, [stride, stride], [padding, padding], [1, 1], False, [0, 0], 1
    ).numpy()


def _conv_backward(g, x, w, stride, padding, needs):
    gx, gw, _ = torch.ops.aten.convolution_backward(
        _t(g), _t(x), _t(w), None, [stride, stride], [padding, padding], [1, 1],
        False, [0, 0], 1, [bool(needs[0]), bool(needs[1]), False],
    )
    return (gx.numpy() if needs[0] else None, gw.numpy() if needs[1] else None)


# A 5x5 pad-2 convolution at stride 1 or 2 on an even-sized map can run at half
# resolution on the space-to-depth rearranged input (channel c*4 + 2p + q holds
# pixel phase (p, q)) with a 3x3 pad-1 kernel.  Stride 1 produces the four
# output phases as channels o*4 + 2a + b; stride 2 keeps only phase (0, 0).
# torch's kernels are slow on high-resolution maps with few output channels, so
# the rearranged form is used there.
_S2D = np.zeros((2, 2, 3, 5))  # [a, p, d, tap]
for _a in range(2):
    for _p in range(2):
        for _d in range(3):
            _k = 2 * (_d - 1) + _p - _a + 2
            if 0 <= _k < 5:
                _S2D[_a, _p, _d, _k] = 1.0


def _space_to_depth(x):
    n, c, h, w = x.shape
    return np.ascontiguousarray(
        x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 3, 5, 2, 4).reshape(n, c * 4, h // 2, w // 2)
    )


def _depth_to_space(y, channels):
    n, _, h, w = y.shape
    return np.ascontiguousarray(
        y.reshape(n, channels, 2, 2, h, w).transpose(0, 1, 4, 2, 5, 3).reshape(n, channels, 2 * h, 2 * w)
    )


def _s2d_weights(w, stride):
    s = _S2D[: 3 - stride].astype(w.dtype)  # output phases a in {0, 1} or {0}
    o, c = w.shape[:2]
    k = s.shape[0]
    folded = np.einsum("apdi,ocij,bqej->oabcpqde", s, w, s)
    return np.ascontiguousarray(folded.reshape(o * k * k, c * 4, 3, 3))


def _s2d_unfold(gf, shape, stride):
    s = _S2D[: 3 - stride].astype(gf.dtype)
    o, c = shape[:2]
    k = s.shape[0]
    return np.einsum("apdi,oabcpqde,bqej->ocij", s, gf.reshape(o, k, k, c, 2, 2, 3, 3), s)


def _use_s2d(x_shape, w_shape, stride, padding) -> bool:
    _, c, h, w = x_shape
    return (
        w_shape[2:] == (5, 5) and padding == 2 and stride == 1
        and h % 2 == 0 and w % 2 == 0 and h * w >= 1024 and w_shape[0] < c
    )


@_primitive("conv2d")
class _Conv2d:
    """Cross-correlation of ``(N, C, H, W)`` input with ``(O, C, k, k)`` weights."""

    def forward(attrs, x, w):
        if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
            raise ShapeError(f"conv2d: input {x.shape} and weights {w.shape} do not conform")
        stride, padding = attrs.get("stride", 1), attrs.get("padding", 0)
        if _use_s2d(x.shape, w.shape, stride, padding):
            wf = _s2d_weights(w, stride)
            y = _conv_forward(_space_to_depth(x), wf, 1, 1)
            return (_depth_to_space(y, w.shape[0]) if stride == 1 else y), wf
        return _conv_forward(x, w, stride, padding), None

    def backward(attrs, wf, g, values, needs):
        x, w = values
        stride, padding = attrs.get("stride", 1), attrs.get("padding", 0)
        if wf is None:
            return _conv_backward(g, x, w, stride, padding, needs)
        gy = _space_to_depth(g) if stride == 1 else g
        gxs, gwf = _conv_backward(gy, _space_to_depth(x), wf, 1, 1, needs)
        gx = _depth_to_space(gxs, x.shape[1]) if needs[0] else None
        gw = _s2d_unfold(gwf, w.shape, stride) if needs[1] else None
        return gx, gw


# A 5x5 pad-2 convolution applied to a nearest-upsampled map equals, for each of
# the four output phases, a 3x3 pad-1 convolution at the input resolution with
# kernel taps summed by these row/column folding matrices.
_FOLD = np.array(
    [
        [[1, 1, 0, 0, 0], [0, 0, 1, 1, 0], [0, 0, 0, 0, 1]],
        [[1, 0, 0, 0, 0], [0, 1, 1, 0, 0], [0, 0, 0, 1, 1]],
    ],
    dtype=np.float64,
)


def _fold_weights(w):
    # (O, C, 5, 5) -> (O*4, C, 3, 3), output channel o*4 + (2a + b)
    f = _FOLD.astype(w.dtype)
    folded = np.einsum("api,ocij,bqj->oabcpq", f, w, f)
    o, c = w.shape[:2]
    return np.ascontiguousarray(folded.reshape(o * 4, c, 3, 3))


def _unfold_weights(gf, shape):
    f = _FOLD.astype(gf.dtype)
    o, c = shape[:2]
    return np.einsum("api,oabcpq,bqj->ocij", f, gf.reshape(o, 2, 2, c, 3, 3), f)


@_primitive("upconv2d")
class _UpConv2d:
    """``conv2d(upsample2(x), w, padding=2)`` for 5x5 ``w``, computed at low resolution."""

    def forward(attrs, x, w):
        if x.ndim != 4 or w.shape[1:] != (x.shape[1], 5, 5):
            raise ShapeError(f"upconv2d: input {x.shape} and weights {w.shape} do not conform")
        wf = _fold_weights(w)
        y = _conv_forward(x, wf, 1, 1)
        n, _, h, wd = y.shape
        out = y.reshape(n, w.shape[0], 2, 2, h, wd).transpose(0, 1, 4, 2, 5, 3)
        return out.reshape(n, w.shape[0], 2 * h, 2 * wd), wf

    def backward(attrs, wf, g, values, needs):
        x, w = values
        n, o, h2, w2 = g.shape
        gy = g.reshape(n, o, h2 // 2, 2, w2 // 2, 2).transpose(0, 1, 3, 5, 2, 4)
        gy = gy.reshape(n, o * 4, h2 // 2, w2 // 2)
        gx, gwf = _conv_backward(gy, x, wf, 1, 1, needs)
        gw = _unfold_weights(gwf, w.shape) if needs[1] else None
        return gx, gw


# --------------------------------------------------------------------------
# functional wrappers
# --------------------------------------------------------------------------


def relu(x):
    return apply_primitive("relu", [x])


def tanh(x):
    return apply_primitive("tanh", [x])


def sigmoid(x):
    return apply_primitive("sigmoid", [x])


def exp(x):
    return apply_primitive("exp", [x])


def log(x):
    return apply_primitive("log", [x])


def abs_(x):
    return apply_primitive("abs", [x])


def clip(x, lo=-np.inf, hi=np.inf):
    return apply_primitive("clip", [x], lo=lo, hi=hi)


def sum_(x, axis=None, keepdims=False):
    return apply_primitive("sum", [x], axis=axis, keepdims=keepdims)


def mean(x, axis=None, keepdims=False):
    return apply_primitive("mean", [x], axis=axis, keepdims=keepdims)


def max_(x, axis=-1, keepdims=False):
    return apply_primitive("max", [x], axis=axis, keepdims=keepdims)


def min_(x, axis=-1, keepdims=False):
    return apply_primitive("min", [x], axis=axis, keepdims=keepdims)


def concat(xs, axis=0):
    return apply_primitive("concat", list(xs), axis=axis)


def reshape(x, shape):
    return apply_primitive("reshape", [x], shape=tuple(shape))


def transpose(x, axes):
    return apply_primitive("transpose", [x], axes=tuple(axes))


def broadcast(x, shape):
    return apply_primitive("broadcast", [x], shape=tuple(shape))


def softmax(x, axis=-1):
    return apply_primitive("softmax", [x], axis=axis)


def conv2d(x, w, stride=1, padding=0):
    return apply_primitive("conv2d", [x, w], stride=stride, padding=padding)


def upsample2(x):
    return apply_primitive("upsample2", [x])


def upconv2d(x, w):
    return apply_primitive("upconv2d", [x, w])


# --------------------------------------------------------------------------
# finite-difference checking
# --------------------------------------------------------------------------


def relative_error(a, b) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)


@dataclass
class GradCheckReport:
    tolerance: float
    errors: dict[str, float]

    @property
    def passed(self) -> bool:
        return all(e < self.tolerance for e in self.errors.values())

    def failures(self) -> list[str]:
        return [k for k, e in self.errors.items() if not e < self.tolerance]

    def lines(self) -> list[str]:
        return [
            f"{name:40s} max_rel_err={err:.3e} {'ok' if err < self.tolerance else 'FAIL'}"
            for name, err in self.errors.items()
        ]


def grad_check(
    build: Callable[[Graph, dict[str, Tensor]], Tensor],
    params: Mapping[str, np.ndarray],
    tolerance: float = 1e-5,
    step: float = 1e-4,
    gradient_fn: Callable | None = None,
    fallback_steps: Sequence[float] = (),
) -> GradCheckReport:
    """Compare :func:`backward` against central differences, parameter by parameter.

    ``build(graph, bound)`` must construct the scalar loss from the bound
    parameters.  ``gradient_fn`` overrides the analytic route, which is how
    negative controls inject a corrupted gradient.  An entry that misses the
    tolerance is differenced again at each of ``fallback_steps`` and keeps
    the smallest error.  A narrow step clears a relu kink inside the
    ``step`` window, a wide one lifts a near-zero gradient above roundoff;
    a wrong gradient misses at every step.
    """
    params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}

    def loss_at(values) -> float:
        g = Graph("double")
        return float(build(g, g.bind(values)).value)

    if gradient_fn is None:
        g = Graph("double")
        analytic = backward(g, build(g, g.bind(params)))
        del g
    else:
        analytic = gradient_fn(params)

    def central(flat, i, h) -> float:
        orig = flat[i]
        flat[i] = orig + h
        up = loss_at(params)
        flat[i] = orig - h
        down = loss_at(params)
        flat[i] = orig
        return (up - down) / (2 * h)

    errors = {}
    for name, value in params.items():
        flat = value.reshape(-1)
        exact = np.asarray(analytic[name], dtype=np.float64).reshape(-1)
        worst = 0.0
        for i in range(flat.size):
            err = float(relative_error(exact[i], central(flat, i, step)))
            for h in fallback_steps:
                if err < tolerance:
                    break
                err = min(err, float(relative_error(exact[i], central(flat, i, h))))
            worst = max(worst, err)
        errors[name] = worst
    return GradCheckReport(tolerance, errors)


# --------------------------------------------------------------------------
# parameter checkpoints
# --------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"PWT1"


class CheckpointError(ValueError):
    pass


def checkpoint_bytes(params: Mapping[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", len(params)))
    for name, arr in params.items():
        arr = np.asarray(arr)
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return buf.getvalue()


def parse_checkpoint(blob: bytes, source: str = "<bytes>") -> dict[str, np.ndarray]:
    view = memoryview(blob)
    pos = 0

    def take(n: int) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise CheckpointError(f"{source}: truncated at byte {pos}")
        chunk = view[pos : pos + n]
        pos += n
        return chunk

    if bytes(take(4)) != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{source}: bad magic, expected {CHECKPOINT_MAGIC!r}")
    (count,) = struct.unpack("<I", take(4))
    params = {}
    for _ in range(count):
        (length,) = struct.unpack("<I", take(4))
        name = bytes(take(length)).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        size = int(np.prod(shape, dtype=np.int64))
        data = np.frombuffer(take(4 * size), dtype="<f4").astype(np.float32)
        params[name] = data.reshape(shape)
    if pos != len(view):
        raise CheckpointError(f"{source}: {len(view) - pos} trailing bytes")
    return params


def save_checkpoint(params: Mapping[str, np.ndarray], path) -> None:
    Path(path).write_bytes(checkpoint_bytes(params))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    path = Path(path)
    return parse_checkpoint(path.read_bytes(), str(path))
