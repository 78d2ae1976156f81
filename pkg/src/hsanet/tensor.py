"""Dense tensors with reverse-mode differentiation on a numpy backend.

Every differentiable op builds an output :class:`Tensor` that remembers its
parents and a closure mapping the output gradient to parent gradients.
:func:`backward` linearises that graph into a :class:`ComputeGraph` and walks
it once in reverse topological order.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ComputeGraph",
    "ConvSpec",
    "NonFiniteError",
    "ShapeError",
    "tensor",
    "backward",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "tsum",
    "reshape",
    "transpose",
    "concat",
    "relu",
    "sigmoid",
    "softmax",
    "matmul",
    "linear",
    "conv2d",
    "resample",
    "precision",
    "debug_mode",
    "set_debug",
    "get_dtype",
]


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible with an op."""


class NonFiniteError(FloatingPointError):
    """Raised in debug mode by the first op that produces NaN or Inf."""


_state = {"dtype": np.float32, "debug": False, "kink_log": None}


def get_dtype() -> type:
    return _state["dtype"]


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily change the dtype new tensors are created with.

    float32 is the working precision; float64 is used by gradient checks so
    that finite differences are not swamped by rounding.
    """
    prev = _state["dtype"]
    _state["dtype"] = np.dtype(dtype).type
    try:
        yield
    finally:
        _state["dtype"] = prev


def set_debug(enabled: bool) -> None:
    _state["debug"] = bool(enabled)


@contextlib.contextmanager
def debug_mode(enabled: bool = True) -> Iterator[None]:
    prev = _state["debug"]
    _state["debug"] = bool(enabled)
    try:
        yield
    finally:
        _state["debug"] = prev


@contextlib.contextmanager
def record_kinks() -> Iterator[list]:
    """Collect the ReLU activation pattern of every relu evaluated inside."""
    prev = _state["kink_log"]
    log: list = []
    _state["kink_log"] = log
    try:
        yield log
    finally:
        _state["kink_log"] = prev


class Tensor:
    """N-dimensional real array with optional gradient tracking."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype != _state["dtype"]:
            arr = arr.astype(_state["dtype"])
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.op = "leaf"
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    # arithmetic sugar
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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None):
        return tsum(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def backward(self) -> None:
        backward(self)


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    if _state["debug"] and not np.all(np.isfinite(data)):
        raise NonFiniteError(f"op '{op}' produced a non-finite value")
    out = Tensor.__new__(Tensor)
    dt = _state["dtype"]
    out.data = data if data.dtype == dt else data.astype(dt)
    out.grad = None
    out.requires_grad = any(p.requires_grad for p in parents)
    out._parents = tuple(parents) if out.requires_grad else ()
    out._backward = backward_fn if out.requires_grad else None
    out.op = op
    out.name = None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


# ----------------------------------------------------------------------------
# graph traversal


@dataclass
class GraphNode:
    op: str
    inputs: tuple[int, ...]
    output: int


@dataclass
class ComputeGraph:
    """Topologically ordered record of the ops leading to one output."""

    tensors: list[Tensor] = field(default_factory=list)
    nodes: list[GraphNode] = field(default_factory=list)

    @classmethod
    def trace(cls, root: Tensor) -> "ComputeGraph":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        # iterative post-order DFS; deep decoders would overflow recursion
        while stack:
            t, expanded = stack.pop()
            if expanded:
                order.append(t)
                continue
            if id(t) in seen:
                continue
            seen.add(id(t))
            stack.append((t, True))
            for p in t._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        index = {id(t): i for i, t in enumerate(order)}
        nodes = [
            GraphNode(t.op, tuple(index[id(p)] for p in t._parents), index[id(t)])
            for t in order
            if t._parents
        ]
        return cls(order, nodes)


def backward(loss: Tensor, graph: ComputeGraph | None = None) -> ComputeGraph:
    """Populate ``.grad`` on every ``requires_grad`` leaf reachable from ``loss``."""
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if graph is None:
        graph = ComputeGraph.trace(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for t in reversed(graph.tensors):
        g = grads.pop(id(t), None)
        if g is None or not t.requires_grad:
            continue
        if t._backward is None:
            t.grad = g.copy() if t.grad is None else t.grad + g
            continue
        for p, pg in zip(t._parents, t._backward(g)):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    return graph


# ----------------------------------------------------------------------------
# elementwise and structural ops


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data / b.data

    def bw(g):
        return (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * out / b.data, b.shape),
        )

    return _make(out, (a, b), bw, "div")


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), bw, "sum")


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    orig = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(orig),), "reshape")


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(
        np.ascontiguousarray(a.data.transpose(axes)),
        (a,),
        lambda g: (g.transpose(inv),),
        "transpose",
    )


def concat(parts: Sequence[Tensor], axis: int = 1) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    ref = parts[0].shape
    ax = axis % len(ref)
    for p in parts[1:]:
        if len(p.shape) != len(ref) or any(
            p.shape[i] != ref[i] for i in range(len(ref)) if i != ax
        ):
            raise ShapeError(f"concat: incompatible shapes {ref} and {p.shape} on axis {axis}")
    bounds = np.cumsum([p.shape[ax] for p in parts])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _make(np.concatenate([p.data for p in parts], axis=ax), parts, bw, "concat")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    log = _state["kink_log"]
    if log is not None:
        log.append(np.packbits(mask))
    return _make(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    if not -a.ndim <= axis < a.ndim:
        raise ShapeError(f"softmax: axis {axis} invalid for shape {a.shape}")
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (a,), bw, "softmax")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs at least 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2] or a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")

    def bw(g):
        return g @ np.swapaxes(b.data, -1, -2), np.swapaxes(a.data, -1, -2) @ g

    return _make(a.data @ b.data, (a, b), bw, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``y = W x + b`` over the last axis of ``x``; ``weight`` is (Dout, Din)."""
    x = _as_tensor(x)
    if weight.ndim != 2 or x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError(f"linear: bias {bias.shape} does not match weight {weight.shape}")
    W = weight.data
    out = x.data @ W.T
    if bias is not None:
        out = out + bias.data
    lead = x.shape[:-1]

    def bw(g):
        g2 = g.reshape(-1, g.shape[-1])
        x2 = x.data.reshape(-1, x.shape[-1])
        gx = (g2 @ W).reshape(x.shape)
        gw = g2.T @ x2
        gb = g2.sum(axis=0) if bias is not None else None
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    out_t = _make(out, parents, (lambda g: bw(g)[:2]) if bias is None else bw, "linear")
    assert out_t.shape == lead + (weight.shape[0],)
    return out_t


# ----------------------------------------------------------------------------
# convolution and resampling


@dataclass
class ConvSpec:
    """Kernel (out_ch, in_ch, kH, kW), bias (out_ch), stride and zero padding."""

    kernel: Tensor
    bias: Tensor | None = None
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        if self.kernel.ndim != 4:
            raise ShapeError(f"conv kernel must be 4-d, got {self.kernel.shape}")
        if self.bias is not None and self.bias.shape != (self.kernel.shape[0],):
            raise ShapeError(
                f"conv bias {self.bias.shape} does not match kernel {self.kernel.shape}"
            )
        if self.stride < 1 or self.padding < 0:
            raise ValueError("stride must be >= 1 and padding >= 0")

    def output_extent(self, h: int, w: int) -> tuple[int, int]:
        _, _, kh, kw = self.kernel.shape
        oh = (h + 2 * self.padding - kh) // self.stride + 1
        ow = (w + 2 * self.padding - kw) // self.stride + 1
        return oh, ow


def conv2d(x: Tensor, spec: ConvSpec) -> Tensor:
    """2-d cross-correlation (no kernel flip) with bias, stride and zero padding."""
    x = _as_tensor(x)
    K = spec.kernel.data
    O, C, kh, kw = K.shape
    if x.ndim != 4 or x.shape[1] != C:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with kernel {K.shape}")
    N, _, H, W = x.shape
    s, p = spec.stride, spec.padding
    oh, ow = spec.output_extent(H, W)
    if oh <= 0 or ow <= 0:
        raise ShapeError(
            f"conv2d: non-positive output extent {oh}x{ow} for input {x.shape} "
            f"and kernel {K.shape} (stride {s}, padding {p})"
        )
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::s, ::s][:, :, :oh, :ow]  # N C oh ow kh kw
    out = np.tensordot(win, K, axes=([1, 4, 5], [1, 2, 3]))  # N oh ow O
    out = out.transpose(0, 3, 1, 2)
    if spec.bias is not None:
        out = out + spec.bias.data[None, :, None, None]
    out = np.ascontiguousarray(out)

    def bw(g):
        gk = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))  # O C kh kw
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                # contribution of kernel tap (i, j) to every receptive field
                contrib = np.tensordot(g, K[:, :, i, j], axes=([1], [0]))  # N oh ow C
                gxp[:, :, i : i + s * oh : s, j : j + s * ow : s] += contrib.transpose(0, 3, 1, 2)
        gx = gxp[:, :, p : p + H, p : p + W] if p else gxp
        gb = g.sum(axis=(0, 2, 3)) if spec.bias is not None else None
        return gx, gk, gb

    if spec.bias is None:
        return _make(out, (x, spec.kernel), lambda g: bw(g)[:2], "conv2d")
    return _make(out, (x, spec.kernel, spec.bias), bw, "conv2d")


def resample(x: Tensor, factor: int, mode: str) -> Tensor:
    """Mean-pool (``mode='down'``) or nearest-neighbour upsample (``'up'``)."""
    if x.ndim != 4:
        raise ShapeError(f"resample expects N,C,H,W input, got {x.shape}")
    if factor < 1:
        raise ValueError(f"resample factor must be >= 1, got {factor}")
    N, C, H, W = x.shape
    f = factor
    if mode == "down":
        if H % f or W % f:
            raise ShapeError(f"resample down: extents {H}x{W} not divisible by {f}")
        out = x.data.reshape(N, C, H // f, f, W // f, f).mean(axis=(3, 5))

        def bw(g):
            up = np.repeat(np.repeat(g, f, axis=2), f, axis=3)
            return (up / (f * f),)

        return _make(out, (x,), bw, "pool")
    if mode == "up":
        out = np.repeat(np.repeat(x.data, f, axis=2), f, axis=3)

        def bw(g):
            return (g.reshape(N, C, H, f, W, f).sum(axis=(3, 5)),)

        return _make(out, (x,), bw, "upsample")
    raise ValueError(f"resample mode must be 'down' or 'up', got {mode!r}")
