# app/services/tensor_core.py
"""
Dense tensors with tape-based reverse-mode autodiff.

Every op records a GraphNode stamped with a monotonically increasing sequence
number; backward walks the reachable nodes in descending sequence order, so each
node runs once and only after all of its consumers. Custom-gradient nodes
(`Function` subclasses with ``custom_gradient = True`` or `custom_node`) replace
the derivative of their forward with an arbitrary backward rule.
"""
from __future__ import annotations

import contextlib
import itertools
import logging
from dataclasses import dataclass, field
from typing import Any, Callable, Iterator, Sequence

import numpy as np

from app.errors import ContractError, DimensionError

logger = logging.getLogger(__name__)

_DTYPES = {"float32": np.float32, "float64": np.float64}
_SEQ = itertools.count()
_state: dict[str, Any] = {"dtype": np.float64, "grad_enabled": True}


# =====================
# Precision / grad mode
# =====================
def current_dtype():
    return _state["dtype"]


@contextlib.contextmanager
def precision(name: str) -> Iterator[None]:
    """Select the real type of every tensor created inside the block."""
    if name not in _DTYPES:
        raise ContractError(f"unknown precision {name!r} (expected float32|float64)")
    prev = _state["dtype"]
    _state["dtype"] = _DTYPES[name]
    try:
        yield
    finally:
        _state["dtype"] = prev


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    prev = _state["grad_enabled"]
    _state["grad_enabled"] = False
    try:
        yield
    finally:
        _state["grad_enabled"] = prev


# =====================
# Graph bookkeeping
# =====================
class Context:
    """Values captured at forward time (``ctx`` of a node)."""

    def __init__(self) -> None:
        self.saved: tuple = ()
        self.inputs: tuple[np.ndarray, ...] = ()

    def save_for_backward(self, *values) -> None:
        self.saved = values


@dataclass(eq=False)
class GraphNode:
    inputs: tuple["Tensor", ...]
    backward_fn: Callable[[Context, np.ndarray], Sequence[np.ndarray | None]]
    ctx: Context
    name: str
    custom_gradient: bool = False
    forward_fn: Callable | None = None
    seq: int = field(default_factory=lambda: next(_SEQ))


class Tensor:
    def __init__(self, data, requires_grad: bool = False, *, dtype=None, _node: GraphNode | None = None):
        self.data = np.asarray(data, dtype=dtype or current_dtype())
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._node = _node

    # ---- basic info ----
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def node(self) -> GraphNode | None:
        return self._node

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    # ---- operators ----
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

    def __truediv__(self, other):
        return div(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims: bool = False):
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self):
        return tensor_mean(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def as_tensor(value) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def _record(
    name: str,
    inputs: tuple[Tensor, ...],
    out: np.ndarray,
    backward_fn,
    ctx: Context,
    *,
    custom: bool = False,
    forward_fn: Callable | None = None,
) -> Tensor:
    needs_grad = _state["grad_enabled"] and any(t.requires_grad for t in inputs)
    node = None
    if needs_grad:
        node = GraphNode(
            inputs=inputs,
            backward_fn=backward_fn,
            ctx=ctx,
            name=name,
            custom_gradient=custom,
            forward_fn=forward_fn,
        )
    dtype = out.dtype if np.issubdtype(np.asarray(out).dtype, np.floating) else None
    return Tensor(out, requires_grad=needs_grad, dtype=dtype, _node=node)


class Function:
    """
    torch.autograd.Function 스타일의 노드 정의.

    ``forward(ctx, *arrays, **options)`` gets raw ndarrays, ``backward(ctx, g)``
    returns one gradient (or None) per positional input.
    """

    custom_gradient = False

    @staticmethod
    def forward(ctx: Context, *args, **kwargs) -> np.ndarray:
        raise NotImplementedError

    @staticmethod
    def backward(ctx: Context, grad: np.ndarray):
        raise NotImplementedError

    @classmethod
    def apply(cls, *inputs, **options) -> Tensor:
        tensors = tuple(as_tensor(x) for x in inputs)
        ctx = Context()
        ctx.inputs = tuple(t.data for t in tensors)
        out = cls.forward(ctx, *ctx.inputs, **options)
        return _record(
            cls.__name__,
            tensors,
            np.asarray(out),
            cls.backward,
            ctx,
            custom=cls.custom_gradient,
            forward_fn=cls.forward,
        )


def custom_node(
    forward_fn: Callable[..., np.ndarray],
    backward_fn: Callable | Sequence[Callable | None] | None,
    inputs: Sequence,
    name: str = "custom",
) -> Tensor:
    """
    Record a node whose backward is ``backward_fn`` verbatim.

    ``backward_fn`` is either one callable ``(ctx, g) -> per-input grads`` or a
    sequence of per-input callables ``(ctx, g) -> grad``.
    """
    tensors = tuple(as_tensor(x) for x in inputs)

    if backward_fn is None:
        if any(t.requires_grad for t in tensors):
            raise ContractError(f"{name}: no backward declared for a requires_grad input")
        combined = None
    elif callable(backward_fn):
        combined = backward_fn
    else:
        fns = list(backward_fn)
        if len(fns) != len(tensors):
            raise ContractError(f"{name}: {len(fns)} backward functions for {len(tensors)} inputs")
        for i, (fn, t) in enumerate(zip(fns, tensors)):
            if fn is None and t.requires_grad:
                raise ContractError(f"{name}: missing backward for requires_grad input #{i}")

        def combined(ctx, g):
            return tuple(fn(ctx, g) if fn is not None else None for fn in fns)

    ctx = Context()
    ctx.inputs = tuple(t.data for t in tensors)
    out = np.asarray(forward_fn(ctx, *ctx.inputs))
    return _record(name, tensors, out, combined, ctx, custom=True, forward_fn=forward_fn)


# =====================
# Backward
# =====================
def backward(loss: Tensor) -> dict[Tensor, np.ndarray]:
    """
    Run reverse-mode accumulation from a scalar loss.

    Leaf tensors with ``requires_grad`` get their ``.grad`` accumulated; the
    returned map holds the gradients produced by this pass only.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.node is None:
        return {}

    # 도달 가능한 노드 수집
    nodes: dict[int, GraphNode] = {}
    stack = [loss.node]
    while stack:
        node = stack.pop()
        if node.seq in nodes:
            continue
        nodes[node.seq] = node
        stack.extend(t.node for t in node.inputs if t.node is not None)

    node_grads: dict[int, np.ndarray] = {loss.node.seq: np.ones_like(loss.data)}
    leaf_grads: dict[Tensor, np.ndarray] = {}

    for seq in sorted(nodes, reverse=True):
        node = nodes[seq]
        g = node_grads.pop(seq, None)
        if g is None:
            continue
        if node.backward_fn is None:
            raise ContractError(f"{node.name}: node has no backward function")
        input_grads = node.backward_fn(node.ctx, g)
        if not isinstance(input_grads, (tuple, list)):
            input_grads = (input_grads,)
        if len(input_grads) != len(node.inputs):
            raise ContractError(
                f"{node.name}: backward returned {len(input_grads)} grads for {len(node.inputs)} inputs"
            )
        for i, (inp, gi) in enumerate(zip(node.inputs, input_grads)):
            if not inp.requires_grad:
                continue
            if gi is None:
                raise ContractError(f"{node.name}: missing backward for requires_grad input #{i}")
            gi = np.asarray(gi, dtype=inp.dtype)
            if gi.shape != inp.shape:
                raise DimensionError(f"{node.name}: grad shape {gi.shape} != input shape {inp.shape}")
            if inp.node is not None:
                key = inp.node.seq
                node_grads[key] = node_grads[key] + gi if key in node_grads else gi
            else:
                leaf_grads[inp] = leaf_grads[inp] + gi if inp in leaf_grads else gi

    for leaf, g in leaf_grads.items():
        leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
    return leaf_grads


# =====================
# Built-in ops
# =====================
def _broadcast_ok(big: tuple, small: tuple) -> bool:
    # 선행 batch 차원 방향 broadcast만 허용
    return small == () or big[len(big) - len(small):] == small


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    return g.sum(axis=tuple(range(lead))).reshape(shape) if lead > 0 else g.sum().reshape(shape)


def _binary_shapes(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape == b.shape:
        return
    if len(a.shape) >= len(b.shape) and _broadcast_ok(a.shape, b.shape):
        return
    if len(b.shape) > len(a.shape) and _broadcast_ok(b.shape, a.shape):
        return
    raise DimensionError(f"{op}: cannot broadcast {a.shape} with {b.shape}")


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b, "add")
    sa, sb = a.shape, b.shape

    def _backward(ctx, g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _record("add", (a, b), a.data + b.data, _backward, Context())


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b, "sub")
    sa, sb = a.shape, b.shape

    def _backward(ctx, g):
        return _unbroadcast(g, sa), -_unbroadcast(g, sb)

    return _record("sub", (a, b), a.data - b.data, _backward, Context())


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b, "mul")
    ad, bd = a.data, b.data

    def _backward(ctx, g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _record("mul", (a, b), ad * bd, _backward, Context())


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b, "div")
    ad, bd = a.data, b.data

    def _backward(ctx, g):
        return _unbroadcast(g / bd, ad.shape), _unbroadcast(-g * ad / (bd * bd), bd.shape)

    return _record("div", (a, b), ad / bd, _backward, Context())


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul expects 2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def _backward(ctx, g):
        return g @ bd.T, ad.T @ g

    return _record("matmul", (a, b), ad @ bd, _backward, Context())


def tensor_sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    def _backward(ctx, g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _record("sum", (a,), np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), _backward, Context())


def tensor_mean(a) -> Tensor:
    a = as_tensor(a)
    n = a.size
    shape = a.shape

    def _backward(ctx, g):
        return (np.full(shape, g / n, dtype=a.dtype),)

    return _record("mean", (a,), np.asarray(a.data.mean()), _backward, Context())


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as e:
        raise DimensionError(f"reshape {src} -> {shape}: {e}") from e

    def _backward(ctx, g):
        return (g.reshape(src),)

    return _record("reshape", (a,), out, _backward, Context())


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes) if axes is not None else tuple(reversed(range(a.ndim)))
    inverse = tuple(np.argsort(axes))

    def _backward(ctx, g):
        return (np.ascontiguousarray(g.transpose(inverse)),)

    return _record("transpose", (a,), np.ascontiguousarray(a.data.transpose(axes)), _backward, Context())


# =====================
# im2col (3x3, stride 1, zero padding 1)
# =====================
def im2col3x3_array(x: np.ndarray) -> np.ndarray:
    """(B, C, H, W) -> (B*H*W, C*9), column order (C, kh, kw)."""
    if x.ndim != 4:
        raise DimensionError(f"im2col expects (B, C, H, W), got {x.shape}")
    B, C, H, W = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    cols = np.empty((B, H, W, C, 3, 3), dtype=x.dtype)
    for di in range(3):
        for dj in range(3):
            cols[..., di, dj] = xp[:, :, di:di + H, dj:dj + W].transpose(0, 2, 3, 1)
    return cols.reshape(B * H * W, C * 9)


class Im2Col3x3(Function):
    @staticmethod
    def forward(ctx, x):
        ctx.save_for_backward(x.shape)
        return im2col3x3_array(x)

    @staticmethod
    def backward(ctx, g):
        (shape,) = ctx.saved
        B, C, H, W = shape
        g = g.reshape(B, H, W, C, 3, 3)
        gxp = np.zeros((B, C, H + 2, W + 2), dtype=g.dtype)
        for di in range(3):
            for dj in range(3):
                gxp[:, :, di:di + H, dj:dj + W] += g[..., di, dj].transpose(0, 3, 1, 2)
        return (gxp[:, :, 1:-1, 1:-1],)


def im2col3x3(x) -> Tensor:
    return Im2Col3x3.apply(x)


# =====================
# Loss
# =====================
class SoftmaxCrossEntropy(Function):
    @staticmethod
    def forward(ctx, logits, labels):
        if logits.ndim != 2 or labels.shape != (logits.shape[0],):
            raise DimensionError(f"cross entropy: logits {logits.shape}, labels {labels.shape}")
        idx = labels.astype(np.int64)
        shifted = logits - logits.max(axis=1, keepdims=True)
        lse = np.log(np.exp(shifted).sum(axis=1))
        probs = np.exp(shifted - lse[:, None])
        ctx.save_for_backward(probs, idx)
        return np.asarray((lse - shifted[np.arange(len(idx)), idx]).mean(), dtype=logits.dtype)

    @staticmethod
    def backward(ctx, g):
        probs, idx = ctx.saved
        grad = probs.copy()
        grad[np.arange(len(idx)), idx] -= 1.0
        return grad * (g / len(idx)), None


def softmax_cross_entropy(logits, labels) -> Tensor:
    return SoftmaxCrossEntropy.apply(logits, Tensor(labels, dtype=np.int64))


# =====================
# Finite differences
# =====================
def finite_difference(fn: Callable[[np.ndarray], float], x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function of ``x`` (copied, float64)."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = fn(x)
        flat[i] = orig - eps
        lo = fn(x)
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * eps)
    return grad
