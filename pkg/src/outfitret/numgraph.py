"""Dense array computation with reverse-mode differentiation.

Only the operations the retrieval head needs are provided. Every operation
returns a :class:`Node`; nodes carry a creation index, and backpropagation
visits them in reverse creation order so gradient accumulation is
deterministic.

Masks are plain boolean numpy arrays broadcastable against the operand. They
are constants and never receive gradients.
"""

from __future__ import annotations

import itertools
import math
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

_counter = itertools.count()

NORM_EPS = 1e-12
LN_EPS = 1e-5


class GraphError(ValueError):
    """Raised for shape mismatches, empty masks and invalid gradient requests."""


class Node:
    """A value on the computation tape.

    Leaves are created with :func:`leaf` (trainable) or :func:`const`.
    ``grad_fn`` maps the upstream gradient to one gradient per parent.
    """

    __slots__ = ("value", "parents", "grad_fn", "requires_grad", "op", "index", "name")

    def __init__(self, value, parents=(), grad_fn=None, requires_grad=False, op="const", name=None):
        self.value = value
        self.parents = parents
        self.grad_fn = grad_fn
        self.requires_grad = requires_grad
        self.op = op
        self.index = next(_counter)
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    @property
    def dtype(self):
        return self.value.dtype

    def __repr__(self):
        label = f" {self.name}" if self.name else ""
        return f"Node({self.op}{label}, shape={self.shape})"

    # sugar used throughout the model code
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return add(self, scale(_as_node(other, self.dtype), -1.0))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    @property
    def T(self):
        return transpose(self)


def leaf(value, name=None, dtype=None) -> Node:
    """Trainable leaf parameter."""
    arr = np.array(value, dtype=dtype if dtype is not None else np.asarray(value).dtype)
    return Node(arr, requires_grad=True, op="leaf", name=name)


def const(value, dtype=None) -> Node:
    return Node(np.asarray(value, dtype=dtype), op="const")


def _as_node(x, dtype=None) -> Node:
    if isinstance(x, Node):
        return x
    return const(x, dtype=dtype)


def _record(value, parents: Sequence[Node], grad_fn: Callable, op: str) -> Node:
    if not np.all(np.isfinite(value)):
        # finite inputs never produce non-finite outputs in this op set; surface it early
        raise GraphError(f"{op}: produced non-finite values")
    if any(p.requires_grad for p in parents):
        return Node(value, tuple(parents), grad_fn, True, op)
    return Node(value, (), None, False, op)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(op: str, *shapes) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(*shapes)
    except ValueError:
        raise GraphError(f"{op}: incompatible shapes {' and '.join(map(str, shapes))}") from None


def _check_mask(op: str, mask: np.ndarray, shape: tuple[int, ...], axis: int) -> np.ndarray:
    mask = np.asarray(mask, dtype=bool)
    try:
        full = np.broadcast_to(mask, shape)
    except ValueError:
        raise GraphError(f"{op}: mask shape {mask.shape} does not fit operand {shape}") from None
    if shape[axis] == 0 or not np.all(full.any(axis=axis)):
        raise GraphError(f"{op}: empty mask (no active position along axis {axis})")
    return full


# ---------------------------------------------------------------------------
# elementwise and structural ops


def add(a, b) -> Node:
    a, b = _as_node(a), _as_node(b)
    _broadcast_shape("add", a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return _record(a.value + b.value, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def mul(a, b) -> Node:
    """Elementwise product with broadcasting."""
    a, b = _as_node(a), _as_node(b)
    _broadcast_shape("mul", a.shape, b.shape)
    av, bv = a.value, b.value
    return _record(av * bv, (a, b),
                   lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)), "mul")


def scale(a: Node, factor: float) -> Node:
    a = _as_node(a)
    factor = float(factor)
    return _record(a.value * a.value.dtype.type(factor), (a,),
                   lambda g: (g * g.dtype.type(factor),), "scale")


def clip(a: Node, lo: float, hi: float) -> Node:
    """Clamp to [lo, hi]; gradient passes where the input lies inside the bounds."""
    a = _as_node(a)
    inside = (a.value >= lo) & (a.value <= hi)
    return _record(np.clip(a.value, lo, hi), (a,), lambda g: (g * inside,), "clip")


def sum(a: Node, axis=None, keepdims=False) -> Node:  # noqa: A001 - mirrors numpy
    a = _as_node(a)
    shape = a.shape

    def grad_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _record(np.asarray(a.value.sum(axis=axis, keepdims=keepdims)), (a,), grad_fn, "sum")


def reshape(a: Node, shape) -> Node:
    a = _as_node(a)
    old = a.shape
    try:
        out = a.value.reshape(shape)
    except ValueError:
        raise GraphError(f"reshape: cannot reshape {old} to {tuple(shape)}") from None
    return _record(out, (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a: Node, axes=None) -> Node:
    """Swap the last two axes by default, or permute by ``axes``."""
    a = _as_node(a)
    if axes is None:
        if a.ndim < 2:
            raise GraphError(f"transpose: need at least 2 dims, got {a.shape}")
        axes = tuple(range(a.ndim - 2)) + (a.ndim - 1, a.ndim - 2)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _record(np.transpose(a.value, axes), (a,),
                   lambda g: (np.transpose(g, inverse),), "transpose")


def matmul(a, b) -> Node:
    """Batched matrix product following numpy broadcasting rules."""
    a, b = _as_node(a), _as_node(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise GraphError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    _broadcast_shape("matmul", a.shape[:-2], b.shape[:-2])
    av, bv = a.value, b.value

    def grad_fn(g):
        if bv.ndim == 2:
            # shared weight: fold leading axes into one GEMM
            ga = g @ bv.T
            gb = av.reshape(-1, av.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            return _unbroadcast(ga, av.shape), gb
        ga = g @ np.swapaxes(bv, -1, -2)
        gb = np.swapaxes(av, -1, -2) @ g
        return _unbroadcast(ga, av.shape), _unbroadcast(gb, bv.shape)

    return _record(av @ bv, (a, b), grad_fn, "matmul")


# ---------------------------------------------------------------------------
# normalizations and reductions


def row_l2_normalize(a: Node, strict: bool = False, eps: float = NORM_EPS) -> Node:
    """Divide each vector along the last axis by its L2 norm.

    Norms below ``eps`` are clamped to ``eps`` (zero rows stay zero). With
    ``strict`` a row of exactly zero norm is an error.
    """
    a = _as_node(a)
    v = a.value
    norm = np.sqrt(np.sum(v * v, axis=-1, keepdims=True))
    if strict and np.any(norm == 0):
        raise GraphError("row-l2-normalize: zero-norm row in strict mode")
    clamped = norm < eps
    denom = np.where(clamped, v.dtype.type(eps), norm)
    y = v / denom

    def grad_fn(g):
        proj = np.sum(g * y, axis=-1, keepdims=True)
        return (np.where(clamped, g, g - y * proj) / denom,)

    return _record(y, (a,), grad_fn, "row-l2-normalize")


def masked_softmax(a: Node, mask=None, axis: int = -1) -> Node:
    """Softmax along ``axis``; inactive positions get exactly zero weight."""
    a = _as_node(a)
    v = a.value
    axis = axis % v.ndim
    if mask is None:
        full = np.ones(v.shape, dtype=bool)
        if v.shape[axis] == 0:
            raise GraphError("masked-softmax: empty axis")
    else:
        full = _check_mask("masked-softmax", mask, v.shape, axis)
    shifted = np.where(full, v, -np.inf)
    shifted = shifted - shifted.max(axis=axis, keepdims=True)
    e = np.where(full, np.exp(shifted), 0).astype(v.dtype)
    y = e / e.sum(axis=axis, keepdims=True)

    def grad_fn(g):
        return (y * (g - np.sum(g * y, axis=axis, keepdims=True)),)

    return _record(y, (a,), grad_fn, "masked-softmax")


def log_softmax(a: Node, axis: int = -1) -> Node:
    a = _as_node(a)
    v = a.value
    shifted = v - v.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    y = shifted - lse
    p = np.exp(y)

    def grad_fn(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return _record(y, (a,), grad_fn, "log-softmax")


def masked_row_max(a: Node, mask=None, axis: int = -1) -> Node:
    """Maximum along ``axis`` over active positions (the axis is removed).

    Ties route the gradient to the lowest index.
    """
    a = _as_node(a)
    v = a.value
    axis = axis % v.ndim
    if mask is None:
        if v.shape[axis] == 0:
            raise GraphError("masked-row-max: empty axis")
        filled = v
    else:
        full = _check_mask("masked-row-max", mask, v.shape, axis)
        filled = np.where(full, v, -np.inf)
    idx = np.expand_dims(np.argmax(filled, axis=axis), axis)
    out = np.take_along_axis(v, idx, axis=axis).squeeze(axis)
    shape = v.shape

    def grad_fn(g):
        grad = np.zeros(shape, dtype=g.dtype)
        np.put_along_axis(grad, idx, np.expand_dims(g, axis), axis=axis)
        return (grad,)

    return _record(out, (a,), grad_fn, "masked-row-max")


def masked_mean(a: Node, mask=None, axis: int = -2) -> Node:
    """Mean along ``axis`` over active positions (the axis is removed).

    The default axis pools the rows of a (..., N, D) token matrix.
    """
    a = _as_node(a)
    v = a.value
    axis = axis % v.ndim
    if mask is None:
        full = np.ones(v.shape, dtype=bool)
    else:
        mask = np.asarray(mask, dtype=bool)
        if mask.ndim == v.ndim - 1 and axis == v.ndim - 2:
            mask = mask[..., None]
        full = _check_mask("masked-mean", mask, v.shape, axis)
    w = full.astype(v.dtype)
    w = w / w.sum(axis=axis, keepdims=True)
    return _record((v * w).sum(axis=axis), (a,),
                   lambda g: (np.expand_dims(g, axis) * w,), "masked-mean")


def layer_norm(x: Node, gain: Node, bias: Node, eps: float = LN_EPS) -> Node:
    """Normalize over the last axis, then apply elementwise gain and bias."""
    x, gain, bias = _as_node(x), _as_node(gain), _as_node(bias)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise GraphError(f"layer-norm: gain {gain.shape} / bias {bias.shape} do not match width {d}")
    v = x.value
    mu = v.mean(axis=-1, keepdims=True)
    xc = v - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + v.dtype.type(eps))
    xhat = xc * inv
    gv = gain.value
    out = xhat * gv + bias.value

    def grad_fn(g):
        gx_hat = g * gv
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _record(out, (x, gain, bias), grad_fn, "layer-norm")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Node) -> Node:
    """GELU, tanh approximation."""
    a = _as_node(a)
    v = a.value
    c = v.dtype.type(_GELU_C)
    k = v.dtype.type(0.044715)
    inner = c * (v + k * v ** 3)
    t = np.tanh(inner)
    out = 0.5 * v * (1 + t)

    def grad_fn(g):
        d = 0.5 * (1 + t) + 0.5 * v * (1 - t * t) * c * (1 + 3 * k * v * v)
        return (g * d,)

    return _record(out, (a,), grad_fn, "gelu")


def cosine_matrix(a: Node, b: Node, strict: bool = False) -> Node:
    """Pairwise cosines between the rows of ``a`` (M x D) and ``b`` (N x D)."""
    a, b = _as_node(a), _as_node(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise GraphError(f"cosine-matrix: incompatible shapes {a.shape} and {b.shape}")
    # rounding can push a cosine of parallel rows just past 1
    return clip(matmul(row_l2_normalize(a, strict), transpose(row_l2_normalize(b, strict))), -1.0, 1.0)


# ---------------------------------------------------------------------------
# dispatch by name and backpropagation

OPS: Mapping[str, Callable] = {
    "matmul": matmul,
    "add": add,
    "scale": scale,
    "row-l2-normalize": row_l2_normalize,
    "masked-softmax": masked_softmax,
    "masked-row-max": masked_row_max,
    "masked-mean": masked_mean,
    "layer-norm": layer_norm,
    "gelu": gelu,
    "cosine-matrix": cosine_matrix,
    "transpose": transpose,
    "mul": mul,
    "sum": sum,
    "reshape": reshape,
    "clip": clip,
    "log-softmax": log_softmax,
}

_MASKED = {"masked-softmax", "masked-row-max", "masked-mean"}


def forward_op(name: str, inputs: Sequence, mask=None, **kwargs) -> Node:
    """Apply the operation registered under ``name``."""
    try:
        fn = OPS[name]
    except KeyError:
        raise GraphError(f"unknown op {name!r}") from None
    if name in _MASKED:
        return fn(*inputs, mask=mask, **kwargs)
    if mask is not None:
        raise GraphError(f"{name}: does not take a mask")
    return fn(*inputs, **kwargs)


def gradients(loss: Node, params: Iterable[Node]) -> dict[Node, np.ndarray]:
    """Return d(loss)/d(param) for each param; unused params get zeros."""
    if loss.value.size != 1:
        raise GraphError(f"gradients: loss must be scalar, got shape {loss.shape}")
    params = list(params)
    grads: dict[int, np.ndarray] = {}
    if loss.requires_grad:
        # collect ancestors; creation index is the tape order
        seen = {id(loss): loss}
        stack = [loss]
        while stack:
            node = stack.pop()
            for p in node.parents:
                if p.requires_grad and id(p) not in seen:
                    seen[id(p)] = p
                    stack.append(p)
        grads[id(loss)] = np.ones_like(loss.value)
        for node in sorted(seen.values(), key=lambda n: n.index, reverse=True):
            g = grads.get(id(node))
            if g is None or node.grad_fn is None:
                continue
            for parent, pg in zip(node.parents, node.grad_fn(g)):
                if not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = np.array(pg, dtype=parent.value.dtype)
    return {p: grads.get(id(p), np.zeros_like(p.value)).reshape(p.shape) for p in params}
