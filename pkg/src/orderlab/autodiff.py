"""Minimal reverse-mode automatic differentiation over numpy arrays.

Only the operations the toy transformers need are provided. Every op
records its operands and a backward closure on the result tensor; calling
:func:`backward` on a scalar walks the graph once in reverse topological
order and accumulates gradients.

Broadcasting is limited to leading axes: the smaller operand's shape must be
a suffix of the larger one (e.g. a bias of shape ``[d]`` added to ``[B, T, d]``).
"""

from __future__ import annotations

import contextlib
import math
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "ContractError",
    "tensor",
    "zeros_like",
    "no_grad",
    "is_grad_enabled",
    "default_dtype",
    "get_default_dtype",
    "add",
    "sub",
    "mul",
    "scale",
    "matmul",
    "embedding_lookup",
    "reshape",
    "transpose",
    "masked_fill",
    "sum_all",
    "softmax",
    "log_softmax",
    "layer_norm",
    "gelu",
    "cross_entropy_nll",
    "kl_divergence",
    "backward",
]


class ShapeError(ValueError):
    """Operand shapes do not conform for an operation."""

    def __init__(self, op: str, *shapes: tuple[int, ...], detail: str = ""):
        self.op = op
        self.shapes = shapes
        msg = f"{op}: incompatible shapes " + " and ".join(str(tuple(s)) for s in shapes)
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class ContractError(RuntimeError):
    """A precondition of the differentiation API was violated."""


class _Mode(threading.local):
    # per-thread so concurrent no_grad blocks in worker pools cannot clobber each other
    grad_enabled = True
    dtype = np.dtype(np.float32)


_MODE = _Mode()


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    prev = _MODE.grad_enabled
    _MODE.grad_enabled = False
    try:
        yield
    finally:
        _MODE.grad_enabled = prev


def is_grad_enabled() -> bool:
    return _MODE.grad_enabled


@contextlib.contextmanager
def default_dtype(dtype):
    """Temporarily change the dtype used for tensors built from Python data.

    ``with default_dtype(np.float64):`` is the gradient-check mode.
    """
    prev = _MODE.dtype
    _MODE.dtype = np.dtype(dtype)
    try:
        yield
    finally:
        _MODE.dtype = prev


def get_default_dtype() -> np.dtype:
    return _MODE.dtype


class Tensor:
    """An array node in the differentiation graph."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _backward=None, op: str = "leaf"):
        arr = np.asarray(data)
        if arr.dtype.kind != "f":
            arr = arr.astype(_MODE.dtype)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = _parents
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = _backward
        self.op = op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def values(self) -> np.ndarray:
        """Row-major flat view of the data."""
        return self.data.reshape(-1)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # operator sugar; python scalars go through ``scale`` / constant tensors
    def __add__(self, other):
        return add(self, _as_tensor(other, self))

    def __radd__(self, other):
        return add(_as_tensor(other, self), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self))

    def __rsub__(self, other):
        return sub(_as_tensor(other, self), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, _as_tensor(other, self))

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    """Build a leaf tensor, casting to the default dtype unless ``dtype`` is given."""
    arr = np.array(data, dtype=dtype or _MODE.dtype)
    return Tensor(arr, requires_grad=requires_grad)


def zeros_like(x: Tensor) -> Tensor:
    return Tensor(np.zeros_like(x.data))


def _as_tensor(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=like.dtype))


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn, op: str) -> Tensor:
    needs = _MODE.grad_enabled and any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(data, op=op)
    return Tensor(data, requires_grad=True, _parents=parents, _backward=backward_fn, op=op)


def _check_suffix_broadcast(op: str, a: tuple[int, ...], b: tuple[int, ...]) -> None:
    short, long_ = (a, b) if len(a) <= len(b) else (b, a)
    if tuple(long_[len(long_) - len(short):]) != tuple(short):
        raise ShapeError(op, a, b, detail="broadcast only over leading axes")


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.reshape((-1,) + tuple(shape)).sum(axis=0)
    return grad


# ---------------------------------------------------------------------------
# elementwise and linear


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_suffix_broadcast("add", a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_suffix_broadcast("sub", a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_suffix_broadcast("mul", a.shape, b.shape)
    ad, bd = a.data, b.data
    sa, sb = a.shape, b.shape
    return _make(
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, sa), _unbroadcast(g * ad, sb)),
        "mul",
    )


def scale(x: Tensor, c: float) -> Tensor:
    c = x.dtype.type(c)
    return _make(x.data * c, (x,), lambda g: (g * c,), "scale")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b`` for 2-D, equal-batch N-D, or N-D @ 2-D (shared weight)."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape, detail="inner dimensions differ")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError("matmul", a.shape, b.shape, detail="batch dimensions differ")
    if a.ndim == 2 and b.ndim > 2:
        raise ShapeError("matmul", a.shape, b.shape, detail="2-D @ batched is unsupported")
    ad, bd = a.data, b.data
    out = ad @ bd

    def backward_fn(g):
        if bd.ndim == 2 and ad.ndim > 2:
            ga = g @ bd.T
            k, n = bd.shape
            gb = ad.reshape(-1, k).T @ g.reshape(-1, n)
            return ga, gb
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return _make(out, (a, b), backward_fn, "matmul")


def embedding_lookup(table: Tensor, ids) -> Tensor:
    """Rows of ``table`` gathered at integer ``ids`` (any shape)."""
    ids = np.asarray(ids)
    if table.ndim != 2:
        raise ShapeError("embedding_lookup", table.shape, ids.shape, detail="table must be 2-D")
    if ids.dtype.kind not in "iu":
        raise TypeError("embedding_lookup: ids must be integers")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        bad = ids.min() if ids.min() < 0 else ids.max()
        raise IndexError(f"embedding_lookup: id {int(bad)} out of range for table with {table.shape[0]} rows")
    rows, dim = table.shape

    def backward_fn(g):
        gt = np.zeros((rows, dim), dtype=g.dtype)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, dim))
        return (gt,)

    return _make(table.data[ids], (table,), backward_fn, "embedding_lookup")


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    src = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", src, tuple(shape)) from None
    return _make(out, (x,), lambda g: (g.reshape(src),), "reshape")


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError("transpose", x.shape, axes, detail="axes must permute dimensions")
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),), "transpose")


def masked_fill(x: Tensor, mask, value: float) -> Tensor:
    """Replace entries where the constant boolean ``mask`` is true; no gradient there."""
    mask = np.asarray(mask, dtype=bool)
    try:
        np.broadcast_shapes(mask.shape, x.shape)
    except ValueError:
        raise ShapeError("masked_fill", x.shape, mask.shape) from None
    out = np.where(mask, x.dtype.type(value), x.data)
    return _make(out, (x,), lambda g: (np.where(mask, 0, g).astype(g.dtype),), "masked_fill")


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return _make(np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, shape).copy(),), "sum")


# ---------------------------------------------------------------------------
# nonlinearities


def _check_axis(x: Tensor, axis: int, op: str) -> int:
    if not -x.ndim <= axis < x.ndim:
        raise IndexError(f"{op}: axis {axis} invalid for shape {x.shape}")
    return axis % x.ndim


def _log_softmax_np(z: np.ndarray, axis: int) -> np.ndarray:
    shifted = z - z.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def _softmax_np(z: np.ndarray, axis: int) -> np.ndarray:
    e = np.exp(z - z.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    axis = _check_axis(x, axis, "softmax")
    y = _softmax_np(x.data, axis)

    def backward_fn(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make(y, (x,), backward_fn, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    axis = _check_axis(x, axis, "log_softmax")
    out = _log_softmax_np(x.data, axis)

    def backward_fn(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _make(out, (x,), backward_fn, "log_softmax")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    if x.ndim < 1 or x.shape[-1] < 1:
        raise ShapeError("layer_norm", x.shape, detail="last axis must be nonempty")
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError("layer_norm", x.shape, gain.shape, bias.shape)
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + x.dtype.type(eps))
    xhat = xc * inv
    out = xhat * gain.data + bias.data
    gd = gain.data

    def backward_fn(g):
        dxhat = g * gd
        dx = inv * (
            dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        flat = g.reshape(-1, d)
        return dx, (flat * xhat.reshape(-1, d)).sum(axis=0), flat.sum(axis=0)

    return _make(out, (x, gain, bias), backward_fn, "layer_norm")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """Tanh-approximated GELU."""
    xd = x.data
    c = x.dtype.type(_GELU_C)
    a = x.dtype.type(0.044715)
    x2 = xd * xd
    t = np.tanh(c * xd * (1.0 + a * x2))
    out = 0.5 * xd * (1.0 + t)

    def backward_fn(g):
        dt = (1.0 - t * t) * c * (1.0 + 3.0 * a * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * dt),)

    return _make(out.astype(x.dtype, copy=False), (x,), backward_fn, "gelu")


# ---------------------------------------------------------------------------
# losses


def cross_entropy_nll(logits: Tensor, targets, mask=None) -> Tensor:
    """Mean of ``-log softmax(logits)[target]`` over masked positions.

    ``logits`` has shape ``[..., V]``; ``targets`` and ``mask`` have the
    leading shape.
    """
    V = logits.shape[-1]
    targets = np.asarray(targets)
    lead = logits.shape[:-1]
    if targets.shape != lead:
        raise ShapeError("cross_entropy_nll", logits.shape, targets.shape)
    mask = np.ones(lead, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if mask.shape != lead:
        raise ShapeError("cross_entropy_nll", logits.shape, mask.shape, detail="mask")
    count = int(mask.sum())
    if count == 0:
        raise ContractError("cross_entropy_nll: empty mask, no supervised positions")
    flat_t = targets.reshape(-1)
    flat_m = mask.reshape(-1)
    if flat_t[flat_m].size and (flat_t[flat_m].min() < 0 or flat_t[flat_m].max() >= V):
        raise IndexError("cross_entropy_nll: target id outside vocabulary")
    safe_t = np.where(flat_m, flat_t, 0)
    z = logits.data.reshape(-1, V)
    logp = _log_softmax_np(z, -1)
    picked = logp[np.arange(z.shape[0]), safe_t]
    loss = -(picked * flat_m).sum() / count
    weight = (flat_m / count).astype(z.dtype)

    def backward_fn(g):
        grad = np.exp(logp)
        grad[np.arange(z.shape[0]), safe_t] -= 1.0
        grad *= (weight * g)[:, None]
        return (grad.reshape(logits.shape),)

    return _make(np.asarray(loss, dtype=z.dtype), (logits,), backward_fn, "cross_entropy_nll")


def kl_divergence(p_logits: Tensor, q_logits: Tensor, axis: int = -1) -> Tensor:
    """KL(softmax(p) || softmax(q)) reduced over ``axis``.

    Computed in log space; the result is clamped at zero to absorb rounding,
    while the gradient is that of the exact expression.
    """
    if p_logits.shape != q_logits.shape:
        raise ShapeError("kl_divergence", p_logits.shape, q_logits.shape)
    axis = _check_axis(p_logits, axis, "kl_divergence")
    logp = _log_softmax_np(p_logits.data, axis)
    logq = _log_softmax_np(q_logits.data, axis)
    p = np.exp(logp)
    diff = logp - logq
    kl = (p * diff).sum(axis=axis, keepdims=True)
    out = np.maximum(np.squeeze(kl, axis=axis), 0)

    def backward_fn(g):
        ge = np.expand_dims(g, axis)
        gp = ge * p * (diff - kl)
        gq = ge * (np.exp(logq) - p)
        return gp, gq

    return _make(out, (p_logits, q_logits), backward_fn, "kl_divergence")


# ---------------------------------------------------------------------------
# backward pass


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor, retain_intermediate: bool = False) -> dict[Tensor, np.ndarray]:
    """Populate ``.grad`` on every requires-grad tensor reachable from ``loss``.

    Returns a map from leaf tensors to their gradients. Intermediate grads are
    stored only when ``retain_intermediate`` is set.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("backward: loss does not depend on any requires_grad tensor")
    order = _topological_order(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[Tensor, np.ndarray] = {}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g if node.grad is None else node.grad + g
            leaves[node] = node.grad
            continue
        if retain_intermediate:
            node.grad = g
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    return leaves


def parameters_grad_norm(tensors: Iterable[Tensor]) -> float:
    total = 0.0
    for t in tensors:
        if t.grad is not None:
            total += float(np.sum(t.grad.astype(np.float64) ** 2))
    return math.sqrt(total)
