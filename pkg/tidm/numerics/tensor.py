"""Dense float tensors with a define-by-run gradient tape.

Every public op returns a new ``Tensor``; inputs are never mutated. A tensor
records its parents and a backward closure only when one of its inputs needs
a gradient, so inference passes keep no tape.
"""

import logging
from contextlib import contextmanager
from contextvars import ContextVar
from typing import TYPE_CHECKING, Callable, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import InputError, NumericalError, ShapeError

if TYPE_CHECKING:
    from .params import ParamStore

logger = logging.getLogger(__name__)

_compute_dtype: ContextVar[type] = ContextVar("tidm_compute_dtype", default=np.float32)
_grad_enabled: ContextVar[bool] = ContextVar("tidm_grad_enabled", default=True)

GROUP_NORM_EPS = 1e-5

BackwardFn = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]
ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence[float]]


def compute_dtype() -> type:
    return _compute_dtype.get()


@contextmanager
def no_grad() -> Iterator[None]:
    """Parameters read inside this block are plain constants; no tape is kept."""
    token = _grad_enabled.set(False)
    try:
        yield
    finally:
        _grad_enabled.reset(token)


@contextmanager
def float64_precision() -> Iterator[None]:
    """Run ops in 64-bit; used by finite-difference checks."""
    token = _compute_dtype.set(np.float64)
    try:
        yield
    finally:
        _compute_dtype.reset(token)


class Tensor:
    __slots__ = ("data", "parents", "backward_fn", "op", "param_name", "requires_grad")

    def __init__(
        self,
        data: ArrayLike,
        parents: Tuple["Tensor", ...] = (),
        backward_fn: Optional[BackwardFn] = None,
        op: str = "const",
        param_name: Optional[str] = None,
    ):
        self.data = np.asarray(data, dtype=compute_dtype())
        self.parents = parents
        self.backward_fn = backward_fn
        self.op = op
        self.param_name = param_name
        self.requires_grad = param_name is not None or backward_fn is not None

    @classmethod
    def parameter(cls, name: str, data: np.ndarray) -> "Tensor":
        if not _grad_enabled.get():
            return cls(data, op="param")
        return cls(data, op="param", param_name=name)

    @property
    def shape(self) -> Tuple[int, ...]:
        return tuple(self.data.shape)

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item: tensor of shape {self.shape} is not a scalar")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        return f"Tensor(op={self.op}, shape={self.shape})"

    def __add__(self, other: ArrayLike) -> "Tensor":
        return add(self, other)

    def __radd__(self, other: ArrayLike) -> "Tensor":
        return add(other, self)

    def __sub__(self, other: ArrayLike) -> "Tensor":
        return sub(self, other)

    def __rsub__(self, other: ArrayLike) -> "Tensor":
        return sub(other, self)

    def __mul__(self, other: ArrayLike) -> "Tensor":
        return mul(self, other)

    def __rmul__(self, other: ArrayLike) -> "Tensor":
        return mul(other, self)

    def __neg__(self) -> "Tensor":
        return scale(self, -1.0)

    def __matmul__(self, other: ArrayLike) -> "Tensor":
        return matmul(self, other)


def as_tensor(value: ArrayLike) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def _result(op: str, data: np.ndarray, parents: Tuple[Tensor, ...], backward_fn: BackwardFn) -> Tensor:
    data = np.asarray(data, dtype=compute_dtype())
    if not np.isfinite(data).all():
        raise NumericalError(f"{op}: produced non-finite values (shape {data.shape})")
    if any(p.requires_grad for p in parents):
        return Tensor(data, parents=parents, backward_fn=backward_fn, op=op)
    return Tensor(data, op=op)


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# ------------------------------------------------------------------
# Elementwise
# ------------------------------------------------------------------


def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)

    def backward(g: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        return (
            _unbroadcast(g, a.shape) if a.requires_grad else None,
            _unbroadcast(g, b.shape) if b.requires_grad else None,
        )

    return _result("add", a.data + b.data, (a, b), backward)


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a, b)

    def backward(g: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        return (
            _unbroadcast(g, a.shape) if a.requires_grad else None,
            _unbroadcast(-g, b.shape) if b.requires_grad else None,
        )

    return _result("sub", a.data - b.data, (a, b), backward)


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a, b)

    def backward(g: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        return (
            _unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
            _unbroadcast(g * a.data, b.shape) if b.requires_grad else None,
        )

    return _result("mul", a.data * b.data, (a, b), backward)


def scale(a: ArrayLike, factor: float) -> Tensor:
    a = as_tensor(a)
    c = np.asarray(factor, dtype=compute_dtype())

    def backward(g: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        return (g * c,)

    return _result("scale", a.data * c, (a,), backward)


def silu(x: ArrayLike) -> Tensor:
    x = as_tensor(x)
    half = np.asarray(0.5, dtype=compute_dtype())
    sig = half * (1 + np.tanh(half * x.data))

    def backward(g: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        return (g * sig * (1 + x.data * (1 - sig)),)

    return _result("silu", x.data * sig, (x,), backward)


# ------------------------------------------------------------------
# Shape
# ------------------------------------------------------------------


def reshape(x: ArrayLike, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    shape = tuple(int(d) for d in shape)
    if int(np.prod(shape)) != x.data.size:
        raise ShapeError(f"reshape: cannot reshape {x.shape} into {shape}")

    def backward(g: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        return (g.reshape(x.shape),)

    return _result("reshape", x.data.reshape(shape), (x,), backward)


def transpose(x: ArrayLike, axes: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError(f"transpose: axes {axes} invalid for shape {x.shape}")
    inverse = tuple(int(i) for i in np.argsort(axes))

    def backward(g: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        return (g.transpose(inverse),)

    return _result("transpose", x.data.transpose(axes), (x,), backward)


def swap_last(x: ArrayLike) -> Tensor:
    x = as_tensor(x)
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, axes)


def concat(tensors: Sequence[ArrayLike], axis: int = 0) -> Tensor:
    parts = tuple(as_tensor(t) for t in tensors)
    if not parts:
        raise ShapeError("concat: no inputs")
    try:
        data = np.concatenate([p.data for p in parts], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: incompatible shapes {[p.shape for p in parts]} along axis {axis}") from exc
    bounds = np.cumsum([p.shape[axis] for p in parts])[:-1]

    def backward(g: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        return tuple(np.split(g, bounds, axis=axis))

    return _result("concat", data, parts, backward)


# ------------------------------------------------------------------
# Linear algebra
# ------------------------------------------------------------------


def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")

    def backward(g: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _result("matmul", a.data @ b.data, (a, b), backward)


def linear(x: ArrayLike, weight: ArrayLike, bias: Optional[ArrayLike] = None) -> Tensor:
    """x @ weight + bias, weight laid out (in_features, out_features)."""
    out = matmul(x, weight)
    if bias is not None:
        out = add(out, bias)
    return out


def take_rows(table: ArrayLike, ids: np.ndarray) -> Tensor:
    """Embedding lookup: rows of a (V, E) table for integer ids of any shape."""
    table = as_tensor(table)
    ids = np.asarray(ids)
    if table.ndim != 2:
        raise ShapeError(f"take_rows: table must be 2-D, got {table.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise InputError(f"take_rows: id out of range [0, {table.shape[0]})")

    def backward(g: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        grad = np.zeros(table.shape, dtype=g.dtype)
        np.add.at(grad, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (grad,)

    return _result("take_rows", table.data[ids], (table,), backward)


# ------------------------------------------------------------------
# Convolution and resampling
# ------------------------------------------------------------------


def conv2d(
    x: ArrayLike,
    weight: ArrayLike,
    bias: Optional[ArrayLike] = None,
    stride: int = 1,
    padding: int = 0,
) -> Tensor:
    """2-D cross-correlation, x (N, Cin, H, W), weight (Cout, Cin, kh, kw)."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-D input and weight, got {x.shape} and {weight.shape}")
    n, cin, h, w = x.shape
    cout, wcin, kh, kw = weight.shape
    if wcin != cin:
        raise ShapeError(f"conv2d: input has {cin} channels but weight expects {wcin}")
    if stride < 1 or padding < 0:
        raise ShapeError(f"conv2d: invalid stride={stride} padding={padding}")
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {h}x{w}")

    parents: Tuple[Tensor, ...] = (x, weight)
    b: Optional[Tensor] = None
    if bias is not None:
        b = as_tensor(bias)
        if b.shape != (cout,):
            raise ShapeError(f"conv2d: bias shape {b.shape} does not match {cout} output channels")
        parents = (x, weight, b)

    pad = ((0, 0), (0, 0), (padding, padding), (padding, padding))
    xp = np.pad(x.data, pad) if padding else x.data
    windows = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    out = np.tensordot(windows, weight.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    if b is not None:
        out = out + b.data[None, :, None, None]

    def backward(g: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        gx = gw = gb = None
        if weight.requires_grad:
            gw = np.tensordot(g, windows, axes=([0, 2, 3], [0, 2, 3]))
        if x.requires_grad:
            gxp = np.zeros(xp.shape, dtype=g.dtype)
            rows = stride * (ho - 1) + 1
            cols = stride * (wo - 1) + 1
            for i in range(kh):
                for j in range(kw):
                    contrib = np.tensordot(g, weight.data[:, :, i, j], axes=([1], [0]))
                    gxp[:, :, i : i + rows : stride, j : j + cols : stride] += contrib.transpose(0, 3, 1, 2)
            gx = gxp[:, :, padding : padding + h, padding : padding + w] if padding else gxp
        if b is not None and b.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return (gx, gw, gb) if b is not None else (gx, gw)

    return _result("conv2d", out, parents, backward)


def downsample(x: ArrayLike, weight: ArrayLike, bias: Optional[ArrayLike] = None) -> Tensor:
    """Stride-2 convolution with same-style padding; halves even spatial dims."""
    kernel = as_tensor(weight).shape[-1]
    return conv2d(x, weight, bias, stride=2, padding=kernel // 2)


def upsample_nearest(x: ArrayLike, factor: int = 2) -> Tensor:
    x = as_tensor(x)
    if x.ndim != 4 or factor < 1:
        raise ShapeError(f"upsample_nearest: expected 4-D input and factor >= 1, got {x.shape}, {factor}")
    n, c, h, w = x.shape

    def backward(g: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        return (g.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5)),)

    data = x.data.repeat(factor, axis=2).repeat(factor, axis=3)
    return _result("upsample_nearest", data, (x,), backward)


def avg_pool2d(x: ArrayLike, factor: int) -> Tensor:
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"avg_pool2d: expected 4-D input, got {x.shape}")
    n, c, h, w = x.shape
    if factor < 1 or h % factor or w % factor:
        raise ShapeError(f"avg_pool2d: spatial dims {h}x{w} not divisible by {factor}")
    area = np.asarray(factor * factor, dtype=compute_dtype())

    def backward(g: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        return (g.repeat(factor, axis=2).repeat(factor, axis=3) / area,)

    data = x.data.reshape(n, c, h // factor, factor, w // factor, factor).mean(axis=(3, 5))
    return _result("avg_pool2d", data, (x,), backward)


# ------------------------------------------------------------------
# Normalization and attention
# ------------------------------------------------------------------


def group_norm(
    x: ArrayLike,
    gamma: ArrayLike,
    beta: ArrayLike,
    groups: int,
    eps: float = GROUP_NORM_EPS,
) -> Tensor:
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if x.ndim != 4:
        raise ShapeError(f"group_norm: expected 4-D input, got {x.shape}")
    n, c, h, w = x.shape
    if groups < 1 or c % groups:
        raise ShapeError(f"group_norm: {c} channels not divisible into {groups} groups")
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"group_norm: affine shapes {gamma.shape}/{beta.shape} do not match {c} channels")

    xg = x.data.reshape(n, groups, -1)
    centered = xg - xg.mean(axis=2, keepdims=True)
    # zero-variance groups normalize to exactly zero
    centered = np.where(np.ptp(xg, axis=2, keepdims=True) == 0, 0, centered)
    var = (centered * centered).mean(axis=2, keepdims=True)
    inv_std = 1 / np.sqrt(var + np.asarray(eps, dtype=compute_dtype()))
    xhat = centered * inv_std
    xhat4 = xhat.reshape(n, c, h, w)
    out = xhat4 * gamma.data[None, :, None, None] + beta.data[None, :, None, None]

    def backward(g: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        gx = ggamma = gbeta = None
        if x.requires_grad:
            gxhat = (g * gamma.data[None, :, None, None]).reshape(n, groups, -1)
            gx = inv_std * (
                gxhat - gxhat.mean(axis=2, keepdims=True) - xhat * (gxhat * xhat).mean(axis=2, keepdims=True)
            )
            gx = gx.reshape(n, c, h, w)
        if gamma.requires_grad:
            ggamma = (g * xhat4).sum(axis=(0, 2, 3))
        if beta.requires_grad:
            gbeta = g.sum(axis=(0, 2, 3))
        return gx, ggamma, gbeta

    return _result("group_norm", out, (x, gamma, beta), backward)


def softmax(x: ArrayLike) -> Tensor:
    """Softmax over the last axis."""
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    probs = e / e.sum(axis=-1, keepdims=True)

    def backward(g: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        return (probs * (g - (g * probs).sum(axis=-1, keepdims=True)),)

    return _result("softmax", probs, (x,), backward)


def attention(q: ArrayLike, k: ArrayLike, v: ArrayLike, bias: Optional[np.ndarray] = None) -> Tensor:
    """Scaled dot-product attention: q (N, Lq, d), k (N, Lk, d), v (N, Lk, dv).

    ``bias`` is a constant additive term broadcast against the (N, Lq, Lk)
    score matrix, used for key padding.
    """
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    if q.ndim != 3 or k.ndim != 3 or v.ndim != 3:
        raise ShapeError(f"attention: expected 3-D q/k/v, got {q.shape}, {k.shape}, {v.shape}")
    if q.shape[-1] != k.shape[-1] or k.shape[1] != v.shape[1] or not q.shape[0] == k.shape[0] == v.shape[0]:
        raise ShapeError(f"attention: incompatible q {q.shape}, k {k.shape}, v {v.shape}")
    scores = scale(matmul(q, swap_last(k)), 1.0 / float(np.sqrt(q.shape[-1])))
    if bias is not None:
        scores = add(scores, Tensor(bias))
    return matmul(softmax(scores), v)


# ------------------------------------------------------------------
# Reductions and losses
# ------------------------------------------------------------------


def sum_all(x: ArrayLike) -> Tensor:
    x = as_tensor(x)

    def backward(g: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        return (np.broadcast_to(g, x.shape).copy(),)

    return _result("sum_all", x.data.sum(), (x,), backward)


def mean_all(x: ArrayLike) -> Tensor:
    x = as_tensor(x)
    count = np.asarray(max(x.data.size, 1), dtype=compute_dtype())

    def backward(g: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        return (np.broadcast_to(g / count, x.shape).copy(),)

    return _result("mean_all", x.data.sum() / count, (x,), backward)


def mse(pred: ArrayLike, target: ArrayLike, weights: Optional[np.ndarray] = None) -> Tensor:
    """Mean squared error; optional per-sample weights along axis 0.

    With weights w the result is mean_n(w_n * mean(diff_n ** 2)).
    """
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeError(f"mse: prediction {pred.shape} and target {target.shape} differ")
    diff = pred.data - target.data
    if weights is None:
        w = np.ones((1,) * diff.ndim, dtype=compute_dtype())
    else:
        weights = np.asarray(weights, dtype=compute_dtype())
        if diff.ndim == 0 or weights.shape != (diff.shape[0],):
            raise ShapeError(f"mse: weights {weights.shape} do not match batch of {pred.shape}")
        w = weights.reshape((-1,) + (1,) * (diff.ndim - 1))
    count = np.asarray(max(diff.size, 1), dtype=compute_dtype())
    value = (w * diff * diff).sum() / count

    def backward(g: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        gp = g * 2 * w * diff / count
        return (gp if pred.requires_grad else None, -gp if target.requires_grad else None)

    return _result("mse", value, (pred, target), backward)


def cross_entropy(logits: ArrayLike, labels: np.ndarray) -> Tensor:
    """Mean softmax cross-entropy of (N, K) logits against integer labels."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy: logits {logits.shape} and labels {labels.shape} mismatch")
    n, k = logits.shape
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise InputError(f"cross_entropy: label out of range [0, {k})")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - log_norm
    rows = np.arange(n)
    count = np.asarray(max(n, 1), dtype=compute_dtype())

    def backward(g: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        grad = np.exp(log_probs)
        grad[rows, labels] -= 1
        return (g * grad / count,)

    return _result("cross_entropy", -log_probs[rows, labels].sum() / count, (logits,), backward)


# ------------------------------------------------------------------
# Reverse mode
# ------------------------------------------------------------------


def _topological_order(root: Tensor) -> List[Tensor]:
    order: List[Tensor] = []
    visited = set()
    stack: List[Tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node.parents:
            if id(parent) not in visited and parent.requires_grad:
                stack.append((parent, False))
    return order


def backpropagate(loss: Tensor, params: "ParamStore") -> Dict[str, Tensor]:
    """Gradient of a scalar loss with respect to every entry of ``params``.

    Parameters that never reached the tape get an all-zero gradient.
    """
    if loss.ndim != 0:
        raise ShapeError(f"backpropagate: loss must be a scalar, got shape {loss.shape}")
    grads: Dict[int, np.ndarray] = {id(loss): np.ones((), dtype=loss.data.dtype)}
    by_name: Dict[str, np.ndarray] = {
        name: np.zeros(value.shape, dtype=compute_dtype()) for name, value in params.items()
    }
    for node in reversed(_topological_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.param_name is not None and node.param_name in by_name:
            by_name[node.param_name] += g
        if node.backward_fn is None:
            continue
        for parent, parent_grad in zip(node.parents, node.backward_fn(g)):
            if parent_grad is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + parent_grad
            else:
                grads[key] = parent_grad
    return {name: Tensor(value) for name, value in by_name.items()}
