"""Dense tensors with reverse-mode automatic differentiation.

Every array operation used by the detector lives here.  A :class:`Tensor`
wraps a NumPy array; operations on tensors that require gradients record a
closure computing the vector-Jacobian product, and :meth:`Tensor.backward`
replays those closures in reverse topological order.  The graph is released
after each backward pass.

Any forward operation that produces NaN or Inf raises :class:`NumericError`
instead of letting the value propagate.
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .exceptions import DimensionError, NumericError, ParameterError

DEFAULT_DTYPE = np.float64

_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference, matching)."""
    previous = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = previous


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._op = "leaf"

    # -- basic properties -------------------------------------------------
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

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_item(self)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self._op}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- autodiff ---------------------------------------------------------
    def backward(self, grad=None) -> None:
        """Accumulate d(self)/d(leaf) into every ``requires_grad`` leaf."""
        if grad is None:
            if self.data.size != 1:
                raise DimensionError("backward() without a seed gradient needs a scalar tensor")
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=self.data.dtype).reshape(self.shape)

        order = _topological_order(self)
        pending: dict[int, np.ndarray] = {id(self): grad}
        for node in reversed(order):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in pending:
                    pending[key] = pending[key] + pg
                else:
                    pending[key] = pg
        for node in order:
            if node._backward is not None:
                node._parents = ()
                node._backward = None

    # -- operator sugar ---------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return slice_(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def relu(self):
        return relu(self)

    def sigmoid(self):
        return sigmoid(self)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)


def _raise_item(t: Tensor):
    raise DimensionError(f"item() needs a single-element tensor, got shape {t.shape}")


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if dtype is None:
        return Tensor(x)
    return Tensor(np.asarray(x, dtype=dtype))


def _lift(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


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
            if id(parent) not in seen and parent.requires_grad:
                stack.append((parent, False))
    return order


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.isfinite(arr).all():
        raise NumericError(f"{op} produced non-finite values (shape {arr.shape})")


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward: Callable, op: str) -> Tensor:
    _check_finite(data, op)
    out = Tensor(data)
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
        out._op = op
    return out


def unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after NumPy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from exc


# -- elementwise arithmetic ---------------------------------------------------
def add(a, b) -> Tensor:
    a, b = _lift(a, b if isinstance(b, Tensor) else None), _lift(b, a if isinstance(a, Tensor) else None)
    _broadcast_shape(a, b, "add")

    def backward(g):
        return unbroadcast(g, a.shape), unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = _lift(a, b if isinstance(b, Tensor) else None), _lift(b, a if isinstance(a, Tensor) else None)
    _broadcast_shape(a, b, "sub")

    def backward(g):
        return unbroadcast(g, a.shape), unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = _lift(a, b if isinstance(b, Tensor) else None), _lift(b, a if isinstance(a, Tensor) else None)
    _broadcast_shape(a, b, "mul")

    def backward(g):
        return unbroadcast(g * b.data, a.shape), unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = _lift(a, b if isinstance(b, Tensor) else None), _lift(b, a if isinstance(a, Tensor) else None)
    _broadcast_shape(a, b, "div")
    if np.any(b.data == 0):
        raise NumericError("div: division by zero")

    def backward(g):
        ga = unbroadcast(g / b.data, a.shape)
        gb = unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return ga, gb

    return _make(a.data / b.data, (a, b), backward, "div")


def power(a: Tensor, exponent: float) -> Tensor:
    a = _lift(a)
    exponent = float(exponent)

    def backward(g):
        return (g * exponent * a.data ** (exponent - 1.0),)

    return _make(a.data**exponent, (a,), backward, "pow")


def relu(a: Tensor) -> Tensor:
    a = _lift(a)
    mask = a.data > 0

    def backward(g):
        return (g * mask,)

    return _make(np.where(mask, a.data, 0.0).astype(a.dtype, copy=False), (a,), backward, "relu")


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    a = _lift(a)
    s = _stable_sigmoid(a.data)

    def backward(g):
        return (g * s * (1.0 - s),)

    return _make(s, (a,), backward, "sigmoid")


def softplus(a: Tensor) -> Tensor:
    """log(1 + exp(x)), evaluated without overflow."""
    a = _lift(a)
    x = a.data
    out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))

    def backward(g):
        return (g * _stable_sigmoid(x),)

    return _make(out, (a,), backward, "softplus")


def exp(a: Tensor) -> Tensor:
    a = _lift(a)
    with np.errstate(over="ignore"):
        e = np.exp(a.data)

    def backward(g):
        return (g * e,)

    return _make(e, (a,), backward, "exp")


def log(a: Tensor) -> Tensor:
    a = _lift(a)
    if np.any(a.data <= 0):
        raise NumericError("log: non-positive input")

    def backward(g):
        return (g / a.data,)

    return _make(np.log(a.data), (a,), backward, "log")


def abs_(a: Tensor) -> Tensor:
    a = _lift(a)
    sign = np.sign(a.data)

    def backward(g):
        return (g * sign,)

    return _make(np.abs(a.data), (a,), backward, "abs")


def maximum(a, b) -> Tensor:
    """Elementwise max; on ties the gradient goes to ``a``."""
    a, b = _lift(a, b if isinstance(b, Tensor) else None), _lift(b, a if isinstance(a, Tensor) else None)
    _broadcast_shape(a, b, "maximum")
    pick_a = a.data >= b.data

    def backward(g):
        return unbroadcast(g * pick_a, a.shape), unbroadcast(g * ~pick_a, b.shape)

    return _make(np.where(pick_a, a.data, b.data), (a, b), backward, "maximum")


def minimum(a, b) -> Tensor:
    """Elementwise min; on ties the gradient goes to ``a``."""
    a, b = _lift(a, b if isinstance(b, Tensor) else None), _lift(b, a if isinstance(a, Tensor) else None)
    _broadcast_shape(a, b, "minimum")
    pick_a = a.data <= b.data

    def backward(g):
        return unbroadcast(g * pick_a, a.shape), unbroadcast(g * ~pick_a, b.shape)

    return _make(np.where(pick_a, a.data, b.data), (a, b), backward, "minimum")


def clamp(a: Tensor, lo: float | None = None, hi: float | None = None) -> Tensor:
    a = _lift(a)
    out = np.clip(a.data, lo, hi)
    passthrough = out == a.data

    def backward(g):
        return (g * passthrough,)

    return _make(out, (a,), backward, "clamp")


# -- reductions and shape ops -------------------------------------------------
def _norm_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = _lift(a)
    axes = _norm_axes(axis, a.ndim)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(np.sum(a.data, axis=axes, keepdims=keepdims), (a,), backward, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = _lift(a)
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    if count == 0:
        raise DimensionError("mean over an empty axis")

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, a.shape).copy(),)

    return _make(np.mean(a.data, axis=axes, keepdims=keepdims), (a,), backward, "mean")


def reshape(a: Tensor, shape) -> Tensor:
    a = _lift(a)
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"cannot reshape {a.shape} to {shape}") from exc

    def backward(g):
        return (g.reshape(a.shape),)

    return _make(out, (a,), backward, "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    a = _lift(a)
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))

    def backward(g):
        return (np.transpose(g, inverse),)

    return _make(np.transpose(a.data, axes), (a,), backward, "transpose")


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis for i in items)


def slice_(a: Tensor, index) -> Tensor:
    a = _lift(a)
    basic = _is_basic_index(index)

    def backward(g):
        full = np.zeros_like(a.data)
        if basic:
            full[index] += g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _make(np.array(a.data[index], copy=True), (a,), backward, "slice")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_lift(t) for t in tensors]
    if not tensors:
        raise DimensionError("concat of an empty list")
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(str(exc)) from exc
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(out, tuple(tensors), backward, "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_lift(t) for t in tensors]
    return concat([reshape(t, t.shape[:axis % (t.ndim + 1)] + (1,) + t.shape[axis % (t.ndim + 1):])
                   for t in tensors], axis=axis)


def reverse_along_axis(a: Tensor, axis: int = -1) -> Tensor:
    """Reverse the element order along ``axis`` (horizontal flip for axis=-1)."""
    a = _lift(a)

    def backward(g):
        return (np.flip(g, axis=axis).copy(),)

    return _make(np.flip(a.data, axis=axis).copy(), (a,), backward, "reverse")


# -- linear algebra -------------------------------------------------------------
def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _lift(a, b if isinstance(b, Tensor) else None), _lift(b, a if isinstance(a, Tensor) else None)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs at least 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")

    def backward(g):
        ga = unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.ndim == 2 and a.ndim > 2:
            gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _make(a.data @ b.data, (a, b), backward, "matmul")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = _lift(x)
    if x.ndim == 0 or x.shape[axis] == 0:
        raise DimensionError("softmax over an empty axis")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _make(s, (x,), backward, "softmax")


# -- normalisation ---------------------------------------------------------------
def _normalize_backward(g_hat: np.ndarray, x_hat: np.ndarray, inv_std: np.ndarray, axes) -> np.ndarray:
    n = int(np.prod([x_hat.shape[ax] for ax in axes]))
    term1 = g_hat * n
    term2 = g_hat.sum(axis=axes, keepdims=True)
    term3 = x_hat * (g_hat * x_hat).sum(axis=axes, keepdims=True)
    return inv_std * (term1 - term2 - term3) / n


def layernorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    x, gamma, beta = _lift(x), _lift(gamma), _lift(beta)
    if gamma.shape != (x.shape[-1],) or beta.shape != (x.shape[-1],):
        raise DimensionError("layernorm affine parameters must match the last axis")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    x_hat = centered * inv_std
    out = x_hat * gamma.data + beta.data

    def backward(g):
        g_hat = g * gamma.data
        gx = _normalize_backward(g_hat, x_hat, inv_std, (x.ndim - 1,))
        lead = tuple(range(x.ndim - 1))
        return gx, (g * x_hat).sum(axis=lead), g.sum(axis=lead)

    return _make(out, (x, gamma, beta), backward, "layernorm")


def groupnorm(x: Tensor, num_groups: int, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Group normalization of ``[C, H, W]`` or ``[B, C, H, W]`` input."""
    x, gamma, beta = _lift(x), _lift(gamma), _lift(beta)
    squeeze = x.ndim == 3
    data = x.data[None] if squeeze else x.data
    if data.ndim != 4:
        raise DimensionError(f"groupnorm expects [C,H,W] or [B,C,H,W], got {x.shape}")
    b, c, h, w = data.shape
    if num_groups < 1 or c % num_groups:
        raise DimensionError(f"{c} channels are not divisible into {num_groups} groups")
    grouped = data.reshape(b, num_groups, c // num_groups, h, w)
    axes = (2, 3, 4)
    mu = grouped.mean(axis=axes, keepdims=True)
    centered = grouped - mu
    var = (centered * centered).mean(axis=axes, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    x_hat = (centered * inv_std).reshape(b, c, h, w)
    out = x_hat * gamma.data[:, None, None] + beta.data[:, None, None]
    if squeeze:
        out = out[0]

    def backward(g):
        g4 = g[None] if squeeze else g
        g_hat = (g4 * gamma.data[:, None, None]).reshape(b, num_groups, c // num_groups, h, w)
        gx = _normalize_backward(g_hat, x_hat.reshape(grouped.shape), inv_std, axes).reshape(b, c, h, w)
        ggamma = (g4 * x_hat).sum(axis=(0, 2, 3))
        gbeta = g4.sum(axis=(0, 2, 3))
        return (gx[0] if squeeze else gx), ggamma, gbeta

    return _make(out, (x, gamma, beta), backward, "groupnorm")


# -- convolution and sampling ---------------------------------------------------
def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of ``[B,C,H,W]`` (or ``[C,H,W]``) input with ``[O,C,k,k]`` kernels."""
    if stride < 1:
        raise ParameterError(f"stride must be >= 1, got {stride}")
    if padding < 0:
        raise ParameterError(f"padding must be >= 0, got {padding}")
    x, kernel = _lift(x), _lift(kernel)
    squeeze = x.ndim == 3
    data = x.data[None] if squeeze else x.data
    if data.ndim != 4 or kernel.ndim != 4:
        raise DimensionError(f"conv2d expects 4-d input and kernel, got {x.shape}, {kernel.shape}")
    b, c, h, w = data.shape
    o, kc, kh, kw = kernel.shape
    if kc != c:
        raise DimensionError(f"kernel expects {kc} channels, input has {c}")
    if h + 2 * padding < kh or w + 2 * padding < kw:
        raise DimensionError("kernel larger than padded input")
    padded = np.pad(data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else data
    windows = sliding_window_view(padded, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = windows.shape[2], windows.shape[3]
    # [B, C, Ho, Wo, kh, kw] x [O, C, kh, kw] -> [B, O, Ho, Wo]
    out = np.einsum("bcyxij,ocij->boyx", windows, kernel.data, optimize=True)
    parents: tuple[Tensor, ...] = (x, kernel)
    if bias is not None:
        bias = _lift(bias)
        out = out + bias.data[None, :, None, None]
        parents = parents + (bias,)
    result = out[0] if squeeze else out

    def backward(g):
        g4 = g[None] if squeeze else g
        gk = np.einsum("bcyxij,boyx->ocij", windows, g4, optimize=True)
        gpad = np.zeros_like(padded)
        for i in range(kh):
            for j in range(kw):
                gpad[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += np.einsum(
                    "boyx,oc->bcyx", g4, kernel.data[:, :, i, j], optimize=True
                )
        gx = gpad[:, :, padding:padding + h, padding:padding + w] if padding else gpad
        grads = [gx[0] if squeeze else gx, gk]
        if bias is not None:
            grads.append(g4.sum(axis=(0, 2, 3)))
        return tuple(grads)

    return _make(np.ascontiguousarray(result), parents, backward, "conv2d")


def bilinear_weights(height: int, width: int, points: np.ndarray):
    """Corner indices and weights for bilinear sampling at continuous pixel coordinates.

    A continuous coordinate ``u`` addresses array index ``u - 0.5`` (pixel
    centres sit at half-integers); samples beyond the border are clamped to it.
    Returns ``(y0, y1, x0, x1, wy, wx)`` arrays of length ``len(points)``.
    """
    px = np.clip(points[:, 0] - 0.5, 0.0, width - 1.0)
    py = np.clip(points[:, 1] - 0.5, 0.0, height - 1.0)
    x0 = np.floor(px).astype(np.intp)
    y0 = np.floor(py).astype(np.intp)
    x1 = np.minimum(x0 + 1, width - 1)
    y1 = np.minimum(y0 + 1, height - 1)
    return y0, y1, x0, x1, py - y0, px - x0


def bilinear_sample(feature: Tensor, points) -> Tensor:
    """Sample ``[C, H, W]`` features at ``P`` continuous (x, y) points -> ``[C, P]``.

    Gradients flow to ``feature`` only.
    """
    feature = _lift(feature)
    points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if len(points) == 0:
        raise DimensionError("bilinear_sample needs at least one point")
    if feature.ndim != 3:
        raise DimensionError(f"bilinear_sample expects [C,H,W], got {feature.shape}")
    _, h, w = feature.shape
    y0, y1, x0, x1, wy, wx = bilinear_weights(h, w, points)
    w00 = (1 - wy) * (1 - wx)
    w01 = (1 - wy) * wx
    w10 = wy * (1 - wx)
    w11 = wy * wx
    f = feature.data
    out = f[:, y0, x0] * w00 + f[:, y0, x1] * w01 + f[:, y1, x0] * w10 + f[:, y1, x1] * w11

    def backward(g):
        gf = np.zeros_like(f)
        for yy, xx, ww in ((y0, x0, w00), (y0, x1, w01), (y1, x0, w10), (y1, x1, w11)):
            np.add.at(gf, (slice(None), yy, xx), g * ww)
        return (gf,)

    return _make(out.astype(f.dtype, copy=False), (feature,), backward, "bilinear_sample")


# -- gradient checking -------------------------------------------------------------
@dataclass
class GradientReport:
    max_rel_error: float
    max_abs_error: float
    checked: int
    worst: str = ""
    details: dict = field(default_factory=dict)

    def passed(self, tol: float) -> bool:
        return self.max_rel_error <= tol


def check_gradients(
    f: Callable[[], Tensor],
    leaves: Iterable[Tensor] | dict[str, Tensor],
    eps: float = 1e-5,
    tol: float = 1e-4,
    max_entries: int | None = None,
    rng: np.random.Generator | None = None,
    floor: float = 1e-6,
) -> GradientReport:
    """Compare reverse-mode gradients of scalar ``f()`` against central differences.

    The relative error of an entry is ``|analytic - numeric| / max(|analytic|,
    |numeric|, floor)``; ``floor`` keeps vanishing gradients from turning
    rounding noise into huge ratios.  With ``max_entries`` only that many
    randomly chosen coordinates of each leaf are perturbed.
    """
    named = dict(leaves) if isinstance(leaves, dict) else {f"leaf{i}": t for i, t in enumerate(leaves)}
    for t in named.values():
        t.grad = None
        t.requires_grad = True
    loss = f()
    loss.backward()
    analytic = {k: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data)) for k, t in named.items()}
    rng = rng or np.random.default_rng(0)

    worst_rel, worst_abs, checked, worst = 0.0, 0.0, 0, ""
    details = {}
    with no_grad():
        for name, t in named.items():
            flat = t.data.reshape(-1)
            idx = np.arange(flat.size)
            if max_entries is not None and flat.size > max_entries:
                idx = rng.choice(flat.size, size=max_entries, replace=False)
            leaf_worst = 0.0
            for i in idx:
                orig = flat[i]
                flat[i] = orig + eps
                up = f().item()
                flat[i] = orig - eps
                down = f().item()
                flat[i] = orig
                numeric = (up - down) / (2 * eps)
                a = analytic[name].reshape(-1)[i]
                err = abs(a - numeric)
                rel = err / max(abs(a), abs(numeric), floor)
                checked += 1
                worst_abs = max(worst_abs, err)
                leaf_worst = max(leaf_worst, rel)
                if rel > worst_rel:
                    worst_rel, worst = rel, f"{name}[{int(i)}]"
            details[name] = leaf_worst
    return GradientReport(worst_rel, worst_abs, checked, worst, details)
