"""
Dense float64 tensors with define-by-run reverse-mode differentiation.

Every operation returns a new Tensor and records a closure that maps the
output gradient to the gradients of its inputs. ``Tensor.backward`` walks the
recorded graph in reverse topological order and accumulates gradients into
every reachable tensor that requires them.

Only the operations the detector needs are provided. Binary operations follow
numpy broadcasting; gradients are summed back to the input shapes.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Iterator, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from src.models.errors import ContractError, NumericError, ShapeError

ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence[float]]
BackwardFn = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]

_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextmanager
def no_grad() -> Iterator[None]:
    """
    Disable graph recording on the current thread.
    """
    previous = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = previous


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    """
    n-dimensional float64 array that can take part in the gradient tape.

    Attributes:
        data: Row-major float64 values.
        requires_grad: Whether gradients are accumulated for this tensor.
        grad: Accumulated gradient with the same shape as ``data``, or None.
        name: Optional label used in diagnostics.
    """

    __array_priority__ = 100

    def __init__(
        self,
        data: ArrayLike,
        requires_grad: bool = False,
        name: Optional[str] = None,
        _parents: Tuple["Tensor", ...] = (),
        _backward: Optional[BackwardFn] = None,
    ) -> None:
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._parents = _parents
        self._backward = _backward

    # ------------------------------------------------------------------ #
    # Introspection
    # ------------------------------------------------------------------ #

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(
                f"item() requires a single element, got shape {self.shape}"
            )
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label})"

    def __len__(self) -> int:
        return self.shape[0]

    # ------------------------------------------------------------------ #
    # Graph construction
    # ------------------------------------------------------------------ #

    @staticmethod
    def _make(
        data: np.ndarray,
        parents: Tuple["Tensor", ...],
        backward: BackwardFn,
    ) -> "Tensor":
        if is_grad_enabled() and any(p.requires_grad for p in parents):
            return Tensor(
                data,
                requires_grad=True,
                _parents=parents,
                _backward=backward,
            )
        return Tensor(data)

    def backward(self) -> None:
        """
        Accumulate d(self)/d(t) into ``t.grad`` for every tensor ``t`` on the
        tape that requires gradients. Repeated calls add up.
        """
        if self.data.size != 1:
            raise ContractError(
                f"backward() needs a scalar loss, got shape {self.shape}"
            )
        if not self.requires_grad:
            raise ContractError(
                "backward() called on a tensor that does not depend on any "
                "tensor requiring gradients"
            )

        order: list[Tensor] = []
        visited: set[int] = set()
        stack: list[Tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))

        pending: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            grad = pending.pop(id(node), None)
            if grad is None:
                continue
            node.grad = grad.copy() if node.grad is None else node.grad + grad
            if node._backward is None:
                continue
            for parent, parent_grad in zip(
                node._parents, node._backward(grad)
            ):
                if parent_grad is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in pending:
                    pending[key] = pending[key] + parent_grad
                else:
                    pending[key] = parent_grad

    # ------------------------------------------------------------------ #
    # Elementwise arithmetic
    # ------------------------------------------------------------------ #

    def __add__(self, other: ArrayLike) -> "Tensor":
        other = as_tensor(other)
        a_shape, b_shape = self.shape, other.shape

        def backward(g: np.ndarray):
            return _unbroadcast(g, a_shape), _unbroadcast(g, b_shape)

        return Tensor._make(self.data + other.data, (self, other), backward)

    def __radd__(self, other: ArrayLike) -> "Tensor":
        return as_tensor(other) + self

    def __sub__(self, other: ArrayLike) -> "Tensor":
        other = as_tensor(other)
        a_shape, b_shape = self.shape, other.shape

        def backward(g: np.ndarray):
            return _unbroadcast(g, a_shape), _unbroadcast(-g, b_shape)

        return Tensor._make(self.data - other.data, (self, other), backward)

    def __rsub__(self, other: ArrayLike) -> "Tensor":
        return as_tensor(other) - self

    def __mul__(self, other: ArrayLike) -> "Tensor":
        other = as_tensor(other)
        a, b = self.data, other.data

        def backward(g: np.ndarray):
            return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)

        return Tensor._make(a * b, (self, other), backward)

    def __rmul__(self, other: ArrayLike) -> "Tensor":
        return as_tensor(other) * self

    def __truediv__(self, other: ArrayLike) -> "Tensor":
        other = as_tensor(other)
        a, b = self.data, other.data

        def backward(g: np.ndarray):
            return (
                _unbroadcast(g / b, a.shape),
                _unbroadcast(-g * a / (b * b), b.shape),
            )

        return Tensor._make(a / b, (self, other), backward)

    def __rtruediv__(self, other: ArrayLike) -> "Tensor":
        return as_tensor(other) / self

    def __neg__(self) -> "Tensor":
        return Tensor._make(-self.data, (self,), lambda g: (-g,))

    def __pow__(self, exponent: float) -> "Tensor":
        if isinstance(exponent, Tensor):
            raise ContractError("only constant exponents are supported")
        a = self.data
        p = float(exponent)

        def backward(g: np.ndarray):
            if p == 0.0:
                return (np.zeros_like(a),)
            return (g * p * np.power(a, p - 1.0),)

        return Tensor._make(np.power(a, p), (self,), backward)

    def __matmul__(self, other: ArrayLike) -> "Tensor":
        return matmul(self, as_tensor(other))

    def __getitem__(self, index) -> "Tensor":
        source_shape = self.shape

        def backward(g: np.ndarray):
            full = np.zeros(source_shape)
            np.add.at(full, index, g)
            return (full,)

        return Tensor._make(self.data[index], (self,), backward)

    # ------------------------------------------------------------------ #
    # Unary functions
    # ------------------------------------------------------------------ #

    def exp(self) -> "Tensor":
        out = np.exp(self.data)
        return Tensor._make(out, (self,), lambda g: (g * out,))

    def log(self) -> "Tensor":
        a = self.data
        return Tensor._make(np.log(a), (self,), lambda g: (g / a,))

    def sqrt(self) -> "Tensor":
        out = np.sqrt(self.data)
        return Tensor._make(out, (self,), lambda g: (g / (2.0 * out),))

    def abs(self) -> "Tensor":
        a = self.data
        return Tensor._make(np.abs(a), (self,), lambda g: (g * np.sign(a),))

    def sigmoid(self) -> "Tensor":
        out = _sigmoid(self.data)
        return Tensor._make(
            out, (self,), lambda g: (g * out * (1.0 - out),)
        )

    def softplus(self) -> "Tensor":
        """log(1 + exp(x)), evaluated without overflow."""
        a = self.data
        out = np.logaddexp(0.0, a)
        return Tensor._make(out, (self,), lambda g: (g * _sigmoid(a),))

    def relu(self) -> "Tensor":
        a = self.data
        mask = a > 0
        return Tensor._make(a * mask, (self,), lambda g: (g * mask,))

    def clip(self, low: Optional[float], high: Optional[float]) -> "Tensor":
        a = self.data
        out = np.clip(a, low, high)
        mask = out == a
        return Tensor._make(out, (self,), lambda g: (g * mask,))

    # ------------------------------------------------------------------ #
    # Reductions and shape manipulation
    # ------------------------------------------------------------------ #

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        shape = self.shape

        def backward(g: np.ndarray):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)

        return Tensor._make(
            self.data.sum(axis=axis, keepdims=keepdims), (self,), backward
        )

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        if axis is None:
            count = self.data.size
        else:
            axes = axis if isinstance(axis, tuple) else (axis,)
            count = int(np.prod([self.shape[a] for a in axes]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        source_shape = self.shape
        try:
            out = self.data.reshape(shape)
        except ValueError as exc:
            raise ShapeError(
                f"cannot reshape {source_shape} into {shape}"
            ) from exc
        return Tensor._make(
            out, (self,), lambda g: (g.reshape(source_shape),)
        )

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        inverse = tuple(np.argsort(axes))
        return Tensor._make(
            np.transpose(self.data, axes),
            (self,),
            lambda g: (np.transpose(g, inverse),),
        )

    @property
    def T(self) -> "Tensor":
        return self.transpose()


# ---------------------------------------------------------------------- #
# Free functions
# ---------------------------------------------------------------------- #


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return np.exp(-np.logaddexp(0.0, -x))


def as_tensor(value: ArrayLike) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """
    Matrix product of ``a[..., m, k]`` and ``b[..., k, n]``.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(
            f"matmul dimension mismatch: {a.shape} x {b.shape}"
        )
    a_data, b_data = a.data, b.data

    def backward(g: np.ndarray):
        grad_a = g @ np.swapaxes(b_data, -1, -2)
        grad_b = np.swapaxes(a_data, -1, -2) @ g
        return (
            _unbroadcast(grad_a, a_data.shape),
            _unbroadcast(grad_b, b_data.shape),
        )

    return Tensor._make(a_data @ b_data, (a, b), backward)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """
    Numerically stable softmax along ``axis``.
    """
    x = as_tensor(x)
    if not np.all(np.isfinite(x.data)):
        raise NumericError("softmax received non-finite input")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    exp = np.exp(shifted)
    out = exp / exp.sum(axis=axis, keepdims=True)

    def backward(g: np.ndarray):
        inner = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - inner),)

    return Tensor._make(out, (x,), backward)


def maximum(a: ArrayLike, b: ArrayLike) -> Tensor:
    """Elementwise maximum; ties send the gradient to ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    pick_a = a.data >= b.data

    def backward(g: np.ndarray):
        return (
            _unbroadcast(g * pick_a, a.shape),
            _unbroadcast(g * ~pick_a, b.shape),
        )

    return Tensor._make(np.maximum(a.data, b.data), (a, b), backward)


def minimum(a: ArrayLike, b: ArrayLike) -> Tensor:
    """Elementwise minimum; ties send the gradient to ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    pick_a = a.data <= b.data

    def backward(g: np.ndarray):
        return (
            _unbroadcast(g * pick_a, a.shape),
            _unbroadcast(g * ~pick_a, b.shape),
        )

    return Tensor._make(np.minimum(a.data, b.data), (a, b), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g: np.ndarray):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor._make(
        np.concatenate([t.data for t in tensors], axis=axis),
        tensors,
        backward,
    )


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)

    def backward(g: np.ndarray):
        return tuple(
            np.take(g, i, axis=axis) for i in range(len(tensors))
        )

    return Tensor._make(
        np.stack([t.data for t in tensors], axis=axis), tensors, backward
    )


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Optional[Tensor] = None,
    stride: int = 1,
    padding: int = 0,
) -> Tensor:
    """
    2-d cross-correlation of ``x[C_in, H, W]`` with ``weight[C_out, C_in,
    kh, kw]``; output is ``[C_out, H', W']`` with
    ``H' = (H + 2 * padding - kh) // stride + 1``.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 3 or weight.ndim != 4 or x.shape[0] != weight.shape[1]:
        raise ShapeError(
            f"conv2d expects x[C,H,W] and w[O,C,kh,kw] with matching C, "
            f"got {x.shape} and {weight.shape}"
        )
    _, height, width = x.shape
    _, _, kh, kw = weight.shape
    out_h = (height + 2 * padding - kh) // stride + 1
    out_w = (width + 2 * padding - kw) // stride + 1
    if out_h <= 0 or out_w <= 0:
        raise ShapeError(
            f"conv2d output would be {out_h}x{out_w} for input {x.shape}, "
            f"kernel {kh}x{kw}, stride {stride}, padding {padding}"
        )

    padded = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding)))
    windows = sliding_window_view(padded, (kh, kw), axis=(1, 2))
    windows = windows[:, ::stride, ::stride][:, :out_h, :out_w]
    w_data = weight.data
    out = np.einsum("cyxij,ocij->oyx", windows, w_data, optimize=True)

    parents: Tuple[Tensor, ...] = (x, weight)
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data[:, None, None]
        parents = parents + (bias,)

    def backward(g: np.ndarray):
        grad_w = np.einsum("oyx,cyxij->ocij", g, windows, optimize=True)
        grad_padded = np.zeros_like(padded)
        for i in range(kh):
            for j in range(kw):
                grad_padded[
                    :,
                    i: i + stride * out_h: stride,
                    j: j + stride * out_w: stride,
                ] += np.einsum("oc,oyx->cyx", w_data[:, :, i, j], g)
        grad_x = grad_padded[
            :, padding: padding + height, padding: padding + width
        ]
        grads = (grad_x, grad_w)
        if bias is not None:
            grads = grads + (g.sum(axis=(1, 2)),)
        return grads

    return Tensor._make(out, parents, backward)


def grid_sample(value: Tensor, points: Tensor) -> Tensor:
    """
    Bilinear sampling of ``value[B, C, H, W]`` at ``points[B, P, 2]``.

    Points are normalized (x, y) with (0, 0) at the center of pixel (0, 0)
    and (1, 1) at the center of pixel (H - 1, W - 1). Taps outside the map
    read zero. Returns ``[B, P, C]``; differentiable in both inputs.
    """
    value, points = as_tensor(value), as_tensor(points)
    if value.ndim != 4 or points.ndim != 3 or points.shape[-1] != 2:
        raise ShapeError(
            f"grid_sample expects value[B,C,H,W] and points[B,P,2], got "
            f"{value.shape} and {points.shape}"
        )
    if value.shape[0] != points.shape[0]:
        raise ShapeError(
            f"grid_sample batch mismatch: {value.shape} vs {points.shape}"
        )
    batch, _, height, width = value.shape
    channels_last = np.transpose(value.data, (0, 2, 3, 1))

    x = points.data[..., 0] * (width - 1)
    y = points.data[..., 1] * (height - 1)
    x0 = np.floor(x)
    y0 = np.floor(y)
    fx = x - x0
    fy = y - y0
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    b_index = np.arange(batch)[:, None]

    # (dx, dy, weight, d weight/d fx, d weight/d fy)
    corners = (
        (0, 0, (1 - fx) * (1 - fy), -(1 - fy), -(1 - fx)),
        (1, 0, fx * (1 - fy), 1 - fy, -fx),
        (0, 1, (1 - fx) * fy, -fy, 1 - fx),
        (1, 1, fx * fy, fy, fx),
    )
    taps = []
    out = np.zeros(points.shape[:2] + (value.shape[1],))
    for dx, dy, weight, dw_dfx, dw_dfy in corners:
        xi = x0 + dx
        yi = y0 + dy
        valid = (xi >= 0) & (xi < width) & (yi >= 0) & (yi < height)
        xi_c = np.clip(xi, 0, width - 1)
        yi_c = np.clip(yi, 0, height - 1)
        sampled = channels_last[b_index, yi_c, xi_c] * valid[..., None]
        out += sampled * weight[..., None]
        taps.append((yi_c, xi_c, valid, weight, dw_dfx, dw_dfy, sampled))

    def backward(g: np.ndarray):
        grad_value = np.zeros_like(channels_last)
        grad_fx = np.zeros(points.shape[:2])
        grad_fy = np.zeros(points.shape[:2])
        for yi_c, xi_c, valid, weight, dw_dfx, dw_dfy, sampled in taps:
            np.add.at(
                grad_value,
                (np.broadcast_to(b_index, yi_c.shape), yi_c, xi_c),
                g * (weight * valid)[..., None],
            )
            dot = (g * sampled).sum(axis=-1)
            grad_fx += dot * dw_dfx
            grad_fy += dot * dw_dfy
        grad_points = np.stack(
            [grad_fx * (width - 1), grad_fy * (height - 1)], axis=-1
        )
        return np.transpose(grad_value, (0, 3, 1, 2)), grad_points

    return Tensor._make(out, (value, points), backward)


def bilinear_sample(feature_map: Tensor, xy: ArrayLike) -> Tensor:
    """
    Sample ``feature_map[C, H, W]`` at one normalized point; returns ``[C]``.
    """
    feature_map, xy = as_tensor(feature_map), as_tensor(xy)
    channels, height, width = feature_map.shape
    sampled = grid_sample(
        feature_map.reshape(1, channels, height, width), xy.reshape(1, 1, 2)
    )
    return sampled.reshape(channels)


def sigmoid(x: ArrayLike) -> Tensor:
    return as_tensor(x).sigmoid()


def inverse_sigmoid(x: ArrayLike, eps: float = 1e-5) -> Tensor:
    """
    Logit of ``x`` with both numerator and denominator clamped at ``eps``.
    """
    x = as_tensor(x).clip(0.0, 1.0)
    return x.clip(eps, None).log() - (1.0 - x).clip(eps, None).log()


__all__ = [
    "Tensor",
    "as_tensor",
    "bilinear_sample",
    "concat",
    "conv2d",
    "grid_sample",
    "inverse_sigmoid",
    "is_grad_enabled",
    "matmul",
    "maximum",
    "minimum",
    "no_grad",
    "sigmoid",
    "softmax",
    "stack",
]
