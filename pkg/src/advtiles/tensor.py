"""Reverse-mode automatic differentiation over dense numpy arrays.

The graph is a define-by-run tape: every operation records its parents and a
closure that routes the output gradient back to them. ``backward()`` walks the
tape in reverse topological (creation) order, so gradient accumulation order
is fixed and runs are bitwise reproducible.

All data is float64. Every public operation checks its result for NaN/Inf and
raises :class:`NonFiniteError` instead of propagating silently.
"""

from __future__ import annotations

import numpy as np

__all__ = ["Tensor", "NonFiniteError", "conv2d", "conv_transpose2d", "max_pool2d"]

_DTYPE = np.float64


class NonFiniteError(ArithmeticError):
    """An operation produced NaN or Inf."""


def _check_finite(data: np.ndarray, op: str) -> np.ndarray:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite values produced by '{op}'")
    return data


def _as_array(value) -> np.ndarray:
    return np.asarray(value, dtype=_DTYPE)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (the inverse of numpy broadcasting)."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    """A dense array with optional gradient tracking."""

    def __init__(self, data, requires_grad: bool = False):
        self.data = _check_finite(_as_array(data), "tensor")
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    # -- introspection -------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    # -- graph construction --------------------------------------------

    @staticmethod
    def _result(data, parents, backward, op: str) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = _check_finite(np.asarray(data, dtype=_DTYPE), op)
        out.requires_grad = any(p.requires_grad for p in parents)
        out.grad = None
        out._parents = tuple(parents) if out.requires_grad else ()
        out._backward = backward if out.requires_grad else None
        return out

    # -- arithmetic ----------------------------------------------------

    def __add__(self, other):
        other = other if isinstance(other, Tensor) else Tensor(other)

        def backward(grad, out):
            return (_unbroadcast(grad, self.shape), _unbroadcast(grad, other.shape))

        return Tensor._result(self.data + other.data, (self, other), backward, "add")

    __radd__ = __add__

    def __neg__(self):
        def backward(grad, out):
            return (-grad,)

        return Tensor._result(-self.data, (self,), backward, "neg")

    def __sub__(self, other):
        other = other if isinstance(other, Tensor) else Tensor(other)

        def backward(grad, out):
            return (_unbroadcast(grad, self.shape), _unbroadcast(-grad, other.shape))

        return Tensor._result(self.data - other.data, (self, other), backward, "sub")

    def __rsub__(self, other):
        return Tensor(other) - self

    def __mul__(self, other):
        other = other if isinstance(other, Tensor) else Tensor(other)

        def backward(grad, out):
            return (
                _unbroadcast(grad * other.data, self.shape),
                _unbroadcast(grad * self.data, other.shape),
            )

        return Tensor._result(self.data * other.data, (self, other), backward, "mul")

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = other if isinstance(other, Tensor) else Tensor(other)

        def backward(grad, out):
            return (
                _unbroadcast(grad / other.data, self.shape),
                _unbroadcast(-grad * self.data / other.data**2, other.shape),
            )

        return Tensor._result(self.data / other.data, (self, other), backward, "div")

    def __pow__(self, exponent: float):
        def backward(grad, out):
            return (grad * exponent * self.data ** (exponent - 1),)

        return Tensor._result(self.data**exponent, (self,), backward, "pow")

    def __matmul__(self, other):
        other = other if isinstance(other, Tensor) else Tensor(other)

        def backward(grad, out):
            return (grad @ other.data.T, self.data.T @ grad)

        return Tensor._result(self.data @ other.data, (self, other), backward, "matmul")

    # -- shape ops -----------------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.shape

        def backward(grad, out):
            return (grad.reshape(old),)

        return Tensor._result(self.data.reshape(shape), (self,), backward, "reshape")

    def transpose2d(self):
        def backward(grad, out):
            return (grad.T,)

        return Tensor._result(self.data.T, (self,), backward, "transpose")

    # -- reductions ----------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False):
        shape = self.shape

        def backward(grad, out):
            if axis is None:
                return (np.broadcast_to(grad, shape).copy(),)
            g = grad
            if not keepdims:
                axes = axis if isinstance(axis, tuple) else (axis,)
                for a in sorted(a % len(shape) for a in axes):
                    g = np.expand_dims(g, a)
            return (np.broadcast_to(g, shape).copy(),)

        return Tensor._result(self.data.sum(axis=axis, keepdims=keepdims), (self,), backward, "sum")

    def mean(self, axis=None, keepdims: bool = False):
        if axis is None:
            count = self.size
        else:
            axes = axis if isinstance(axis, tuple) else (axis,)
            count = int(np.prod([self.shape[a] for a in axes]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    # -- nonlinearities ------------------------------------------------

    def relu(self):
        def backward(grad, out):
            return (grad * (self.data > 0),)

        return Tensor._result(np.maximum(self.data, 0.0), (self,), backward, "relu")

    def leaky_relu(self, slope: float = 0.01):
        def backward(grad, out):
            return (grad * np.where(self.data > 0, 1.0, slope),)

        return Tensor._result(
            np.where(self.data > 0, self.data, slope * self.data), (self,), backward, "leaky_relu"
        )

    def tanh(self):
        def backward(grad, out):
            return (grad * (1.0 - out.data**2),)

        return Tensor._result(np.tanh(self.data), (self,), backward, "tanh")

    def sigmoid(self):
        def backward(grad, out):
            return (grad * out.data * (1.0 - out.data),)

        # computed in two branches to avoid overflow in exp
        x = self.data
        pos = x >= 0
        value = np.empty_like(x)
        value[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        value[~pos] = ex / (1.0 + ex)
        return Tensor._result(value, (self,), backward, "sigmoid")

    def exp(self):
        def backward(grad, out):
            return (grad * out.data,)

        return Tensor._result(np.exp(self.data), (self,), backward, "exp")

    def log(self):
        def backward(grad, out):
            return (grad / self.data,)

        return Tensor._result(np.log(self.data), (self,), backward, "log")

    def log_softmax(self, axis: int = 1):
        """Numerically stable log-softmax along ``axis``."""
        shifted = self.data - self.data.max(axis=axis, keepdims=True)
        logsumexp = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
        value = shifted - logsumexp

        def backward(grad, out):
            return (grad - np.exp(out.data) * grad.sum(axis=axis, keepdims=True),)

        return Tensor._result(value, (self,), backward, "log_softmax")

    # -- backward pass ---------------------------------------------------

    def backward(self) -> None:
        """Accumulate gradients of this scalar into every reachable tensor."""
        if self.size != 1:
            raise ValueError(f"backward() requires a scalar loss, got shape {self.shape}")

        # post-order DFS appends every node after all of its inputs, so the
        # reversed list is a fixed reverse-topological schedule: each node is
        # processed only after every consumer has contributed its gradient
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
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
                if id(parent) not in seen:
                    stack.append((parent, False))

        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is None or node.grad is None:
                continue
            parent_grads = node._backward(node.grad, node)
            for parent, grad in zip(node._parents, parent_grads):
                if grad is None or not parent.requires_grad:
                    continue
                if parent.grad is None:
                    parent.grad = np.zeros_like(parent.data)
                parent.grad += grad


# ---------------------------------------------------------------------------
# Convolution machinery (im2col based)
# ---------------------------------------------------------------------------


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, pads: tuple[int, int, int, int]):
    """Extract stride-spaced (kh, kw) windows.

    pads = (top, bottom, left, right). Returns (N, OH, OW, C*kh*kw).
    """
    pt, pb, pl, pr = pads
    if pt or pb or pl or pr:
        x = np.pad(x, ((0, 0), (0, 0), (pt, pb), (pl, pr)))
    windows = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    windows = windows[:, :, ::stride, ::stride]
    n, c, oh, ow = windows.shape[:4]
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(n, oh, ow, c * kh * kw)
    return np.ascontiguousarray(cols), oh, ow


def _col2im_add(
    dcols: np.ndarray,
    channels: int,
    height: int,
    width: int,
    kh: int,
    kw: int,
    stride: int,
) -> np.ndarray:
    """Scatter-add (N, OH, OW, C*kh*kw) windows back onto an (N, C, H, W) canvas."""
    n, oh, ow = dcols.shape[:3]
    canvas = np.zeros((n, channels, height, width), dtype=_DTYPE)
    dcols = dcols.reshape(n, oh, ow, channels, kh, kw).transpose(0, 3, 1, 2, 4, 5)
    for u in range(kh):
        for v in range(kw):
            canvas[:, :, u : u + oh * stride : stride, v : v + ow * stride : stride] += dcols[
                :, :, :, :, u, v
            ]
    return canvas


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of (N, C, H, W) with (OC, C, KH, KW) weights."""
    n, c, h, w = x.shape
    oc, ic, kh, kw = weight.shape
    if ic != c:
        raise ValueError(f"conv2d channel mismatch: input {c}, weight expects {ic}")
    cols, oh, ow = _im2col(x.data, kh, kw, stride, (padding, padding, padding, padding))
    flat = cols.reshape(n * oh * ow, c * kh * kw)
    out = flat @ weight.data.reshape(oc, -1).T
    out = out.reshape(n, oh, ow, oc).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.data.reshape(1, oc, 1, 1)

    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(grad, node):
        gflat = grad.transpose(0, 2, 3, 1).reshape(n * oh * ow, oc)
        dw = (gflat.T @ flat).reshape(weight.shape)
        dcols = (gflat @ weight.data.reshape(oc, -1)).reshape(n, oh, ow, c * kh * kw)
        dx_pad = _col2im_add(dcols, c, h + 2 * padding, w + 2 * padding, kh, kw, stride)
        dx = dx_pad[:, :, padding : padding + h, padding : padding + w]
        if bias is None:
            return (dx, dw)
        return (dx, dw, grad.sum(axis=(0, 2, 3)))

    return Tensor._result(out, parents, backward, "conv2d")


def conv_transpose2d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None,
    stride: int = 1,
    padding: int = 0,
    output_padding: int = 0,
) -> Tensor:
    """Transposed convolution; weight layout (IC, OC, KH, KW).

    Output spatial size: (in - 1) * stride - 2 * padding + kernel + output_padding.
    """
    n, c, h, w = x.shape
    ic, oc, kh, kw = weight.shape
    if ic != c:
        raise ValueError(f"conv_transpose2d channel mismatch: input {c}, weight expects {ic}")
    if output_padding >= stride:
        raise ValueError("output_padding must be smaller than stride")
    oh = (h - 1) * stride - 2 * padding + kh + output_padding
    ow = (w - 1) * stride - 2 * padding + kw + output_padding
    # natural scatter canvas before cropping the padding margin
    ch = (h - 1) * stride + kh + output_padding
    cw = (w - 1) * stride + kw + output_padding

    flat = x.data.transpose(0, 2, 3, 1).reshape(n * h * w, c)
    cols = (flat @ weight.data.reshape(c, -1)).reshape(n, h, w, oc * kh * kw)
    canvas = _col2im_add(cols, oc, ch, cw, kh, kw, stride)
    out = canvas[:, :, padding : padding + oh, padding : padding + ow]
    if bias is not None:
        out = out + bias.data.reshape(1, oc, 1, 1)

    parents = (x, weight) if bias is None else (x, weight, bias)
    # gradient windows index the output padded back onto the scatter canvas
    pads = (padding, ch - padding - oh, padding, cw - padding - ow)

    def backward(grad, node):
        gcols, goh, gow = _im2col(grad, kh, kw, stride, pads)
        gflat = gcols.reshape(n * h * w, oc * kh * kw)
        dx = (gflat @ weight.data.reshape(c, -1).T).reshape(n, h, w, c).transpose(0, 3, 1, 2)
        dw = (flat.T @ gflat).reshape(weight.shape)
        if bias is None:
            return (dx, dw)
        return (dx, dw, grad.sum(axis=(0, 2, 3)))

    return Tensor._result(out, parents, backward, "conv_transpose2d")


def max_pool2d(x: Tensor, kernel: int) -> Tensor:
    """Non-overlapping max pooling (stride = kernel). Ties keep the first index."""
    n, c, h, w = x.shape
    if h % kernel or w % kernel:
        raise ValueError(f"max_pool2d: spatial dims {h}x{w} not divisible by kernel {kernel}")
    oh, ow = h // kernel, w // kernel
    blocks = x.data.reshape(n, c, oh, kernel, ow, kernel).transpose(0, 1, 2, 4, 3, 5)
    blocks = blocks.reshape(n, c, oh, ow, kernel * kernel)
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def backward(grad, node):
        dblocks = np.zeros((n, c, oh, ow, kernel * kernel), dtype=_DTYPE)
        np.put_along_axis(dblocks, arg[..., None], grad[..., None], axis=-1)
        dx = dblocks.reshape(n, c, oh, ow, kernel, kernel).transpose(0, 1, 2, 4, 3, 5)
        return (dx.reshape(n, c, h, w),)

    return Tensor._result(out, (x,), backward, "max_pool2d")
