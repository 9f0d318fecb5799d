"""Differentiable primitives.

Each primitive is a registered :class:`Function`; the lowercase wrappers at
the bottom are the public entry points.
"""

from __future__ import annotations

import math
from typing import Any, Optional, Sequence

import numpy as np

from .tensor import DimensionError, Function, Tensor, register, unbroadcast

_GELU_C = math.sqrt(2.0 / math.pi)


# --------------------------------------------------------------------------
# elementwise arithmetic
# --------------------------------------------------------------------------
@register
class Add(Function):
    name = "add"

    def forward(self, a, b):
        self.shapes = (a.shape, b.shape)
        return a + b

    def backward(self, g):
        return unbroadcast(g, self.shapes[0]), unbroadcast(g, self.shapes[1])


@register
class Sub(Function):
    name = "sub"

    def forward(self, a, b):
        self.shapes = (a.shape, b.shape)
        return a - b

    def backward(self, g):
        return unbroadcast(g, self.shapes[0]), unbroadcast(-g, self.shapes[1])


@register
class Mul(Function):
    name = "mul"

    def forward(self, a, b):
        self.a, self.b = a, b
        return a * b

    def backward(self, g):
        return unbroadcast(g * self.b, self.a.shape), unbroadcast(g * self.a, self.b.shape)


@register
class Div(Function):
    name = "div"

    def forward(self, a, b):
        self.a, self.b = a, b
        return a / b

    def backward(self, g):
        ga = g / self.b
        gb = -g * self.a / (self.b * self.b)
        return unbroadcast(ga, self.a.shape), unbroadcast(gb, self.b.shape)


@register
class Neg(Function):
    name = "neg"

    def forward(self, a):
        return -a

    def backward(self, g):
        return (-g,)


@register
class Power(Function):
    name = "power"

    def forward(self, a, exponent: float = 2.0):
        self.a, self.p = a, exponent
        if exponent == 2:
            return a * a
        return a**exponent

    def backward(self, g):
        p = self.p
        if p == 2:
            return (g * 2 * self.a,)
        return (g * p * self.a ** (p - 1),)


@register
class Exp(Function):
    name = "exp"

    def forward(self, a):
        self.y = np.exp(a)
        return self.y

    def backward(self, g):
        return (g * self.y,)


@register
class Log(Function):
    name = "log"

    def forward(self, a):
        self.a = a
        return np.log(a)

    def backward(self, g):
        return (g / self.a,)


@register
class Sqrt(Function):
    name = "sqrt"

    def forward(self, a):
        self.y = np.sqrt(a)
        return self.y

    def backward(self, g):
        return (g * 0.5 / self.y,)


@register
class Tanh(Function):
    name = "tanh"

    def forward(self, a):
        self.y = np.tanh(a)
        return self.y

    def backward(self, g):
        return (g * (1.0 - self.y * self.y),)


@register
class Relu(Function):
    name = "relu"

    def forward(self, a):
        self.mask = a > 0
        return np.where(self.mask, a, 0).astype(a.dtype, copy=False)

    def backward(self, g):
        return (g * self.mask,)


@register
class Gelu(Function):
    """GELU, tanh approximation."""

    name = "gelu"

    def forward(self, x):
        self.x = x
        # x * x * x: np.power is far slower than repeated multiplication
        self.t = np.tanh(_GELU_C * (x + 0.044715 * (x * x * x)))
        return 0.5 * x * (1.0 + self.t)

    def backward(self, g):
        x, t = self.x, self.t
        dt = (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * dt),)


# --------------------------------------------------------------------------
# linear algebra
# --------------------------------------------------------------------------
@register
class MatMul(Function):
    name = "matmul"

    def forward(self, a, b):
        if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
            raise DimensionError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}")
        try:
            np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
        except ValueError:
            raise DimensionError(f"matmul: batch extents of {a.shape} and {b.shape} do not broadcast") from None
        self.a, self.b = a, b
        return a @ b

    def backward(self, g):
        a, b = self.a, self.b
        if b.ndim == 2:
            # fold batch dims into rows: one large GEMM per gradient
            ga = g @ b.T
            gb = a.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            return unbroadcast(ga, a.shape), gb
        ga = g @ np.swapaxes(b, -1, -2)
        gb = np.swapaxes(a, -1, -2) @ g
        return unbroadcast(ga, a.shape), unbroadcast(gb, b.shape)


# --------------------------------------------------------------------------
# reductions and shape
# --------------------------------------------------------------------------
def _norm_axes(axis: Any, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


@register
class Sum(Function):
    name = "sum"

    def forward(self, a, axis=None, keepdims=False):
        self.shape = a.shape
        self.axes = _norm_axes(axis, a.ndim)
        self.keepdims = keepdims
        return np.asarray(a.sum(axis=self.axes, keepdims=keepdims))

    def backward(self, g):
        if not self.keepdims:
            g = np.expand_dims(g, self.axes)
        return (np.broadcast_to(g, self.shape).copy(),)


@register
class Mean(Function):
    name = "mean"

    def forward(self, a, axis=None, keepdims=False):
        self.shape = a.shape
        self.axes = _norm_axes(axis, a.ndim)
        self.keepdims = keepdims
        self.count = int(np.prod([a.shape[i] for i in self.axes])) if self.axes else 1
        return np.asarray(a.mean(axis=self.axes, keepdims=keepdims))

    def backward(self, g):
        if not self.keepdims:
            g = np.expand_dims(g, self.axes)
        return (np.broadcast_to(g / self.count, self.shape).copy(),)


@register
class Reshape(Function):
    name = "reshape"

    def forward(self, a, shape=()):
        self.shape = a.shape
        return a.reshape(shape)

    def backward(self, g):
        return (g.reshape(self.shape),)


@register
class Transpose(Function):
    name = "transpose"

    def forward(self, a, axes=None):
        self.axes = tuple(axes) if axes is not None else tuple(reversed(range(a.ndim)))
        return np.ascontiguousarray(a.transpose(self.axes))

    def backward(self, g):
        return (np.ascontiguousarray(g.transpose(np.argsort(self.axes))),)


@register
class GetItem(Function):
    name = "getitem"

    def forward(self, a, index=None):
        self.shape, self.dtype, self.index = a.shape, a.dtype, index
        return np.array(a[index], copy=True)

    def backward(self, g):
        out = np.zeros(self.shape, dtype=self.dtype)
        np.add.at(out, self.index, g)
        return (out,)


@register
class Concat(Function):
    name = "concat"

    def forward(self, *arrays, axis=0):
        self.axis = axis
        self.splits = np.cumsum([x.shape[axis] for x in arrays])[:-1]
        return np.concatenate(arrays, axis=axis)

    def backward(self, g):
        return tuple(np.split(g, self.splits, axis=self.axis))


# --------------------------------------------------------------------------
# normalisation / probability
# --------------------------------------------------------------------------
def _softmax(x: np.ndarray, axis: int) -> np.ndarray:
    z = x - x.max(axis=axis, keepdims=True)
    np.exp(z, out=z)
    z /= z.sum(axis=axis, keepdims=True)
    return z


@register
class Softmax(Function):
    name = "softmax"

    def forward(self, x, axis=-1):
        self.axis = axis
        self.y = _softmax(x, axis)
        return self.y

    def backward(self, g):
        y = self.y
        return (y * (g - (g * y).sum(axis=self.axis, keepdims=True)),)


@register
class LogSoftmax(Function):
    name = "log_softmax"

    def forward(self, x, axis=-1):
        self.axis = axis
        z = x - x.max(axis=axis, keepdims=True)
        out = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))
        self.p = np.exp(out)
        return out

    def backward(self, g):
        return (g - self.p * g.sum(axis=self.axis, keepdims=True),)


@register
class LayerNorm(Function):
    """Normalises over the last axis, then applies ``gamma * x + beta``."""

    name = "layernorm"

    def forward(self, x, gamma, beta, eps=1e-5):
        if gamma.shape != x.shape[-1:] or beta.shape != x.shape[-1:]:
            raise DimensionError(
                f"layernorm: gamma {gamma.shape} / beta {beta.shape} do not match last axis of {x.shape}"
            )
        mu = x.mean(axis=-1, keepdims=True)
        xc = x - mu
        var = (xc * xc).mean(axis=-1, keepdims=True)
        self.inv = 1.0 / np.sqrt(var + eps)
        self.xhat = xc * self.inv
        self.gamma = gamma
        return self.xhat * gamma + beta

    def backward(self, g):
        xhat, inv = self.xhat, self.inv
        lead = tuple(range(g.ndim - 1))
        dgamma = (g * xhat).sum(axis=lead)
        dbeta = g.sum(axis=lead)
        dxhat = g * self.gamma
        n = xhat.shape[-1]
        dx = (inv / n) * (
            n * dxhat - dxhat.sum(axis=-1, keepdims=True) - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True)
        )
        return dx, dgamma, dbeta


# --------------------------------------------------------------------------
# public wrappers
# --------------------------------------------------------------------------
def add(a: Any, b: Any) -> Tensor:
    return Add.apply(a, b)


def sub(a: Any, b: Any) -> Tensor:
    return Sub.apply(a, b)


def mul(a: Any, b: Any) -> Tensor:
    return Mul.apply(a, b)


def div(a: Any, b: Any) -> Tensor:
    return Div.apply(a, b)


def neg(a: Tensor) -> Tensor:
    return Neg.apply(a)


def power(a: Tensor, exponent: float) -> Tensor:
    return Power.apply(a, exponent=exponent)


def exp(a: Tensor) -> Tensor:
    return Exp.apply(a)


def log(a: Tensor) -> Tensor:
    return Log.apply(a)


def sqrt(a: Tensor) -> Tensor:
    return Sqrt.apply(a)


def tanh(a: Tensor) -> Tensor:
    return Tanh.apply(a)


def relu(a: Tensor) -> Tensor:
    return Relu.apply(a)


def gelu(a: Tensor) -> Tensor:
    return Gelu.apply(a)


def matmul(a: Any, b: Any) -> Tensor:
    return MatMul.apply(a, b)


def sum(a: Tensor, axis: Any = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    return Sum.apply(a, axis=axis, keepdims=keepdims)


def mean(a: Tensor, axis: Any = None, keepdims: bool = False) -> Tensor:
    return Mean.apply(a, axis=axis, keepdims=keepdims)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    return Reshape.apply(a, shape=tuple(shape))


def transpose(a: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    return Transpose.apply(a, axes=axes)


def getitem(a: Tensor, index: Any) -> Tensor:
    return GetItem.apply(a, index=index)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    return Concat.apply(*tensors, axis=axis)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    return Softmax.apply(x, axis=axis)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    return LogSoftmax.apply(x, axis=axis)


def layernorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    return LayerNorm.apply(x, gamma, beta, eps=eps)


# composites --------------------------------------------------------------
def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    y = matmul(x, weight)
    return y if bias is None else add(y, bias)


def mse(a: Tensor, b: Any) -> Tensor:
    d = sub(a, b)
    return mean(mul(d, d))


def var(x: Tensor, axis: int = 0, ddof: int = 1) -> Tensor:
    n = x.shape[axis]
    xc = sub(x, mean(x, axis=axis, keepdims=True))
    return div(sum(mul(xc, xc), axis=axis), n - ddof)


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer ``labels``."""
    logp = log_softmax(logits, axis=-1)
    onehot = np.zeros(logits.shape, dtype=logits.dtype)
    onehot[np.arange(len(labels)), labels] = 1
    return neg(mean(sum(mul(logp, onehot), axis=-1)))
