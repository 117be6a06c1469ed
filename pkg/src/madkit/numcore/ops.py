"""Differentiable operations on Tensors.

Every function here evaluates eagerly in float64 and records a
vector-Jacobian closure per differentiable input.  Operations that can
produce non-finite values from finite inputs at working magnitudes
(division, exp, log, sqrt, power, softmax, cross-entropy, layer norm)
validate their outputs; the remaining ops preserve finiteness.  The checks
can be disabled globally for benchmarking via ``set_finite_checks(False)``.

Broadcasting follows numpy semantics; gradients of broadcast inputs are
summed back to the input shape.
"""

from __future__ import annotations

import numpy as np

from ..errors import ParameterError, UsageError, ValidationError
from .tensor import Tensor, as_tensor

_CE_EPS = 1e-12
_FINITE_CHECKS = True


def set_finite_checks(enabled: bool) -> None:
    global _FINITE_CHECKS
    _FINITE_CHECKS = bool(enabled)


def finite_checks_enabled() -> bool:
    return _FINITE_CHECKS


def _checked(arr: np.ndarray, op: str) -> np.ndarray:
    if _FINITE_CHECKS and not np.all(np.isfinite(arr)):
        raise ValidationError(f"operation {op!r} produced non-finite values")
    return arr


def _sum_to_shape(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcast gradient back to the shape of its source."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _result(data: np.ndarray, op: str,
            pairs: list[tuple[Tensor, object]]) -> Tensor:
    """Build the output node, recording vjps only for inputs that need them."""
    vjps = tuple((p, fn) for p, fn in pairs if p.requires_grad)
    return Tensor(data, requires_grad=bool(vjps), op=op, vjps=vjps)


# -- arithmetic ---------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data
    return _result(out, "add", [
        (a, lambda g: _sum_to_shape(g, a.data.shape)),
        (b, lambda g: _sum_to_shape(g, b.data.shape)),
    ])


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data
    return _result(out, "sub", [
        (a, lambda g: _sum_to_shape(g, a.data.shape)),
        (b, lambda g: _sum_to_shape(-g, b.data.shape)),
    ])


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data
    return _result(out, "mul", [
        (a, lambda g: _sum_to_shape(g * b.data, a.data.shape)),
        (b, lambda g: _sum_to_shape(g * a.data, b.data.shape)),
    ])


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = _checked(a.data / b.data, "div")
    return _result(out, "div", [
        (a, lambda g: _sum_to_shape(g / b.data, a.data.shape)),
        (b, lambda g: _sum_to_shape(-g * out / b.data, b.data.shape)),
    ])


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _result(-a.data, "neg", [(a, lambda g: -g)])


def matmul(a, b) -> Tensor:
    """Matrix product with numpy batch broadcasting; inputs must be >= 2-D."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise UsageError("matmul requires tensors with at least 2 dimensions")
    out = np.matmul(a.data, b.data)

    def grad_a(g):
        bt = np.swapaxes(b.data, -1, -2)
        return _sum_to_shape(np.matmul(g, bt), a.data.shape)

    def grad_b(g):
        at = np.swapaxes(a.data, -1, -2)
        return _sum_to_shape(np.matmul(at, g), b.data.shape)

    return _result(out, "matmul", [(a, grad_a), (b, grad_b)])


def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        out = _checked(np.exp(a.data), "exp")
    return _result(out, "exp", [(a, lambda g: g * out)])


def log(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = _checked(np.log(a.data), "log")
    return _result(out, "log", [(a, lambda g: g / a.data)])


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(invalid="ignore"):
        out = _checked(np.sqrt(a.data), "sqrt")
    return _result(out, "sqrt", [(a, lambda g: g * 0.5 / out)])


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _result(out, "tanh", [(a, lambda g: g * (1.0 - out * out))])


def power(a, p: float) -> Tensor:
    a = as_tensor(a)
    p = float(p)
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        out = _checked(np.power(a.data, p), "power")
    return _result(out, "power", [
        (a, lambda g: g * p * np.power(a.data, p - 1.0)),
    ])


# -- reductions ---------------------------------------------------------------

def reduce_sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def grad(g):
        gg = np.asarray(g)
        if axis is None:
            return np.broadcast_to(gg, a.data.shape)
        if not keepdims:
            gg = np.expand_dims(gg, axis)
        return np.broadcast_to(gg, a.data.shape)

    return _result(np.asarray(out), "sum", [(a, grad)])


def reduce_mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size if axis is None else np.prod(
        [a.data.shape[ax] for ax in (axis if isinstance(axis, tuple) else (axis,))])

    def grad(g):
        gg = np.asarray(g) / count
        if axis is None:
            return np.broadcast_to(gg, a.data.shape)
        if not keepdims:
            gg = np.expand_dims(gg, axis)
        return np.broadcast_to(gg, a.data.shape)

    return _result(np.asarray(out), "mean", [(a, grad)])


# -- shape manipulation -------------------------------------------------------

def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    out = a.data.reshape(shape)
    return _result(out, "reshape", [(a, lambda g: g.reshape(a.data.shape))])


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is not None:
        axes = tuple(ax % a.ndim for ax in axes)
    out = np.transpose(a.data, axes)
    inv = None if axes is None else np.argsort(axes)
    return _result(out, "transpose", [(a, lambda g: np.transpose(g, inv))])


def getitem(a, idx) -> Tensor:
    a = as_tensor(a)
    out = a.data[idx]

    def grad(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return full

    return _result(np.asarray(out), "getitem", [(a, grad)])


def concat(tensors, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.data.shape[axis] for t in ts]
    offsets = np.cumsum([0] + sizes)

    pairs = []
    for i, t in enumerate(ts):
        lo, hi = offsets[i], offsets[i + 1]

        def grad(g, lo=lo, hi=hi):
            index = [slice(None)] * g.ndim
            index[axis] = slice(lo, hi)
            return g[tuple(index)]

        pairs.append((t, grad))
    return _result(out, "concat", pairs)


def broadcast_to(a, shape) -> Tensor:
    a = as_tensor(a)
    out = np.broadcast_to(a.data, shape)
    return _result(out.copy(), "broadcast",
                   [(a, lambda g: _sum_to_shape(g, a.data.shape))])


# -- neural-net primitives ----------------------------------------------------

_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a) -> Tensor:
    """Gaussian error linear unit, tanh approximation."""
    a = as_tensor(a)
    x = a.data
    # x*x*x instead of x**3: same polynomial, an order of magnitude faster
    inner = _GELU_C * (x + 0.044715 * (x * x * x))
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def grad(g):
        sech2 = 1.0 - t * t
        d = 0.5 * (1.0 + t) + 0.5 * x * sech2 * _GELU_C * (1.0 + 3 * 0.044715 * (x * x))
        return g * d

    return _result(out, "gelu", [(a, grad)])


def layer_norm(a, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis with population variance, then affine."""
    a, gamma, beta = as_tensor(a), as_tensor(gamma), as_tensor(beta)
    x = a.data
    m = x.mean(axis=-1, keepdims=True)
    d = x - m
    v = (d * d).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(v + eps)
    xhat = d * inv
    out = _checked(gamma.data * xhat + beta.data, "layer_norm")
    n = x.shape[-1]

    def grad_x(g):
        dxhat = g * gamma.data
        term1 = dxhat.mean(axis=-1, keepdims=True)
        term2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        return inv * (dxhat - term1 - xhat * term2)

    def grad_gamma(g):
        return _sum_to_shape(g * xhat, gamma.data.shape)

    def grad_beta(g):
        return _sum_to_shape(g, beta.data.shape)

    return _result(out, "layer_norm",
                   [(a, grad_x), (gamma, grad_gamma), (beta, grad_beta)])


def softmax(a, axis: int = -1) -> Tensor:
    """Numerically stable softmax along ``axis``."""
    return softmax_centered(a, center=None, temp=1.0, axis=axis)


def softmax_centered(z, center=None, temp: float = 1.0, axis: int = -1) -> Tensor:
    """softmax((z - center) / temp); the sharpening core of the distillation loss.

    ``center`` may be None (plain tempered softmax) or broadcastable to z.
    Temperature must be strictly positive.
    """
    if not temp > 0:
        raise ParameterError(f"softmax temperature must be positive, got {temp}")
    z = as_tensor(z)
    pairs = []
    if center is not None:
        center = as_tensor(center)
        logits = (z.data - center.data) / temp
    else:
        logits = z.data / temp
    shifted = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=axis, keepdims=True)
    p = _checked(p, "softmax_centered")

    def grad_z(g):
        inner = (g * p).sum(axis=axis, keepdims=True)
        return (g - inner) * p / temp

    pairs.append((z, grad_z))
    if center is not None:
        pairs.append((center,
                      lambda g: _sum_to_shape(-grad_z(g), center.data.shape)))
    return _result(p, "softmax_centered", pairs)


def _check_distribution(x: np.ndarray, name: str) -> None:
    if np.any(x < 0):
        raise ValidationError(f"{name} has negative entries")
    dev = np.max(np.abs(x.sum(axis=-1) - 1.0))
    if dev > 1e-6:
        raise ValidationError(
            f"{name} is not normalized: row sums deviate by {dev:.3e}")


def cross_entropy(a, b) -> Tensor:
    """-sum(a * log b) for two distribution vectors; returns a scalar.

    Both inputs must be 1-D, nonnegative, and sum to 1 within 1e-6.  log is
    clamped at 1e-12 so vanishing target mass cannot produce infinities.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 1 or b.ndim != 1:
        raise UsageError("cross_entropy expects 1-D distributions; "
                         "use cross_entropy_rows for batches")
    return cross_entropy_rows(a, b)


def cross_entropy_rows(a, b) -> Tensor:
    """Rowwise -sum(a * log b) over the last axis.

    Shapes (..., K) x (..., K) -> (...).  Every row of both inputs must be a
    distribution (validated).  Gradient flows to both arguments; entries of b
    below the 1e-12 clamp get zero gradient, matching the clamped forward.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.data.shape != b.data.shape:
        raise UsageError(
            f"cross_entropy shape mismatch: {a.data.shape} vs {b.data.shape}")
    _check_distribution(a.data, "cross_entropy target")
    _check_distribution(b.data, "cross_entropy prediction")
    bc = np.maximum(b.data, _CE_EPS)
    logb = np.log(bc)
    out = _checked(-(a.data * logb).sum(axis=-1), "cross_entropy")

    def grad_a(g):
        return -np.expand_dims(g, -1) * logb

    def grad_b(g):
        inner = np.where(b.data >= _CE_EPS, -a.data / bc, 0.0)
        return np.expand_dims(g, -1) * inner

    return _result(np.asarray(out), "cross_entropy", [(a, grad_a), (b, grad_b)])


def smooth_l1(pred, target, beta: float = 1.0) -> Tensor:
    """Elementwise smooth L1: quadratic within ``beta`` of the target, linear
    beyond it.  The gradient is continuous at the crossover.
    """
    if not beta > 0:
        raise ParameterError(f"smooth_l1 beta must be positive, got {beta}")
    pred, target = as_tensor(pred), as_tensor(target)
    d = pred.data - target.data
    ad = np.abs(d)
    quad = ad < beta
    out = np.where(quad, 0.5 * d * d / beta, ad - 0.5 * beta)
    out = _checked(out, "smooth_l1")
    slope = np.where(quad, d / beta, np.sign(d))

    def grad_pred(g):
        return _sum_to_shape(g * slope, pred.data.shape)

    def grad_target(g):
        return _sum_to_shape(-g * slope, target.data.shape)

    return _result(out, "smooth_l1", [(pred, grad_pred), (target, grad_target)])


# -- operator binding ---------------------------------------------------------

def _bind_operators() -> None:
    Tensor.__add__ = lambda s, o: add(s, o)
    Tensor.__radd__ = lambda s, o: add(o, s)
    Tensor.__sub__ = lambda s, o: sub(s, o)
    Tensor.__rsub__ = lambda s, o: sub(o, s)
    Tensor.__mul__ = lambda s, o: mul(s, o)
    Tensor.__rmul__ = lambda s, o: mul(o, s)
    Tensor.__truediv__ = lambda s, o: div(s, o)
    Tensor.__rtruediv__ = lambda s, o: div(o, s)
    Tensor.__neg__ = neg
    Tensor.__matmul__ = lambda s, o: matmul(s, o)
    Tensor.__pow__ = lambda s, p: power(s, p)
    Tensor.__getitem__ = getitem
    Tensor.sum = reduce_sum
    Tensor.mean = reduce_mean
    Tensor.reshape = lambda s, *shape: reshape(s, shape[0] if len(shape) == 1 else shape)
    Tensor.transpose = transpose
    Tensor.exp = exp
    Tensor.log = log
    Tensor.tanh = tanh
    Tensor.sqrt = sqrt


_bind_operators()
