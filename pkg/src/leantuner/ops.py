"""Differentiable operations.

Each op runs its float32 forward kernel eagerly and registers a backward
rule on the tape (see leantuner.tensor). Backward rules read parameter
values live through the input Tensor handles, so a parameter that was
offloaded and reloaded between forward and backward is still correct.

Elementwise ops broadcast numpy-style, aligning shapes from the trailing
axis; their backward rules reduce gradients back over the broadcast axes.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .errors import AllTargetsIgnored, IndexOutOfRange, ShapeMismatch
from .tensor import DTYPE, Tensor, check_finite, record

_GELU_K = np.float32(np.sqrt(2.0 / np.pi))
_GELU_C = np.float32(0.044715)


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=DTYPE))


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum g down to shape, undoing trailing-axis broadcast."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] > 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.astype(DTYPE, copy=False)


def _binary_forward(op: str, a: Tensor, b: Tensor, fn) -> np.ndarray:
    try:
        out = fn(a.data, b.data)
    except ValueError:
        raise ShapeMismatch(f"{op}: cannot broadcast {a.shape} with {b.shape}") from None
    check_finite(op, out)
    return out


def add(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(_binary_forward("add", a, b, np.add))

    def backward(g):
        return [_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)]

    return record("add", (a, b), out, backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(_binary_forward("sub", a, b, np.subtract))

    def backward(g):
        return [_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)]

    return record("sub", (a, b), out, backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(_binary_forward("mul", a, b, np.multiply))

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return [ga, gb]

    return record("mul", (a, b), out, backward)


def scale(a: Tensor, s: float) -> Tensor:
    s = DTYPE(s)
    out = Tensor(a.data * s)
    check_finite("scale", out.data)

    def backward(g):
        return [g * s]

    return record("scale", (a,), out, backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over the two trailing axes.

    [..., m, k] @ [..., k, n] -> [..., m, n] with numpy broadcasting over
    the leading batch axes.
    """
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeMismatch(f"matmul needs 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeMismatch(f"matmul: inner axes differ, {a.shape} @ {b.shape}")
    out = Tensor(_binary_forward("matmul", a, b, np.matmul))

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return [ga, gb]

    return record("matmul", (a, b), out, backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map y = x @ weight.T (+ bias) with weight stored [out, in].

    A dedicated op rather than a matmul/transpose composition so that the
    backward rule reads the weight through its live handle: no transposed
    copy of the weight outlives the forward, which is what lets segment
    offloading actually shrink the resident footprint.
    """
    if x.shape[-1] != weight.shape[-1]:
        raise ShapeMismatch(f"linear: x {x.shape} does not match weight {weight.shape}")
    y = np.matmul(x.data, weight.data.T)
    if bias is not None:
        y += bias.data
    check_finite("linear", y)
    out = Tensor(y)
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        gx = gw = gb = None
        if x.requires_grad:
            gx = np.matmul(g, weight.data)
        if weight.requires_grad:
            gflat = g.reshape(-1, g.shape[-1])
            xflat = x.data.reshape(-1, x.shape[-1])
            gw = np.matmul(gflat.T, xflat)
        if bias is not None and bias.requires_grad:
            gb = g.reshape(-1, g.shape[-1]).sum(axis=0)
        grads = [gx, gw]
        if bias is not None:
            grads.append(gb)
        return grads

    return record("linear", inputs, out, backward)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax (max subtraction) along one axis."""
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    check_finite("softmax", y)
    out = Tensor(y)

    def backward(g):
        yv = out.data
        dot = (g * yv).sum(axis=axis, keepdims=True)
        return [yv * (g - dot)]

    return record("softmax", (x,), out, backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean and unit variance, then affine."""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeMismatch(
            f"layer_norm: gamma/beta must be ({d},), got {gamma.shape} and {beta.shape}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + DTYPE(eps))
    xhat = centered * inv
    out = Tensor(xhat * gamma.data + beta.data)
    check_finite("layer_norm", out.data)

    def backward(g):
        reduce_axes = tuple(range(g.ndim - 1))
        ggamma = (g * xhat).sum(axis=reduce_axes) if gamma.requires_grad else None
        gbeta = g.sum(axis=reduce_axes) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            dxhat = g * gamma.data
            m1 = dxhat.mean(axis=-1, keepdims=True)
            m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
            gx = inv * (dxhat - m1 - xhat * m2)
        return [gx, ggamma, gbeta]

    return record("layer_norm", (x, gamma, beta), out, backward)


def gelu(x: Tensor) -> Tensor:
    """Gaussian error linear unit, tanh approximation (GPT-2 convention)."""
    xv = x.data
    inner = _GELU_K * (xv + _GELU_C * xv * xv * xv)
    t = np.tanh(inner)
    out = Tensor(0.5 * xv * (1.0 + t))
    check_finite("gelu", out.data)

    def backward(g):
        xv2 = x.data
        inner2 = _GELU_K * (xv2 + _GELU_C * xv2 * xv2 * xv2)
        th = np.tanh(inner2)
        sech2 = 1.0 - th * th
        dinner = _GELU_K * (1.0 + 3.0 * _GELU_C * xv2 * xv2)
        return [g * (0.5 * (1.0 + th) + 0.5 * xv2 * sech2 * dinner)]

    return record("gelu", (x,), out, backward)


def embedding_lookup(table: Tensor, ids: np.ndarray) -> Tensor:
    """Gather rows of table by integer id; backward scatter-adds."""
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise ShapeMismatch("embedding_lookup: ids must be integers")
    vocab = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= vocab):
        raise IndexOutOfRange(
            f"embedding_lookup: id outside [0, {vocab}) in lookup"
        )
    ids = ids.copy()
    out = Tensor(table.data[ids])

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[-1]))
        return [gt]

    return record("embedding", (table,), out, backward)


def cross_entropy(logits: Tensor, targets: np.ndarray, ignore_index: int = -1) -> Tensor:
    """Mean token-level negative log likelihood, fused with log-softmax.

    targets holds integer class ids shaped like logits minus its last axis;
    positions equal to ignore_index contribute neither loss nor gradient.
    The mean is over the non-ignored positions.
    """
    targets = np.asarray(targets)
    if targets.shape != logits.shape[:-1]:
        raise ShapeMismatch(
            f"cross_entropy: targets {targets.shape} do not match logits {logits.shape}"
        )
    vocab = logits.shape[-1]
    flat = logits.data.reshape(-1, vocab)
    tflat = targets.reshape(-1)
    mask = tflat != ignore_index
    count = int(mask.sum())
    if count == 0:
        raise AllTargetsIgnored("cross_entropy: every target equals ignore_index")
    valid = tflat[mask]
    if valid.min() < 0 or valid.max() >= vocab:
        raise IndexOutOfRange(f"cross_entropy: target outside [0, {vocab})")

    shifted = flat - flat.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    logp = shifted - lse
    nll = -logp[np.arange(flat.shape[0]), np.where(mask, tflat, 0)]
    loss = (nll * mask).sum() / DTYPE(count)
    out = Tensor(np.asarray(loss, dtype=DTYPE))
    check_finite("cross_entropy", out.data)

    probs = np.exp(logp)
    tsafe = np.where(mask, tflat, 0)

    def backward(g):
        gl = probs.copy()
        gl[np.arange(gl.shape[0]), tsafe] -= 1.0
        gl *= mask[:, None]
        gl *= float(g) / count
        return [gl.reshape(logits.shape).astype(DTYPE, copy=False)]

    return record("cross_entropy", (logits,), out, backward)


def reshape(x: Tensor, shape: tuple) -> Tensor:
    try:
        out = Tensor(x.data.reshape(shape))
    except ValueError:
        raise ShapeMismatch(f"reshape: cannot view {x.shape} as {shape}") from None
    orig = x.shape

    def backward(g):
        return [g.reshape(orig)]

    return record("reshape", (x,), out, backward)


def transpose(x: Tensor, axes: tuple) -> Tensor:
    out = Tensor(np.transpose(x.data, axes))
    inverse = tuple(np.argsort(axes))

    def backward(g):
        return [np.ascontiguousarray(np.transpose(g, inverse))]

    return record("transpose", (x,), out, backward)


def sum_all(x: Tensor) -> Tensor:
    out = Tensor(np.asarray(x.data.sum(), dtype=DTYPE))
    shape = x.shape

    def backward(g):
        return [np.full(shape, float(g), dtype=DTYPE)]

    return record("sum", (x,), out, backward)


def mean_all(x: Tensor) -> Tensor:
    n = x.size
    out = Tensor(np.asarray(x.data.mean(), dtype=DTYPE))
    shape = x.shape

    def backward(g):
        return [np.full(shape, float(g) / n, dtype=DTYPE)]

    return record("mean", (x,), out, backward)
