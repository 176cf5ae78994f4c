"""Differentiable operations over Tensors.

Every op computes its forward result with numpy, then registers a closure
that maps the output gradient to input gradients.  Reductions (sums, means,
batch statistics) accumulate in float64 before casting back to the storage
dtype; matrix products use the BLAS dtype as-is.

Convolution follows cross-correlation semantics (no kernel flip).
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .errors import ConfigError, ContractError, DimensionError
from .tensor import Tensor


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcasted gradient back down to ``shape``."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise and linear algebra
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data

    def bwd(g: np.ndarray) -> None:
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return Tensor.from_op(out, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data * b.data

    def bwd(g: np.ndarray) -> None:
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return Tensor.from_op(out, (a, b), bwd)


def scale(a: Tensor, s: float) -> Tensor:
    out = a.data * a.data.dtype.type(s)

    def bwd(g: np.ndarray) -> None:
        a._accumulate(g * a.data.dtype.type(s))

    return Tensor.from_op(out, (a,), bwd)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul expects 2-d tensors, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def bwd(g: np.ndarray) -> None:
        if a.requires_grad:
            a._accumulate(g @ b.data.T)
        if b.requires_grad:
            b._accumulate(a.data.T @ g)

    return Tensor.from_op(out, (a, b), bwd)


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """x (N, in) times weight (out, in) transposed, plus bias (out,)."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise DimensionError(
            f"linear: input {x.shape} incompatible with weight {weight.shape}")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data

    parents = (x, weight) if bias is None else (x, weight, bias)

    def bwd(g: np.ndarray) -> None:
        if x.requires_grad:
            x._accumulate(g @ weight.data)
        if weight.requires_grad:
            weight._accumulate(g.T @ x.data)
        if bias is not None and bias.requires_grad:
            bias._accumulate(g.sum(axis=0, dtype=np.float64).astype(g.dtype))

    return Tensor.from_op(out, parents, bwd)


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0)

    def bwd(g: np.ndarray) -> None:
        x._accumulate(g * (x.data > 0))

    return Tensor.from_op(out, (x,), bwd)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    out = x.data.reshape(shape)

    def bwd(g: np.ndarray) -> None:
        x._accumulate(g.reshape(x.shape))

    return Tensor.from_op(out, (x,), bwd)


def flatten(x: Tensor) -> Tensor:
    """Collapse all but the leading (batch) dimension."""
    return reshape(x, (x.shape[0], -1))


def concat_cols(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate two (N, F) tensors along features."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[0] != b.shape[0]:
        raise DimensionError(f"concat_cols: {a.shape} vs {b.shape}")
    out = np.concatenate([a.data, b.data], axis=1)
    na = a.shape[1]

    def bwd(g: np.ndarray) -> None:
        if a.requires_grad:
            a._accumulate(g[:, :na])
        if b.requires_grad:
            b._accumulate(g[:, na:])

    return Tensor.from_op(out, (a, b), bwd)


def sum_all(x: Tensor) -> Tensor:
    out = np.array([x.data.sum(dtype=np.float64)], dtype=x.data.dtype)

    def bwd(g: np.ndarray) -> None:
        x._accumulate(np.full_like(x.data, g.reshape(-1)[0]))

    return Tensor.from_op(out, (x,), bwd)


def mean_all(x: Tensor) -> Tensor:
    n = x.size
    out = np.array([x.data.mean(dtype=np.float64)], dtype=x.data.dtype)

    def bwd(g: np.ndarray) -> None:
        x._accumulate(np.full_like(x.data, g.reshape(-1)[0] / n))

    return Tensor.from_op(out, (x,), bwd)


# ---------------------------------------------------------------------------
# convolution and pooling
# ---------------------------------------------------------------------------

def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int,
            out_h: int, out_w: int) -> np.ndarray:
    """Extract sliding windows from a padded NCHW array as (N, C*kh*kw, L)."""
    n, c, _, _ = xp.shape
    sn, sc, sh, sw = xp.strides
    windows = as_strided(
        xp,
        shape=(n, c, kh, kw, out_h, out_w),
        strides=(sn, sc, sh, sw, stride * sh, stride * sw),
        writeable=False,
    )
    return windows.reshape(n, c * kh * kw, out_h * out_w)


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of NCHW input with (O, I, kh, kw) kernels."""
    if x.ndim != 4:
        raise DimensionError(f"conv2d: input must be NCHW, got shape {x.shape}")
    if weight.ndim != 4:
        raise DimensionError(f"conv2d: weight must be OIkk, got shape {weight.shape}")
    n, c, h, w = x.shape
    o, ci, kh, kw = weight.shape
    if ci != c:
        raise DimensionError(
            f"conv2d: input has {c} channels but weight expects {ci}")
    if bias is not None and bias.shape != (o,):
        raise DimensionError(f"conv2d: bias shape {bias.shape} != ({o},)")
    span_h, span_w = h + 2 * padding - kh, w + 2 * padding - kw
    if span_h < 0 or span_w < 0:
        raise ConfigError(
            f"conv2d: kernel {kh}x{kw} stride {stride} pad {padding} does not "
            f"fit a {h}x{w} input")
    # floor semantics: a trailing partial window is dropped
    out_h, out_w = span_h // stride + 1, span_w // stride + 1

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = _im2col(xp, kh, kw, stride, out_h, out_w)          # (N, CKK, L)
    w_mat = weight.data.reshape(o, c * kh * kw)
    out = np.matmul(w_mat, cols).reshape(n, o, out_h, out_w)
    if bias is not None:
        out = out + bias.data.reshape(1, o, 1, 1)

    parents = (x, weight) if bias is None else (x, weight, bias)

    def bwd(g: np.ndarray) -> None:
        g2 = g.reshape(n, o, out_h * out_w)
        if bias is not None and bias.requires_grad:
            bias._accumulate(g2.sum(axis=(0, 2), dtype=np.float64).astype(g.dtype))
        if weight.requires_grad:
            gw = np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0)
            weight._accumulate(gw.reshape(weight.shape))
        if x.requires_grad:
            gcols = np.matmul(w_mat.T, g2)                     # (N, CKK, L)
            g6 = gcols.reshape(n, c, kh, kw, out_h, out_w)
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + stride * out_h:stride,
                        j:j + stride * out_w:stride] += g6[:, :, i, j]
            if padding:
                gxp = gxp[:, :, padding:padding + h, padding:padding + w]
            x._accumulate(gxp)

    return Tensor.from_op(out, parents, bwd)


def max_pool2d(x: Tensor, kernel: int = 3, stride: int = 2, padding: int = 1) -> Tensor:
    """Max pooling with floor output size; padding never wins the max."""
    if x.ndim != 4:
        raise DimensionError(f"max_pool2d: input must be NCHW, got {x.shape}")
    n, c, h, w = x.shape
    out_h = (h + 2 * padding - kernel) // stride + 1
    out_w = (w + 2 * padding - kernel) // stride + 1
    if out_h < 1 or out_w < 1:
        raise ConfigError(f"max_pool2d: window {kernel} too large for {h}x{w}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)),
                constant_values=-np.inf)
    sn, sc, sh, sw = xp.strides
    windows = as_strided(
        xp,
        shape=(n, c, out_h, out_w, kernel, kernel),
        strides=(sn, sc, stride * sh, stride * sw, sh, sw),
        writeable=False,
    )
    flat = windows.reshape(n, c, out_h, out_w, kernel * kernel)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def bwd(g: np.ndarray) -> None:
        ni, ci, hi, wi = np.indices((n, c, out_h, out_w), sparse=False)
        ph = hi * stride + arg // kernel
        pw = wi * stride + arg % kernel
        gxp = np.zeros(xp.shape, dtype=g.dtype)
        np.add.at(gxp, (ni, ci, ph, pw), g)
        if padding:
            gxp = gxp[:, :, padding:padding + h, padding:padding + w]
        x._accumulate(gxp)

    return Tensor.from_op(np.ascontiguousarray(out), (x,), bwd)


def adaptive_concat_pool(x: Tensor) -> Tensor:
    """Global average pooling concatenated with global max pooling: (N, 2C).

    Works for any spatial size, which is what makes progressive input
    resizing possible with a fixed head.
    """
    if x.ndim != 4:
        raise DimensionError(f"adaptive_concat_pool: input must be NCHW, got {x.shape}")
    n, c, h, w = x.shape
    flat = x.data.reshape(n, c, h * w)
    avg = flat.mean(axis=-1, dtype=np.float64).astype(x.data.dtype)
    arg = flat.argmax(axis=-1)
    mx = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    out = np.concatenate([avg, mx], axis=1)

    def bwd(g: np.ndarray) -> None:
        gavg = g[:, :c]
        gmax = g[:, c:]
        gx = np.broadcast_to(gavg[:, :, None], (n, c, h * w)) / (h * w)
        gx = gx.astype(g.dtype).copy()
        ni, ci = np.indices((n, c))
        np.add.at(gx, (ni, ci, arg), gmax)
        x._accumulate(gx.reshape(x.shape))

    return Tensor.from_op(out, (x,), bwd)


# ---------------------------------------------------------------------------
# normalization, dropout, loss
# ---------------------------------------------------------------------------

def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor,
               running_mean: np.ndarray, running_var: np.ndarray,
               training: bool, eps: float = 1e-5, momentum: float = 0.1,
               update_running: bool = True) -> Tensor:
    """Batch normalization over all axes except the channel axis.

    Accepts NCHW (channel axis 1) or NF (feature axis 1) input.  In training
    mode the batch statistics normalize and, when ``update_running`` is set,
    the running stats move by an exponential average (unbiased variance, as
    is conventional).  Eval mode normalizes with the running stats.
    """
    if eps <= 0:
        raise ConfigError("batch_norm: eps must be positive")
    if x.ndim == 4:
        axes = (0, 2, 3)
        bshape = (1, x.shape[1], 1, 1)
    elif x.ndim == 2:
        axes = (0,)
        bshape = (1, x.shape[1])
    else:
        raise DimensionError(f"batch_norm: expected 2-d or 4-d input, got {x.shape}")
    channels = x.shape[1]
    if gamma.shape != (channels,) or beta.shape != (channels,):
        raise DimensionError(
            f"batch_norm: affine params must have shape ({channels},)")

    dtype = x.data.dtype
    count = x.size // channels
    if training:
        if count < 2:
            raise DimensionError(
                f"batch_norm: needs at least 2 values per channel in training "
                f"mode, got {count}")
        mean = x.data.mean(axis=axes, dtype=np.float64).astype(dtype)
        var = x.data.var(axis=axes, dtype=np.float64).astype(dtype)
        if update_running:
            unbiased = var * (count / (count - 1))
            running_mean *= 1.0 - momentum
            running_mean += momentum * mean
            running_var *= 1.0 - momentum
            running_var += momentum * unbiased
    else:
        mean = running_mean.astype(dtype, copy=False)
        var = running_var.astype(dtype, copy=False)

    invstd = 1.0 / np.sqrt(var + dtype.type(eps))
    xhat = (x.data - mean.reshape(bshape)) * invstd.reshape(bshape)
    out = gamma.data.reshape(bshape) * xhat + beta.data.reshape(bshape)

    def bwd(g: np.ndarray) -> None:
        if gamma.requires_grad:
            gamma._accumulate(
                (g * xhat).sum(axis=axes, dtype=np.float64).astype(dtype))
        if beta.requires_grad:
            beta._accumulate(g.sum(axis=axes, dtype=np.float64).astype(dtype))
        if x.requires_grad:
            gxhat = g * gamma.data.reshape(bshape)
            if training:
                s1 = gxhat.sum(axis=axes, dtype=np.float64).astype(dtype)
                s2 = (gxhat * xhat).sum(axis=axes, dtype=np.float64).astype(dtype)
                gx = (gxhat - (s1.reshape(bshape) + xhat * s2.reshape(bshape))
                      / count) * invstd.reshape(bshape)
            else:
                gx = gxhat * invstd.reshape(bshape)
            x._accumulate(gx)

    return Tensor.from_op(out, (x, gamma, beta), bwd)


def dropout(x: Tensor, p: float, training: bool,
            rng: Optional[np.random.Generator] = None) -> Tensor:
    """Inverted dropout: train-time scaling by 1/(1-p), eval is the identity."""
    if not 0.0 <= p < 1.0:
        raise ConfigError(f"dropout: p must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    if rng is None:
        raise ContractError("dropout: training mode requires an rng")
    keep = (rng.random(x.shape) >= p)
    factor = x.data.dtype.type(1.0 / (1.0 - p))
    mask = keep.astype(x.data.dtype) * factor
    out = x.data * mask

    def bwd(g: np.ndarray) -> None:
        x._accumulate(g * mask)

    return Tensor.from_op(out, (x,), bwd)


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row softmax with max-subtraction, used by cross_entropy and tests."""
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def cross_entropy(logits: Tensor, labels: Sequence[int]) -> Tensor:
    """Mean negative log softmax probability of the true class."""
    if logits.ndim != 2:
        raise DimensionError(f"cross_entropy: logits must be (N, K), got {logits.shape}")
    n, k = logits.shape
    idx = np.asarray(labels, dtype=np.int64)
    if idx.shape != (n,):
        raise DimensionError(
            f"cross_entropy: {n} rows of logits but {idx.size} labels")
    if idx.min(initial=0) < 0 or idx.max(initial=0) >= k:
        raise IndexError(f"cross_entropy: labels must lie in [0, {k})")

    z = logits.data.astype(np.float64)
    z -= z.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(z).sum(axis=1))
    losses = logsumexp - z[np.arange(n), idx]
    out = np.array([losses.mean()], dtype=logits.data.dtype)

    def bwd(g: np.ndarray) -> None:
        p = softmax(logits.data).astype(logits.data.dtype)
        p[np.arange(n), idx] -= 1
        logits._accumulate(p * (g.reshape(-1)[0] / n))

    return Tensor.from_op(out, (logits,), bwd)
