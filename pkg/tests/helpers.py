"""Independent reference implementations and the finite-difference harness.

Everything here is deliberately naive (nested loops, direct formulas) and
never shares code with the package: these are the oracles the fast paths
are checked against.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from stagewise.tensor import Tensor


def conv2d_reference(x: np.ndarray, w: np.ndarray, b: np.ndarray | None,
                     stride: int, padding: int) -> np.ndarray:
    """Quadruple-nested-loop direct cross-correlation."""
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    out_h = (h + 2 * padding - kh) // stride + 1
    out_w = (wd + 2 * padding - kw) // stride + 1
    out = np.zeros((n, o, out_h, out_w), dtype=np.float64)
    for ni in range(n):
        for oi in range(o):
            for yi in range(out_h):
                for xi in range(out_w):
                    patch = xp[ni, :, yi * stride:yi * stride + kh,
                               xi * stride:xi * stride + kw]
                    out[ni, oi, yi, xi] = np.sum(
                        patch.astype(np.float64) * w[oi].astype(np.float64))
            if b is not None:
                out[ni, oi] += b[oi]
    return out


def concat_pool_reference(x: np.ndarray) -> np.ndarray:
    """Loop-based global average + max pooling."""
    n, c, h, w = x.shape
    out = np.zeros((n, 2 * c), dtype=np.float64)
    for ni in range(n):
        for ci in range(c):
            vals = [x[ni, ci, yi, xi] for yi in range(h) for xi in range(w)]
            out[ni, ci] = sum(float(v) for v in vals) / (h * w)
            out[ni, c + ci] = max(float(v) for v in vals)
    return out


def max_pool_reference(x: np.ndarray, kernel: int, stride: int,
                       padding: int) -> np.ndarray:
    n, c, h, w = x.shape
    out_h = (h + 2 * padding - kernel) // stride + 1
    out_w = (w + 2 * padding - kernel) // stride + 1
    out = np.zeros((n, c, out_h, out_w), dtype=x.dtype)
    for ni in range(n):
        for ci in range(c):
            for yi in range(out_h):
                for xi in range(out_w):
                    best = -np.inf
                    for dy in range(kernel):
                        for dx in range(kernel):
                            yy = yi * stride + dy - padding
                            xx = xi * stride + dx - padding
                            if 0 <= yy < h and 0 <= xx < w:
                                best = max(best, x[ni, ci, yy, xx])
                    out[ni, ci, yi, xi] = best
    return out


def cross_entropy_reference(logits: np.ndarray, labels: Sequence[int]) -> float:
    """Two-pass log-sum-exp formula, fully in float64."""
    z = logits.astype(np.float64)
    total = 0.0
    for i, lab in enumerate(labels):
        m = z[i].max()
        lse = m + np.log(np.exp(z[i] - m).sum())
        total += lse - z[i, lab]
    return total / len(labels)


def resize_bilinear_reference(img: np.ndarray, th: int, tw: int) -> np.ndarray:
    """Scalar per-pixel bilinear resize with half-pixel centers."""
    c, h, w = img.shape
    out = np.zeros((c, th, tw), dtype=np.float64)
    for ci in range(c):
        for yi in range(th):
            for xi in range(tw):
                sy = (yi + 0.5) * h / th - 0.5
                sx = (xi + 0.5) * w / tw - 0.5
                y0 = int(np.floor(sy))
                x0 = int(np.floor(sx))
                fy, fx = sy - y0, sx - x0
                y0c, y1c = np.clip([y0, y0 + 1], 0, h - 1)
                x0c, x1c = np.clip([x0, x0 + 1], 0, w - 1)
                out[ci, yi, xi] = (
                    img[ci, y0c, x0c] * (1 - fy) * (1 - fx)
                    + img[ci, y0c, x1c] * (1 - fy) * fx
                    + img[ci, y1c, x0c] * fy * (1 - fx)
                    + img[ci, y1c, x1c] * fy * fx
                )
    return out


def confusion_reference(preds: Sequence[int], labels: Sequence[int],
                        k: int) -> np.ndarray:
    cm = np.zeros((k, k), dtype=np.int64)
    for p, t in zip(preds, labels):
        cm[t][p] += 1
    return cm


# ---------------------------------------------------------------------------
# finite differences
# ---------------------------------------------------------------------------

def numeric_grads(f: Callable[..., float], arrays: list[np.ndarray],
                  h: float = 1e-3) -> list[np.ndarray]:
    """Central finite differences of a scalar function, array by array."""
    grads = []
    for k, arr in enumerate(arrays):
        g = np.zeros_like(arr, dtype=np.float64)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            hi = f(*arrays)
            flat[i] = orig - h
            lo = f(*arrays)
            flat[i] = orig
            gflat[i] = (hi - lo) / (2 * h)
        grads.append(g)
    return grads


def gradcheck(build: Callable[..., "Tensor"], arrays: list[np.ndarray],
              h: float = 1e-3, rtol: float = 1e-3) -> float:
    """Compare analytic gradients against central differences in float64.

    ``build`` maps leaf Tensors to a scalar loss Tensor.  Returns the worst
    relative error across all inputs and asserts it is within ``rtol``.
    """
    arrays = [np.asarray(a, dtype=np.float64) for a in arrays]
    leaves = [Tensor(a, requires_grad=True, dtype=np.float64) for a in arrays]
    loss = build(*leaves)
    loss.backward()
    analytic = [leaf.grad.copy() for leaf in leaves]

    def eval_loss(*arrs: np.ndarray) -> float:
        ts = [Tensor(a, dtype=np.float64) for a in arrs]
        return build(*ts).item()

    numeric = numeric_grads(eval_loss, arrays, h=h)
    worst = 0.0
    for a, nu in zip(analytic, numeric):
        scale = max(np.abs(nu).max(), np.abs(a).max(), 1e-6)
        worst = max(worst, float(np.abs(a - nu).max() / scale))
    assert worst <= rtol, f"gradient mismatch: relative error {worst:.3e} > {rtol}"
    return worst
