"""Pure numpy implementations of the hot kernels.

These are the reference versions; the compiled module ``_ckernels`` must
produce identical integer selections and bit-identical descriptors.
"""

import numpy as np


def topk_select(logits, k):
    """Indices of the ``k`` largest entries per row, ascending.

    Ties at the cut are resolved toward the lower column index.
    """
    logits = np.ascontiguousarray(logits, dtype=np.float64)
    n, m = logits.shape
    if k < 1 or k > m:
        raise ValueError(f"k must be in [1, {m}], got {k}")
    # stable sort of the negated logits keeps lower indices first among equals
    order = np.argsort(-logits, axis=1, kind="stable")[:, :k]
    return np.sort(order, axis=1).astype(np.int64)


def _neighbors(points, k, chunk=512):
    n = points.shape[0]
    out = np.empty((n, k), dtype=np.int64)
    idx_all = np.arange(n)
    for start in range(0, n, chunk):
        stop = min(n, start + chunk)
        p = points[start:stop]
        dx = points[None, :, 0] - p[:, None, 0]
        dy = points[None, :, 1] - p[:, None, 1]
        dz = points[None, :, 2] - p[:, None, 2]
        d2 = dx * dx + dy * dy + dz * dz
        rows = np.arange(stop - start)
        d2[rows, start + rows] = np.inf
        # k-th smallest distance, then take everything strictly below it
        # and fill the remainder from the ties in index order
        kth = np.partition(d2, k - 1, axis=1)[:, k - 1]
        for r in range(stop - start):
            row = d2[r]
            below = idx_all[row < kth[r]]
            tied = idx_all[row == kth[r]]
            sel = np.concatenate([below, tied[: k - below.size]])
            key = np.lexsort((sel, row[sel]))
            out[start + r] = sel[key]
    return out


def knn_descriptors(points, k):
    """Per-point 9-vector: xyz, mean neighbor offset, per-axis offset std.

    Neighbors are the ``k`` nearest other points by Euclidean distance,
    ordered by (distance, index).
    """
    points = np.ascontiguousarray(points, dtype=np.float64)
    n = points.shape[0]
    if k < 1:
        raise ValueError("k must be >= 1")
    if n < k + 1:
        raise ValueError(f"need at least k+1={k + 1} points, got {n}")
    nbr = _neighbors(points, k)
    offsets = points[nbr] - points[:, None, :]
    # sequential accumulation in neighbor order, matching the compiled kernel
    acc = np.zeros((n, 3))
    for j in range(k):
        acc = acc + offsets[:, j, :]
    mean = acc / k
    sq = np.zeros((n, 3))
    for j in range(k):
        d = offsets[:, j, :] - mean
        sq = sq + d * d
    std = np.sqrt(sq / k)
    return np.concatenate([points, mean, std], axis=1)


_S2PI = 0.7978845608028654  # sqrt(2 / pi)
_C = 0.044715


def gelu(x):
    """Tanh-approximated GELU on a float64 array."""
    x = np.asarray(x, dtype=np.float64)
    return 0.5 * x * (1.0 + np.tanh(_S2PI * (x + _C * (x * x * x))))


def gelu_backward(x, dy):
    """``dy * gelu'(x)``."""
    x = np.asarray(x, dtype=np.float64)
    x2 = x * x
    t = np.tanh(_S2PI * (x + _C * (x2 * x)))
    du = _S2PI * (1.0 + 3.0 * _C * x2)
    return dy * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)


def adam_step(p, g, m, v, lr, beta1, beta2, bc1, bc2, eps, wd):
    """In-place decoupled-weight-decay Adam update of one parameter array."""
    m *= beta1
    m += (1.0 - beta1) * g
    v *= beta2
    v += (1.0 - beta2) * (g * g)
    if wd != 0.0:
        p *= 1.0 - lr * wd
    p -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
