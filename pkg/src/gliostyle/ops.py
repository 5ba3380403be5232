"""N-dimensional neural-network primitives with hand-written backward passes.

Tensors are channel-first: (batch, channels, *spatial). Every ``*_forward``
returns ``(output, cache)``; the matching ``*_backward`` consumes the cache and
the upstream gradient. Computation follows the input dtype, so passing float64
arrays gives a float64 network for gradient checking.
"""

from __future__ import annotations

import itertools

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def _to_last(x: np.ndarray) -> np.ndarray:
    return np.moveaxis(x, 1, -1)


def _to_first(x: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(np.moveaxis(x, -1, 1))


# ---------------------------------------------------------------------------
# Convolution (zero padding, arbitrary stride, no bias)
# ---------------------------------------------------------------------------


def conv_output_shape(spatial, kernel, stride, pad):
    return tuple((n + 2 * p - k) // s + 1 for n, k, s, p in zip(spatial, kernel, stride, pad))


def _window(offset, stride, out_shape):
    return tuple(slice(o, o + s * (n - 1) + 1, s) for o, s, n in zip(offset, stride, out_shape))


def conv_forward(x: np.ndarray, w: np.ndarray, stride=None, pad=None):
    """Cross-correlation of ``x`` (B, Ci, *S) with ``w`` (Co, Ci, *K).

    Default padding is ``k // 2`` per axis, which preserves shape at stride 1.
    """
    nd = x.ndim - 2
    kernel = w.shape[2:]
    stride = tuple(stride) if stride is not None else (1,) * nd
    pad = tuple(pad) if pad is not None else tuple(k // 2 for k in kernel)
    out_shape = conv_output_shape(x.shape[2:], kernel, stride, pad)
    xp = np.pad(x, [(0, 0), (0, 0), *[(p, p) for p in pad]]) if any(pad) else x
    offsets = list(itertools.product(*[range(k) for k in kernel]))
    view = sliding_window_view(xp, kernel, axis=tuple(range(2, 2 + nd)))
    view = view[(slice(None), slice(None), *[slice(None, None, s) for s in stride])]
    # columns ordered (ci, kernel offset) to match w.reshape(Co, -1)
    perm = [0, *range(2, 2 + nd), 1, *range(2 + nd, 2 + 2 * nd)]
    cols = view.transpose(perm).reshape(-1, w.shape[1] * len(offsets))
    y = cols @ w.reshape(w.shape[0], -1).T
    y = _to_first(y.reshape(x.shape[0], *out_shape, w.shape[0]))
    return y, (cols, xp.shape, pad, stride, out_shape, offsets, w)


def conv_backward(dy: np.ndarray, cache, weight_grad: bool = True):
    """Return ``(dx, dw)``; ``dw`` is None when ``weight_grad`` is False."""
    cols, xp_shape, pad, stride, out_shape, offsets, w = cache
    co, ci = w.shape[:2]
    dy2 = _to_last(dy).reshape(-1, co)
    dw = (dy2.T @ cols).reshape(w.shape) if weight_grad else None
    # weight columns reordered (offset, ci) so each offset's block is contiguous
    wk = np.moveaxis(w.reshape(co, ci, -1), 1, 2).reshape(co, -1)
    dcols = (dy2 @ wk).reshape(dy.shape[0], *out_shape, len(offsets), ci)
    dxp = np.zeros((xp_shape[0], *xp_shape[2:], ci), dtype=dy.dtype)  # channel-last
    for k, o in enumerate(offsets):
        dxp[(slice(None), *_window(o, stride, out_shape))] += dcols[..., k, :]
    if any(pad):
        dxp = dxp[(slice(None), *[slice(p, n - p) for p, n in zip(pad, xp_shape[2:])])]
    dxp = _to_first(dxp)
    return dxp, dw


# ---------------------------------------------------------------------------
# Transposed convolution with kernel == stride (non-overlapping upsampling)
# ---------------------------------------------------------------------------


def upconv_forward(x: np.ndarray, w: np.ndarray):
    """Upsample ``x`` (B, Ci, *S) with ``w`` (Ci, Co, *K); output spatial = S * K."""
    b, ci = x.shape[:2]
    spatial = x.shape[2:]
    kernel = w.shape[2:]
    co = w.shape[1]
    nd = len(spatial)
    y = _to_last(x).reshape(-1, ci) @ w.reshape(ci, -1)  # (B*S, Co*K)
    y = y.reshape(b, *spatial, co, *kernel)
    # (B, S0..Sn, Co, K0..Kn) -> (B, Co, S0, K0, S1, K1, ...)
    perm = [0, 1 + nd] + [a for i in range(nd) for a in (1 + i, 2 + nd + i)]
    y = y.transpose(perm).reshape(b, co, *[s * k for s, k in zip(spatial, kernel)])
    return np.ascontiguousarray(y), (x, w)


def upconv_backward(dy: np.ndarray, cache):
    x, w = cache
    b, ci = x.shape[:2]
    spatial = x.shape[2:]
    kernel = w.shape[2:]
    co = w.shape[1]
    nd = len(spatial)
    interleaved = [v for s, k in zip(spatial, kernel) for v in (s, k)]
    d = dy.reshape(b, co, *interleaved)
    # back to (B, S0..Sn, Co, K0..Kn)
    perm = [0] + [2 + 2 * i for i in range(nd)] + [1] + [3 + 2 * i for i in range(nd)]
    d = d.transpose(perm).reshape(-1, co * int(np.prod(kernel)))
    x2 = _to_last(x).reshape(-1, ci)
    dw = (x2.T @ d).reshape(w.shape)
    dx = _to_first((d @ w.reshape(ci, -1).T).reshape(b, *spatial, ci))
    return dx, dw


# ---------------------------------------------------------------------------
# Pointwise and normalization layers
# ---------------------------------------------------------------------------


def conv1x1_forward(x: np.ndarray, w: np.ndarray, bias: np.ndarray):
    """Per-voxel linear map with bias: ``w`` is (Co, Ci)."""
    y = _to_last(x) @ w.T + bias
    return _to_first(y), x


def conv1x1_backward(dy: np.ndarray, x: np.ndarray, w: np.ndarray):
    co, ci = w.shape
    dy2 = _to_last(dy).reshape(-1, co)
    dw = dy2.T @ _to_last(x).reshape(-1, ci)
    db = dy2.sum(axis=0)
    dx = _to_first((dy2 @ w).reshape(*_to_last(x).shape[:-1], ci))
    return dx, dw, db


def instance_norm_forward(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray, eps: float = 1e-5):
    axes = tuple(range(2, x.ndim))
    mu = x.mean(axis=axes, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    bshape = (1, -1) + (1,) * (x.ndim - 2)
    y = xhat * gamma.reshape(bshape) + beta.reshape(bshape)
    return y, (xhat, inv, gamma)


def instance_norm_backward(dy: np.ndarray, cache):
    xhat, inv, gamma = cache
    axes = tuple(range(2, dy.ndim))
    dgamma = (dy * xhat).sum(axis=(0, *axes))
    dbeta = dy.sum(axis=(0, *axes))
    bshape = (1, -1) + (1,) * (dy.ndim - 2)
    dxhat = dy * gamma.reshape(bshape)
    m1 = dxhat.mean(axis=axes, keepdims=True)
    m2 = (dxhat * xhat).mean(axis=axes, keepdims=True)
    dx = inv * (dxhat - m1 - xhat * m2)
    return dx, dgamma, dbeta


def leaky_relu_forward(x: np.ndarray, slope: float = 0.01):
    pos = x > 0
    return np.where(pos, x, x * slope), (pos, slope)


def leaky_relu_backward(dy: np.ndarray, cache):
    pos, slope = cache
    return np.where(pos, dy, dy * slope)


def relu_forward(x: np.ndarray):
    pos = x > 0
    return np.maximum(x, 0).astype(x.dtype, copy=False), pos


def relu_backward(dy: np.ndarray, pos: np.ndarray):
    return dy * pos


def avg_pool2_forward(x: np.ndarray):
    """2x average pooling over every spatial axis; trailing odd rows are dropped."""
    spatial = x.shape[2:]
    out = tuple(n // 2 for n in spatial)
    xc = x[(slice(None), slice(None), *[slice(0, 2 * n) for n in out])]
    shape = list(x.shape[:2]) + [v for n in out for v in (n, 2)]
    y = xc.reshape(shape).mean(axis=tuple(3 + 2 * i for i in range(len(out))))
    return y, x.shape


def avg_pool2_backward(dy: np.ndarray, in_shape):
    nd = dy.ndim - 2
    g = dy / (2 ** nd)
    for axis in range(2, dy.ndim):
        g = np.repeat(g, 2, axis=axis)
    dx = np.zeros(in_shape, dtype=dy.dtype)
    dx[(slice(None), slice(None), *[slice(0, n) for n in g.shape[2:]])] = g
    return dx


def softmax(logits: np.ndarray, axis: int = 1) -> np.ndarray:
    z = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


# ---------------------------------------------------------------------------
# Initialisation
# ---------------------------------------------------------------------------


def he_normal(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    return rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)


def orthogonal(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    """Matrix with orthonormal rows (rows <= cols) or columns (rows > cols)."""
    a = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))  # unique decomposition
    return q.T if rows <= cols else q
