"""Pure-Python / numpy versions of the hot kernels.

Each function mirrors one in ``_kernels.pyx``.  The resampling and blur
kernels follow the same arithmetic order as their compiled twins so both
backends produce identical bytes; the float reductions (layer norm) may
differ in the last ulp.
"""

from __future__ import annotations

import math

import numpy as np

GELU_C = math.sqrt(2.0 / math.pi)
GELU_K = 0.044715


def _axis_weights(n_in: int, n_out: int):
    scale = n_in / n_out
    src = (np.arange(n_out) + 0.5) * scale - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, n_in - 1)
    return i0, i1, src - i0


def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    h, w = img.shape[:2]
    y0, y1, fy = _axis_weights(h, out_h)
    x0, x1, fx = _axis_weights(w, out_w)
    src = img.astype(np.float64)
    fy = fy[:, None, None]
    rows = src[y0] * (1.0 - fy) + src[y1] * fy
    fx = fx[None, :, None]
    out = rows[:, x0] * (1.0 - fx) + rows[:, x1] * fx
    return np.clip(np.floor(out + 0.5), 0, 255).astype(np.uint8)


def _reflect_index(n: int, radius: int) -> np.ndarray:
    idx = np.arange(-radius, n + radius)
    period = 2 * (n - 1) if n > 1 else 1
    idx = np.abs(idx) % period
    return np.where(idx >= n, period - idx, idx)


def blur_separable(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    h, w = img.shape[:2]
    radius = (len(kernel) - 1) // 2
    src = img.astype(np.float64)
    padded = src[:, _reflect_index(w, radius)]
    tmp = np.zeros_like(src)
    for k, wk in enumerate(kernel):
        tmp += wk * padded[:, k : k + w]
    padded = tmp[_reflect_index(h, radius)]
    out = np.zeros_like(src)
    for k, wk in enumerate(kernel):
        out += wk * padded[k : k + h]
    return np.clip(np.floor(out + 0.5), 0, 255).astype(np.uint8)


def lcs_length(a, b) -> int:
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def lcs_pairwise(codes: np.ndarray, lengths: np.ndarray) -> np.ndarray:
    seqs = [list(row[:n]) for row, n in zip(codes, lengths)]
    n = len(seqs)
    out = np.zeros((n, n), dtype=np.int8)
    for i in range(n):
        for j in range(i, n):
            out[i, j] = out[j, i] = lcs_length(seqs[i], seqs[j])
    return out


def gelu_forward(x: np.ndarray, need_deriv: bool = True):
    inner = GELU_C * (x + GELU_K * (x * x * x))
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)
    if not need_deriv:
        return out, None
    dinner = GELU_C * (1.0 + 3.0 * GELU_K * x * x)
    return out, 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner


def layer_norm_forward(x: np.ndarray, gain: np.ndarray, bias: np.ndarray, eps: float):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    return xhat * gain + bias, xhat, inv


def layer_norm_backward(g: np.ndarray, xhat: np.ndarray, inv: np.ndarray, gain: np.ndarray):
    n = xhat.shape[-1]
    dgain = (g * xhat).reshape(-1, n).sum(axis=0)
    dbias = g.reshape(-1, n).sum(axis=0)
    dxhat = g * gain
    dx = inv * (
        dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
    )
    return dx, dgain, dbias
