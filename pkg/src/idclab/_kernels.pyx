# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot kernels.  See ``_fallback.py`` for the reference versions.

Reductions run left to right over the last axis; nothing is parallel.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, floor, sqrt

cnp.import_array()

cdef double GELU_C = 0.7978845608028654
cdef double GELU_K = 0.044715


cdef inline unsigned char _round_u8(double v) nogil:
    v = floor(v + 0.5)
    if v < 0:
        return 0
    if v > 255:
        return 255
    return <unsigned char>v


def _axis_weights(Py_ssize_t n_in, Py_ssize_t n_out):
    cdef double scale = <double>n_in / <double>n_out
    src = (np.arange(n_out) + 0.5) * scale - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, n_in - 1)
    return i0, i1, src - i0


def resize_bilinear(const unsigned char[:, :, ::1] img, Py_ssize_t out_h, Py_ssize_t out_w):
    cdef Py_ssize_t h = img.shape[0], w = img.shape[1], ch = img.shape[2]
    y0a, y1a, fya = _axis_weights(h, out_h)
    x0a, x1a, fxa = _axis_weights(w, out_w)
    cdef long long[::1] y0 = y0a, y1 = y1a, x0 = x0a, x1 = x1a
    cdef double[::1] fy = fya, fx = fxa
    out = np.empty((out_h, out_w, ch), dtype=np.uint8)
    cdef unsigned char[:, :, ::1] o = out
    cdef Py_ssize_t r, c, k
    cdef double wy, wx, left, right
    with nogil:
        for r in range(out_h):
            wy = fy[r]
            for c in range(out_w):
                wx = fx[c]
                for k in range(ch):
                    left = img[y0[r], x0[c], k] * (1.0 - wy) + img[y1[r], x0[c], k] * wy
                    right = img[y0[r], x1[c], k] * (1.0 - wy) + img[y1[r], x1[c], k] * wy
                    o[r, c, k] = _round_u8(left * (1.0 - wx) + right * wx)
    return out


cdef inline Py_ssize_t _reflect(Py_ssize_t i, Py_ssize_t n) nogil:
    cdef Py_ssize_t period = 2 * (n - 1) if n > 1 else 1
    if i < 0:
        i = -i
    i = i % period
    if i >= n:
        i = period - i
    return i


def blur_separable(const unsigned char[:, :, ::1] img, const double[::1] kernel):
    cdef Py_ssize_t h = img.shape[0], w = img.shape[1], ch = img.shape[2]
    cdef Py_ssize_t K = kernel.shape[0], radius = (K - 1) // 2
    tmp_arr = np.empty((h, w, ch), dtype=np.float64)
    cdef double[:, :, ::1] tmp = tmp_arr
    out = np.empty((h, w, ch), dtype=np.uint8)
    cdef unsigned char[:, :, ::1] o = out
    cdef Py_ssize_t r, c, k, j
    cdef double acc
    with nogil:
        for r in range(h):
            for c in range(w):
                for k in range(ch):
                    acc = 0.0
                    for j in range(K):
                        acc += kernel[j] * img[r, _reflect(c + j - radius, w), k]
                    tmp[r, c, k] = acc
        for r in range(h):
            for c in range(w):
                for k in range(ch):
                    acc = 0.0
                    for j in range(K):
                        acc += kernel[j] * tmp[_reflect(r + j - radius, h), c, k]
                    o[r, c, k] = _round_u8(acc)
    return out


cdef int _lcs(const long long* a, Py_ssize_t na, const long long* b, Py_ssize_t nb, int* row) nogil:
    cdef Py_ssize_t i, j
    cdef int diag, up, left
    for j in range(nb + 1):
        row[j] = 0
    for i in range(na):
        diag = 0
        for j in range(nb):
            up = row[j + 1]
            if a[i] == b[j]:
                row[j + 1] = diag + 1
            else:
                left = row[j]
                row[j + 1] = up if up > left else left
            diag = up
    return row[nb]


def lcs_length(a, b):
    cdef long long[::1] av = np.ascontiguousarray(a, dtype=np.int64)
    cdef long long[::1] bv = np.ascontiguousarray(b, dtype=np.int64)
    if av.shape[0] == 0 or bv.shape[0] == 0:
        return 0
    row_arr = np.empty(bv.shape[0] + 1, dtype=np.intc)
    cdef int[::1] row = row_arr
    return _lcs(&av[0], av.shape[0], &bv[0], bv.shape[0], &row[0])


def lcs_pairwise(codes, lengths):
    """LCS length for every ordered pair of rows of ``codes`` (``[n, L]``,
    row ``i`` using its first ``lengths[i]`` entries).  LCS is symmetric, so
    only the upper triangle is computed."""
    cdef long long[:, ::1] cv = np.ascontiguousarray(codes, dtype=np.int64)
    cdef long long[::1] lv = np.ascontiguousarray(lengths, dtype=np.int64)
    cdef Py_ssize_t n = cv.shape[0], L = cv.shape[1], i, j
    out = np.zeros((n, n), dtype=np.int8)
    cdef signed char[:, ::1] o = out
    row_arr = np.empty(L + 1, dtype=np.intc)
    cdef int[::1] row = row_arr
    with nogil:
        for i in range(n):
            for j in range(i, n):
                if lv[i] != 0 and lv[j] != 0:
                    o[i, j] = <signed char>_lcs(&cv[i, 0], lv[i], &cv[j, 0], lv[j], &row[0])
                    o[j, i] = o[i, j]
    return out


def gelu_forward(x, bint need_deriv=True):
    xa = np.ascontiguousarray(x, dtype=np.float64)
    cdef double[::1] xv = xa.reshape(-1)
    out = np.empty_like(xa)
    cdef double[::1] ov = out.reshape(-1)
    cdef double[::1] dv
    deriv = None
    if need_deriv:
        deriv = np.empty_like(xa)
        dv = deriv.reshape(-1)
    cdef Py_ssize_t i, n = xv.shape[0]
    cdef double v, t
    with nogil:
        for i in range(n):
            v = xv[i]
            # tanh(u) = 1 - 2 / (exp(2u) + 1); libm tanh is several times slower
            t = 1.0 - 2.0 / (exp(2.0 * GELU_C * (v + GELU_K * (v * v * v))) + 1.0)
            ov[i] = 0.5 * v * (1.0 + t)
            if need_deriv:
                dv[i] = 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * (GELU_C * (1.0 + 3.0 * GELU_K * v * v))
    return out, deriv


def layer_norm_forward(x, gain, bias, double eps):
    xa = np.ascontiguousarray(x, dtype=np.float64)
    cdef Py_ssize_t n = xa.shape[xa.ndim - 1]
    cdef Py_ssize_t rows = xa.size // n if n else 0
    cdef double[:, ::1] xv = xa.reshape(rows, n)
    cdef const double[::1] gv = np.ascontiguousarray(gain, dtype=np.float64)
    cdef const double[::1] bv = np.ascontiguousarray(bias, dtype=np.float64)
    out = np.empty_like(xa)
    xhat = np.empty_like(xa)
    inv = np.empty(xa.shape[:-1] + (1,), dtype=np.float64)
    cdef double[:, ::1] ov = out.reshape(rows, n)
    cdef double[:, ::1] hv = xhat.reshape(rows, n)
    cdef double[::1] iv = inv.reshape(-1)
    cdef Py_ssize_t r, j
    cdef double mu, var, d, s
    with nogil:
        for r in range(rows):
            mu = 0.0
            for j in range(n):
                mu += xv[r, j]
            mu /= n
            var = 0.0
            for j in range(n):
                d = xv[r, j] - mu
                var += d * d
            var /= n
            s = 1.0 / sqrt(var + eps)
            iv[r] = s
            for j in range(n):
                d = (xv[r, j] - mu) * s
                hv[r, j] = d
                ov[r, j] = d * gv[j] + bv[j]
    return out, xhat, inv


def layer_norm_backward(g, xhat, inv, gain):
    ga = np.ascontiguousarray(g, dtype=np.float64)
    cdef Py_ssize_t n = ga.shape[ga.ndim - 1]
    cdef Py_ssize_t rows = ga.size // n if n else 0
    cdef const double[:, ::1] gv = ga.reshape(rows, n)
    cdef const double[:, ::1] hv = np.ascontiguousarray(xhat, dtype=np.float64).reshape(rows, n)
    cdef const double[::1] iv = np.ascontiguousarray(inv, dtype=np.float64).reshape(-1)
    cdef const double[::1] wv = np.ascontiguousarray(gain, dtype=np.float64)
    dx = np.empty_like(ga)
    dgain = np.zeros(n, dtype=np.float64)
    dbias = np.zeros(n, dtype=np.float64)
    cdef double[:, ::1] dxv = dx.reshape(rows, n)
    cdef double[::1] dgv = dgain, dbv = dbias
    cdef Py_ssize_t r, j
    cdef double m1, m2, dh
    with nogil:
        for r in range(rows):
            m1 = 0.0
            m2 = 0.0
            for j in range(n):
                dh = gv[r, j] * wv[j]
                m1 += dh
                m2 += dh * hv[r, j]
                dgv[j] += gv[r, j] * hv[r, j]
                dbv[j] += gv[r, j]
            m1 /= n
            m2 /= n
            for j in range(n):
                dh = gv[r, j] * wv[j]
                dxv[r, j] = iv[r] * (dh - m1 - hv[r, j] * m2)
    return dx, dgain, dbias
