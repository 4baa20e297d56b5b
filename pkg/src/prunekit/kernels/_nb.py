"""numba kernels. Every function here has a twin in ``_np`` with identical semantics."""
import numba as nb
import numpy as np


@nb.njit(cache=True, nogil=True, parallel=True)
def im2col(x, k, stride, pad):
    b, c, h, w = x.shape
    oh = (h + 2 * pad - k) // stride + 1
    ow = (w + 2 * pad - k) // stride + 1
    cols = np.zeros((b, c * k * k, oh * ow), dtype=x.dtype)
    for bc in nb.prange(b * c):
        n = bc // c
        ch = bc % c
        for ki in range(k):
            for kj in range(k):
                row = (ch * k + ki) * k + kj
                for oi in range(oh):
                    ii = oi * stride + ki - pad
                    if ii < 0 or ii >= h:
                        continue
                    for oj in range(ow):
                        jj = oj * stride + kj - pad
                        if jj >= 0 and jj < w:
                            cols[n, row, oi * ow + oj] = x[n, ch, ii, jj]
    return cols


@nb.njit(cache=True, nogil=True, parallel=True)
def conv2d_direct(x, weight, bias, stride, pad):
    b, c, h, w = x.shape
    oc, _, k, _ = weight.shape
    oh = (h + 2 * pad - k) // stride + 1
    ow = (w + 2 * pad - k) // stride + 1
    out = np.empty((b, oc, oh, ow), dtype=np.float32)
    for bo in nb.prange(b * oc):
        n = bo // oc
        o = bo % oc
        for oi in range(oh):
            for oj in range(ow):
                acc = 0.0
                for ch in range(c):
                    for ki in range(k):
                        ii = oi * stride + ki - pad
                        if ii < 0 or ii >= h:
                            continue
                        for kj in range(k):
                            jj = oj * stride + kj - pad
                            if jj >= 0 and jj < w:
                                acc += np.float64(weight[o, ch, ki, kj]) * x[n, ch, ii, jj]
                out[n, o, oi, oj] = acc + bias[o]
    return out


@nb.njit(cache=True, nogil=True, parallel=True)
def max_pool2d(x, k, stride):
    b, c, h, w = x.shape
    oh = (h - k) // stride + 1
    ow = (w - k) // stride + 1
    out = np.empty((b, c, oh, ow), dtype=x.dtype)
    for bc in nb.prange(b * c):
        n = bc // c
        ch = bc % c
        for oi in range(oh):
            for oj in range(ow):
                m = x[n, ch, oi * stride, oj * stride]
                for ki in range(k):
                    for kj in range(k):
                        v = x[n, ch, oi * stride + ki, oj * stride + kj]
                        if v > m:
                            m = v
                out[n, ch, oi, oj] = m
    return out


@nb.njit(cache=True, nogil=True, parallel=True)
def xcorr_depthwise(z, x):
    b, c, kh, kw = z.shape
    h, w = x.shape[2], x.shape[3]
    oh = h - kh + 1
    ow = w - kw + 1
    out = np.empty((b, c, oh, ow), dtype=np.float32)
    for bc in nb.prange(b * c):
        n = bc // c
        ch = bc % c
        for oi in range(oh):
            for oj in range(ow):
                acc = 0.0
                for ki in range(kh):
                    for kj in range(kw):
                        acc += np.float64(z[n, ch, ki, kj]) * x[n, ch, oi + ki, oj + kj]
                out[n, ch, oi, oj] = acc
    return out


@nb.njit(cache=True, nogil=True)
def _rank_one(a, rel_tol):
    m, n = a.shape
    scale = 0.0
    for i in range(m):
        for j in range(n):
            v = abs(a[i, j])
            if v > scale:
                scale = v
    if scale == 0.0:
        return 0
    tol = rel_tol * max(m, n) * scale
    row = 0
    for col in range(n):
        if row == m:
            break
        p = row
        best = abs(a[row, col])
        for i in range(row + 1, m):
            v = abs(a[i, col])
            if v > best:
                best = v
                p = i
        if best <= tol:
            continue
        if p != row:
            for j in range(col, n):
                t = a[row, j]
                a[row, j] = a[p, j]
                a[p, j] = t
        piv = a[row, col]
        for i in range(row + 1, m):
            f = a[i, col] / piv
            if f != 0.0:
                for j in range(col, n):
                    a[i, j] -= f * a[row, j]
        row += 1
    return row


@nb.njit(cache=True, nogil=True, parallel=True)
def rank_batch(mats, rel_tol):
    count = mats.shape[0]
    out = np.empty(count, dtype=np.int64)
    for t in nb.prange(count):
        out[t] = _rank_one(mats[t].astype(np.float64), rel_tol)
    return out
