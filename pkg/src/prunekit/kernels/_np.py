"""Pure-numpy kernels, used when numba is disabled or unavailable."""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def _windows(x, kh, kw, stride):
    # (b, c, oh, ow, kh, kw) view
    return sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]


def im2col(x, k, stride, pad):
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = _windows(x, k, k, stride)
    b, c, oh, ow = win.shape[:4]
    return np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3)).reshape(b, c * k * k, oh * ow)


def conv2d_direct(x, weight, bias, stride, pad):
    # shifted-window accumulation, one kernel tap at a time
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    b, c, h, w = x.shape
    oc, _, k, _ = weight.shape
    oh = (h - k) // stride + 1
    ow = (w - k) // stride + 1
    acc = np.zeros((b, oc, oh, ow), dtype=np.float64)
    w64 = weight.astype(np.float64)
    for ki in range(k):
        for kj in range(k):
            patch = x[:, :, ki:ki + stride * (oh - 1) + 1:stride, kj:kj + stride * (ow - 1) + 1:stride]
            acc += np.einsum("oc,bchw->bohw", w64[:, :, ki, kj], patch, optimize=True)
    acc += bias.astype(np.float64)[None, :, None, None]
    return acc.astype(np.float32)


def max_pool2d(x, k, stride):
    return _windows(x, k, k, stride).max(axis=(4, 5))


def xcorr_depthwise(z, x):
    kh, kw = z.shape[2:]
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))
    out = np.einsum("bchwij,bcij->bchw", win.astype(np.float64), z.astype(np.float64), optimize=True)
    return out.astype(np.float32)


def rank_batch(mats, rel_tol):
    """Row reduction with partial pivoting, vectorised across the leading axis."""
    a = np.array(mats, dtype=np.float64)
    count, m, n = a.shape
    out = np.zeros(count, dtype=np.int64)
    if count == 0:
        return out
    scale = np.abs(a).reshape(count, -1).max(axis=1)
    tol = rel_tol * max(m, n) * scale
    rows = np.zeros(count, dtype=np.int64)
    live = scale > 0
    ar = np.arange(m)
    for col in range(n):
        mag = np.abs(a[:, :, col])
        mag[ar[None, :] < rows[:, None]] = -1.0
        p = mag.argmax(axis=1)
        best = mag[np.arange(count), p]
        act = np.nonzero(live & (rows < m) & (best > tol))[0]
        if act.size == 0:
            continue
        r = rows[act]
        pr = p[act]
        top = a[act, pr].copy()
        a[act, pr] = a[act, r]
        a[act, r] = top
        piv = top[:, col]
        below = ar[None, :] > r[:, None]
        f = np.where(below, a[act, :, col] / piv[:, None], 0.0)
        a[act] -= f[:, :, None] * top[:, None, :]
        rows[act] += 1
    out[:] = rows
    return out
