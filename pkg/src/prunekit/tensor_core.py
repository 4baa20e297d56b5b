"""Dense tensor kernels: convolution, pooling, batch norm, ReLU and numerical rank.

Tensors are plain ``float32`` numpy arrays laid out as (batch, channel,
row, col). Functions never modify their inputs.
"""
import numpy as np

from prunekit import kernels
from prunekit.errors import ShapeError

DEFAULT_RANK_TOL = 1e-5


def as_tensor(x, name="input"):
    """Return ``x`` as a contiguous 4-D float32 array."""
    arr = np.ascontiguousarray(x, dtype=np.float32)
    if arr.ndim != 4:
        raise ShapeError(f"{name}: expected a 4-D tensor, got shape {arr.shape}")
    return arr


def conv_output_size(size, k, stride, padding):
    return (size + 2 * padding - k) // stride + 1


def conv2d(x, weight, bias=None, stride=1, padding=0, method="im2col", layer="conv", backend=None):
    """2-D convolution (cross-correlation, as in every CNN framework).

    ``method`` is ``"im2col"`` (gather + matmul) or ``"direct"`` (loop
    nest accumulated in float64). The two agree to float32 rounding.
    """
    x = as_tensor(x, f"{layer} input")
    weight = as_tensor(weight, f"{layer} weight")
    oc, ic, k, k2 = weight.shape
    if k != k2 or k < 1:
        raise ShapeError(f"{layer}: kernel must be square and non-empty, got {k}x{k2}")
    if x.shape[1] != ic:
        raise ShapeError(f"{layer}: expected {ic} input channels, got {x.shape[1]}")
    if stride < 1 or padding < 0:
        raise ShapeError(f"{layer}: invalid stride={stride} padding={padding}")
    bias = np.zeros(oc, np.float32) if bias is None else np.ascontiguousarray(bias, dtype=np.float32)
    if bias.shape != (oc,):
        raise ShapeError(f"{layer}: bias has shape {bias.shape}, expected ({oc},)")
    b, _, h, w = x.shape
    oh = conv_output_size(h, k, stride, padding)
    ow = conv_output_size(w, k, stride, padding)
    if oh < 1 or ow < 1:
        raise ShapeError(f"{layer}: {k}x{k} kernel does not fit {h}x{w} input with padding {padding}")

    if method == "direct":
        return kernels.get("conv2d_direct", backend)(x, weight, bias, stride, padding)
    if method != "im2col":
        raise ValueError(f"unknown conv method {method!r}")
    if k == 1 and stride == 1 and padding == 0:
        cols = x.reshape(b, ic, h * w)
    else:
        cols = kernels.get("im2col", backend)(x, k, stride, padding)
    w2 = weight.reshape(oc, ic * k * k)
    out = np.empty((b, oc, oh * ow), dtype=np.float32)
    for n in range(b):
        np.matmul(w2, cols[n], out=out[n])
    out += bias[None, :, None]
    return out.reshape(b, oc, oh, ow)


def max_pool2d(x, k, stride, backend=None):
    x = as_tensor(x)
    if k < 1 or stride < 1:
        raise ShapeError(f"max_pool2d: invalid k={k} stride={stride}")
    if k > x.shape[2] or k > x.shape[3]:
        raise ShapeError(f"max_pool2d: {k}x{k} window larger than {x.shape[2]}x{x.shape[3]} input")
    return kernels.get("max_pool2d", backend)(x, k, stride)


def batch_norm_apply(x, gamma, beta, mean, var, eps=1e-5):
    """Inference-mode batch norm with stored statistics."""
    x = as_tensor(x)
    c = x.shape[1]
    params = [np.asarray(p, dtype=np.float32) for p in (gamma, beta, mean, var)]
    for name, p in zip(("gamma", "beta", "mean", "var"), params):
        if p.shape != (c,):
            raise ShapeError(f"batch_norm: {name} has shape {p.shape}, expected ({c},)")
    gamma, beta, mean, var = params
    denom = var.astype(np.float64) + eps
    if np.any(denom <= 0):
        raise ValueError("batch_norm: var + eps must be positive")
    scale = (gamma / np.sqrt(denom)).astype(np.float32)
    shift = (beta - mean * scale).astype(np.float32)
    return x * scale[None, :, None, None] + shift[None, :, None, None]


def relu(x):
    return np.maximum(as_tensor(x), np.float32(0))


def matrix_rank(m, rel_tol=DEFAULT_RANK_TOL):
    """Numerical rank by row reduction with partial pivoting.

    A pivot counts when its magnitude exceeds
    ``rel_tol * max(rows, cols) * max|m|``.
    """
    m = np.asarray(m, dtype=np.float32)
    if m.ndim != 2 or min(m.shape) < 1:
        raise ShapeError(f"matrix_rank: expected a non-empty 2-D matrix, got shape {m.shape}")
    return int(matrix_rank_batch(m[None], rel_tol)[0])


def matrix_rank_batch(mats, rel_tol=DEFAULT_RANK_TOL, backend=None):
    """Rank of each matrix in a (count, rows, cols) stack."""
    if not 0 < rel_tol < 1:
        raise ValueError(f"rel_tol must lie in (0, 1), got {rel_tol}")
    mats = np.ascontiguousarray(mats, dtype=np.float32)
    if mats.ndim != 3:
        raise ShapeError(f"matrix_rank_batch: expected a 3-D stack, got shape {mats.shape}")
    return kernels.get("rank_batch", backend)(mats, float(rel_tol))
