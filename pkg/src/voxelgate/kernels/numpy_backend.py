"""Pure-NumPy convolution kernels (im2col + BLAS).

Fallback used when the compiled extension is unavailable; also the
reference the native backend is tested against. All functions take and
return C-contiguous arrays, preserve dtype, and are deterministic.
"""

import numpy as np


def out_extent(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


def _im2col(x: np.ndarray, k: int, stride: int, pad: int) -> np.ndarray:
    """(N,C,D,H,W) -> (N, C*k^3, P) patch matrix, P = od*oh*ow."""
    n, c, d, h, w = x.shape
    od, oh, ow = (out_extent(e, k, stride, pad) for e in (d, h, w))
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad), (pad, pad)))
    sn, sc, sz, sy, sx = x.strides
    windows = np.lib.stride_tricks.as_strided(
        x,
        shape=(n, c, k, k, k, od, oh, ow),
        strides=(sn, sc, sz, sy, sx, sz * stride, sy * stride, sx * stride),
        writeable=False,
    )
    return windows.reshape(n, c * k * k * k, od * oh * ow)


def conv3d_forward(x: np.ndarray, w: np.ndarray, stride: int, pad: int) -> np.ndarray:
    """Per-offset channel GEMM over the full padded volume, then shifted
    accumulation; avoids materializing the big patch matrix."""
    n, ci = x.shape[:2]
    co, k = w.shape[0], w.shape[2]
    od, oh, ow = (out_extent(e, k, stride, pad) for e in x.shape[2:])
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad), (pad, pad)))
    zp, yp, xp = x.shape[2:]
    flat = x.reshape(n, ci, -1)
    y = np.zeros((n, co, od, oh, ow), dtype=x.dtype)
    for a in range(k):
        for b in range(k):
            for c in range(k):
                mixed = np.matmul(w[:, :, a, b, c][None], flat).reshape(n, co, zp, yp, xp)
                y += mixed[:, :,
                           a:a + od * stride:stride,
                           b:b + oh * stride:stride,
                           c:c + ow * stride:stride]
    return y


def conv3d_grad_weight(x: np.ndarray, gy: np.ndarray, stride: int, pad: int, k: int) -> np.ndarray:
    n, co = gy.shape[0], gy.shape[1]
    ci = x.shape[1]
    col = _im2col(x, k, stride, pad)
    gw = np.matmul(gy.reshape(n, co, -1), col.transpose(0, 2, 1)).sum(axis=0)
    return np.ascontiguousarray(gw.reshape(co, ci, k, k, k))


def conv3d_grad_input(gy: np.ndarray, w: np.ndarray, stride: int, pad: int,
                      in_spatial: tuple) -> np.ndarray:
    n, co = gy.shape[0], gy.shape[1]
    ci, k = w.shape[1], w.shape[2]
    d, h, wd = in_spatial
    od, oh, ow = gy.shape[2:]
    gcol = np.matmul(w.reshape(co, -1).T[None], gy.reshape(n, co, -1))
    gcol = gcol.reshape(n, ci, k, k, k, od, oh, ow)
    gx = np.zeros((n, ci, d + 2 * pad, h + 2 * pad, wd + 2 * pad), dtype=gy.dtype)
    for a in range(k):
        for b in range(k):
            for c in range(k):
                gx[:, :,
                   a:a + od * stride:stride,
                   b:b + oh * stride:stride,
                   c:c + ow * stride:stride] += gcol[:, :, a, b, c]
    if pad:
        gx = gx[:, :, pad:pad + d, pad:pad + h, pad:pad + wd]
    return np.ascontiguousarray(gx)
