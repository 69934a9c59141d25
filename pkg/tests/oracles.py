"""Independent brute-force oracles shared by unit and acceptance tests.

These are deliberately written as plain nested loops over definitions,
touching none of the package's kernel code paths.
"""

import numpy as np


def conv3d_loop(x, w, stride, pad):
    """Six-nested-loop cross-correlation; x (C,D,H,W), w (Co,Ci,k,k,k)."""
    ci, d, h, wd = x.shape
    co, _, k = w.shape[:3]
    od = (d + 2 * pad - k) // stride + 1
    oh = (h + 2 * pad - k) // stride + 1
    ow = (wd + 2 * pad - k) // stride + 1
    out = np.zeros((co, od, oh, ow), dtype=np.float64)
    for o in range(co):
        for zi in range(od):
            for yi in range(oh):
                for xi in range(ow):
                    acc = 0.0
                    for c in range(ci):
                        for kz in range(k):
                            for ky in range(k):
                                for kx in range(k):
                                    z = zi * stride - pad + kz
                                    y = yi * stride - pad + ky
                                    xx = xi * stride - pad + kx
                                    if 0 <= z < d and 0 <= y < h and 0 <= xx < wd:
                                        acc += w[o, c, kz, ky, kx] * x[c, z, y, xx]
                    out[o, zi, yi, xi] = acc
    return out


def maxpool_loop(x, k):
    """Block max via explicit loops; x (C,D,H,W)."""
    c, d, h, w = x.shape
    out = np.zeros((c, d // k, h // k, w // k), dtype=x.dtype)
    for ci in range(c):
        for z in range(d // k):
            for y in range(h // k):
                for xx in range(w // k):
                    out[ci, z, y, xx] = x[ci,
                                          z * k:(z + 1) * k,
                                          y * k:(y + 1) * k,
                                          xx * k:(xx + 1) * k].max()
    return out


def bounding_box_loop(image, threshold=0.0):
    """Scan every voxel for the smallest any-channel-content box."""
    _, l, w, s = image.shape
    lo = [l, w, s]
    hi = [-1, -1, -1]
    for z in range(l):
        for y in range(w):
            for x in range(s):
                if (image[:, z, y, x] > threshold).any():
                    for axis, v in enumerate((z, y, x)):
                        lo[axis] = min(lo[axis], v)
                        hi[axis] = max(hi[axis], v)
    if hi[0] < 0:
        return None
    return (lo[0], hi[0] + 1, lo[1], hi[1] + 1, lo[2], hi[2] + 1)


def confusion_loop(pred, truth, cls):
    """Voxel-by-voxel confusion counting."""
    tp = fn = fp = 0
    for p, t in zip(pred.ravel(), truth.ravel()):
        if p == cls and t == cls:
            tp += 1
        elif p != cls and t == cls:
            fn += 1
        elif p == cls and t != cls:
            fp += 1
    return tp, fn, fp


class AdamScalarReference:
    """Textbook Adam recurrence on one scalar parameter."""

    def __init__(self, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = 0.0
        self.v = 0.0
        self.t = 0

    def step(self, theta, grad):
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        m_hat = self.m / (1 - self.beta1 ** self.t)
        v_hat = self.v / (1 - self.beta2 ** self.t)
        return theta - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
