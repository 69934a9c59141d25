"""Differentiable 3-D network operators.

Everything the segmentation model needs: convolution (direct, 1x1x1 and
transposed), trilinear upsampling, max pooling, batch normalization,
activations, channel softmax, inverted dropout, plus the central
finite-difference gradient checker. Operators accept tensors shaped
(C, D, H, W) or batched (N, C, D, H, W) and preserve the rank.

Convolution uses cross-correlation semantics (no kernel flip), matching
the convention of the loop oracle used in the tests.
"""

from functools import lru_cache

import numpy as np

from . import kernels
from . import tensor as T
from .errors import IndivisibleExtent, InvalidRate, ShapeMismatch
from .rng import make_rng
from .tensor import Tensor, make_node


def _batched(x: Tensor):
    if x.data.ndim == 5:
        return x, True
    if x.data.ndim == 4:
        return T.reshape(x, (1,) + x.shape), False
    raise ShapeMismatch(f"expected rank-4 or rank-5 tensor, got shape {x.shape}")


def _debatch(y: Tensor, was_batched: bool) -> Tensor:
    return y if was_batched else T.reshape(y, y.shape[1:])


# -- convolutions -------------------------------------------------------------

def conv3d(input: Tensor, weight: Tensor, bias: Tensor = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """Strided, zero-padded 3-D cross-correlation with optional bias."""
    x5, batched = _batched(input)
    w = weight
    if w.data.ndim != 5:
        raise ShapeMismatch(f"weight must be (C_out, C_in, k, k, k), got {w.shape}")
    if bias is not None and bias.shape != (w.shape[0],):
        raise ShapeMismatch(f"bias shape {bias.shape} != ({w.shape[0]},)")

    out_data = kernels.conv3d_forward(x5.data, w.data, stride, padding)
    in_spatial = x5.shape[2:]
    k = w.shape[2]

    if bias is None:
        def bwd(g):
            gx = kernels.conv3d_grad_input(g, w.data, stride, padding, in_spatial)
            gw = kernels.conv3d_grad_weight(x5.data, g, stride, padding, k)
            return gx, gw

        y = make_node(out_data, (x5, w), bwd, "conv3d")
    else:
        out_data = out_data + bias.data.reshape(1, -1, 1, 1, 1)

        def bwd(g):
            gx = kernels.conv3d_grad_input(g, w.data, stride, padding, in_spatial)
            gw = kernels.conv3d_grad_weight(x5.data, g, stride, padding, k)
            gb = g.sum(axis=(0, 2, 3, 4))
            return gx, gw, gb

        y = make_node(out_data, (x5, w, bias), bwd, "conv3d")
    return _debatch(y, batched)


def conv3d_1x1(input: Tensor, weight: Tensor, bias: Tensor = None) -> Tensor:
    """Pointwise channel-mixing convolution, computed as a channel matmul."""
    x5, batched = _batched(input)
    if weight.data.ndim != 5 or weight.shape[2:] != (1, 1, 1):
        raise ShapeMismatch(f"1x1x1 weight must be (C_out, C_in, 1, 1, 1), got {weight.shape}")
    if x5.shape[1] != weight.shape[1]:
        raise ShapeMismatch(f"input channels {x5.shape[1]} != weight channels {weight.shape[1]}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeMismatch(f"bias shape {bias.shape} != ({weight.shape[0]},)")

    w2 = weight.data[:, :, 0, 0, 0]
    out_data = np.einsum("oc,ncdhw->nodhw", w2, x5.data)
    if bias is not None:
        out_data = out_data + bias.data.reshape(1, -1, 1, 1, 1)

    def bwd(g):
        gx = np.einsum("oc,nodhw->ncdhw", w2, g)
        gw = np.einsum("nodhw,ncdhw->oc", g, x5.data).reshape(weight.shape)
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3, 4))

    parents = (x5, weight) if bias is None else (x5, weight, bias)
    return _debatch(make_node(out_data, parents, bwd, "conv3d_1x1"), batched)


def transposed_conv3d(input: Tensor, weight: Tensor, stride: int) -> Tensor:
    """Upsampling transposed convolution with kernel size equal to stride.

    Weight layout is (C_in, C_out, s, s, s); output spatial extents are
    stride times the input's. With k == s the blocks never overlap, so
    the whole operation is a per-block linear map.
    """
    if stride < 1:
        raise ShapeMismatch(f"stride must be >= 1, got {stride}")
    x5, batched = _batched(input)
    if weight.data.ndim != 5 or weight.shape[2:] != (stride, stride, stride):
        raise ShapeMismatch(
            f"transposed weight must be (C_in, C_out, s, s, s) with s={stride}, got {weight.shape}")
    if x5.shape[1] != weight.shape[0]:
        raise ShapeMismatch(f"input channels {x5.shape[1]} != weight channels {weight.shape[0]}")

    n, ci, d, h, w_ = x5.shape
    co = weight.shape[1]
    s = stride
    p = d * h * w_
    # with k == s blocks never overlap: one (ci -> co*s^3) matmul per voxel
    wmat = weight.data.reshape(ci, co * s ** 3)
    mixed = np.matmul(x5.data.reshape(n, ci, p).transpose(0, 2, 1), wmat)
    out_data = np.ascontiguousarray(
        mixed.reshape(n, d, h, w_, co, s, s, s).transpose(0, 4, 1, 5, 2, 6, 3, 7)
    ).reshape(n, co, d * s, h * s, w_ * s)

    def bwd(g):
        gb = (g.reshape(n, co, d, s, h, s, w_, s)
              .transpose(0, 2, 4, 6, 1, 3, 5, 7)
              .reshape(n, p, co * s ** 3))
        gx = np.matmul(gb, wmat.T).transpose(0, 2, 1).reshape(n, ci, d, h, w_)
        gw = np.matmul(x5.data.reshape(n, ci, p), gb).sum(axis=0).reshape(weight.shape)
        return np.ascontiguousarray(gx), np.ascontiguousarray(gw)

    return _debatch(make_node(out_data, (x5, weight), bwd, "transposed_conv3d"), batched)


# -- resampling ----------------------------------------------------------------

@lru_cache(maxsize=64)
def _interp_matrix(n_in: int, factor: int, dtype_name: str) -> np.ndarray:
    """Dense 1-D trilinear interpolation operator (align-corners false)."""
    m = np.zeros((n_in * factor, n_in), dtype=np.dtype(dtype_name))
    for i in range(n_in * factor):
        src = (i + 0.5) / factor - 0.5
        i0 = int(np.floor(src))
        t = src - i0
        lo = min(max(i0, 0), n_in - 1)
        hi = min(max(i0 + 1, 0), n_in - 1)
        m[i, lo] += 1.0 - t
        m[i, hi] += t
    return m


def _apply_axis(mat: np.ndarray, arr: np.ndarray, axis: int) -> np.ndarray:
    moved = np.tensordot(mat, arr, axes=(1, axis))
    return np.ascontiguousarray(np.moveaxis(moved, 0, axis))


def upsample_trilinear(input: Tensor, factor: int) -> Tensor:
    """Trilinear upsampling by an integer factor; constants map to constants."""
    if factor == 1:
        return input
    x5, batched = _batched(input)
    mats = [_interp_matrix(x5.shape[ax], factor, x5.dtype.name) for ax in (2, 3, 4)]

    out_data = x5.data
    for ax, mat in zip((2, 3, 4), mats):
        out_data = _apply_axis(mat, out_data, ax)

    def bwd(g):
        for ax, mat in zip((4, 3, 2), reversed(mats)):
            g = _apply_axis(mat.T, g, ax)
        return (g,)

    return _debatch(make_node(out_data, (x5,), bwd, "upsample"), batched)


# -- pooling --------------------------------------------------------------------

def maxpool3d(input: Tensor, k: int = 2) -> Tensor:
    """Non-overlapping k^3 max pooling; ties route the gradient to the
    lowest flat index of the block."""
    x5, batched = _batched(input)
    n, c, d, h, w = x5.shape
    if d % k or h % k or w % k:
        raise IndivisibleExtent(f"spatial extents {(d, h, w)} not divisible by {k}")
    nd, nh, nw = d // k, h // k, w // k

    blocked = (x5.data.reshape(n, c, nd, k, nh, k, nw, k)
               .transpose(0, 1, 2, 4, 6, 3, 5, 7)
               .reshape(n, c, nd, nh, nw, k * k * k))
    idx = blocked.argmax(axis=-1)
    out_data = np.take_along_axis(blocked, idx[..., None], axis=-1)[..., 0]

    def bwd(g):
        gb = np.zeros_like(blocked)
        np.put_along_axis(gb, idx[..., None], g[..., None], axis=-1)
        gx = (gb.reshape(n, c, nd, nh, nw, k, k, k)
              .transpose(0, 1, 2, 5, 3, 6, 4, 7)
              .reshape(n, c, d, h, w))
        return (np.ascontiguousarray(gx),)

    return _debatch(make_node(np.ascontiguousarray(out_data), (x5,), bwd, "maxpool3d"), batched)


# -- normalization ----------------------------------------------------------------

def batchnorm(input: Tensor, gamma: Tensor, beta: Tensor,
              running_mean: np.ndarray, running_var: np.ndarray,
              training: bool, eps: float = 1e-5, momentum: float = 0.1) -> Tensor:
    """Per-channel batch normalization with running statistics.

    Training mode normalizes with the batch's (biased) statistics and
    updates the running buffers in place; inference mode uses the buffers.
    """
    x5, batched = _batched(input)
    c = x5.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeMismatch(f"gamma/beta must have shape ({c},)")
    axes = (0, 2, 3, 4)
    pshape = (1, c, 1, 1, 1)
    g = T.reshape(gamma, pshape)
    b = T.reshape(beta, pshape)

    if training:
        mu = x5.mean(axis=axes, keepdims=True)
        var = ((x5 - mu) ** 2).mean(axis=axes, keepdims=True)
        xhat = (x5 - mu) / T.sqrt(var + eps)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu.data.reshape(c).astype(running_mean.dtype)
        running_var *= 1.0 - momentum
        running_var += momentum * var.data.reshape(c).astype(running_var.dtype)
    else:
        mu = Tensor(running_mean.reshape(pshape).astype(x5.dtype))
        var = Tensor(running_var.reshape(pshape).astype(x5.dtype))
        xhat = (x5 - mu) / T.sqrt(var + eps)
    return _debatch(g * xhat + b, batched)


# -- activations -------------------------------------------------------------------

def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def bwd(g):
        return (g * mask,)

    return make_node(np.where(mask, x.data, x.dtype.type(0)), (x,), bwd, "relu")


def leaky_relu(x: Tensor, slope: float = 0.01) -> Tensor:
    mask = x.data > 0
    slope = x.dtype.type(slope)

    def bwd(g):
        return (np.where(mask, g, g * slope),)

    return make_node(np.where(mask, x.data, x.data * slope), (x,), bwd, "leaky_relu")


def sigmoid(x: Tensor) -> Tensor:
    """Numerically stable logistic; outputs clamped into the open (0, 1)."""
    d = x.data
    out = np.empty_like(d)
    pos = d >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    ex = np.exp(d[~pos])
    out[~pos] = ex / (1.0 + ex)
    info = np.finfo(d.dtype)
    np.clip(out, info.tiny, 1.0 - info.epsneg, out=out)

    def bwd(g):
        return (g * out * (1.0 - out),)

    return make_node(out, (x,), bwd, "sigmoid")


def softmax_channels(input: Tensor) -> Tensor:
    """Per-voxel softmax over the channel axis, max-subtracted for stability."""
    x5, batched = _batched(input)
    z = x5.data - x5.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)

    def bwd(g):
        dot = (g * p).sum(axis=1, keepdims=True)
        return (p * (g - dot),)

    return _debatch(make_node(p, (x5,), bwd, "softmax"), batched)


# -- regularization -----------------------------------------------------------------

def dropout(input: Tensor, rate: float, training: bool,
            rng: np.random.Generator = None) -> Tensor:
    """Inverted dropout: survivors are scaled at train time, inference is
    the identity."""
    if not 0.0 <= rate < 1.0:
        raise InvalidRate(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return input
    if rng is None:
        raise InvalidRate("training-mode dropout needs an explicit rng stream")
    keep = (rng.random(input.shape) >= rate)
    scale = input.dtype.type(1.0 / (1.0 - rate))
    mask = keep.astype(input.dtype) * scale

    def bwd(g):
        return (g * mask,)

    return make_node(input.data * mask, (input,), bwd, "dropout")


# -- verification --------------------------------------------------------------------

def grad_check(fn, inputs, eps: float = 1e-4, max_entries_per_input: int = None,
               seed: int = 0) -> float:
    """Compare analytic gradients against central finite differences.

    ``fn`` maps the given tensors to a scalar Tensor and must be
    deterministic. Returns the maximum over checked coordinates of
    |analytic - numeric| / max(1, |analytic|, |numeric|). Inputs must be
    float64: single precision makes the differences meaningless.
    """
    inputs = list(inputs)
    for t in inputs:
        if t.dtype != np.float64:
            raise ValueError("grad_check requires float64 inputs")
        t.requires_grad = True
        t.zero_grad()

    out = fn(*inputs)
    T.backward(out)
    analytic = [t.grad.copy() if t.grad is not None else np.zeros_like(t.data)
                for t in inputs]

    rng = make_rng(seed, "grad_check")
    worst = 0.0
    for t, a in zip(inputs, analytic):
        flat = t.data.reshape(-1)
        n = flat.size
        if max_entries_per_input is not None and n > max_entries_per_input:
            coords = rng.choice(n, size=max_entries_per_input, replace=False)
        else:
            coords = np.arange(n)
        aflat = a.reshape(-1)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = float(fn(*inputs).data)
            flat[i] = orig - eps
            f_minus = float(fn(*inputs).data)
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * eps)
            err = abs(aflat[i] - numeric) / max(1.0, abs(aflat[i]), abs(numeric))
            worst = max(worst, err)
    return worst
