"""Backend dispatch for the convolution hot kernels.

The compiled extension is preferred when importable; otherwise the NumPy
fallback takes over. VOXELGATE_BACKEND=native|numpy forces a choice and
VOXELGATE_THREADS caps the native thread count.
"""

import os

import numpy as np

from ..errors import NonPositiveOutputExtent, ShapeMismatch
from . import numpy_backend

try:
    from . import _native
except ImportError:
    _native = None

_FORCED = os.environ.get("VOXELGATE_BACKEND", "auto")
if _FORCED not in ("auto", "native", "numpy"):
    raise RuntimeError(f"VOXELGATE_BACKEND must be auto|native|numpy, got {_FORCED!r}")
if _FORCED == "native" and _native is None:
    raise RuntimeError("VOXELGATE_BACKEND=native but the compiled extension is not built")

_active = "numpy" if _FORCED == "numpy" or _native is None else "native"


def backend_name() -> str:
    return _active


def use_backend(name: str) -> str:
    """Switch backend at runtime (tests, benchmarks); returns the old name."""
    global _active
    if name not in ("native", "numpy"):
        raise ValueError(f"unknown backend {name!r}")
    if name == "native" and _native is None:
        raise RuntimeError("compiled extension not available")
    old, _active = _active, name
    return old


_CPU_COUNT = os.cpu_count() or 1


def thread_count() -> int:
    env = os.environ.get("VOXELGATE_THREADS")
    if env:
        return max(1, int(env))
    return _CPU_COUNT


def _check_conv_args(x, w, stride, pad):
    if x.ndim != 5 or w.ndim != 5:
        raise ShapeMismatch(f"conv3d expects rank-5 input/weight, got {x.ndim}/{w.ndim}")
    if x.shape[1] != w.shape[1]:
        raise ShapeMismatch(f"input channels {x.shape[1]} != weight channels {w.shape[1]}")
    if not (w.shape[2] == w.shape[3] == w.shape[4]):
        raise ShapeMismatch(f"kernel must be cubic, got {w.shape[2:]}")
    if stride < 1:
        raise ShapeMismatch(f"stride must be >= 1, got {stride}")
    k = w.shape[2]
    out_sp = tuple(numpy_backend.out_extent(e, k, stride, pad) for e in x.shape[2:])
    if min(out_sp) < 1:
        raise NonPositiveOutputExtent(
            f"input {x.shape[2:]} with k={k} stride={stride} pad={pad} -> output {out_sp}")
    return out_sp


def conv3d_forward(x: np.ndarray, w: np.ndarray, stride: int = 1, pad: int = 0) -> np.ndarray:
    out_sp = _check_conv_args(x, w, stride, pad)
    if _active == "native":
        x = np.ascontiguousarray(x)
        w = np.ascontiguousarray(w)
        out = np.empty((x.shape[0], w.shape[0]) + out_sp, dtype=x.dtype)
        _native.conv3d_forward(x, w, out, stride, pad, thread_count())
        return out
    return numpy_backend.conv3d_forward(x, w, stride, pad)


def conv3d_grad_input(gy: np.ndarray, w: np.ndarray, stride: int, pad: int,
                      in_spatial: tuple) -> np.ndarray:
    k = w.shape[2]
    if stride == 1 and pad <= k - 1:
        # full correlation identity: the input gradient of a stride-1
        # convolution is a convolution of gy with the spatially flipped,
        # channel-transposed kernel
        w_flip = np.ascontiguousarray(w[:, :, ::-1, ::-1, ::-1].transpose(1, 0, 2, 3, 4))
        return conv3d_forward(gy, w_flip, 1, k - 1 - pad)
    if _active == "native":
        gy = np.ascontiguousarray(gy)
        w = np.ascontiguousarray(w)
        gx = np.empty((gy.shape[0], w.shape[1]) + tuple(in_spatial), dtype=gy.dtype)
        _native.conv3d_grad_input(gy, w, gx, stride, pad, thread_count())
        return gx
    return numpy_backend.conv3d_grad_input(gy, w, stride, pad, in_spatial)


def conv3d_grad_weight(x: np.ndarray, gy: np.ndarray, stride: int, pad: int,
                       k: int) -> np.ndarray:
    if _active == "native":
        x = np.ascontiguousarray(x)
        gy = np.ascontiguousarray(gy)
        gw = np.empty((gy.shape[1], x.shape[1], k, k, k), dtype=x.dtype)
        _native.conv3d_grad_weight(x, gy, gw, stride, pad, thread_count())
        return gw
    return numpy_backend.conv3d_grad_weight(x, gy, stride, pad, k)
