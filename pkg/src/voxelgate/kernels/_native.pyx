# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled 3-D convolution kernels (forward, input/weight gradients).

Direct convolution with implicit zero padding. Work is split so that one
thread owns each output row (forward) or each weight element (weight
gradient) and accumulates it in a fixed order, which keeps results
bitwise independent of the thread count. Stride-1 rows take a unit-stride
fast path; dot products run in four fixed lanes for instruction-level
parallelism.
"""

from cython.parallel cimport prange

import numpy as np


ctypedef fused real:
    float
    double

DEF MAX_ROW = 1024


cdef inline Py_ssize_t _lo(Py_ssize_t pad, Py_ssize_t kk, Py_ssize_t s) noexcept nogil:
    # smallest o with o*s - pad + kk >= 0
    cdef Py_ssize_t num = pad - kk
    if num <= 0:
        return 0
    return (num + s - 1) // s


cdef inline Py_ssize_t _hi(Py_ssize_t pad, Py_ssize_t kk, Py_ssize_t s,
                           Py_ssize_t n_in, Py_ssize_t n_out) noexcept nogil:
    # largest o with o*s - pad + kk <= n_in - 1, clamped to n_out - 1
    cdef Py_ssize_t num = n_in - 1 + pad - kk
    if num < 0:
        return -1
    num = num // s
    if num > n_out - 1:
        return n_out - 1
    return num


cdef inline real _dot4(const real* a, const real* b, Py_ssize_t cnt) noexcept nogil:
    # four fixed accumulation lanes; order depends only on cnt
    cdef real s0 = 0, s1 = 0, s2 = 0, s3 = 0
    cdef Py_ssize_t j, m = cnt - (cnt % 4)
    for j in range(0, m, 4):
        s0 += a[j] * b[j]
        s1 += a[j + 1] * b[j + 1]
        s2 += a[j + 2] * b[j + 2]
        s3 += a[j + 3] * b[j + 3]
    for j in range(m, cnt):
        s0 += a[j] * b[j]
    return (s0 + s1) + (s2 + s3)


cdef void _forward_row(real[:, :, :, :, ::1] x, real[:, :, :, :, ::1] w,
                       real[:, :, :, :, ::1] out,
                       Py_ssize_t n, Py_ssize_t co, Py_ssize_t od, Py_ssize_t oh,
                       Py_ssize_t s, Py_ssize_t p) noexcept nogil:
    # one output row; the accumulator lives on this call's stack, so the
    # row is private to whichever thread computes it
    cdef Py_ssize_t Ci = x.shape[1], D = x.shape[2], H = x.shape[3], W = x.shape[4]
    cdef Py_ssize_t K = w.shape[2], OW = out.shape[4]
    cdef Py_ssize_t ci, kz, ky, kx, z, y, ow, ow0, ow1, bx, lo3, hi3
    cdef real wv, w0, w1, w2
    cdef real acc[MAX_ROW]
    cdef const real* xrow
    cdef const real* px

    for ow in range(OW):
        acc[ow] = 0
    for ci in range(Ci):
        for kz in range(K):
            z = od * s - p + kz
            if z < 0 or z >= D:
                continue
            for ky in range(K):
                y = oh * s - p + ky
                if y < 0 or y >= H:
                    continue
                xrow = &x[n, ci, z, y, 0]
                if s == 1 and K == 3 and p == 1 and W == OW and OW >= 2:
                    # fused three-tap row: interior is branch-free
                    w0 = w[co, ci, kz, ky, 0]
                    w1 = w[co, ci, kz, ky, 1]
                    w2 = w[co, ci, kz, ky, 2]
                    acc[0] += w1 * xrow[0] + w2 * xrow[1]
                    px = xrow - 1
                    for ow in range(1, OW - 1):
                        acc[ow] += w0 * px[ow] + w1 * px[ow + 1] + w2 * px[ow + 2]
                    acc[OW - 1] += w0 * xrow[OW - 2] + w1 * xrow[OW - 1]
                    continue
                for kx in range(K):
                    wv = w[co, ci, kz, ky, kx]
                    ow0 = _lo(p, kx, s)
                    ow1 = _hi(p, kx, s, W, OW)
                    bx = kx - p
                    if s == 1:
                        px = xrow + bx
                        for ow in range(ow0, ow1 + 1):
                            acc[ow] += wv * px[ow]
                    else:
                        for ow in range(ow0, ow1 + 1):
                            acc[ow] += wv * xrow[bx + ow * s]
    for ow in range(OW):
        out[n, co, od, oh, ow] = acc[ow]


def conv3d_forward(real[:, :, :, :, ::1] x, real[:, :, :, :, ::1] w,
                   real[:, :, :, :, ::1] out, int stride, int pad, int threads):
    cdef Py_ssize_t N = x.shape[0]
    cdef Py_ssize_t Co = w.shape[0]
    cdef Py_ssize_t OD = out.shape[2], OH = out.shape[3], OW = out.shape[4]
    cdef Py_ssize_t idx, n, co, od, oh

    if OW > MAX_ROW:
        raise ValueError("output row longer than compiled maximum")

    with nogil:
        for idx in prange(N * Co * OD, num_threads=threads, schedule='static'):
            n = idx // (Co * OD)
            co = (idx // OD) % Co
            od = idx % OD
            for oh in range(OH):
                _forward_row(x, w, out, n, co, od, oh, stride, pad)


def conv3d_grad_input(real[:, :, :, :, ::1] gy, real[:, :, :, :, ::1] w,
                      real[:, :, :, :, ::1] gx, int stride, int pad, int threads):
    """Generic strided scatter-as-gather; the dispatcher routes stride-1
    cases through conv3d_forward on a flipped weight instead."""
    cdef Py_ssize_t N = gx.shape[0], Ci = gx.shape[1]
    cdef Py_ssize_t D = gx.shape[2], H = gx.shape[3], W = gx.shape[4]
    cdef Py_ssize_t Co = w.shape[0], K = w.shape[2]
    cdef Py_ssize_t OD = gy.shape[2], OH = gy.shape[3], OW = gy.shape[4]
    cdef Py_ssize_t idx, n, ci, z, y, xx, co, kz, ky, kx, od, oh, ow
    cdef Py_ssize_t tz, ty, tx
    cdef real acc

    with nogil:
        for idx in prange(N * Ci * D, num_threads=threads, schedule='static'):
            n = idx // (Ci * D)
            ci = (idx // D) % Ci
            z = idx % D
            for y in range(H):
                for xx in range(W):
                    acc = 0
                    for kz in range(K):
                        tz = z + pad - kz
                        if tz < 0 or tz % stride != 0:
                            continue
                        od = tz // stride
                        if od >= OD:
                            continue
                        for ky in range(K):
                            ty = y + pad - ky
                            if ty < 0 or ty % stride != 0:
                                continue
                            oh = ty // stride
                            if oh >= OH:
                                continue
                            for kx in range(K):
                                tx = xx + pad - kx
                                if tx < 0 or tx % stride != 0:
                                    continue
                                ow = tx // stride
                                if ow >= OW:
                                    continue
                                for co in range(Co):
                                    acc = acc + w[co, ci, kz, ky, kx] * gy[n, co, od, oh, ow]
                    gx[n, ci, z, y, xx] = acc


def conv3d_grad_weight(real[:, :, :, :, ::1] x, real[:, :, :, :, ::1] gy,
                       real[:, :, :, :, ::1] gw, int stride, int pad, int threads):
    cdef Py_ssize_t N = x.shape[0], Ci = x.shape[1]
    cdef Py_ssize_t D = x.shape[2], H = x.shape[3], W = x.shape[4]
    cdef Py_ssize_t Co = gw.shape[0], K = gw.shape[2]
    cdef Py_ssize_t OD = gy.shape[2], OH = gy.shape[3], OW = gy.shape[4]
    cdef Py_ssize_t s = stride, p = pad
    cdef Py_ssize_t idx, co, ci, kz, ky, kx, n, od, oh, ow, z, y
    cdef Py_ssize_t od0, od1, oh0, oh1, ow0, ow1, bx, cnt
    cdef real acc
    cdef const real* xrow
    cdef const real* grow

    with nogil:
        for idx in prange(Co * Ci, num_threads=threads, schedule='static'):
            co = idx // Ci
            ci = idx % Ci
            for kz in range(K):
                od0 = _lo(p, kz, s)
                od1 = _hi(p, kz, s, D, OD)
                for ky in range(K):
                    oh0 = _lo(p, ky, s)
                    oh1 = _hi(p, ky, s, H, OH)
                    for kx in range(K):
                        ow0 = _lo(p, kx, s)
                        ow1 = _hi(p, kx, s, W, OW)
                        bx = kx - p
                        cnt = ow1 - ow0 + 1
                        acc = 0
                        for n in range(N):
                            for od in range(od0, od1 + 1):
                                z = od * s - p + kz
                                for oh in range(oh0, oh1 + 1):
                                    y = oh * s - p + ky
                                    grow = &gy[n, co, od, oh, ow0]
                                    xrow = &x[n, ci, z, y, bx + ow0 * s]
                                    if s == 1:
                                        acc = acc + _dot4(grow, xrow, cnt)
                                    else:
                                        for ow in range(cnt):
                                            acc = acc + grow[ow] * xrow[ow * s]
                        gw[co, ci, kz, ky, kx] = acc
