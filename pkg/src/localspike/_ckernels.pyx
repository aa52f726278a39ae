# cython: boundscheck=False, wraparound=False, cdivision=True
# cython: language_level=3
"""Compiled per-timestep hot kernels.

Same contract as ``_pykernels``; built with -ffp-contract=off so results
are bit-identical to the NumPy backend.  All loops release the GIL, so the
engine's worker pool can run kernel calls on batch slices concurrently.
"""

import numpy as np

cimport numpy as cnp
from libc.string cimport memcpy

cnp.import_array()

NAME = "cython"

ctypedef fused real:
    float
    double


def decay_pair(P, Q, inp, double alpha, double beta):
    P = np.ascontiguousarray(P)
    Q = np.ascontiguousarray(Q)
    inp = np.ascontiguousarray(inp, dtype=P.dtype)
    P2 = np.empty_like(P)
    Q2 = np.empty_like(Q)
    _decay_pair(P.reshape(-1), Q.reshape(-1), inp.reshape(-1),
                P2.reshape(-1), Q2.reshape(-1), alpha, beta)
    return P2, Q2


def _decay_pair(real[::1] P, real[::1] Q, real[::1] inp,
                real[::1] P2, real[::1] Q2, double alpha, double beta):
    cdef Py_ssize_t i, n = P.shape[0]
    # complements computed in double then rounded, matching the NumPy backend
    cdef real a = <real> alpha
    cdef real ca = <real> (1.0 - alpha)
    cdef real b = <real> beta
    cdef real cb = <real> (1.0 - beta)
    with nogil:
        for i in range(n):
            P2[i] = a * P[i] + ca * Q[i]
            Q2[i] = b * Q[i] + cb * inp[i]


def decay_single(R, drive, double gamma):
    R = np.ascontiguousarray(R)
    drive = np.ascontiguousarray(drive, dtype=R.dtype)
    R2 = np.empty_like(R)
    _decay_single(R.reshape(-1), drive.reshape(-1), R2.reshape(-1), gamma)
    return R2


def _decay_single(real[::1] R, real[::1] drive, real[::1] R2, double gamma):
    cdef Py_ssize_t i, n = R.shape[0]
    cdef real g = <real> gamma
    cdef real cg = <real> (1.0 - gamma)
    with nogil:
        for i in range(n):
            R2[i] = g * R[i] + cg * drive[i]


def heaviside(u):
    u = np.ascontiguousarray(u)
    out = np.empty_like(u)
    _heaviside(u.reshape(-1), out.reshape(-1))
    return out


def _heaviside(real[::1] u, real[::1] out):
    cdef Py_ssize_t i, n = u.shape[0]
    with nogil:
        for i in range(n):
            out[i] = <real> 1.0 if u[i] >= <real> 0.0 else <real> 0.0


def boxcar(u, double half_width):
    u = np.ascontiguousarray(u)
    out = np.empty_like(u)
    _boxcar(u.reshape(-1), out.reshape(-1), half_width)
    return out


def _boxcar(real[::1] u, real[::1] out, double half_width):
    cdef Py_ssize_t i, n = u.shape[0]
    cdef real hw = <real> half_width
    with nogil:
        for i in range(n):
            out[i] = <real> 1.0 if (u[i] >= -hw and u[i] <= hw) else <real> 0.0


def im2col(x, Py_ssize_t kh, Py_ssize_t kw, Py_ssize_t pad, Py_ssize_t stride, out=None):
    """NCHW input -> [B, oh*ow, kh*kw*C] patches, column order (i, j, c).

    ``out`` may be a previous result to reuse as the destination buffer.
    """
    cdef Py_ssize_t B = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t oh = (H + 2 * pad - kh) // stride + 1
    cdef Py_ssize_t ow = (W + 2 * pad - kw) // stride + 1
    xt = np.ascontiguousarray(np.asarray(x).transpose(0, 2, 3, 1))
    if pad:
        xt = np.pad(xt, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    shape = (B, oh * ow, kh * kw * C)
    if out is None or out.shape != shape or out.dtype != x.dtype:
        out = np.empty(shape, dtype=x.dtype)
    _im2col(xt, out, kh, kw, stride, oh, ow)
    return out


def _im2col(real[:, :, :, ::1] xt, real[:, :, ::1] out,
            Py_ssize_t kh, Py_ssize_t kw,
            Py_ssize_t stride, Py_ssize_t oh, Py_ssize_t ow):
    cdef Py_ssize_t B = xt.shape[0], C = xt.shape[3]
    cdef Py_ssize_t b, i, j, oy, ox, pos
    cdef size_t nbytes = C * sizeof(real)
    with nogil:
        for b in range(B):
            for oy in range(oh):
                for ox in range(ow):
                    pos = oy * ow + ox
                    for i in range(kh):
                        for j in range(kw):
                            memcpy(&out[b, pos, (i * kw + j) * C],
                                   &xt[b, oy * stride + i, ox * stride + j, 0], nbytes)


def maxpool2d(a, Py_ssize_t k):
    """Channels-last [B,H,W,C] max pool; see the NumPy backend docstring."""
    a = np.ascontiguousarray(a)
    cdef Py_ssize_t B = a.shape[0], H = a.shape[1], W = a.shape[2], C = a.shape[3]
    cdef Py_ssize_t h2 = H // k, w2 = W // k
    pooled = np.empty((B, h2, w2, C), dtype=a.dtype)
    arg = np.empty((B, h2, w2, C), dtype=np.int64)
    _maxpool2d(a, pooled, arg, k)
    return pooled, arg


def _maxpool2d(real[:, :, :, ::1] a, real[:, :, :, ::1] pooled,
               cnp.int64_t[:, :, :, ::1] arg, Py_ssize_t k):
    cdef Py_ssize_t B = a.shape[0], H = a.shape[1], W = a.shape[2], C = a.shape[3]
    cdef Py_ssize_t h2 = H // k, w2 = W // k
    cdef Py_ssize_t b, c, y2, x2, dy, dx, y, x
    cdef real v
    with nogil:
        for b in range(B):
            for y2 in range(h2):
                for x2 in range(w2):
                    for c in range(C):
                        pooled[b, y2, x2, c] = a[b, y2 * k, x2 * k, c]
                        arg[b, y2, x2, c] = (y2 * k) * W + x2 * k
                    for dy in range(k):
                        y = y2 * k + dy
                        for dx in range(k):
                            if dy == 0 and dx == 0:
                                continue
                            x = x2 * k + dx
                            for c in range(C):
                                v = a[b, y, x, c]
                                if v > pooled[b, y2, x2, c]:
                                    pooled[b, y2, x2, c] = v
                                    arg[b, y2, x2, c] = y * W + x


def pool_scatter(mod, arg, Py_ssize_t n_positions):
    """Channels-last modulator + argmax -> positions-major [B, n, C]."""
    mod = np.ascontiguousarray(mod)
    arg = np.ascontiguousarray(arg, dtype=np.int64)
    cdef Py_ssize_t B = mod.shape[0], C = mod.shape[3]
    cdef Py_ssize_t m = mod.shape[1] * mod.shape[2]
    out = np.zeros((B, n_positions, C), dtype=mod.dtype)
    _pool_scatter(mod.reshape(B, m, C), arg.reshape(B, m, C), out)
    return out


def _pool_scatter(real[:, :, ::1] mod, cnp.int64_t[:, :, ::1] arg, real[:, :, ::1] out):
    cdef Py_ssize_t B = mod.shape[0], m = mod.shape[1], C = mod.shape[2]
    cdef Py_ssize_t b, q, c
    with nogil:
        for b in range(B):
            for q in range(m):
                for c in range(C):
                    out[b, arg[b, q, c], c] = mod[b, q, c]
