"""Pure-NumPy implementations of the per-timestep hot kernels.

This module is the reference backend: the compiled extension in
``_ckernels.pyx`` implements the same functions with identical semantics
(including max-pool tie-breaking and bit-identical float arithmetic), and
``localspike.backend`` picks whichever is available at import time.

All kernels accept float32 or float64 arrays and preserve the input dtype.
The conv helpers use a channels-last internal layout: patch columns are
ordered (ky, kx, c) so that channel runs stay contiguous, which is what
makes the gather fast on CPU.
"""

import numpy as np

NAME = "numpy"


def decay_pair(P, Q, inp, alpha, beta):
    """One trace step for the (membrane, synaptic) pair.

    P' = alpha*P + (1-alpha)*Q   (uses the pre-update Q)
    Q' = beta*Q  + (1-beta)*inp
    """
    P2 = alpha * P + (1.0 - alpha) * Q
    Q2 = beta * Q + (1.0 - beta) * inp
    return P2, Q2


def decay_single(R, drive, gamma):
    """R' = gamma*R + (1-gamma)*drive."""
    return gamma * R + (1.0 - gamma) * drive


def heaviside(u):
    """Unit step: 1 where u >= 0, else 0 (same dtype as ``u``)."""
    return (u >= 0).astype(u.dtype)


def boxcar(u, half_width):
    """1 where |u| <= half_width (inclusive endpoints), else 0."""
    return ((u >= -half_width) & (u <= half_width)).astype(u.dtype)


def im2col(x, kh, kw, pad, stride, out=None):
    """Unfold NCHW input [B,C,H,W] into patches [B, oh*ow, kh*kw*C].

    Column f indexes (i, j, c) as f = (i*kw + j)*C + c; pair it with
    kernel tensors transposed to [c_out, kh, kw, c_in].  ``out`` may be a
    previous result to reuse as the destination buffer (the patch arrays
    are by far the largest per-step allocation).
    """
    B, C, H, W = x.shape
    oh = (H + 2 * pad - kh) // stride + 1
    ow = (W + 2 * pad - kw) // stride + 1
    xt = np.ascontiguousarray(x.transpose(0, 2, 3, 1))
    if pad:
        xt = np.pad(xt, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    shape = (B, oh * ow, kh * kw * C)
    if out is None or out.shape != shape or out.dtype != x.dtype:
        out = np.empty(shape, dtype=x.dtype)
    v = out.reshape(B, oh, ow, kh, kw, C)
    if stride == 1:
        for i in range(kh):
            for j in range(kw):
                v[:, :, :, i, j, :] = xt[:, i : i + oh, j : j + ow, :]
    else:
        for i in range(kh):
            for j in range(kw):
                v[:, :, :, i, j, :] = xt[
                    :, i : i + (oh - 1) * stride + 1 : stride,
                    j : j + (ow - 1) * stride + 1 : stride, :,
                ]
    return out


def maxpool2d(a, k):
    """Non-overlapping k x k max pool on channels-last input (floor mode).

    ``a`` is [B, H, W, C]; returns (pooled [B,h2,w2,C], argmax int64
    [B,h2,w2,C]) where argmax is the flat row-major index y*W + x into the
    input plane.  Ties go to the first element in (dy, dx) scan order.
    """
    B, H, W, C = a.shape
    h2, w2 = H // k, W // k
    v = (
        a[:, : h2 * k, : w2 * k, :]
        .reshape(B, h2, k, w2, k, C)
        .transpose(0, 1, 3, 2, 4, 5)
        .reshape(B, h2, w2, k * k, C)
    )
    idx = v.argmax(axis=3)
    pooled = np.take_along_axis(v, idx[:, :, :, None, :], axis=3)[:, :, :, 0, :]
    dy, dx = idx // k, idx % k
    y0 = (np.arange(h2, dtype=np.int64) * k)[None, :, None, None]
    x0 = (np.arange(w2, dtype=np.int64) * k)[None, None, :, None]
    plane = (y0 + dy) * W + (x0 + dx)
    return np.ascontiguousarray(pooled), plane


def pool_scatter(mod, arg, n_positions):
    """Route pooled-level values back to their argmax positions.

    ``mod`` and ``arg`` are channels-last [B, h2, w2, C]; the result is
    positions-major [B, n_positions, C] with out[b, arg[b,y,x,c], c] =
    mod[b,y,x,c] and zeros elsewhere (pool windows are disjoint).
    """
    B, h2, w2, C = mod.shape
    out = np.zeros((B, n_positions, C), dtype=mod.dtype)
    np.put_along_axis(out, arg.reshape(B, h2 * w2, C), mod.reshape(B, h2 * w2, C), axis=1)
    return out
