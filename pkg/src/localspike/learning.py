"""Local losses and the closed-form per-timestep weight update.

The update needs only quantities already produced by the forward pass at
the same timestep -- the input traces P, the membrane potential U, and the
readout residual routed back through the fixed matrix (G, or the noisy
sign-concordant H).  Nothing is accumulated across timesteps, so learning
adds no state that grows with sequence length:

    dW[i,j] = error[i] * boxcar(U[i]) * P[j]        (dense)
    db[i]   = error[i] * boxcar(U[i])

For conv layers the same product becomes a correlation between the
modulator plane and the input-trace map, with each pooled unit's modulator
routed to the argmax position of its pool window.  The firing-rate
regularizer contributes an extra dL/dU term that bypasses the boxcar gate.
"""

from dataclasses import dataclass

import numpy as np

from . import backend, parallel
from .dynamics import SurrogateSpec, surrogate_derivative
from .errors import ConfigurationError, ShapeMismatchError
from .network import LayerParams


@dataclass(frozen=True)
class LossSpec:
    """Readout loss: plain MSE or a smooth L1 whose gradient saturates at +-delta."""

    kind: str = "smooth_l1"
    smooth_l1_delta: float = 1.0

    def __post_init__(self):
        if self.kind not in ("mse", "smooth_l1"):
            raise ConfigurationError(f"unknown loss kind {self.kind!r}")
        if not (self.smooth_l1_delta > 0):
            raise ConfigurationError("smooth_l1_delta must be > 0")


@dataclass(frozen=True)
class RegularizerSpec:
    """Firing-rate regularizer on the membrane potential.

    Penalty per sample: lambda1 * mean_i([U_i + u_margin]^+)
                      + lambda2 * [rate_floor - mean_i(U_i)]^+
    The first term pushes U below threshold on average, the second keeps
    layers from going silent.
    """

    lambda1: float = 0.0
    lambda2: float = 0.0
    u_margin: float = 0.01
    rate_floor: float = 0.1

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ConfigurationError("regularizer coefficients must be >= 0")


def residual_gradient(Y: np.ndarray, Y_hat: np.ndarray, loss: LossSpec) -> np.ndarray:
    """dL/dY.  MSE: the residual; smooth L1: the residual clipped to +-delta."""
    r = Y - Y_hat
    if loss.kind == "smooth_l1":
        d = loss.smooth_l1_delta
        r = np.clip(r, -d, d)
    return r


def loss_value(Y: np.ndarray, Y_hat: np.ndarray, loss: LossSpec) -> float:
    """Scalar loss summed over readout entries (and batch rows if present)."""
    r = np.asarray(Y, dtype=np.float64) - np.asarray(Y_hat, dtype=np.float64)
    if loss.kind == "mse":
        return float(0.5 * np.sum(r * r))
    d = loss.smooth_l1_delta
    a = np.abs(r)
    quad = 0.5 * r * r
    lin = d * (a - 0.5 * d)
    return float(np.sum(np.where(a <= d, quad, lin)))


def regularizer_value(U: np.ndarray, spec: RegularizerSpec) -> float:
    """Penalty summed over batch rows (mean over units within each row)."""
    U = np.asarray(U, dtype=np.float64)
    B = U.shape[0]
    flat = U.reshape(B, -1)
    t1 = spec.lambda1 * np.mean(np.maximum(flat + spec.u_margin, 0.0), axis=1)
    t2 = spec.lambda2 * np.maximum(spec.rate_floor - np.mean(flat, axis=1), 0.0)
    return float(np.sum(t1 + t2))


def local_error(
    G_or_H: np.ndarray, Y: np.ndarray, Y_hat: np.ndarray, loss: LossSpec
) -> np.ndarray:
    """Backpropagated readout error: feedback.T @ dL/dY, per batch row.

    Pass G for exact feedback or H for the sign-concordant variant.  Accepts
    [n_readout] vectors or [batch, n_readout] stacks; returns the matching
    [n_flat_out] or [batch, n_flat_out].
    """
    Y = np.asarray(Y)
    Y_hat = np.asarray(Y_hat)
    if Y.shape != Y_hat.shape:
        raise ShapeMismatchError(f"readout {Y.shape} vs target {Y_hat.shape}")
    if Y.shape[-1] != G_or_H.shape[0]:
        raise ShapeMismatchError(
            f"readout length {Y.shape[-1]} != feedback rows {G_or_H.shape[0]}"
        )
    return residual_gradient(Y, Y_hat, loss) @ G_or_H


def regularizer_gradient(U: np.ndarray, spec: RegularizerSpec) -> np.ndarray:
    """dPenalty/dU, same shape as U (per batch row means over units)."""
    B = U.shape[0]
    flat = U.reshape(B, -1)
    n = flat.shape[1]
    g = np.zeros_like(flat)
    if spec.lambda1:
        g += (spec.lambda1 / n) * (flat + spec.u_margin > 0)
    if spec.lambda2:
        active = (spec.rate_floor - np.mean(flat, axis=1, keepdims=True)) > 0
        g -= (spec.lambda2 / n) * active
    return g.reshape(U.shape)


def decolle_update(
    error: np.ndarray,
    U: np.ndarray,
    P: np.ndarray,
    spec: SurrogateSpec,
    *,
    layer: LayerParams | None = None,
    pool_argmax: np.ndarray | None = None,
    cols: np.ndarray | None = None,
    extra_dldu: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Raw loss gradients (dW, db) for one timestep, summed over the batch.

    ``error`` is the flattened per-unit readout error (from
    :func:`local_error`), ``U``/``P`` the membrane potential and input
    traces of the same timestep.  ``extra_dldu`` adds a direct dL/dU term
    (the regularizer path) that is not gated by the boxcar.

    Dense layers need no extras; conv layers take ``layer`` geometry plus
    the forward byproducts ``pool_argmax``/``cols``.  1-D arguments are
    treated as a batch of one.
    """
    out_rank = len(layer.out_shape) if layer is not None else 1
    if U.ndim == out_rank:  # unbatched call: promote to a batch of one
        error, U, P = error[None], U[None], P[None]
        if extra_dldu is not None:
            extra_dldu = extra_dldu[None]
        if pool_argmax is not None and pool_argmax.ndim == out_rank:
            pool_argmax = pool_argmax[None]
    B = U.shape[0]
    mod = error.reshape(U.shape) * surrogate_derivative(U, spec)
    if extra_dldu is not None:
        mod = mod + extra_dldu

    if layer is None or layer.kind == "dense":
        if P.ndim != 2 or mod.ndim != 2:
            raise ShapeMismatchError("dense update expects [batch, n] arrays")
        dW = parallel.matmul(np.ascontiguousarray(mod.T), P)
        db = mod.sum(axis=0)
        return dW, db

    # conv: route the modulator to pre-pool positions, correlate with P
    c_out, oh, ow = layer.pre_pool_shape
    n = oh * ow
    mod_cl = np.ascontiguousarray(mod.transpose(0, 2, 3, 1))  # channels-last
    if layer.pool:
        if pool_argmax is None:
            raise ShapeMismatchError("pooled conv update needs pool_argmax from the forward pass")
        dA_pos = backend.kernels.pool_scatter(mod_cl, pool_argmax, n)
    else:
        dA_pos = mod_cl.reshape(B, n, c_out)
    if cols is None:
        cols = backend.kernels.im2col(P, layer.kernel, layer.kernel, layer.padding, layer.stride)
    # cols is positions-major [B, n, kh*kw*c_in]: dW reduces over (batch,
    # positions) in one flat GEMM, then reorders to the W layout
    dWt = parallel.matmul(dA_pos.reshape(B * n, c_out).T, cols.reshape(B * n, -1))
    kh = kw = layer.kernel
    c_in = layer.in_shape[0]
    dW = np.ascontiguousarray(dWt.reshape(c_out, kh, kw, c_in).transpose(0, 3, 1, 2))
    db = dA_pos.sum(axis=(0, 1))
    return dW, db


@dataclass
class AdaMaxState:
    """Per-tensor optimizer state for the infinity-norm Adam variant."""

    m: np.ndarray
    u: np.ndarray
    t: int = 0
    beta1: float = 0.0
    beta2: float = 0.95
    lr: float = 1e-9
    eps: float = 1e-8

    @classmethod
    def for_param(cls, param: np.ndarray, lr: float, beta1: float = 0.0, beta2: float = 0.95):
        return cls(
            m=np.zeros_like(param), u=np.zeros_like(param),
            beta1=beta1, beta2=beta2, lr=lr,
        )


def adamax_step(
    state: AdaMaxState, grad: np.ndarray, param: np.ndarray, lr: float | None = None
) -> tuple[AdaMaxState, np.ndarray]:
    """One optimizer step (mutates state and param in place, returns both).

        m <- beta1*m + (1-beta1)*grad
        u <- max(beta2*u, |grad|)
        param <- param - (lr / (1 - beta1^t)) * m / (u + eps)
    """
    if grad.shape != param.shape:
        raise ShapeMismatchError(f"grad {grad.shape} vs param {param.shape}")
    state.t += 1
    lr = state.lr if lr is None else lr
    b1 = state.beta1
    if b1 == 0.0:
        state.m[...] = grad
        correction = 1.0
    else:
        state.m *= b1
        state.m += (1.0 - b1) * grad
        correction = 1.0 - b1 ** state.t
    np.maximum(state.beta2 * state.u, np.abs(grad), out=state.u)
    param -= (lr / correction) * state.m / (state.u + state.eps)
    return state, param


@dataclass(frozen=True)
class LrSchedule:
    """Step decay: lr / divisor every ``interval_steps`` trainer steps."""

    divisor: float = 5.0
    interval_steps: int = 500

    def __post_init__(self):
        if not (self.divisor > 1):
            raise ConfigurationError("schedule divisor must be > 1")
        if self.interval_steps <= 0:
            raise ConfigurationError("schedule interval must be > 0")


def schedule_lr(base_lr: float, step: int, sched: LrSchedule) -> float:
    """Learning rate at ``step``: base / divisor^floor(step / interval)."""
    if step < 0:
        raise ConfigurationError(f"step must be >= 0, got {step}")
    return base_lr / sched.divisor ** (step // sched.interval_steps)
