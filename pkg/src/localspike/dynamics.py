"""Discrete-time spike-response neuron model.

State containers for the leaky trace dynamics, the per-timestep state
transition, the hard spike threshold, and the boxcar surrogate derivative.

Update semantics per step (all convex combinations):

    P' = alpha*P + (1-alpha)*Q      # membrane trace, uses pre-update Q
    Q' = beta*Q  + (1-beta)*inp     # synaptic trace, driven by input spikes
    R' = gamma*R + (1-gamma)*S      # refractory trace, driven by own spikes
    U  = W @ P' - rho*R' + b
    S  = step(U)                    # step(0) == 1

P and Q are indexed by presynaptic input only (one trace per input, never
per synapse), so trace memory scales with neurons, not connections.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from . import backend
from .errors import ConfigurationError, ShapeMismatchError


@dataclass(frozen=True)
class DecayConstants:
    """Per-step decay factors derived from time constants (milliseconds)."""

    alpha: float  # membrane trace decay, exp(-dt/tau_mem)
    beta: float   # synaptic trace decay, exp(-dt/tau_syn)
    gamma: float  # refractory trace decay, exp(-dt/tau_ref)
    dt: float
    tau_mem: float
    tau_syn: float
    tau_ref: float


def make_decay_constants(
    dt: float, tau_mem: float = 10.0, tau_syn: float = 5.0, tau_ref: float = 10.0
) -> DecayConstants:
    """Build decay constants alpha/beta/gamma = exp(-dt/tau), each in (0,1).

    Raises:
        ConfigurationError: if dt or any tau is not strictly positive.
    """
    for name, v in (("dt", dt), ("tau_mem", tau_mem), ("tau_syn", tau_syn), ("tau_ref", tau_ref)):
        if not (v > 0):
            raise ConfigurationError(f"{name} must be > 0, got {v!r}")
    return DecayConstants(
        alpha=math.exp(-dt / tau_mem),
        beta=math.exp(-dt / tau_syn),
        gamma=math.exp(-dt / tau_ref),
        dt=dt,
        tau_mem=tau_mem,
        tau_syn=tau_syn,
        tau_ref=tau_ref,
    )


@dataclass(frozen=True)
class SurrogateSpec:
    """Boxcar pseudo-derivative of the spike step: 1 on [-half_width, +half_width]."""

    kind: str = "boxcar"
    half_width: float = 0.5

    def __post_init__(self):
        if self.kind != "boxcar":
            raise ConfigurationError(f"unknown surrogate kind {self.kind!r}")
        if not (self.half_width > 0):
            raise ConfigurationError(f"half_width must be > 0, got {self.half_width!r}")


@dataclass
class LayerState:
    """Dynamical variables of one layer for a minibatch.

    P, Q have the layer's *input* shape [batch, *in_shape] (one trace per
    presynaptic input); R, U, S have the *output* shape [batch, *out_shape].
    ``pool_argmax`` and ``cols`` are per-step forward byproducts kept for the
    weight update (conv layers only); they are overwritten every step.
    """

    P: np.ndarray
    Q: np.ndarray
    R: np.ndarray
    U: np.ndarray
    S: np.ndarray
    pool_argmax: np.ndarray | None = field(default=None, repr=False)
    cols: np.ndarray | None = field(default=None, repr=False)

    @property
    def batch(self) -> int:
        return self.P.shape[0]


def zero_state(batch: int, in_shape, out_shape, dtype=np.float32) -> LayerState:
    """Fresh all-zero state (the per-sample sequence-start condition)."""
    in_shape = tuple(in_shape)
    out_shape = tuple(out_shape)
    return LayerState(
        P=np.zeros((batch, *in_shape), dtype=dtype),
        Q=np.zeros((batch, *in_shape), dtype=dtype),
        R=np.zeros((batch, *out_shape), dtype=dtype),
        U=np.zeros((batch, *out_shape), dtype=dtype),
        S=np.zeros((batch, *out_shape), dtype=dtype),
    )


def step_traces(state: LayerState, input_spikes: np.ndarray, k: DecayConstants) -> LayerState:
    """Advance P, Q, R by one timestep; U and S are carried over unchanged.

    R is driven by the layer's own previous output spikes (state.S).  The
    input may be binary spikes or non-negative event counts (input layer).
    """
    if input_spikes.shape != state.P.shape:
        raise ShapeMismatchError(
            f"input shape {input_spikes.shape} != trace shape {state.P.shape}"
        )
    P2, Q2 = backend.kernels.decay_pair(state.P, state.Q, input_spikes, k.alpha, k.beta)
    R2 = backend.kernels.decay_single(state.R, state.S, k.gamma)
    return LayerState(
        P=P2, Q=Q2, R=R2, U=state.U, S=state.S,
        pool_argmax=state.pool_argmax, cols=state.cols,
    )


def membrane(state: LayerState, W: np.ndarray, b: np.ndarray, rho: float) -> np.ndarray:
    """Dense membrane potential U = P @ W.T - rho*R + b (pure, batch rows)."""
    if W.ndim != 2 or state.P.ndim != 2:
        raise ShapeMismatchError("membrane() expects dense [batch, n] traces and a 2-D W")
    if W.shape[1] != state.P.shape[1] or W.shape[0] != state.R.shape[1]:
        raise ShapeMismatchError(
            f"W {W.shape} incompatible with P {state.P.shape} / R {state.R.shape}"
        )
    return state.P @ W.T - rho * state.R + b


def threshold(U: np.ndarray) -> np.ndarray:
    """Spike nonlinearity: elementwise step with step(0) == 1."""
    return backend.kernels.heaviside(U)


def surrogate_derivative(U: np.ndarray, spec: SurrogateSpec) -> np.ndarray:
    """Boxcar gate: 1 where |U| <= half_width (inclusive), else 0."""
    return backend.kernels.boxcar(U, spec.half_width)
