"""Composable spiking layer stack with fixed random local readouts.

Dense and 2-D convolutional layers.  Each layer carries:

* trainable weights W and biases b,
* a fixed random readout matrix G mapping flattened output spikes to a
  small readout vector (the per-layer auxiliary output),
* a fixed feedback matrix H with the same signs as G but noisy magnitudes,
  used instead of G.T when sign-concordant feedback is enabled.

Conv layers compute the membrane potential on the pooled pre-activation
(conv -> max-pool -> spike); dropout lives on the readout branch only and
is re-drawn every timestep.
"""

import json
from dataclasses import dataclass, field

import numpy as np

from . import backend, parallel
from .dynamics import DecayConstants, LayerState, make_decay_constants, step_traces, threshold, zero_state
from .errors import ConfigurationError, ShapeMismatchError


@dataclass(frozen=True)
class FeedbackNoiseSpec:
    """Multiplicative noise on the feedback matrix: H = G * max(w, 0), w ~ N(mean, std)."""

    mean: float = 1.0
    std: float = 0.5
    clip_at_zero: bool = True
    seed: int | None = None

    def __post_init__(self):
        if self.std < 0:
            raise ConfigurationError(f"feedback noise std must be >= 0, got {self.std}")


@dataclass(frozen=True)
class LayerSpec:
    """Declarative description of one layer.

    kind="dense": ``units`` output neurons.
    kind="conv": ``channels`` output maps, square ``kernel``, ``padding``,
    ``stride``, optional non-overlapping ``pool`` (kernel == stride).
    Every layer has one local readout of size ``n_readout`` with dropout
    probability ``dropout_p`` on its input branch.
    """

    kind: str
    units: int = 0
    channels: int = 0
    kernel: int = 0
    padding: int = 0
    stride: int = 1
    pool: int = 0
    n_readout: int = 1
    dropout_p: float = 0.0

    def __post_init__(self):
        if self.kind not in ("dense", "conv"):
            raise ConfigurationError(f"unknown layer kind {self.kind!r}")
        if self.kind == "dense" and self.units <= 0:
            raise ConfigurationError("dense layer needs units > 0")
        if self.kind == "conv" and (self.channels <= 0 or self.kernel <= 0):
            raise ConfigurationError("conv layer needs channels > 0 and kernel > 0")
        if not (0 <= self.dropout_p < 1):
            raise ConfigurationError(f"dropout_p must be in [0, 1), got {self.dropout_p}")
        if self.n_readout <= 0:
            raise ConfigurationError("n_readout must be >= 1")


@dataclass(frozen=True)
class NetworkTopology:
    """Ordered layer specs plus the input shape ((n,) or (c, h, w))."""

    input_shape: tuple
    layers: tuple

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(self.input_shape))
        object.__setattr__(self, "layers", tuple(self.layers))
        self.shapes()  # validates composition

    def shapes(self) -> list[tuple]:
        """Output shape of each layer (post-pool for conv)."""
        shape = self.input_shape
        out = []
        for i, spec in enumerate(self.layers):
            if spec.kind == "dense":
                if len(shape) != 1:
                    shape = (int(np.prod(shape)),)
                shape = (spec.units,)
            else:
                if len(shape) != 3:
                    raise ConfigurationError(
                        f"layer {i}: conv requires a [c,h,w] input, got {shape}"
                    )
                c, h, w = shape
                oh = (h + 2 * spec.padding - spec.kernel) // spec.stride + 1
                ow = (w + 2 * spec.padding - spec.kernel) // spec.stride + 1
                if oh <= 0 or ow <= 0:
                    raise ConfigurationError(f"layer {i}: kernel {spec.kernel} too large for {shape}")
                if spec.pool:
                    oh, ow = oh // spec.pool, ow // spec.pool
                    if oh <= 0 or ow <= 0:
                        raise ConfigurationError(f"layer {i}: pool {spec.pool} too large")
                shape = (spec.channels, oh, ow)
            out.append(shape)
        return out

    def signature(self) -> str:
        """Stable string identity, used by checkpoints to refuse mismatches."""
        return json.dumps(
            {
                "input": list(self.input_shape),
                "layers": [
                    [s.kind, s.units, s.channels, s.kernel, s.padding, s.stride, s.pool, s.n_readout]
                    for s in self.layers
                ],
            },
            separators=(",", ":"),
        )


@dataclass
class LayerParams:
    """Trainable and fixed parameters of one layer.

    W: dense [n_out, n_in] or conv [c_out, c_in, kh, kw].
    G, H: [n_readout, n_flat_out]; fixed after construction, sign(H) in
    {0, sign(G)} elementwise.
    """

    kind: str
    W: np.ndarray
    b: np.ndarray
    G: np.ndarray
    H: np.ndarray
    rho: float
    decay: DecayConstants
    dropout_p: float
    in_shape: tuple
    out_shape: tuple          # post-pool output (spike) shape
    pre_pool_shape: tuple     # conv output shape before pooling (== out_shape when no pool)
    kernel: int = 0
    padding: int = 0
    stride: int = 1
    pool: int = 0

    @property
    def n_flat_out(self) -> int:
        return int(np.prod(self.out_shape))


def _uniform(rng, bound, shape, dtype):
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def make_feedback(G: np.ndarray, noise: FeedbackNoiseSpec, rng) -> np.ndarray:
    """Sign-concordant feedback: same signs as G, magnitudes scaled by
    clipped Gaussian noise (entries with negative noise become exactly 0)."""
    w = rng.normal(noise.mean, noise.std, size=G.shape)
    if noise.clip_at_zero:
        w = np.maximum(w, 0.0)
    return (G * w.astype(G.dtype)).astype(G.dtype)


def init_params(
    topology: NetworkTopology,
    seed: int,
    *,
    decay: DecayConstants | None = None,
    rho: float = 1.0,
    noise: FeedbackNoiseSpec = FeedbackNoiseSpec(),
    dtype=np.float32,
) -> list[LayerParams]:
    """Initialize all layer parameters deterministically from ``seed``.

    W ~ U(+-1/sqrt(fan_in)), b = 0, G ~ U(+-1/sqrt(n_flat_out)),
    H = G * clipped noise (see :func:`make_feedback`).
    """
    if decay is None:
        decay = make_decay_constants(1.0)
    rng = np.random.default_rng(seed)
    noise_rng = rng if noise.seed is None else np.random.default_rng(noise.seed)

    params: list[LayerParams] = []
    in_shape = topology.input_shape
    for spec in topology.layers:
        if spec.kind == "dense":
            if len(in_shape) != 1:
                in_shape = (int(np.prod(in_shape)),)
            n_in, n_out = in_shape[0], spec.units
            W = _uniform(rng, 1.0 / np.sqrt(n_in), (n_out, n_in), dtype)
            out_shape = (n_out,)
            pre_pool = out_shape
            kernel = padding = pool = 0
            stride = 1
        else:
            c_in, h, w = in_shape
            fan_in = c_in * spec.kernel * spec.kernel
            W = _uniform(
                rng, 1.0 / np.sqrt(fan_in),
                (spec.channels, c_in, spec.kernel, spec.kernel), dtype,
            )
            oh = (h + 2 * spec.padding - spec.kernel) // spec.stride + 1
            ow = (w + 2 * spec.padding - spec.kernel) // spec.stride + 1
            pre_pool = (spec.channels, oh, ow)
            if spec.pool:
                out_shape = (spec.channels, oh // spec.pool, ow // spec.pool)
            else:
                out_shape = pre_pool
            n_out = spec.channels
            kernel, padding, stride, pool = spec.kernel, spec.padding, spec.stride, spec.pool

        n_flat = int(np.prod(out_shape))
        G = _uniform(rng, 1.0 / np.sqrt(n_flat), (spec.n_readout, n_flat), dtype)
        H = make_feedback(G, noise, noise_rng)
        params.append(
            LayerParams(
                kind=spec.kind,
                W=W,
                b=np.zeros(n_out, dtype=dtype),
                G=G,
                H=H,
                rho=rho,
                decay=decay,
                dropout_p=spec.dropout_p,
                in_shape=tuple(in_shape),
                out_shape=tuple(out_shape),
                pre_pool_shape=tuple(pre_pool),
                kernel=kernel,
                padding=padding,
                stride=stride,
                pool=pool,
            )
        )
        in_shape = out_shape
    return params


def zero_states(params: list[LayerParams], batch: int, dtype=np.float32) -> list[LayerState]:
    return [zero_state(batch, p.in_shape, p.out_shape, dtype) for p in params]


def conv_preactivation(
    params: LayerParams, P: np.ndarray, cols_buf: np.ndarray | None = None
) -> tuple[np.ndarray, np.ndarray]:
    """conv(P, W) + b on the input-trace map.

    Returns (pre-activation, channels-last [B, oh, ow, c_out]; im2col
    columns [B, oh*ow, kh*kw*c_in]) -- the columns are reused by the weight
    update in the same timestep, and ``cols_buf`` (typically last step's
    columns) is recycled as the destination buffer.
    """
    B = P.shape[0]
    k, pad, stride = params.kernel, params.padding, params.stride
    c_out, oh, ow = params.pre_pool_shape
    n = oh * ow
    shape = (B, n, k * k * params.in_shape[0])
    if cols_buf is None or cols_buf.shape != shape or cols_buf.dtype != P.dtype:
        cols = np.empty(shape, dtype=P.dtype)
    else:
        cols = cols_buf
    parallel.batched(
        lambda lo, hi: backend.kernels.im2col(P[lo:hi], k, k, pad, stride, out=cols[lo:hi]), B
    )
    # patch columns are (i, j, c)-ordered, so pair them with W as [o, kh, kw, c]
    Wt = np.ascontiguousarray(params.W.transpose(0, 2, 3, 1)).reshape(params.W.shape[0], -1)
    At = parallel.matmul(cols.reshape(B * n, -1), Wt.T)  # flat over (batch, positions)
    At += params.b
    return At.reshape(B, oh, ow, c_out), cols


def layer_forward(
    params: LayerParams,
    state: LayerState,
    input_spikes: np.ndarray,
    k: DecayConstants | None = None,
) -> tuple[LayerState, np.ndarray]:
    """One timestep of one layer: step traces, then compute U and spikes.

    After the call, ``state.U`` and ``state.P`` are the pair the learning
    rule consumes for this timestep (plus ``pool_argmax``/``cols`` on conv
    layers for max-pool routing).
    """
    k = k or params.decay
    state = step_traces(state, input_spikes, k)
    if params.kind == "dense":
        U = parallel.matmul(state.P, params.W.T)
        U -= params.rho * state.R
        U += params.b
        state.cols = None
        state.pool_argmax = None
    else:
        A, cols = conv_preactivation(params, state.P, cols_buf=state.cols)  # channels-last
        if params.pool:
            pooled, arg = backend.kernels.maxpool2d(A, params.pool)
            state.pool_argmax = arg
        else:
            pooled = A
            state.pool_argmax = None
        state.cols = cols
        U = np.ascontiguousarray(pooled.transpose(0, 3, 1, 2)) - params.rho * state.R
    S = threshold(U)
    state.U = U
    state.S = S
    return state, S


def make_dropout_mask(shape, p: float, rng) -> np.ndarray:
    """I.i.d. Bernoulli(1-p) binary mask (float32), fresh per call."""
    if not (0 <= p < 1):
        raise ConfigurationError(f"dropout p must be in [0, 1), got {p}")
    if p == 0:
        return np.ones(shape, dtype=np.float32)
    return (rng.random(size=shape) >= p).astype(np.float32)


def local_readout(params: LayerParams, spikes: np.ndarray, dropout_mask: np.ndarray) -> np.ndarray:
    """Y = G @ (mask * flat_spikes) / (1 - p), inverted-dropout scaling.

    Accepts [batch, *out_shape] (or flat [batch, n_flat]) spikes; the mask
    must match the flattened shape.
    """
    B = spikes.shape[0]
    flat = spikes.reshape(B, -1)
    mask = dropout_mask.reshape(B, -1)
    if mask.shape != flat.shape:
        raise ShapeMismatchError(f"mask shape {dropout_mask.shape} != spikes {spikes.shape}")
    kept = flat * mask
    if params.dropout_p:
        kept = kept / (1.0 - params.dropout_p)
    return kept @ params.G.T


@dataclass
class ForwardOutput:
    """Result of one network timestep."""

    states: list
    readouts: list      # per layer, [batch, n_readout]
    spikes: list        # per layer, [batch, *out_shape]
    masks: list         # per layer dropout masks (flattened), for the update path


def network_forward(
    params: list[LayerParams],
    states: list[LayerState],
    input_spikes: np.ndarray,
    rng=None,
) -> ForwardOutput:
    """Run all layers for one timestep, feeding spikes forward.

    Local readouts are computed per layer from that layer's spikes only and
    never feed the next layer.  Dropout masks are drawn fresh per timestep
    (pass the same seeded ``rng`` stream for reproducibility); ``rng=None``
    disables dropout (all-ones masks).
    """
    if len(params) != len(states):
        raise ShapeMismatchError(f"{len(params)} layers but {len(states)} states")
    x = input_spikes
    B = x.shape[0]
    new_states, readouts, spikes, masks = [], [], [], []
    for p, st in zip(params, states):
        if p.kind == "dense" and x.ndim > 2:
            x = x.reshape(B, -1)
        st, S = layer_forward(p, st, x)
        if rng is None or p.dropout_p == 0.0:
            mask = np.ones((B, p.n_flat_out), dtype=np.float32)
        else:
            mask = make_dropout_mask((B, p.n_flat_out), p.dropout_p, rng)
        Y = local_readout(p, S, mask)
        new_states.append(st)
        readouts.append(Y)
        spikes.append(S)
        masks.append(mask)
        x = S
    return ForwardOutput(states=new_states, readouts=readouts, spikes=spikes, masks=masks)
