"""Independent brute-force checkers for the analytic shortcuts.

Three probes:

* :func:`fd_gradient_check` -- central finite differences of the frozen
  one-timestep loss against the closed-form update.  The FD side evaluates
  its own forward map (direct convolution loops, window max), sharing no
  code with the engine path it checks; the spike step is replaced by the
  piecewise-linear ramp sigma_pl(u) = clip(u + hw, 0, 2*hw), whose
  derivative is exactly the boxcar gate.
* :func:`trace_impulse_check` -- iterated single-spike trace response
  against the closed-form double exponential.
* :func:`memory_probe` -- peak allocation attributable to computing
  updates, across sequence lengths (must be flat: learning keeps no state
  that grows with time).
"""

import gc
import tracemalloc
from dataclasses import dataclass, field

import numpy as np

from . import backend, parallel
from .dynamics import SurrogateSpec, make_decay_constants, zero_state, step_traces
from .errors import ConfigurationError
from .learning import (
    AdaMaxState,
    LossSpec,
    RegularizerSpec,
    adamax_step,
    decolle_update,
    local_error,
    loss_value,
    regularizer_gradient,
    regularizer_value,
)
from .network import (
    FeedbackNoiseSpec,
    LayerParams,
    LayerSpec,
    NetworkTopology,
    conv_preactivation,
    init_params,
    make_feedback,
    network_forward,
    zero_states,
)


@dataclass
class OracleReport:
    """Outcome of one finite-difference gradient check."""

    name: str
    max_rel_error: float
    worst_coordinate: str
    n_checked: int
    n_excluded: int
    tolerance: float
    passed: bool
    n_nonzero: int = 0  # coordinates with a non-negligible gradient on either side

    @property
    def excluded_fraction(self) -> float:
        total = self.n_checked + self.n_excluded
        return self.n_excluded / total if total else 0.0

    def summary(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (
            f"{self.name}: {status} max_rel={self.max_rel_error:.3e} "
            f"(worst {self.worst_coordinate}, checked {self.n_checked}, "
            f"excluded {self.n_excluded})"
        )


def surrogate_ramp(u: np.ndarray, half_width: float) -> np.ndarray:
    """Piecewise-linear spike stand-in: clip(u + hw, 0, 2*hw)."""
    return np.clip(u + half_width, 0.0, 2.0 * half_width)


@dataclass
class _FrozenStep:
    """One frozen timestep: everything the map needs except W and b."""

    kind: str
    P: np.ndarray            # [1, ...in_shape] float64
    R: np.ndarray            # [1, ...out_shape] float64
    W: np.ndarray
    b: np.ndarray
    G: np.ndarray
    H: np.ndarray
    Y_hat: np.ndarray
    rho: float
    half_width: float
    loss: LossSpec
    reg: RegularizerSpec
    feedback: str            # "G" or "H"
    kernel: int = 0
    padding: int = 0
    pool: int = 0
    pre_pool_shape: tuple = ()
    out_shape: tuple = ()
    C_const: np.ndarray | None = None  # frozen (G-H) @ s0 term for H feedback

    @property
    def FB(self) -> np.ndarray:
        return self.H if self.feedback == "H" else self.G


def _direct_conv(P: np.ndarray, W: np.ndarray, pad: int) -> np.ndarray:
    """Plain-loop 2-D correlation (oracle-side conv, independent of im2col)."""
    c_in, Hh, Ww = P.shape
    c_out, _, kh, kw = W.shape
    Pp = np.pad(P, ((0, 0), (pad, pad), (pad, pad)))
    oh = Hh + 2 * pad - kh + 1
    ow = Ww + 2 * pad - kw + 1
    A = np.zeros((c_out, oh, ow), dtype=P.dtype)
    for i in range(kh):
        for j in range(kw):
            A += np.einsum("oc,cyx->oyx", W[:, :, i, j], Pp[:, i : i + oh, j : j + ow])
    return A


def _window_max(A: np.ndarray, k: int) -> np.ndarray:
    c, H, W = A.shape
    h2, w2 = H // k, W // k
    return A[:, : h2 * k, : w2 * k].reshape(c, h2, k, w2, k).max(axis=(2, 4))


def _oracle_loss(fs: _FrozenStep, W: np.ndarray, b: np.ndarray) -> float:
    """The frozen-step scalar loss as a pure function of (W, b)."""
    if fs.kind == "dense":
        U = W @ fs.P[0] - fs.rho * fs.R[0] + b
    else:
        A = _direct_conv(fs.P[0], W, fs.padding) + b[:, None, None]
        pooled = _window_max(A, fs.pool) if fs.pool else A
        U = pooled - fs.rho * fs.R[0]
    s = surrogate_ramp(U, fs.half_width).reshape(-1)
    Y = fs.FB @ s
    if fs.C_const is not None:
        Y = Y + fs.C_const
    total = loss_value(Y, fs.Y_hat, fs.loss)
    total += regularizer_value(U[None], fs.reg)
    return total


def _engine_gradients(fs: _FrozenStep) -> tuple[np.ndarray, np.ndarray, dict]:
    """Closed-form (dW, db) via the engine path, plus base-point context."""
    sur = SurrogateSpec(half_width=fs.half_width)
    if fs.kind == "dense":
        U = fs.P @ fs.W.T - fs.rho * fs.R + fs.b
        pool_argmax = None
        cols = None
        layer = None
        ctx_A = None
    else:
        layer = LayerParams(
            kind="conv", W=fs.W, b=fs.b, G=fs.G, H=fs.H, rho=fs.rho,
            decay=make_decay_constants(1.0), dropout_p=0.0,
            in_shape=fs.P.shape[1:], out_shape=fs.out_shape,
            pre_pool_shape=fs.pre_pool_shape,
            kernel=fs.kernel, padding=fs.padding, pool=fs.pool,
        )
        A_cl, cols = conv_preactivation(layer, fs.P)
        if fs.pool:
            pooled_cl, pool_argmax = backend.kernels.maxpool2d(A_cl, fs.pool)
        else:
            pooled_cl, pool_argmax = A_cl, None
        U = np.ascontiguousarray(pooled_cl.transpose(0, 3, 1, 2)) - fs.rho * fs.R
        ctx_A = np.ascontiguousarray(A_cl.transpose(0, 3, 1, 2))[0]
    s0 = surrogate_ramp(U, fs.half_width).reshape(1, -1)
    Y0 = s0 @ fs.G.T
    err = local_error(fs.FB, Y0, fs.Y_hat[None], fs.loss)
    extra = regularizer_gradient(U, fs.reg)
    dW, db = decolle_update(
        err, U, fs.P, sur, layer=layer, pool_argmax=pool_argmax, cols=cols, extra_dldu=extra
    )
    ctx = {"U": U[0], "s0": s0[0], "Y0": Y0[0], "A": ctx_A, "argmax": pool_argmax}
    return dW, db, ctx


def _build_frozen_step(
    kind: str,
    sizes,
    seed: int,
    loss: LossSpec,
    reg: RegularizerSpec,
    feedback: str,
    half_width: float,
    rho: float,
    u_mean: float,
    u_std: float,
) -> _FrozenStep:
    rng = np.random.default_rng(seed)
    if kind == "dense":
        n_in, n_out, n_r = sizes
        P = rng.uniform(0.0, 1.0, (1, n_in))
        R = rng.uniform(0.0, 1.0, (1, n_out))
        W = rng.standard_normal((n_out, n_in))
        b = rng.normal(0.0, 0.1, n_out)
        raw = (P @ W.T)[0]
        W *= u_std / max(raw.std(), 1e-9)
        U0 = (P @ W.T - rho * R)[0] + b
        b += u_mean - U0.mean()
        out_shape = (n_out,)
        n_flat = n_out
        extra = {}
    elif kind == "conv":
        c_in, hh, ww, c_out, kernel, pool, n_r = sizes
        pad = 0
        P = rng.uniform(0.0, 1.0, (1, c_in, hh, ww))
        oh = hh - kernel + 1
        ow = ww - kernel + 1
        pre_pool = (c_out, oh, ow)
        out_shape = (c_out, oh // pool, ow // pool) if pool else pre_pool
        R = rng.uniform(0.0, 1.0, (1, *out_shape))
        W = rng.standard_normal((c_out, c_in, kernel, kernel))
        b = rng.normal(0.0, 0.1, c_out)
        raw = _direct_conv(P[0], W, pad)
        W *= u_std / max(raw.std(), 1e-9)
        A = _direct_conv(P[0], W, pad) + b[:, None, None]
        pooled = _window_max(A, pool) if pool else A
        U0 = pooled - rho * R[0]
        b += u_mean - U0.mean()
        n_flat = int(np.prod(out_shape))
        extra = {
            "kernel": kernel, "padding": pad, "pool": pool,
            "pre_pool_shape": pre_pool,
        }
    else:
        raise ConfigurationError(f"unknown layer kind {kind!r}")

    G = rng.uniform(-1, 1, (n_r, n_flat)) / np.sqrt(n_flat)
    H = make_feedback(G, FeedbackNoiseSpec(), rng)
    Y_hat = rng.normal(0.0, 0.5, n_r)
    fs = _FrozenStep(
        kind=kind, P=P, R=R, W=W, b=b, G=G, H=H, Y_hat=Y_hat, rho=rho,
        half_width=half_width, loss=loss, reg=reg, feedback=feedback,
        out_shape=out_shape, **extra,
    )
    if feedback == "H":
        # freeze the (G - H) part of the readout at the base point so the FD
        # map's gradient flows through H alone
        if kind == "dense":
            U0b = (fs.P @ fs.W.T - rho * fs.R + fs.b)[0]
        else:
            A = _direct_conv(fs.P[0], fs.W, fs.padding) + fs.b[:, None, None]
            pooled = _window_max(A, fs.pool) if fs.pool else A
            U0b = pooled - rho * fs.R[0]
        s0 = surrogate_ramp(U0b, half_width).reshape(-1)
        fs.C_const = (fs.G - fs.H) @ s0
    return fs


def _coordinate_sensitivities(fs: _FrozenStep, ctx: dict, h: float):
    """Per-coordinate |dU_unit/dcoord| taps, for kink exclusion.

    Yields (label, array, index, unit_sens) where unit_sens maps each
    affected output unit (flattened) to the tap magnitude, plus a tie flag
    for pooled conv coordinates.
    """
    if fs.kind == "dense":
        n_out, n_in = fs.W.shape
        P = fs.P[0]
        for i in range(n_out):
            for j in range(n_in):
                sens = np.zeros(n_out)
                sens[i] = abs(P[j])
                yield (f"W[{i},{j}]", fs.W, (i, j), sens, False)
        for i in range(n_out):
            sens = np.zeros(n_out)
            sens[i] = 1.0
            yield (f"b[{i}]", fs.b, (i,), sens, False)
        return

    c_out, _, kh, kw = fs.W.shape
    Pp = np.pad(fs.P[0], ((0, 0), (fs.padding,) * 2, (fs.padding,) * 2))
    poh, pow_ = fs.pre_pool_shape[1:]
    A = ctx["A"]
    n_units = int(np.prod(fs.out_shape))
    if fs.pool:
        k = fs.pool
        h2, w2 = fs.out_shape[1:]
        # top-2 window stats per pooled unit, for tie exclusion
        v = A[:, : h2 * k, : w2 * k].reshape(c_out, h2, k, w2, k)
        v = v.transpose(0, 1, 3, 2, 4).reshape(c_out, h2, w2, k * k)
        order = np.argsort(-v, axis=3, kind="stable")
        top1 = np.take_along_axis(v, order[..., :1], 3)[..., 0]
        top2 = np.take_along_axis(v, order[..., 1:2], 3)[..., 0]
        gap = top1 - top2
        arg1, arg2 = order[..., 0], order[..., 1]

        def argmax_pos(c, y2, x2, idx):
            return (y2 * k + idx // k, x2 * k + idx % k)

    for co in range(c_out):
        for ci in range(fs.W.shape[1]):
            for i in range(kh):
                for j in range(kw):
                    sens = np.zeros(fs.out_shape)
                    tie = False
                    if fs.pool:
                        for y2 in range(fs.out_shape[1]):
                            for x2 in range(fs.out_shape[2]):
                                y1, x1 = argmax_pos(co, y2, x2, arg1[co, y2, x2])
                                t1 = Pp[ci, y1 + i, x1 + j]
                                sens[co, y2, x2] = abs(t1)
                                y2_, x2_ = argmax_pos(co, y2, x2, arg2[co, y2, x2])
                                t2 = Pp[ci, y2_ + i, x2_ + j]
                                if gap[co, y2, x2] <= 2 * h * abs(t1 - t2) + 1e-12:
                                    tie = True
                    else:
                        sens[co] = np.abs(
                            np.lib.stride_tricks.sliding_window_view(
                                Pp[ci], (poh, pow_)
                            )[i, j]
                        )
                    yield (f"W[{co},{ci},{i},{j}]", fs.W, (co, ci, i, j), sens.reshape(-1), tie)
    for co in range(c_out):
        sens = np.zeros(fs.out_shape)
        sens[co] = 1.0
        # a bias shift moves every window entry equally: no tie risk
        yield (f"b[{co}]", fs.b, (co,), sens.reshape(-1), False)


_FD_H = 1e-3


def _near_kink(fs: _FrozenStep, ctx: dict, sens: np.ndarray, h: float) -> bool:
    """True if the coordinate's FD interval may cross a non-smooth point."""
    U = ctx["U"].reshape(-1)
    radius = 2 * h * sens + 1e-12
    hw = fs.half_width
    if np.any(np.abs(U - hw) <= radius) or np.any(np.abs(U + hw) <= radius):
        return True
    if fs.reg.lambda1 and np.any(np.abs(U + fs.reg.u_margin) <= radius):
        return True
    if fs.reg.lambda2:
        mean_sens = sens.sum() / U.size
        if abs(fs.reg.rate_floor - U.mean()) <= 2 * h * mean_sens + 1e-12:
            return True
    if fs.loss.kind == "smooth_l1":
        gate = (np.abs(U) <= hw).astype(float)
        y_sens = np.abs(fs.FB) @ (gate * sens)
        resid = ctx["Y0"] - fs.Y_hat
        d = fs.loss.smooth_l1_delta
        if np.any(np.abs(np.abs(resid) - d) <= 2 * h * y_sens + 1e-12):
            return True
    return False


def fd_gradient_check(
    kind: str = "dense",
    sizes=(8, 4, 3),
    seed: int = 0,
    tolerance: float = 1e-4,
    h: float = _FD_H,
    loss: LossSpec = LossSpec("mse"),
    reg: RegularizerSpec = RegularizerSpec(),
    feedback: str = "G",
    half_width: float = 0.5,
    rho: float = 1.0,
    u_mean: float = 0.0,
    u_std: float = 0.8,
    name: str | None = None,
) -> OracleReport:
    """Compare the closed-form update with central finite differences.

    Builds one frozen timestep in float64, differentiates the surrogate
    loss numerically over every W and b entry, and reports the worst
    relative disagreement.  Coordinates whose FD interval straddles a
    boxcar edge, rectifier kink, loss-clip point, or a near-tied pool
    window are excluded (and counted; the check is vacuous if that
    fraction grows past a few percent).
    """
    fs = _build_frozen_step(kind, sizes, seed, loss, reg, feedback, half_width, rho, u_mean, u_std)
    dW, db, ctx = _engine_gradients(fs)
    analytic = {"W": dW, "b": db}

    max_rel = 0.0
    worst = "-"
    n_checked = 0
    n_excluded = 0
    n_nonzero = 0
    for label, arr, idx, sens, tie in _coordinate_sensitivities(fs, ctx, h):
        if tie or _near_kink(fs, ctx, sens, h):
            n_excluded += 1
            continue
        orig = arr[idx]
        arr[idx] = orig + h
        f_plus = _oracle_loss(fs, fs.W, fs.b)
        arr[idx] = orig - h
        f_minus = _oracle_loss(fs, fs.W, fs.b)
        arr[idx] = orig
        fd = (f_plus - f_minus) / (2 * h)
        an = analytic[label[0]][idx]
        denom = max(abs(an), abs(fd))
        if denom < 1e-8:
            rel = 0.0
        else:
            rel = abs(an - fd) / denom
            n_nonzero += 1
        n_checked += 1
        if rel > max_rel:
            max_rel, worst = rel, label
    return OracleReport(
        name=name or f"{kind}:{loss.kind}:{feedback}"
        f"{':reg' if (reg.lambda1 or reg.lambda2) else ''}",
        max_rel_error=max_rel,
        worst_coordinate=worst,
        n_checked=n_checked,
        n_excluded=n_excluded,
        tolerance=tolerance,
        passed=max_rel <= tolerance and n_nonzero > 0,
        n_nonzero=n_nonzero,
    )


def standard_gradient_battery(tolerance: float = 1e-4) -> list[OracleReport]:
    """The gradient-oracle configurations covering every analytic path:
    dense/conv, both losses, regularizers on/off, exact and noisy feedback,
    pooled and unpooled conv routing."""
    mse = LossSpec("mse")
    sl1 = LossSpec("smooth_l1", smooth_l1_delta=0.5)
    reg_on = RegularizerSpec(lambda1=0.7, lambda2=0.9)
    reg_off = RegularizerSpec()
    conv_sizes = (2, 8, 8, 4, 3, 2, 3)      # c_in,h,w,c_out,kernel,pool,n_readout
    conv_nopool = (2, 8, 8, 4, 3, 0, 3)
    cases = [
        dict(kind="dense", sizes=(8, 4, 3), seed=11, loss=mse, name="dense:mse:G"),
        dict(kind="dense", sizes=(12, 6, 4), seed=12, loss=sl1, name="dense:smooth_l1:G"),
        dict(kind="dense", sizes=(8, 4, 3), seed=13, loss=mse, reg=reg_on,
             u_mean=-0.05, name="dense:mse:G:reg"),
        dict(kind="dense", sizes=(10, 8, 3), seed=14, loss=mse, feedback="H",
             u_std=0.6, name="dense:mse:H"),
        dict(kind="conv", sizes=conv_sizes, seed=15, loss=mse, name="conv:pool:mse:G"),
        dict(kind="conv", sizes=conv_nopool, seed=16, loss=mse, u_std=0.9,
             name="conv:nopool:mse:G"),
        dict(kind="conv", sizes=conv_sizes, seed=17, loss=sl1, reg=reg_on,
             feedback="H", u_mean=-0.05, name="conv:pool:smooth_l1:H:reg"),
    ]
    return [fd_gradient_check(tolerance=tolerance, **c) for c in cases]


def closed_form_impulse(alpha: float, beta: float, n: int) -> float:
    """Membrane-trace value n steps after a single input spike at step 0.

    Derived by solving the linear recurrences Q' = bQ + (1-b)s,
    P' = aP + (1-a)Q with P used before the Q in the same step:
    P[n] = (1-a)(1-b)(b^n - a^n)/(b - a); the a == b limit is
    (1-a)^2 * n * a^(n-1).
    """
    if n <= 0:
        return 0.0
    if alpha == beta:
        return (1 - alpha) ** 2 * n * alpha ** (n - 1)
    return (1 - alpha) * (1 - beta) * (beta**n - alpha**n) / (beta - alpha)


@dataclass
class ImpulseReport:
    alpha: float
    beta: float
    T: int
    max_abs_error: float
    tolerance: float
    passed: bool

    def summary(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (
            f"impulse a={self.alpha:.6g} b={self.beta:.6g}: {status} "
            f"max_abs={self.max_abs_error:.3e}"
        )


def trace_impulse_check(alpha: float, beta: float, T: int = 200,
                        tolerance: float = 1e-10) -> ImpulseReport:
    """Iterate the trace step in float64 and compare with the closed form."""
    k = make_decay_constants(1.0)
    k = type(k)(alpha=alpha, beta=beta, gamma=k.gamma, dt=1.0,
                tau_mem=k.tau_mem, tau_syn=k.tau_syn, tau_ref=k.tau_ref)
    state = zero_state(1, (1,), (1,), dtype=np.float64)
    spike = np.ones((1, 1), dtype=np.float64)
    silent = np.zeros((1, 1), dtype=np.float64)
    max_err = 0.0
    for n in range(T):
        state = step_traces(state, spike if n == 0 else silent, k)
        expected = closed_form_impulse(alpha, beta, n)
        max_err = max(max_err, abs(float(state.P[0, 0]) - expected))
    return ImpulseReport(alpha=alpha, beta=beta, T=T, max_abs_error=max_err,
                         tolerance=tolerance, passed=max_err <= tolerance)


def _probe_topology(n_in: int = 32, n_hidden: int = 48, n_readout: int = 4) -> NetworkTopology:
    return NetworkTopology(
        input_shape=(n_in,),
        layers=(
            LayerSpec(kind="dense", units=n_hidden, n_readout=n_readout),
            LayerSpec(kind="dense", units=n_hidden, n_readout=n_readout),
        ),
    )


def memory_probe(
    topology: NetworkTopology | None = None,
    T_list=(100, 1000, 10000),
    batch: int = 2,
    seed: int = 0,
) -> dict:
    """Peak per-step allocation attributable to the update computation.

    Runs the full train step for each sequence length and records the
    maximum bytes allocated inside the update section of any step, plus the
    growth of retained allocations across the whole run.  Learning keeps no
    per-timestep history, so both must be flat in T.
    """
    topology = topology or _probe_topology()
    params = init_params(topology, seed=seed)
    sur = SurrogateSpec()
    loss = LossSpec("mse")
    rng = np.random.default_rng(seed)
    opt = [
        (AdaMaxState.for_param(p.W, lr=1e-4), AdaMaxState.for_param(p.b, lr=1e-4))
        for p in params
    ]
    targets = rng.normal(size=(batch, params[0].G.shape[0])).astype(np.float32)

    def run(T: int, measure: bool) -> tuple[int, int]:
        states = zero_states(params, batch)
        x_rng = np.random.default_rng(seed + 1)
        peak_update = 0
        if measure:
            gc.collect()
            tracemalloc.start(1)
            base = tracemalloc.get_traced_memory()[0]
        for _ in range(T):
            x = (x_rng.random((batch, topology.input_shape[0])) < 0.1).astype(np.float32)
            out = network_forward(params, states, x)
            states = out.states
            if measure:
                before = tracemalloc.get_traced_memory()[0]
                tracemalloc.reset_peak()
            for li, p in enumerate(params):
                st = states[li]
                err = local_error(p.G, out.readouts[li], targets, loss)
                dW, db = decolle_update(err, st.U, st.P, sur, layer=p)
                adamax_step(opt[li][0], dW, p.W)
                adamax_step(opt[li][1], db, p.b)
            if measure:
                peak_update = max(peak_update, tracemalloc.get_traced_memory()[1] - before)
        if measure:
            growth = tracemalloc.get_traced_memory()[0] - base
            tracemalloc.stop()
            return peak_update, growth
        return 0, 0

    run(30, measure=False)  # warm caches and lazy buffers
    peaks, growths = {}, {}
    for T in T_list:
        peak, growth = run(T, measure=True)
        peaks[T] = peak
        growths[T] = growth
    return {"peak_update_bytes": peaks, "retained_growth_bytes": growths}
