"""Recurrent cell steps, sequence folding and backpropagation through time.

Four cell families share one calling convention: a step maps (params, state,
input) to (new state, cache), where dense inputs are (input_dim, batch)
columns and convolutional inputs are (channels, length[, batch]) signals.
Caches hold the forward intermediates the backward pass needs; gradients are
accumulated across timesteps by walking the caches in reverse.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from .linalg import (
    ConfigError,
    ShapeError,
    _check_bank_shapes,
    concat_rows,
    matmul,
    pad_for_same_conv,
    sigmoid,
    tap_windows,
)

DENSE_KINDS = ("rnn", "lstm", "gru")
CELL_KINDS = DENSE_KINDS + ("convlstm",)

DEFAULT_KERNEL_LEN = 3


@dataclass
class RnnParams:
    """Plain tanh recurrence, kept as a baseline next to the gated cells."""

    W_xh: np.ndarray
    W_hh: np.ndarray
    W_hy: np.ndarray
    b_h: np.ndarray
    b_y: np.ndarray


@dataclass
class LstmParams:
    """Gate weights act on the stacked [h_prev; x] column."""

    W_f: np.ndarray
    W_i: np.ndarray
    W_c: np.ndarray
    W_o: np.ndarray
    b_f: np.ndarray
    b_i: np.ndarray
    b_c: np.ndarray
    b_o: np.ndarray


@dataclass
class GruParams:
    """Update/reset gates on [h_prev; x]; candidate mixes x with r * h_prev."""

    W_z: np.ndarray
    W_r: np.ndarray
    w_h: np.ndarray
    U_h: np.ndarray
    b_z: np.ndarray
    b_r: np.ndarray
    b_h: np.ndarray


@dataclass
class ConvLstmParams:
    """LSTM-style gates where each matmul is a same-length 1-D convolution.

    Kernels are (filters, state_channels + input_channels, taps); biases are
    per-filter columns. The candidate activation is sigmoid to match the
    update rule this engine reproduces; tanh is the conventional alternative.
    """

    K_f: np.ndarray
    K_i: np.ndarray
    K_o: np.ndarray
    K_g: np.ndarray
    b_f: np.ndarray
    b_i: np.ndarray
    b_o: np.ndarray
    b_g: np.ndarray
    g_activation: str = "sigmoid"


CellParams = RnnParams | LstmParams | GruParams | ConvLstmParams

_KIND_OF_TYPE = {RnnParams: "rnn", LstmParams: "lstm", GruParams: "gru", ConvLstmParams: "convlstm"}


@dataclass
class CellState:
    h: np.ndarray
    c: np.ndarray | None = None


@dataclass
class StepCache:
    """Forward intermediates for one consumed timestep."""

    x: np.ndarray
    h_prev: np.ndarray
    c_prev: np.ndarray | None
    vals: dict[str, np.ndarray] = field(default_factory=dict)


def kind_of(params: CellParams) -> str:
    return _KIND_OF_TYPE[type(params)]


def named_tensors(obj, prefix: str = "") -> dict[str, np.ndarray]:
    """Flatten a (possibly nested) params dataclass into name -> array."""
    out: dict[str, np.ndarray] = {}
    for f in dataclasses.fields(obj):
        v = getattr(obj, f.name)
        if isinstance(v, np.ndarray):
            out[prefix + f.name] = v
        elif dataclasses.is_dataclass(v):
            out.update(named_tensors(v, prefix + f.name + "."))
    return out


def zeros_like_params(params):
    """Same dataclass with every tensor zeroed; non-tensor fields copied."""
    kwargs = {}
    for f in dataclasses.fields(params):
        v = getattr(params, f.name)
        if isinstance(v, np.ndarray):
            kwargs[f.name] = np.zeros_like(v)
        elif dataclasses.is_dataclass(v):
            kwargs[f.name] = zeros_like_params(v)
        else:
            kwargs[f.name] = v
    return type(params)(**kwargs)


def hidden_dim(params: CellParams) -> int:
    if isinstance(params, RnnParams):
        return params.b_h.shape[0]
    if isinstance(params, GruParams):
        return params.b_z.shape[0]
    return params.b_f.shape[0]


def _glorot(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (rows + cols))
    return rng.uniform(-limit, limit, size=(rows, cols))


def _glorot_kernels(rng: np.random.Generator, filters: int, channels: int, taps: int) -> np.ndarray:
    limit = np.sqrt(6.0 / ((channels + filters) * taps))
    return rng.uniform(-limit, limit, size=(filters, channels, taps))


def init_params(
    kind: str,
    input_dim: int,
    hidden_dim: int,
    seed: int,
    output_dim: int = 1,
    kernel_len: int = DEFAULT_KERNEL_LEN,
    g_activation: str = "sigmoid",
) -> CellParams:
    """Glorot-uniform weights, zero biases, reproducible for a fixed seed.

    For convolutional cells input_dim counts input channels and hidden_dim
    counts filters.
    """
    if input_dim < 1 or hidden_dim < 1:
        raise ConfigError(f"dimensions must be >= 1, got input {input_dim}, hidden {hidden_dim}")
    rng = np.random.default_rng(seed)
    H, D = hidden_dim, input_dim
    zeros = lambda n: np.zeros((n, 1))

    if kind == "rnn":
        return RnnParams(
            W_xh=_glorot(rng, H, D),
            W_hh=_glorot(rng, H, H),
            W_hy=_glorot(rng, output_dim, H),
            b_h=zeros(H),
            b_y=zeros(output_dim),
        )
    if kind == "lstm":
        return LstmParams(
            W_f=_glorot(rng, H, H + D),
            W_i=_glorot(rng, H, H + D),
            W_c=_glorot(rng, H, H + D),
            W_o=_glorot(rng, H, H + D),
            b_f=zeros(H),
            b_i=zeros(H),
            b_c=zeros(H),
            b_o=zeros(H),
        )
    if kind == "gru":
        return GruParams(
            W_z=_glorot(rng, H, H + D),
            W_r=_glorot(rng, H, H + D),
            w_h=_glorot(rng, H, D),
            U_h=_glorot(rng, H, H),
            b_z=zeros(H),
            b_r=zeros(H),
            b_h=zeros(H),
        )
    if kind == "convlstm":
        if kernel_len % 2 == 0:
            raise ConfigError(f"kernel length must be odd, got {kernel_len}")
        if g_activation not in ("sigmoid", "tanh"):
            raise ConfigError(f"candidate activation must be sigmoid or tanh, got {g_activation!r}")
        channels = H + D
        return ConvLstmParams(
            K_f=_glorot_kernels(rng, H, channels, kernel_len),
            K_i=_glorot_kernels(rng, H, channels, kernel_len),
            K_o=_glorot_kernels(rng, H, channels, kernel_len),
            K_g=_glorot_kernels(rng, H, channels, kernel_len),
            b_f=zeros(H),
            b_i=zeros(H),
            b_o=zeros(H),
            b_g=zeros(H),
            g_activation=g_activation,
        )
    raise ConfigError(f"unknown cell kind {kind!r}")


def zero_state(kind: str, params: CellParams, x: np.ndarray) -> CellState:
    """All-zero state shaped to match one input of the sequence."""
    H = hidden_dim(params)
    if kind == "convlstm":
        shape = (H,) + x.shape[1:]
        return CellState(h=np.zeros(shape), c=np.zeros(shape))
    h = np.zeros((H, x.shape[1]))
    return CellState(h=h, c=np.zeros_like(h) if kind == "lstm" else None)


# --------------------------------------------------------------------------
# forward steps
# --------------------------------------------------------------------------

def rnn_step(p: RnnParams, state: CellState, x: np.ndarray) -> tuple[CellState, StepCache]:
    h = np.tanh(matmul(p.W_xh, x) + matmul(p.W_hh, state.h) + p.b_h)
    cache = StepCache(x=x, h_prev=state.h, c_prev=None, vals={"h": h})
    return CellState(h=h), cache


def lstm_step(p: LstmParams, state: CellState, x: np.ndarray) -> tuple[CellState, StepCache]:
    """Forget/input/output gates are sigmoid; the candidate memory is tanh;
    new memory is f * c_prev + i * candidate and h is o * tanh(memory)."""
    hx = concat_rows(state.h, x)
    f = sigmoid(matmul(p.W_f, hx) + p.b_f)
    i = sigmoid(matmul(p.W_i, hx) + p.b_i)
    cand = np.tanh(matmul(p.W_c, hx) + p.b_c)
    c = f * state.c + i * cand
    o = sigmoid(matmul(p.W_o, hx) + p.b_o)
    tanh_c = np.tanh(c)
    h = o * tanh_c
    cache = StepCache(
        x=x,
        h_prev=state.h,
        c_prev=state.c,
        vals={"hx": hx, "f": f, "i": i, "cand": cand, "o": o, "tanh_c": tanh_c, "h": h},
    )
    return CellState(h=h, c=c), cache


def gru_step(p: GruParams, state: CellState, x: np.ndarray) -> tuple[CellState, StepCache]:
    """Update gate z interpolates between the previous state and a tanh
    candidate built from x and the reset-gated previous state."""
    hx = concat_rows(state.h, x)
    z = sigmoid(matmul(p.W_z, hx) + p.b_z)
    r = sigmoid(matmul(p.W_r, hx) + p.b_r)
    rh = r * state.h
    hcand = np.tanh(matmul(p.w_h, x) + matmul(p.U_h, rh) + p.b_h)
    h = (1.0 - z) * state.h + z * hcand
    cache = StepCache(
        x=x,
        h_prev=state.h,
        c_prev=None,
        vals={"hx": hx, "z": z, "r": r, "rh": rh, "hcand": hcand, "h": h},
    )
    return CellState(h=h), cache


def convlstm_step(p: ConvLstmParams, state: CellState, y: np.ndarray) -> tuple[CellState, StepCache]:
    """LSTM update with convolutions over the channel-stacked [h_prev; y]."""
    single = y.ndim == 2
    y3 = y[:, :, None] if single else y
    h3 = state.h[:, :, None] if state.h.ndim == 2 else state.h
    c3 = state.c[:, :, None] if state.c.ndim == 2 else state.c
    if h3.shape[1] != y3.shape[1]:
        raise ShapeError(f"state length {h3.shape[1]} does not match input length {y3.shape[1]}")
    hx = np.concatenate([h3, y3], axis=0)
    _check_bank_shapes(hx, p.K_f)
    filters, channels, taps = p.K_f.shape
    length, batch = hx.shape[1], hx.shape[2]
    # One contiguous im2col per step, and the four gate banks stacked into a
    # single GEMM; both cached for the backward pass.
    windows = tap_windows(pad_for_same_conv(hx, taps), taps, length)
    col = np.ascontiguousarray(windows).reshape(channels * taps, length * batch)
    K_all = np.concatenate(
        [K.reshape(filters, channels * taps) for K in (p.K_f, p.K_i, p.K_o, p.K_g)], axis=0
    )
    b_all = np.concatenate([p.b_f, p.b_i, p.b_o, p.b_g], axis=0)
    a_all = (K_all @ col).reshape(4 * filters, length, batch)
    a_all += b_all[:, :, None]
    F = filters
    f = sigmoid(a_all[:F])
    i = sigmoid(a_all[F:2 * F])
    o = sigmoid(a_all[2 * F:3 * F])
    a_g = a_all[3 * F:]
    cand = sigmoid(a_g) if p.g_activation == "sigmoid" else np.tanh(a_g)
    c = f * c3 + i * cand
    tanh_c = np.tanh(c)
    h = o * tanh_c
    cache = StepCache(
        x=y3,
        h_prev=h3,
        c_prev=c3,
        vals={"col": col, "K_all": K_all, "f": f, "i": i, "cand": cand, "o": o,
              "tanh_c": tanh_c, "h": h},
    )
    if single:
        return CellState(h=h[:, :, 0], c=c[:, :, 0]), cache
    return CellState(h=h, c=c), cache


_STEP = {"rnn": rnn_step, "lstm": lstm_step, "gru": gru_step, "convlstm": convlstm_step}


def run_sequence(kind: str, params: CellParams, xs: list[np.ndarray]) -> tuple[CellState, list[StepCache]]:
    """Fold the step over xs from an all-zero state; one cache per timestep."""
    if kind not in _STEP:
        raise ConfigError(f"unknown cell kind {kind!r}")
    if not xs:
        raise ValueError("cannot run a cell over an empty sequence")
    shape0 = xs[0].shape
    if any(x.shape != shape0 for x in xs):
        raise ShapeError(f"sequence inputs must share one shape, got {[x.shape for x in xs]}")
    step = _STEP[kind]
    state = zero_state(kind, params, xs[0])
    caches = []
    for x in xs:
        state, cache = step(params, state, x)
        caches.append(cache)
    return state, caches


def run_bidirectional(
    params_fwd: CellParams, params_bwd: CellParams, xs: list[np.ndarray]
) -> np.ndarray:
    """Stack the forward-pass final h on the reversed-pass final h (2H rows)."""
    if type(params_fwd) is not type(params_bwd):
        raise ConfigError("forward and backward parameter kinds differ")
    if hidden_dim(params_fwd) != hidden_dim(params_bwd):
        raise ConfigError(
            f"hidden dims differ: forward {hidden_dim(params_fwd)}, backward {hidden_dim(params_bwd)}"
        )
    kind = kind_of(params_fwd)
    state_f, _ = run_sequence(kind, params_fwd, xs)
    state_b, _ = run_sequence(kind, params_bwd, list(reversed(xs)))
    return np.concatenate([state_f.h, state_b.h], axis=0)


# --------------------------------------------------------------------------
# backward passes (BPTT)
# --------------------------------------------------------------------------

def _rnn_backward(p, caches, grad_h):
    g = zeros_like_params(p)
    dh_carry = np.zeros_like(grad_h[-1])
    dxs: list[np.ndarray] = [None] * len(caches)  # type: ignore[list-item]
    for t in reversed(range(len(caches))):
        cc = caches[t]
        h = cc.vals["h"]
        da = (grad_h[t] + dh_carry) * (1.0 - h * h)
        g.W_xh += da @ cc.x.T
        g.W_hh += da @ cc.h_prev.T
        g.b_h += da.sum(axis=1, keepdims=True)
        dh_carry = p.W_hh.T @ da
        dxs[t] = p.W_xh.T @ da
    return g, dxs


def _lstm_backward(p, caches, grad_h):
    g = zeros_like_params(p)
    H = hidden_dim(p)
    dh_carry = np.zeros_like(grad_h[-1])
    dc_carry = np.zeros_like(grad_h[-1])
    dxs: list[np.ndarray] = [None] * len(caches)  # type: ignore[list-item]
    for t in reversed(range(len(caches))):
        v = caches[t].vals
        dh = grad_h[t] + dh_carry
        do = dh * v["tanh_c"]
        dc = dc_carry + dh * v["o"] * (1.0 - v["tanh_c"] ** 2)
        df = dc * caches[t].c_prev
        di = dc * v["cand"]
        dcand = dc * v["i"]
        dc_carry = dc * v["f"]
        da_f = df * v["f"] * (1.0 - v["f"])
        da_i = di * v["i"] * (1.0 - v["i"])
        da_c = dcand * (1.0 - v["cand"] ** 2)
        da_o = do * v["o"] * (1.0 - v["o"])
        hx = v["hx"]
        g.W_f += da_f @ hx.T
        g.W_i += da_i @ hx.T
        g.W_c += da_c @ hx.T
        g.W_o += da_o @ hx.T
        g.b_f += da_f.sum(axis=1, keepdims=True)
        g.b_i += da_i.sum(axis=1, keepdims=True)
        g.b_c += da_c.sum(axis=1, keepdims=True)
        g.b_o += da_o.sum(axis=1, keepdims=True)
        dhx = p.W_f.T @ da_f + p.W_i.T @ da_i + p.W_c.T @ da_c + p.W_o.T @ da_o
        dh_carry = dhx[:H]
        dxs[t] = dhx[H:]
    return g, dxs


def _gru_backward(p, caches, grad_h):
    g = zeros_like_params(p)
    H = hidden_dim(p)
    dh_carry = np.zeros_like(grad_h[-1])
    dxs: list[np.ndarray] = [None] * len(caches)  # type: ignore[list-item]
    for t in reversed(range(len(caches))):
        cc = caches[t]
        v = cc.vals
        dh = grad_h[t] + dh_carry
        dz = dh * (v["hcand"] - cc.h_prev)
        dhcand = dh * v["z"]
        dh_prev = dh * (1.0 - v["z"])
        da_h = dhcand * (1.0 - v["hcand"] ** 2)
        g.w_h += da_h @ cc.x.T
        g.U_h += da_h @ v["rh"].T
        g.b_h += da_h.sum(axis=1, keepdims=True)
        drh = p.U_h.T @ da_h
        dr = drh * cc.h_prev
        dh_prev = dh_prev + drh * v["r"]
        dx = p.w_h.T @ da_h
        da_z = dz * v["z"] * (1.0 - v["z"])
        da_r = dr * v["r"] * (1.0 - v["r"])
        g.W_z += da_z @ v["hx"].T
        g.W_r += da_r @ v["hx"].T
        g.b_z += da_z.sum(axis=1, keepdims=True)
        g.b_r += da_r.sum(axis=1, keepdims=True)
        dhx = p.W_z.T @ da_z + p.W_r.T @ da_r
        dh_carry = dh_prev + dhx[:H]
        dxs[t] = dx + dhx[H:]
    return g, dxs


def _convlstm_backward(p, caches, grad_h):
    g = zeros_like_params(p)
    F = hidden_dim(p)
    filters, channels, taps = p.K_f.shape
    pad = taps // 2
    dh_carry = np.zeros_like(grad_h[-1])
    dc_carry = np.zeros_like(grad_h[-1])
    dxs: list[np.ndarray] = [None] * len(caches)  # type: ignore[list-item]
    for t in reversed(range(len(caches))):
        v = caches[t].vals
        length, batch = v["h"].shape[1], v["h"].shape[2]
        dh = grad_h[t] + dh_carry
        do = dh * v["tanh_c"]
        dc = dc_carry + dh * v["o"] * (1.0 - v["tanh_c"] ** 2)
        df = dc * caches[t].c_prev
        di = dc * v["cand"]
        dcand = dc * v["i"]
        dc_carry = dc * v["f"]
        da_f = df * v["f"] * (1.0 - v["f"])
        da_i = di * v["i"] * (1.0 - v["i"])
        da_o = do * v["o"] * (1.0 - v["o"])
        if p.g_activation == "sigmoid":
            da_g = dcand * v["cand"] * (1.0 - v["cand"])
        else:
            da_g = dcand * (1.0 - v["cand"] ** 2)
        col = v["col"]
        da_all = np.concatenate([da_f, da_i, da_o, da_g], axis=0).reshape(
            4 * filters, length * batch
        )
        dK_all = da_all @ col.T
        g.K_f += dK_all[:F].reshape(filters, channels, taps)
        g.K_i += dK_all[F:2 * F].reshape(filters, channels, taps)
        g.K_o += dK_all[2 * F:3 * F].reshape(filters, channels, taps)
        g.K_g += dK_all[3 * F:].reshape(filters, channels, taps)
        g.b_f += da_f.sum(axis=(1, 2)).reshape(F, 1)
        g.b_i += da_i.sum(axis=(1, 2)).reshape(F, 1)
        g.b_o += da_o.sum(axis=(1, 2)).reshape(F, 1)
        g.b_g += da_g.sum(axis=(1, 2)).reshape(F, 1)
        d_col = v["K_all"].T @ da_all
        # col2im: scatter tap windows back onto the padded signal, then unpad.
        d_win = d_col.reshape(channels, taps, length, batch)
        d_padded = np.zeros((channels, length + taps - 1, batch))
        for k in range(taps):
            d_padded[:, k:k + length, :] += d_win[:, k]
        dhx = d_padded[:, pad:pad + length, :]
        dh_carry = dhx[:F]
        dxs[t] = dhx[F:]
    return g, dxs


_BACKWARD = {
    "rnn": _rnn_backward,
    "lstm": _lstm_backward,
    "gru": _gru_backward,
    "convlstm": _convlstm_backward,
}


def _check_caches(kind: str, params: CellParams, caches: list[StepCache]) -> None:
    if kind_of(params) != kind:
        raise RuntimeError(f"params are for {kind_of(params)!r}, backward asked for {kind!r}")
    if not caches:
        raise ValueError("no caches: nothing was run forward")
    if caches[0].h_prev.shape[0] != hidden_dim(params):
        raise RuntimeError(
            f"cache hidden dim {caches[0].h_prev.shape[0]} does not match params "
            f"hidden dim {hidden_dim(params)}"
        )


def backward_sequence_outputs(
    kind: str, params: CellParams, caches: list[StepCache], grad_h_seq: list[np.ndarray]
) -> tuple[CellParams, list[np.ndarray]]:
    """BPTT with a loss gradient on every timestep's hidden output.

    Returns gradients shaped like the params plus per-timestep input grads.
    """
    _check_caches(kind, params, caches)
    if len(grad_h_seq) != len(caches):
        raise RuntimeError(f"{len(grad_h_seq)} output grads for {len(caches)} cached steps")
    single = kind == "convlstm" and grad_h_seq[-1].ndim == 2
    if single:
        grad_h_seq = [gr[:, :, None] for gr in grad_h_seq]
    grads, dxs = _BACKWARD[kind](params, caches, grad_h_seq)
    if single:
        dxs = [dx[:, :, 0] for dx in dxs]
    return grads, dxs


def backward_sequence(
    kind: str, params: CellParams, caches: list[StepCache], grad_out: np.ndarray
) -> tuple[CellParams, list[np.ndarray]]:
    """BPTT when the loss depends on the final hidden state only."""
    grad_h_seq = [np.zeros_like(grad_out) for _ in caches]
    grad_h_seq[-1] = grad_out
    return backward_sequence_outputs(kind, params, caches, grad_h_seq)


# --------------------------------------------------------------------------
# bidirectional plumbing used by stacked models
# --------------------------------------------------------------------------

def run_bidirectional_outputs(
    params_fwd: CellParams, params_bwd: CellParams, xs: list[np.ndarray]
) -> tuple[list[np.ndarray], list[StepCache], list[StepCache]]:
    """Aligned per-timestep outputs [fwd h_t; bwd h_t] plus both cache lists.

    The backward direction consumes the reversed sequence; its outputs are
    re-aligned so row blocks at timestep t both describe x_t's position.
    """
    kind = kind_of(params_fwd)
    _, caches_f = run_sequence(kind, params_fwd, xs)
    _, caches_b = run_sequence(kind, params_bwd, list(reversed(xs)))
    T = len(xs)
    outs = [
        np.concatenate([caches_f[t].vals["h"], caches_b[T - 1 - t].vals["h"]], axis=0)
        for t in range(T)
    ]
    return outs, caches_f, caches_b


def backward_bidirectional_outputs(
    params_fwd: CellParams,
    params_bwd: CellParams,
    caches_f: list[StepCache],
    caches_b: list[StepCache],
    grad_outs: list[np.ndarray],
) -> tuple[CellParams, CellParams, list[np.ndarray]]:
    """Backward through aligned per-timestep bidirectional outputs."""
    kind = kind_of(params_fwd)
    T = len(grad_outs)
    H = hidden_dim(params_fwd)
    grads_f = [gr[:H] for gr in grad_outs]
    grads_b = [grad_outs[T - 1 - j][H:] for j in range(T)]
    gpf, dx_f = backward_sequence_outputs(kind, params_fwd, caches_f, grads_f)
    gpb, dx_b = backward_sequence_outputs(kind, params_bwd, caches_b, grads_b)
    dxs = [dx_f[t] + dx_b[T - 1 - t] for t in range(T)]
    return gpf, gpb, dxs


def backward_bidirectional_final(
    params_fwd: CellParams,
    params_bwd: CellParams,
    caches_f: list[StepCache],
    caches_b: list[StepCache],
    grad_concat: np.ndarray,
) -> tuple[CellParams, CellParams, list[np.ndarray]]:
    """Backward when the loss sees only the stacked final states."""
    kind = kind_of(params_fwd)
    H = hidden_dim(params_fwd)
    T = len(caches_f)
    gpf, dx_f = backward_sequence(kind, params_fwd, caches_f, grad_concat[:H])
    gpb, dx_b = backward_sequence(kind, params_bwd, caches_b, grad_concat[H:])
    dxs = [dx_f[t] + dx_b[T - 1 - t] for t in range(T)]
    return gpf, gpb, dxs
