"""Stacked many-to-one forecasting models and their training loop.

Every model is two recurrent layers plus a one-unit linear head. Training is
mini-batch Adam on the Huber loss, fully deterministic for fixed init and
shuffle seeds. Checkpoints are a small versioned binary format.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np
from threadpoolctl import threadpool_limits

from . import cells
from .linalg import Activation, ConfigError, activation_grad, apply_activation

MODEL_KINDS = ("rnn", "lstm", "gru", "bilstm", "convlstm")
PAPER_GRID_KINDS = ("lstm", "bilstm", "gru", "convlstm")
PAPER_WINDOW_SIZES = (3, 4, 5, 6, 7)

CHECKPOINT_MAGIC = b"RCFC1"
CHECKPOINT_VERSION = 1


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""


class CheckpointFormatError(ValueError):
    """Checkpoint bytes are malformed or incompatible."""


@dataclass(frozen=True)
class ModelSpec:
    cell_kind: str
    window_size: int
    layer_units: tuple[int, int] = (36, 36)
    filters: int = 64
    hidden_activation: Activation = Activation.RELU
    output_activation: Activation = Activation.LINEAR
    convlstm_g_activation: str = "sigmoid"

    def __post_init__(self):
        if self.cell_kind not in MODEL_KINDS:
            raise ConfigError(f"unknown cell kind {self.cell_kind!r}")
        if self.window_size < 1:
            raise ConfigError(f"window size must be >= 1, got {self.window_size}")
        units = tuple(int(u) for u in self.layer_units)
        if len(units) != 2 or any(u < 1 for u in units):
            raise ConfigError(f"expected two positive layer sizes, got {self.layer_units!r}")
        object.__setattr__(self, "layer_units", units)
        if self.filters < 1:
            raise ConfigError(f"filter count must be >= 1, got {self.filters}")
        for name in ("hidden_activation", "output_activation"):
            v = getattr(self, name)
            if isinstance(v, str):
                object.__setattr__(self, name, Activation(v))
        if self.convlstm_g_activation not in ("sigmoid", "tanh"):
            raise ConfigError(
                f"convlstm_g_activation must be sigmoid or tanh, got {self.convlstm_g_activation!r}"
            )

    def feature_dim(self) -> int:
        """Width of the flattened features the dense head consumes."""
        if self.cell_kind == "convlstm":
            return self.filters * self.window_size
        if self.cell_kind == "bilstm":
            return 2 * self.layer_units[1]
        return self.layer_units[1]

    def to_dict(self) -> dict:
        return {
            "cell_kind": self.cell_kind,
            "window_size": self.window_size,
            "layer_units": list(self.layer_units),
            "filters": self.filters,
            "hidden_activation": self.hidden_activation.value,
            "output_activation": self.output_activation.value,
            "convlstm_g_activation": self.convlstm_g_activation,
        }


@dataclass
class BiParams:
    """Forward- and reverse-direction parameter pair for one layer."""

    fwd: cells.CellParams
    bwd: cells.CellParams


@dataclass
class DenseHead:
    W: np.ndarray
    b: np.ndarray


@dataclass(frozen=True)
class TrainConfig:
    max_epochs: int = 200
    learning_rate: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    huber_delta: float = 1.0
    batch_size: int = 32
    shuffle_seed: int = 0
    early_stop_patience: int | None = None

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigError(f"learning rate must be positive, got {self.learning_rate}")
        if self.huber_delta <= 0:
            raise ConfigError(f"huber delta must be positive, got {self.huber_delta}")
        if self.batch_size < 1:
            raise ConfigError(f"batch size must be >= 1, got {self.batch_size}")


@dataclass
class TrainedModel:
    spec: ModelSpec
    layers: list
    head: DenseHead
    scaler_ref: str = ""
    history: list[float] = field(default_factory=list)
    seed_init: int = 0
    seed_shuffle: int = 0

    @property
    def window_size(self) -> int:
        return self.spec.window_size

    def predict_scaled(self, window) -> float:
        return forward(self, window)


def _glorot(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (rows + cols))
    return rng.uniform(-limit, limit, size=(rows, cols))


def init_model(spec: ModelSpec, seed: int) -> TrainedModel:
    """Fresh model with Glorot-uniform weights; reproducible per seed."""
    rng = np.random.default_rng(seed)
    sub = lambda: int(rng.integers(0, 2**31 - 1))
    u1, u2 = spec.layer_units
    kind = spec.cell_kind
    if kind in cells.DENSE_KINDS:
        layers = [cells.init_params(kind, 1, u1, sub()), cells.init_params(kind, u1, u2, sub())]
    elif kind == "bilstm":
        layers = [
            BiParams(cells.init_params("lstm", 1, u1, sub()), cells.init_params("lstm", 1, u1, sub())),
            BiParams(
                cells.init_params("lstm", 2 * u1, u2, sub()),
                cells.init_params("lstm", 2 * u1, u2, sub()),
            ),
        ]
    else:  # convlstm
        layers = [
            cells.init_params("convlstm", 1, spec.filters, sub(), g_activation=spec.convlstm_g_activation),
            cells.init_params(
                "convlstm", spec.filters, spec.filters, sub(), g_activation=spec.convlstm_g_activation
            ),
        ]
    feat = spec.feature_dim()
    head = DenseHead(W=_glorot(np.random.default_rng(sub()), 1, feat), b=np.zeros((1, 1)))
    return TrainedModel(spec=spec, layers=layers, head=head, seed_init=seed)


def named_parameters(model: TrainedModel) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {}
    for i, layer in enumerate(model.layers, start=1):
        out.update(cells.named_tensors(layer, f"layer{i}."))
    out["head.W"] = model.head.W
    out["head.b"] = model.head.b
    return out


# --------------------------------------------------------------------------
# forward / backward
# --------------------------------------------------------------------------

def _run_model(model: TrainedModel, windows: np.ndarray) -> tuple[np.ndarray, dict]:
    """Run a (window_size, batch) matrix of scaled windows through the stack.

    The hidden activation sits between the two recurrent layers (applied to
    every layer-1 timestep output); the second layer's final state feeds the
    head directly. Returns (1, batch) predictions plus backprop context.
    """
    spec = model.spec
    act = spec.hidden_activation
    N, _ = windows.shape
    ctx: dict = {}

    if spec.cell_kind == "convlstm":
        sig = windows[None, :, :]
        state1, caches1 = cells.run_sequence("convlstm", model.layers[0], [sig])
        out1_pre = state1.h
        out1 = apply_activation(act, out1_pre)
        state2, caches2 = cells.run_sequence("convlstm", model.layers[1], [out1])
        feat = state2.h.reshape(spec.filters * N, -1)
        ctx.update(caches1=caches1, caches2=caches2, out1_pre=out1_pre)
    elif spec.cell_kind == "bilstm":
        xs = [windows[t:t + 1, :] for t in range(N)]
        l1, l2 = model.layers
        outs1_pre, caches1f, caches1b = cells.run_bidirectional_outputs(l1.fwd, l1.bwd, xs)
        outs1 = [apply_activation(act, h) for h in outs1_pre]
        state2f, caches2f = cells.run_sequence("lstm", l2.fwd, outs1)
        state2b, caches2b = cells.run_sequence("lstm", l2.bwd, list(reversed(outs1)))
        feat = np.concatenate([state2f.h, state2b.h], axis=0)
        ctx.update(
            caches1f=caches1f, caches1b=caches1b, caches2f=caches2f, caches2b=caches2b,
            outs1_pre=outs1_pre,
        )
    else:
        xs = [windows[t:t + 1, :] for t in range(N)]
        kind = spec.cell_kind
        _, caches1 = cells.run_sequence(kind, model.layers[0], xs)
        outs1_pre = [c.vals["h"] for c in caches1]
        outs1 = [apply_activation(act, h) for h in outs1_pre]
        state2, caches2 = cells.run_sequence(kind, model.layers[1], outs1)
        feat = state2.h
        ctx.update(caches1=caches1, caches2=caches2, outs1_pre=outs1_pre)

    out_pre = model.head.W @ feat + model.head.b
    pred = apply_activation(spec.output_activation, out_pre)
    ctx.update(feat=feat, out_pre=out_pre)
    return pred, ctx


def _backward_model(model: TrainedModel, ctx: dict, dpred: np.ndarray) -> dict[str, np.ndarray]:
    """Gradients of a scalar loss with upstream dpred of shape (1, batch)."""
    spec = model.spec
    act = spec.hidden_activation
    grads: dict[str, np.ndarray] = {}

    dout_pre = dpred * activation_grad(spec.output_activation, ctx["out_pre"])
    grads["head.W"] = dout_pre @ ctx["feat"].T
    grads["head.b"] = dout_pre.sum(axis=1, keepdims=True)
    dfeat = model.head.W.T @ dout_pre

    if spec.cell_kind == "convlstm":
        F = spec.filters
        dstate2 = dfeat.reshape(F, -1, dfeat.shape[1])
        g2, dxs2 = cells.backward_sequence("convlstm", model.layers[1], ctx["caches2"], dstate2)
        dout1 = dxs2[0] * activation_grad(act, ctx["out1_pre"])
        g1, _ = cells.backward_sequence_outputs("convlstm", model.layers[0], ctx["caches1"], [dout1])
        grads.update(cells.named_tensors(g1, "layer1."))
        grads.update(cells.named_tensors(g2, "layer2."))
    elif spec.cell_kind == "bilstm":
        l1, l2 = model.layers
        g2f, g2b, dxs2 = cells.backward_bidirectional_final(
            l2.fwd, l2.bwd, ctx["caches2f"], ctx["caches2b"], dfeat
        )
        douts1 = [dx * activation_grad(act, pre) for dx, pre in zip(dxs2, ctx["outs1_pre"])]
        g1f, g1b, _ = cells.backward_bidirectional_outputs(
            l1.fwd, l1.bwd, ctx["caches1f"], ctx["caches1b"], douts1
        )
        grads.update(cells.named_tensors(BiParams(g1f, g1b), "layer1."))
        grads.update(cells.named_tensors(BiParams(g2f, g2b), "layer2."))
    else:
        kind = spec.cell_kind
        g2, dxs2 = cells.backward_sequence(kind, model.layers[1], ctx["caches2"], dfeat)
        douts1 = [dx * activation_grad(act, pre) for dx, pre in zip(dxs2, ctx["outs1_pre"])]
        g1, _ = cells.backward_sequence_outputs(kind, model.layers[0], ctx["caches1"], douts1)
        grads.update(cells.named_tensors(g1, "layer1."))
        grads.update(cells.named_tensors(g2, "layer2."))
    return grads


def forward(model: TrainedModel, window) -> float:
    """One scaled prediction from one scaled window (pure, no mutation)."""
    w = np.asarray(window, dtype=np.float64).reshape(-1)
    if w.shape[0] != model.spec.window_size:
        raise ValueError(
            f"window has {w.shape[0]} values, model expects {model.spec.window_size}"
        )
    pred, _ = _run_model(model, w[:, None])
    return float(pred[0, 0])


# --------------------------------------------------------------------------
# loss and optimizer
# --------------------------------------------------------------------------

def huber_loss(pred, target, delta: float = 1.0):
    """0.5 r^2 inside |r| <= delta, linear with matched value/slope outside."""
    if delta <= 0:
        raise ConfigError(f"huber delta must be positive, got {delta}")
    r = np.asarray(pred, dtype=np.float64) - np.asarray(target, dtype=np.float64)
    a = np.abs(r)
    out = np.where(a <= delta, 0.5 * r * r, delta * (a - 0.5 * delta))
    return float(out) if out.ndim == 0 else out


def huber_grad(pred, target, delta: float = 1.0):
    if delta <= 0:
        raise ConfigError(f"huber delta must be positive, got {delta}")
    r = np.asarray(pred, dtype=np.float64) - np.asarray(target, dtype=np.float64)
    out = np.where(np.abs(r) <= delta, r, delta * np.sign(r))
    return float(out) if out.ndim == 0 else out


def loss_and_grads(
    model: TrainedModel, windows: np.ndarray, targets: np.ndarray, delta: float = 1.0
) -> tuple[float, dict[str, np.ndarray]]:
    """Mean Huber loss over a batch and its exact parameter gradients.

    windows is (window_size, batch); targets is (batch,).
    """
    pred, ctx = _run_model(model, windows)
    batch = windows.shape[1]
    losses = huber_loss(pred[0], targets, delta)
    dpred = (huber_grad(pred[0], targets, delta) / batch)[None, :]
    grads = _backward_model(model, ctx, dpred)
    return float(np.mean(losses)), grads


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0


def init_adam(params: dict[str, np.ndarray]) -> AdamState:
    return AdamState(
        m={k: np.zeros_like(p) for k, p in params.items()},
        v={k: np.zeros_like(p) for k, p in params.items()},
    )


def adam_update(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamState,
    cfg: TrainConfig,
) -> tuple[dict[str, np.ndarray], AdamState]:
    """Bias-corrected Adam, applied tensor-wise and in place."""
    state.t += 1
    t = state.t
    bc1 = 1.0 - cfg.beta1 ** t
    bc2_sqrt = np.sqrt(1.0 - cfg.beta2 ** t)
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise RuntimeError(f"gradient shape {g.shape} != param shape {p.shape} for {name!r}")
        m = state.m[name]
        v = state.v[name]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * (g * g)
        # p -= lr * (m / bc1) / (sqrt(v / bc2) + eps), with sqrt(v)/bc2_sqrt in place
        denom = np.sqrt(v)
        denom /= bc2_sqrt
        denom += cfg.epsilon
        step = m / denom
        step *= cfg.learning_rate / bc1
        p -= step
    return params, state


def train(spec: ModelSpec, data, cfg: TrainConfig, seed: int) -> TrainedModel:
    """Mini-batch Adam training, deterministic under (seed, cfg.shuffle_seed)."""
    # Per-step matrices are small enough that BLAS thread sync costs more
    # than it saves; grid parallelism belongs at the job level instead.
    with threadpool_limits(limits=1, user_api="blas"):
        return _train_inner(spec, data, cfg, seed)


def _train_inner(spec: ModelSpec, data, cfg: TrainConfig, seed: int) -> TrainedModel:
    samples = data.samples
    if not samples:
        raise ValueError("cannot train on an empty dataset")
    if any(len(s.window) != spec.window_size for s in samples):
        raise ValueError(f"dataset windows do not match model window size {spec.window_size}")
    X = np.stack([np.asarray(s.window, dtype=np.float64) for s in samples], axis=1)
    y = np.array([s.target for s in samples], dtype=np.float64)
    n = X.shape[1]

    model = init_model(spec, seed)
    model.seed_shuffle = cfg.shuffle_seed
    model.scaler_ref = getattr(data, "scaler_ref", "")
    params = named_parameters(model)
    adam = init_adam(params)
    shuffle_rng = np.random.default_rng(cfg.shuffle_seed)

    best = np.inf
    stale = 0
    for epoch in range(cfg.max_epochs):
        perm = shuffle_rng.permutation(n)
        total = 0.0
        for b, start in enumerate(range(0, n, cfg.batch_size)):
            idx = perm[start:start + cfg.batch_size]
            loss, grads = loss_and_grads(model, X[:, idx], y[idx], cfg.huber_delta)
            if not np.isfinite(loss):
                raise DivergenceError(f"non-finite loss at epoch {epoch}, batch {b}")
            adam_update(params, grads, adam, cfg)
            total += loss * len(idx)
        mean_loss = total / n
        model.history.append(mean_loss)
        if cfg.early_stop_patience is not None:
            if mean_loss < best - 1e-12:
                best = mean_loss
                stale = 0
            else:
                stale += 1
                if stale >= cfg.early_stop_patience:
                    break
    return model


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------

def checkpoint_save(model: TrainedModel) -> bytes:
    """Magic + JSON header + named float64 tensors with shape headers."""
    params = named_parameters(model)
    header = {
        "version": CHECKPOINT_VERSION,
        "spec": model.spec.to_dict(),
        "seed_init": model.seed_init,
        "seed_shuffle": model.seed_shuffle,
        "scaler_ref": model.scaler_ref,
        "history": list(model.history),
        "tensors": len(params),
    }
    hj = json.dumps(header, sort_keys=True).encode("utf-8")
    parts = [CHECKPOINT_MAGIC, struct.pack("<I", len(hj)), hj]
    for name, arr in params.items():
        nb = name.encode("utf-8")
        parts.append(struct.pack("<H", len(nb)))
        parts.append(nb)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return b"".join(parts)


def checkpoint_load(data: bytes) -> TrainedModel:
    def take(offset: int, n: int) -> tuple[bytes, int]:
        if offset + n > len(data):
            raise CheckpointFormatError(f"truncated checkpoint ({len(data)} bytes)")
        return data[offset:offset + n], offset + n

    raw, off = take(0, len(CHECKPOINT_MAGIC))
    if raw != CHECKPOINT_MAGIC:
        raise CheckpointFormatError(f"bad magic {raw!r}, expected {CHECKPOINT_MAGIC!r}")
    raw, off = take(off, 4)
    hlen = struct.unpack("<I", raw)[0]
    raw, off = take(off, hlen)
    try:
        header = json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointFormatError(f"unreadable header: {e}") from e
    if header.get("version") != CHECKPOINT_VERSION:
        raise CheckpointFormatError(f"unsupported checkpoint version {header.get('version')!r}")

    try:
        spec = ModelSpec(
            cell_kind=header["spec"]["cell_kind"],
            window_size=header["spec"]["window_size"],
            layer_units=tuple(header["spec"]["layer_units"]),
            filters=header["spec"]["filters"],
            hidden_activation=header["spec"]["hidden_activation"],
            output_activation=header["spec"]["output_activation"],
            convlstm_g_activation=header["spec"]["convlstm_g_activation"],
        )
    except (KeyError, ConfigError) as e:
        raise CheckpointFormatError(f"bad spec in header: {e}") from e

    model = init_model(spec, seed=0)
    model.seed_init = header.get("seed_init", 0)
    model.seed_shuffle = header.get("seed_shuffle", 0)
    model.scaler_ref = header.get("scaler_ref", "")
    model.history = list(header.get("history", []))
    params = named_parameters(model)

    for _ in range(header.get("tensors", 0)):
        raw, off = take(off, 2)
        nlen = struct.unpack("<H", raw)[0]
        raw, off = take(off, nlen)
        name = raw.decode("utf-8")
        raw, off = take(off, 1)
        ndim = struct.unpack("<B", raw)[0]
        raw, off = take(off, 4 * ndim)
        shape = struct.unpack(f"<{ndim}I", raw)
        count = int(np.prod(shape)) if ndim else 1
        raw, off = take(off, 8 * count)
        if name not in params:
            raise CheckpointFormatError(f"unknown tensor {name!r} in checkpoint")
        if params[name].shape != shape:
            raise CheckpointFormatError(
                f"tensor {name!r} has shape {shape}, model expects {params[name].shape}"
            )
        params[name][...] = np.frombuffer(raw, dtype="<f8").reshape(shape)
    if off != len(data):
        raise CheckpointFormatError(f"{len(data) - off} trailing bytes after tensors")
    return model
