"""Bidirectional LSTM sequence labeller with a hand-written backward pass.

Gate layout inside every ``4h`` block is ``[input, forget, cell, output]``.
All arrays carry a leading batch axis internally: inputs are ``(B, T, d_in)``,
outputs ``(B, T, n_out)``; the public forward also accepts a single ``(T, d_in)``
sequence.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import NamedTuple, Optional

import numpy as np

from .data import Batch, SequenceWindow, stack_windows
from .errors import ConfigError, DataError, TrainingDiverged
from .losses import (
    EmbeddingTable,
    combined_expr_loss,
    cross_entropy_loss,
    embedding_loss,
    mse_loss,
    softmax,
    window_ccc_loss,
)
from .metrics import N_EXPR_CLASSES, evaluate_expr, evaluate_va

FULL_INPUT_DIM = 6144
FULL_HIDDEN = 512
TASK_OUTPUTS = {"expr": N_EXPR_CLASSES, "va": 2}


def sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


@dataclass
class LSTMParams:
    """One direction's weights; arrays are shared with the owning model."""

    W: np.ndarray  # (4h, d_in)
    U: np.ndarray  # (4h, h)
    b: np.ndarray  # (4h,)

    @property
    def hidden(self) -> int:
        return self.U.shape[1]


class CellCache(NamedTuple):
    x: np.ndarray
    h_prev: np.ndarray
    c_prev: np.ndarray
    i: np.ndarray
    f: np.ndarray
    g: np.ndarray
    o: np.ndarray
    tanh_c: np.ndarray


def _cell(x_t, h_prev, c_prev, p: LSTMParams):
    h = p.hidden
    z = x_t @ p.W.T + h_prev @ p.U.T + p.b
    i = sigmoid(z[..., :h])
    f = sigmoid(z[..., h: 2 * h])
    g = np.tanh(z[..., 2 * h: 3 * h])
    o = sigmoid(z[..., 3 * h:])
    c = f * c_prev + i * g
    tanh_c = np.tanh(c)
    return o * tanh_c, c, CellCache(x_t, h_prev, c_prev, i, f, g, o, tanh_c)


def lstm_cell_forward(x_t, h_prev, c_prev, p: LSTMParams):
    """One LSTM step. Returns ``(h_t, c_t, cache)``; non-finite inputs raise."""
    for name, arr in (("x_t", x_t), ("h_prev", h_prev), ("c_prev", c_prev)):
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"non-finite values in {name}")
    if np.shape(x_t)[-1] != p.W.shape[1] or np.shape(h_prev)[-1] != p.hidden:
        raise ValueError("cell input dimensions do not match the parameters")
    return _cell(np.asarray(x_t, float), np.asarray(h_prev, float), np.asarray(c_prev, float), p)


def _run_direction(p: LSTMParams, xs):
    B, T, _ = xs.shape
    h_prev = np.zeros((B, p.hidden))
    c_prev = np.zeros((B, p.hidden))
    hs = np.empty((B, T, p.hidden))
    caches = []
    for t in range(T):
        h_prev, c_prev, cache = _cell(xs[:, t], h_prev, c_prev, p)
        hs[:, t] = h_prev
        caches.append(cache)
    return hs, caches


def _direction_backward(p: LSTMParams, dhs, caches):
    B, T, h = dhs.shape
    dW, dU, db = np.zeros_like(p.W), np.zeros_like(p.U), np.zeros_like(p.b)
    dxs = np.empty((B, T, p.W.shape[1]))
    dh_next = np.zeros((B, h))
    dc_next = np.zeros((B, h))
    for t in range(T - 1, -1, -1):
        k = caches[t]
        dh = dhs[:, t] + dh_next
        dc = dh * k.o * (1.0 - k.tanh_c**2) + dc_next
        dz = np.concatenate(
            [
                dc * k.g * k.i * (1.0 - k.i),
                dc * k.c_prev * k.f * (1.0 - k.f),
                dc * k.i * (1.0 - k.g**2),
                dh * k.tanh_c * k.o * (1.0 - k.o),
            ],
            axis=-1,
        )
        dW += dz.T @ k.x
        dU += dz.T @ k.h_prev
        db += dz.sum(axis=0)
        dxs[:, t] = dz @ p.W
        dh_next = dz @ p.U
        dc_next = dc * k.f
    return dW, dU, db, dxs


class SeqModel:
    """BiLSTM (or unidirectional LSTM) plus a per-frame linear head.

    ``params`` is an ordered dict of named arrays; that order is the checkpoint
    layout and the order the optimiser walks.
    """

    def __init__(self, task: str, params: dict[str, np.ndarray], bidirectional: bool = True):
        if task not in TASK_OUTPUTS:
            raise ConfigError(f"unknown task {task!r}")
        self.task = task
        self.bidirectional = bidirectional
        self.params = params

    @property
    def input_dim(self) -> int:
        return self.params["fwd.W"].shape[1]

    @property
    def hidden(self) -> int:
        return self.params["fwd.U"].shape[1]

    @property
    def n_out(self) -> int:
        return self.params["head.b"].shape[0]

    @property
    def emb_dim(self) -> int:
        return self.params["emb.W"].shape[0] if "emb.W" in self.params else 0

    def direction(self, name: str) -> LSTMParams:
        return LSTMParams(self.params[f"{name}.W"], self.params[f"{name}.U"], self.params[f"{name}.b"])

    @property
    def emb_projection(self) -> Optional[np.ndarray]:
        return self.params.get("emb.W")

    def copy(self) -> "SeqModel":
        return SeqModel(self.task, {k: v.copy() for k, v in self.params.items()}, self.bidirectional)

    def n_params(self) -> int:
        return sum(v.size for v in self.params.values())


def param_layout(task, input_dim, hidden, bidirectional=True, emb_dim=0, n_out=None):
    n_out = TASK_OUTPUTS[task] if n_out is None else n_out
    dirs = ["fwd", "bwd"] if bidirectional else ["fwd"]
    layout = {}
    for d in dirs:
        layout[f"{d}.W"] = (4 * hidden, input_dim)
        layout[f"{d}.U"] = (4 * hidden, hidden)
        layout[f"{d}.b"] = (4 * hidden,)
    layout["head.W"] = (n_out, hidden * len(dirs))
    layout["head.b"] = (n_out,)
    if emb_dim:
        layout["emb.W"] = (emb_dim, input_dim)
    return layout


def init_model(
    task: str,
    input_dim: int,
    hidden: int = FULL_HIDDEN,
    bidirectional: bool = True,
    emb_dim: int = 0,
    seed: int = 0,
) -> SeqModel:
    """Uniform(+-1/sqrt(h)) weights, forget-gate bias 1, other biases 0."""
    if task not in TASK_OUTPUTS:
        raise ConfigError(f"unknown task {task!r}")
    rng = np.random.default_rng(seed)
    bound = 1.0 / math.sqrt(hidden)
    params = {}
    for name, shape in param_layout(task, input_dim, hidden, bidirectional, emb_dim).items():
        if name.endswith(".b"):
            p = np.zeros(shape)
            if not name.startswith("head"):
                p[hidden: 2 * hidden] = 1.0
        else:
            fan = bound if not name.startswith("emb") else 1.0 / math.sqrt(input_dim)
            p = rng.uniform(-fan, fan, size=shape)
        params[name] = p
    return SeqModel(task, params, bidirectional)


class ForwardCache(NamedTuple):
    xs: np.ndarray
    fwd: list
    bwd: Optional[list]
    hcat: np.ndarray
    out: np.ndarray
    single: bool


def forward(model: SeqModel, xs) -> tuple[np.ndarray, ForwardCache]:
    """Per-frame outputs and the cache needed by :func:`backward`.

    Expression outputs are raw logits; VA outputs pass through tanh.
    """
    xs = np.asarray(xs, dtype=np.float64)
    single = xs.ndim == 2
    if single:
        xs = xs[None]
    if xs.ndim != 3 or xs.shape[1] == 0:
        raise ValueError("expected a non-empty (T, d_in) or (B, T, d_in) input")
    if xs.shape[2] != model.input_dim:
        raise ValueError(f"input dim {xs.shape[2]} != model input dim {model.input_dim}")
    if not np.all(np.isfinite(xs)):
        raise ValueError("non-finite values in the input sequence")
    hf, cf = _run_direction(model.direction("fwd"), xs)
    if model.bidirectional:
        hb, cb = _run_direction(model.direction("bwd"), xs[:, ::-1])
        hcat = np.concatenate([hf, hb[:, ::-1]], axis=-1)
    else:
        cb, hcat = None, hf
    out = hcat @ model.params["head.W"].T + model.params["head.b"]
    if model.task == "va":
        out = np.tanh(out)
    cache = ForwardCache(xs, cf, cb, hcat, out, single)
    return (out[0] if single else out), cache


def bilstm_forward(xs, model: SeqModel) -> np.ndarray:
    return forward(model, xs)[0]


def backward(model: SeqModel, dout, cache: ForwardCache) -> dict[str, np.ndarray]:
    """Reverse-mode gradients of a scalar loss given its gradient w.r.t. the outputs.

    Returns one array per model parameter (the ``emb.W`` entry is zero: the
    projection does not feed the outputs) plus ``"input"`` for ``xs``.
    """
    dout = np.asarray(dout, dtype=np.float64)
    if cache.single:
        dout = dout[None]
    if dout.shape != cache.out.shape:
        raise ValueError(f"upstream gradient {dout.shape} does not match outputs {cache.out.shape}")
    dpre = dout * (1.0 - cache.out**2) if model.task == "va" else dout
    grads = {k: np.zeros_like(v) for k, v in model.params.items()}
    grads["head.W"] = np.einsum("btn,bth->nh", dpre, cache.hcat)
    grads["head.b"] = dpre.sum(axis=(0, 1))
    dh = dpre @ model.params["head.W"]
    h = model.hidden
    dW, dU, db, dx = _direction_backward(model.direction("fwd"), dh[..., :h], cache.fwd)
    grads["fwd.W"], grads["fwd.U"], grads["fwd.b"] = dW, dU, db
    if model.bidirectional:
        dW, dU, db, dxb = _direction_backward(model.direction("bwd"), dh[..., h:][:, ::-1], cache.bwd)
        grads["bwd.W"], grads["bwd.U"], grads["bwd.b"] = dW, dU, db
        dx = dx + dxb[:, ::-1]
    grads["input"] = dx[0] if cache.single else dx
    return grads


# ---------------------------------------------------------------- training


@dataclass
class TrainConfig:
    learning_rate: float = 3e-3
    batch_size: int = 8
    epochs: int = 50
    seed: int = 0
    gradient_clip_norm: float = 5.0
    optimizer: str = "adam"
    lambda_emb: float = 1.0
    emb_normalize: bool = False
    va_loss: str = "ccc"
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.learning_rate < 0 or self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("learning_rate >= 0, batch_size >= 1 and epochs >= 0 required")
        if self.gradient_clip_norm <= 0:
            raise ConfigError("gradient_clip_norm must be positive")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.va_loss not in ("ccc", "mse", "ccc+mse"):
            raise ConfigError(f"unknown va_loss {self.va_loss!r}")
        if self.lambda_emb < 0:
            raise ConfigError("lambda_emb must be non-negative")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown TrainConfig keys: {sorted(unknown)}")
        return cls(**d)


def loss_and_grads(model: SeqModel, batch: Batch, cfg: TrainConfig, table: Optional[EmbeddingTable] = None):
    """Scalar training loss on a batch and its gradients.

    Returns ``(value, grads, outputs)`` where ``grads`` has an entry per model
    parameter plus ``"input"`` for the batch features.
    """
    out, cache = forward(model, batch.features)
    if model.task == "expr":
        mask = batch.expr_mask
        loss = cross_entropy_loss(out, batch.expr, mask)
        use_emb = model.emb_projection is not None and cfg.lambda_emb > 0
        if use_emb:
            if table is None:
                raise ConfigError("model has an embedding projection but no embedding table was given")
            emb = embedding_loss(batch.features, model.emb_projection, table, batch.expr, mask, cfg.emb_normalize)
            loss = combined_expr_loss(loss, emb, cfg.lambda_emb)
        grads = backward(model, loss.grads["logits"], cache)
        if use_emb:
            grads["emb.W"] = loss.grads["proj"]
            grads["input"] = grads["input"] + loss.grads["fused"]
        return loss.value, grads, out

    mask = batch.va_mask
    value, dout = 0.0, np.zeros_like(out)
    if "ccc" in cfg.va_loss:
        lv = window_ccc_loss(out, batch.va, mask)
        value, dout = value + lv.value, dout + lv.grads["pred"]
    if "mse" in cfg.va_loss:
        lv = mse_loss(out, batch.va, np.repeat(mask[..., None], 2, axis=-1))
        value, dout = value + lv.value, dout + lv.grads["pred"]
    return value, backward(model, dout, cache), out


def clip_gradients(grads: dict, max_norm: float) -> float:
    """Scale ``grads`` in place to global norm ``max_norm``; returns the pre-clip norm."""
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if norm > max_norm:
        scale = max_norm / norm
        for g in grads.values():
            g *= scale
    return norm


class SGD:
    def __init__(self, lr: float):
        self.lr = lr

    def step(self, params: dict, grads: dict) -> None:
        for k, p in params.items():
            p -= self.lr * grads[k]


class Adam:
    def __init__(self, params: dict, lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict, grads: dict) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for k, p in params.items():
            g = grads[k]
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g
            p -= self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


@dataclass
class EpochLog:
    epoch: int
    train_loss: float
    batch_loss_mean: float
    max_grad_norm: float
    val: dict = field(default_factory=dict)


def predict_windows(model: SeqModel, windows, batch_size: int = 64) -> np.ndarray:
    """Raw model outputs for each window, (n_windows, T, n_out)."""
    outs = []
    for s in range(0, len(windows), batch_size):
        outs.append(bilstm_forward(stack_windows(windows[s: s + batch_size]).features, model))
    return np.concatenate(outs, axis=0)


def evaluate_windows(model: SeqModel, windows) -> dict:
    """Metrics over the valid frames of ``windows`` (concatenated)."""
    batch = stack_windows(windows)
    out = predict_windows(model, windows)
    valid = batch.valid
    if model.task == "expr":
        report = evaluate_expr(out[valid].argmax(-1), batch.expr[valid], model.n_out)
    else:
        report = evaluate_va(out[valid], batch.va[valid])
    d = report.to_dict()
    return {k: v for k, v in d.items() if k not in ("per_video", "task") and v is not None and v != []}


def fit(
    model: SeqModel,
    windows: list[SequenceWindow],
    cfg: TrainConfig = TrainConfig(),
    val_windows: Optional[list[SequenceWindow]] = None,
    table: Optional[EmbeddingTable] = None,
    callback=None,
) -> list[EpochLog]:
    """Minibatch training; mutates ``model`` in place and returns one log entry per epoch.

    Expression models minimise cross-entropy plus ``lambda_emb`` times the
    embedding loss (when the model has a projection); VA models minimise
    ``cfg.va_loss``. Window order is reshuffled every epoch from ``cfg.seed``.
    """
    if not windows:
        raise DataError("no training windows")
    rng = np.random.default_rng(cfg.seed)
    if cfg.optimizer == "adam":
        opt = Adam(model.params, cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    else:
        opt = SGD(cfg.learning_rate)
    full = stack_windows(windows)
    log = []
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(windows))
        batch_losses, max_norm = [], 0.0
        for s in range(0, len(order), cfg.batch_size):
            batch = stack_windows([windows[i] for i in order[s: s + cfg.batch_size]])
            value, grads, _ = loss_and_grads(model, batch, cfg, table)
            if not math.isfinite(value):
                raise TrainingDiverged(f"epoch {epoch}, batch {s // cfg.batch_size}: loss is {value}")
            grads.pop("input")
            max_norm = max(max_norm, clip_gradients(grads, cfg.gradient_clip_norm))
            opt.step(model.params, grads)
            batch_losses.append(value)
        train_loss = loss_and_grads(model, full, cfg, table)[0]
        if not math.isfinite(train_loss):
            raise TrainingDiverged(f"epoch {epoch}: training loss is {train_loss}")
        entry = EpochLog(epoch, train_loss, math.fsum(batch_losses) / len(batch_losses), max_norm)
        if val_windows:
            entry.val = evaluate_windows(model, val_windows)
        log.append(entry)
        if callback is not None:
            callback(entry)
    return log


# ---------------------------------------------------------------- checkpoints

SEQM_MAGIC = b"SEQM"
SEQM_VERSION = 1
# magic, version, task (0 expr / 1 va), d_in, hidden, n_out, bidirectional, emb_dim
_SEQM_HEADER = struct.Struct("<4sIIIIIII")
_TASK_CODES = {"expr": 0, "va": 1}


def save_checkpoint(path, model: SeqModel, train_config: Optional[TrainConfig] = None, extra: Optional[dict] = None) -> None:
    """Binary checkpoint plus a ``<path>.json`` sidecar.

    Parameters follow the header as little-endian float64 in this order:
    fwd.W, fwd.U, fwd.b, [bwd.W, bwd.U, bwd.b], head.W, head.b, [emb.W],
    each row-major.
    """
    path = Path(path)
    header = _SEQM_HEADER.pack(
        SEQM_MAGIC,
        SEQM_VERSION,
        _TASK_CODES[model.task],
        model.input_dim,
        model.hidden,
        model.n_out,
        int(model.bidirectional),
        model.emb_dim,
    )
    layout = param_layout(model.task, model.input_dim, model.hidden, model.bidirectional, model.emb_dim, model.n_out)
    with open(path, "wb") as f:
        f.write(header)
        for name in layout:
            f.write(np.ascontiguousarray(model.params[name], dtype="<f8").tobytes())
    sidecar = {"task": model.task, "train_config": asdict(train_config) if train_config else None}
    if extra:
        sidecar.update(extra)
    Path(str(path) + ".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")


def load_checkpoint(path) -> SeqModel:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"{path}: no such checkpoint")
    raw = path.read_bytes()
    if len(raw) < _SEQM_HEADER.size:
        raise DataError(f"{path}: truncated header")
    magic, version, task_code, d_in, hidden, n_out, bidir, emb_dim = _SEQM_HEADER.unpack_from(raw)
    if magic != SEQM_MAGIC or version != SEQM_VERSION:
        raise DataError(f"{path}: not a SEQM v{SEQM_VERSION} checkpoint")
    task = {v: k for k, v in _TASK_CODES.items()}.get(task_code)
    if task is None:
        raise DataError(f"{path}: unknown task code {task_code}")
    layout = param_layout(task, d_in, hidden, bool(bidir), emb_dim, n_out)
    body = np.frombuffer(raw, dtype="<f8", offset=_SEQM_HEADER.size)
    if body.size != sum(math.prod(s) for s in layout.values()):
        raise DataError(f"{path}: parameter count does not match header")
    params, pos = {}, 0
    for name, shape in layout.items():
        n = math.prod(shape)
        params[name] = body[pos: pos + n].reshape(shape).astype(np.float64)
        pos += n
    return SeqModel(task, params, bool(bidir))


def output_probabilities(model: SeqModel, out: np.ndarray) -> np.ndarray:
    """Expression logits to probabilities; VA outputs pass through."""
    return softmax(out) if model.task == "expr" else out
