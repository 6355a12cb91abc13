"""Two-layer LSTM regressor in numpy with full backpropagation through time.

Architecture: LSTM(h, full sequence) -> inverted dropout -> LSTM(h, last
state) -> linear head. Gate blocks in W, U and b are ordered (input,
forget, cell, output). All arithmetic is float64.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit

from .errors import (
    DegenerateVariance,
    EmptySplit,
    LengthMismatch,
    NonFiniteGradient,
    NonFiniteLoss,
    NonFiniteValue,
    ShapeMismatch,
)

logger = logging.getLogger(__name__)

VAR_EPS = 1e-12
CHECKPOINT_MAGIC = b"TCLSTM1\n"


# ---------------------------------------------------------------------------
# parameters


@dataclass
class LstmLayerParams:
    W: np.ndarray  # (4h, d)
    U: np.ndarray  # (4h, h)
    b: np.ndarray  # (4h,)

    @property
    def hidden_size(self) -> int:
        return self.U.shape[1]

    @property
    def input_size(self) -> int:
        return self.W.shape[1]


@dataclass
class ModelParams:
    layer1: LstmLayerParams
    layer2: LstmLayerParams
    dense_W: np.ndarray  # (1, h)
    dense_b: np.ndarray  # (1,)
    dropout: float = 0.0

    def __post_init__(self):
        if self.layer1.hidden_size != self.layer2.input_size:
            raise ShapeMismatch("layer1 hidden size must equal layer2 input size")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")

    def arrays(self) -> list[np.ndarray]:
        """Canonical order: layer1 W, U, b; layer2 W, U, b; dense W, b."""
        return [self.layer1.W, self.layer1.U, self.layer1.b,
                self.layer2.W, self.layer2.U, self.layer2.b,
                self.dense_W, self.dense_b]

    @classmethod
    def from_arrays(cls, arrays, dropout: float = 0.0) -> "ModelParams":
        a = list(arrays)
        return cls(LstmLayerParams(*a[0:3]), LstmLayerParams(*a[3:6]), a[6], a[7], dropout)

    def copy(self) -> "ModelParams":
        return ModelParams.from_arrays([x.copy() for x in self.arrays()], self.dropout)

    def zeros_like(self) -> "ModelParams":
        return ModelParams.from_arrays([np.zeros_like(x) for x in self.arrays()], self.dropout)

    def flat(self) -> np.ndarray:
        return np.concatenate([x.ravel() for x in self.arrays()])

    def shapes(self) -> list[tuple[int, ...]]:
        return [x.shape for x in self.arrays()]

    def checksum(self) -> float:
        return float(np.sum(self.flat() * np.arange(1, self.flat().size + 1)))


def _glorot(rng, shape, fan_in, fan_out):
    lim = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=shape)


def init_params(input_size: int, hidden_size: int = 64, seed: int = 0, dropout: float = 0.2,
                hidden_size2: int | None = None) -> ModelParams:
    """Glorot-uniform weights, zero biases except forget-gate slices at 1.0."""
    if min(input_size, hidden_size) < 1:
        raise ValueError("sizes must be positive")
    h2 = hidden_size2 or hidden_size
    rng = np.random.default_rng(seed)

    def layer(d, h):
        b = np.zeros(4 * h)
        b[h:2 * h] = 1.0
        return LstmLayerParams(_glorot(rng, (4 * h, d), d, 4 * h), _glorot(rng, (4 * h, h), h, 4 * h), b)

    l1 = layer(input_size, hidden_size)
    l2 = layer(hidden_size, h2)
    dense = _glorot(rng, (1, h2), h2, 1)
    return ModelParams(l1, l2, dense, np.zeros(1), dropout)


# ---------------------------------------------------------------------------
# forward / backward


def _layer_forward(p: LstmLayerParams, x: np.ndarray) -> dict:
    B, T, _ = x.shape
    h = p.hidden_size
    xw = x @ p.W.T + p.b
    hs = np.zeros((B, T + 1, h))
    cs = np.zeros((B, T + 1, h))
    gates = np.empty((B, T, 4 * h))
    tcs = np.empty((B, T, h))
    UT = p.U.T
    for t in range(T):
        z = xw[:, t] + hs[:, t] @ UT
        gt = gates[:, t]
        expit(z, out=gt)
        np.tanh(z[:, 2 * h:3 * h], out=gt[:, 2 * h:3 * h])
        c = gt[:, h:2 * h] * cs[:, t] + gt[:, :h] * gt[:, 2 * h:3 * h]
        tc = np.tanh(c)
        cs[:, t + 1] = c
        hs[:, t + 1] = gt[:, 3 * h:] * tc
        tcs[:, t] = tc
    return {"x": x, "hs": hs, "cs": cs, "gates": gates, "tcs": tcs}


def _layer_backward(p: LstmLayerParams, cache: dict, dh_seq: np.ndarray):
    x, hs, cs, gates, tcs = cache["x"], cache["hs"], cache["cs"], cache["gates"], cache["tcs"]
    B, T, _ = x.shape
    h = p.hidden_size
    dZ = np.empty((B, T, 4 * h))
    dh_next = np.zeros((B, h))
    dc_next = np.zeros((B, h))
    U = p.U
    for t in range(T - 1, -1, -1):
        i = gates[:, t, :h]
        f = gates[:, t, h:2 * h]
        g = gates[:, t, 2 * h:3 * h]
        o = gates[:, t, 3 * h:]
        tc = tcs[:, t]
        dh = dh_seq[:, t] + dh_next
        dc = dc_next + dh * o * (1.0 - tc * tc)
        dz = dZ[:, t]
        dz[:, :h] = dc * g * i * (1.0 - i)
        dz[:, h:2 * h] = dc * cs[:, t] * f * (1.0 - f)
        dz[:, 2 * h:3 * h] = dc * i * (1.0 - g * g)
        dz[:, 3 * h:] = dh * tc * o * (1.0 - o)
        dc_next = dc * f
        dh_next = dz @ U
    dZ2 = dZ.reshape(B * T, 4 * h)
    dW = dZ2.T @ x.reshape(B * T, -1)
    dU = dZ2.T @ hs[:, :-1].reshape(B * T, h)
    db = dZ2.sum(axis=0)
    dx = dZ @ p.W
    return LstmLayerParams(dW, dU, db), dx


def lstm_forward(params: ModelParams, batch, train_mode: bool = False, rng=None):
    """Return (predictions of shape (B,), cache for ``backward``)."""
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim != 3 or x.shape[2] != params.layer1.input_size:
        raise ShapeMismatch(f"expected (B, T, {params.layer1.input_size}), got {x.shape}")
    c1 = _layer_forward(params.layer1, x)
    seq = c1["hs"][:, 1:]
    mask = None
    if train_mode and params.dropout > 0.0:
        rng = rng if rng is not None else np.random.default_rng()
        keep = 1.0 - params.dropout
        mask = (rng.random(seq.shape) < keep) / keep
        seq = seq * mask
    c2 = _layer_forward(params.layer2, seq)
    h_last = c2["hs"][:, -1]
    pred = h_last @ params.dense_W[0] + params.dense_b[0]
    if not np.all(np.isfinite(pred)):
        raise NonFiniteValue("non-finite prediction in forward pass")
    return pred, {"c1": c1, "c2": c2, "mask": mask, "dropped": seq, "h_last": h_last}


def predict(params: ModelParams, X, batch_size: int = 512) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    out = [lstm_forward(params, X[s:s + batch_size])[0] for s in range(0, len(X), batch_size)]
    return np.concatenate(out) if out else np.zeros(0)


# ---------------------------------------------------------------------------
# losses


def loss_mse(pred, target) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape or pred.size == 0:
        raise LengthMismatch(f"pred {pred.shape} vs target {target.shape}")
    d = pred - target
    return float(np.mean(d * d))


def _sharpe_parts(pred, returns, gamma):
    pred = np.asarray(pred, dtype=np.float64)
    r = np.asarray(returns, dtype=np.float64)
    if pred.shape != r.shape:
        raise LengthMismatch(f"pred {pred.shape} vs returns {r.shape}")
    if pred.size < 2:
        raise DegenerateVariance("Sharpe loss needs at least 2 observations")
    w = np.tanh(gamma * pred)
    pnl = w * r
    mu = pnl.mean()
    var = np.mean((pnl - mu) ** 2)
    if var <= VAR_EPS:
        raise DegenerateVariance(f"strategy return variance {var:.3g} is too small")
    return w, r, pnl, mu, var


def loss_sharpe(pred, returns, gamma: float = 2.0) -> float:
    """-mean(w r) / std(w r) with w = tanh(gamma * pred) and population std."""
    _, _, _, mu, var = _sharpe_parts(pred, returns, gamma)
    return float(-mu / np.sqrt(var))


def loss_and_grad(kind: str, pred, y, gamma: float = 2.0) -> tuple[float, np.ndarray]:
    """Loss value and d(loss)/d(pred) for ``kind`` in {"mse", "sharpe"}."""
    pred = np.asarray(pred, dtype=np.float64)
    n = pred.size
    if kind == "mse":
        loss = loss_mse(pred, y)
        return loss, 2.0 * (pred - np.asarray(y, dtype=np.float64)) / n
    if kind == "sharpe":
        w, r, pnl, mu, var = _sharpe_parts(pred, y, gamma)
        s = np.sqrt(var)
        dpnl = -1.0 / (n * s) + mu * (pnl - mu) / (n * s**3)
        return float(-mu / s), dpnl * r * gamma * (1.0 - w * w)
    raise ValueError(f"unknown loss {kind!r}")


def backward(params: ModelParams, cache: dict, loss_kind: str, y, gamma: float = 2.0):
    """Gradients of the chosen loss with respect to every parameter.

    Returns (loss, grads) where grads is a ModelParams of matching shapes.
    """
    pred = cache["h_last"] @ params.dense_W[0] + params.dense_b[0]
    loss, dpred = loss_and_grad(loss_kind, pred, y, gamma)
    return loss, backward_from_dpred(params, cache, dpred)


def backward_from_dpred(params: ModelParams, cache: dict, dpred: np.ndarray) -> ModelParams:
    c1, c2 = cache["c1"], cache["c2"]
    h_last = cache["h_last"]
    dW_dense = (dpred @ h_last)[None, :]
    db_dense = np.array([dpred.sum()])
    B, T = c2["x"].shape[:2]
    dh2 = np.zeros((B, T, params.layer2.hidden_size))
    dh2[:, -1] = dpred[:, None] * params.dense_W[0]
    g2, dseq = _layer_backward(params.layer2, c2, dh2)
    if cache["mask"] is not None:
        dseq = dseq * cache["mask"]
    g1, _ = _layer_backward(params.layer1, c1, dseq)
    grads = ModelParams(g1, g2, dW_dense, db_dense, params.dropout)
    for a in grads.arrays():
        if not np.all(np.isfinite(a)):
            raise NonFiniteGradient("non-finite gradient")
    return grads


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0

    @classmethod
    def zeros(cls, params: ModelParams) -> "AdamState":
        return cls([np.zeros_like(a) for a in params.arrays()], [np.zeros_like(a) for a in params.arrays()])


def adam_step(params: ModelParams, grads: ModelParams, state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> tuple[ModelParams, AdamState]:
    """One bias-corrected Adam update, in place; returns (params, state) for chaining."""
    state.t += 1
    c1 = 1.0 - beta1**state.t
    c2 = 1.0 - beta2**state.t
    for p, g, m, v in zip(params.arrays(), grads.arrays(), state.m, state.v):
        if p.shape != g.shape or m.shape != p.shape:
            raise ShapeMismatch("Adam state does not match parameter shapes")
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return params, state


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainConfig:
    loss: str = "mse"
    gamma: float = 2.0
    learning_rate: float = 1e-3
    batch_size: int = 64
    max_epochs: int = 100
    patience: int = 10
    lr_factor: float = 0.5
    lr_patience: int = 5
    hidden_size: int = 64
    dropout: float = 0.2
    seed: int = 0
    shuffle: bool = False
    early_stopping: bool = True

    def __post_init__(self):
        if self.loss not in ("mse", "sharpe"):
            raise ValueError(f"unknown loss {self.loss!r}")
        for name in ("gamma", "learning_rate", "lr_factor"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        for name in ("batch_size", "max_epochs", "patience", "lr_patience", "hidden_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.loss == "sharpe" and self.batch_size < 32:
            raise ValueError("Sharpe loss needs batch_size >= 32 for a stable variance estimate")


@dataclass
class TrainReport:
    epoch_log: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    stopped_early: bool = False
    final: dict = field(default_factory=dict)


class PlateauMonitor:
    """Early stopping plus reduce-on-plateau bookkeeping on a validation loss."""

    def __init__(self, patience: int = 10, lr_patience: int = 5, lr_factor: float = 0.5,
                 early_stopping: bool = True):
        self.patience = patience
        self.lr_patience = lr_patience
        self.lr_factor = lr_factor
        self.early_stopping = early_stopping
        self.best = np.inf
        self.best_epoch = 0
        self.since_best = 0
        self.since_reduce = 0

    def update(self, epoch: int, val_loss: float) -> tuple[bool, bool, float]:
        """Return (improved, stop, lr_multiplier) after observing ``val_loss``."""
        if val_loss < self.best:
            self.best, self.best_epoch = val_loss, epoch
            self.since_best = self.since_reduce = 0
            return True, False, 1.0
        self.since_best += 1
        self.since_reduce += 1
        mult = 1.0
        if self.since_reduce >= self.lr_patience:
            mult = self.lr_factor
            self.since_reduce = 0
        stop = self.early_stopping and self.since_best >= self.patience
        return False, stop, mult


def _eval_loss(params, X, y, cfg) -> float:
    pred = predict(params, X)
    if cfg.loss == "mse":
        return loss_mse(pred, y)
    try:
        return loss_sharpe(pred, y, cfg.gamma)
    except DegenerateVariance:
        return 0.0


def _loss_inputs(samples, idx, cfg):
    return samples.targets[idx] if cfg.loss == "mse" else samples.next_return[idx]


def train(samples, config: TrainConfig | None = None) -> tuple[ModelParams, TrainReport]:
    """Fit on the train split, select on the validation split, restore the best epoch."""
    cfg = config or TrainConfig()
    tr = samples.indices("train")
    va = samples.indices("validation")
    if len(tr) == 0 or len(va) == 0:
        raise EmptySplit("train and validation splits must be non-empty")
    X_tr, y_tr = samples.windows[tr], _loss_inputs(samples, tr, cfg)
    X_va, y_va = samples.windows[va], _loss_inputs(samples, va, cfg)

    ss = np.random.SeedSequence(cfg.seed)
    init_seed, drop_seed, shuffle_seed = ss.spawn(3)
    params = init_params(samples.n_features, cfg.hidden_size, np.random.default_rng(init_seed), cfg.dropout)
    drop_rng = np.random.default_rng(drop_seed)
    shuffle_rng = np.random.default_rng(shuffle_seed)
    state = AdamState.zeros(params)
    lr = cfg.learning_rate
    monitor = PlateauMonitor(cfg.patience, cfg.lr_patience, cfg.lr_factor, cfg.early_stopping)
    best = params.copy()
    report = TrainReport()
    min_batch = 2 if cfg.loss == "sharpe" else 1

    for epoch in range(1, cfg.max_epochs + 1):
        order = shuffle_rng.permutation(len(tr)) if cfg.shuffle else np.arange(len(tr))
        losses, weights = [], []
        for s in range(0, len(order), cfg.batch_size):
            rows = order[s:s + cfg.batch_size]
            if len(rows) < min_batch:
                continue
            pred, cache = lstm_forward(params, X_tr[rows], train_mode=True, rng=drop_rng)
            try:
                loss, grads = backward(params, cache, cfg.loss, y_tr[rows], cfg.gamma)
            except DegenerateVariance:
                continue
            if not np.isfinite(loss):
                raise NonFiniteLoss(f"non-finite training loss at epoch {epoch}")
            adam_step(params, grads, state, lr)
            losses.append(loss)
            weights.append(len(rows))
        train_loss = float(np.average(losses, weights=weights)) if losses else float("nan")
        val_loss = _eval_loss(params, X_va, y_va, cfg)
        if not np.isfinite(val_loss):
            raise NonFiniteLoss(f"non-finite validation loss at epoch {epoch}")
        report.epoch_log.append({"epoch": epoch, "train_loss": train_loss, "val_loss": val_loss, "lr": lr})
        improved, stop, mult = monitor.update(epoch, val_loss)
        if improved:
            best = params.copy()
        lr *= mult
        if stop:
            report.stopped_early = True
            break

    report.best_epoch = monitor.best_epoch
    val_pred = predict(best, X_va)
    report.final = {
        "val_loss": float(monitor.best),
        "val_rmse": float(np.sqrt(np.mean((val_pred - samples.targets[va]) ** 2))),
        "epochs_run": len(report.epoch_log),
    }
    return best, report


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path: str | Path, params: ModelParams, config: TrainConfig | None = None,
                    epoch: int = 0, extra: dict | None = None) -> None:
    """Magic line, little-endian uint64 header length, JSON header, then a float64 LE blob."""
    header = {
        "shapes": [list(s) for s in params.shapes()],
        "dropout": params.dropout,
        "config": asdict(config) if config else None,
        "seed": config.seed if config else None,
        "epoch": epoch,
        "extra": extra or {},
    }
    hb = json.dumps(header, sort_keys=True).encode()
    blob = params.flat().astype("<f8").tobytes()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(hb)))
        fh.write(hb)
        fh.write(blob)


def load_checkpoint(path: str | Path) -> tuple[ModelParams, dict]:
    data = Path(path).read_bytes()
    if not data.startswith(CHECKPOINT_MAGIC):
        raise ValueError(f"{path}: not a trendcast LSTM checkpoint")
    off = len(CHECKPOINT_MAGIC)
    (hlen,) = struct.unpack("<Q", data[off:off + 8])
    off += 8
    header = json.loads(data[off:off + hlen])
    flat = np.frombuffer(data[off + hlen:], dtype="<f8").astype(np.float64)
    arrays, pos = [], 0
    for shape in header["shapes"]:
        size = int(np.prod(shape))
        arrays.append(flat[pos:pos + size].reshape(shape).copy())
        pos += size
    if pos != flat.size:
        raise ValueError(f"{path}: weight blob size does not match header shapes")
    return ModelParams.from_arrays(arrays, header["dropout"]), header
