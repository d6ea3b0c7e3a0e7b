"""Client-side training, update sizing, learning-rate schedule and evaluation metrics."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from ._fallback import sigmoid, softplus

# Fixed framing per serialized update: magic(4) + format(2) + encoding(2) +
# n_params(8) + base_version(8) + client_id(8).
UPDATE_HEADER_BYTES = 32
BYTES_PER_ELEMENT = {"float32": 4, "float64": 8}


class TaskFailed(RuntimeError):
    """Local training diverged; the engine treats it like an interrupted task."""


@dataclass(frozen=True)
class Architecture:
    kind: str = "logreg"  # "logreg" or "mlp"
    n_features: int = 16
    hidden: int = 0
    activation: str = "tanh"

    def __post_init__(self):
        if self.kind not in ("logreg", "mlp"):
            raise ValueError(f"unknown architecture {self.kind!r}")
        if self.kind == "mlp" and self.hidden < 1:
            raise ValueError("mlp needs hidden >= 1")
        if self.activation not in ("tanh", "relu"):
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def n_params(self) -> int:
        d = self.n_features
        if self.kind == "logreg":
            return d + 1
        return self.hidden * d + 2 * self.hidden + 1

    @property
    def _act_code(self) -> int:
        return kernels.ACT_TANH if self.activation == "tanh" else kernels.ACT_RELU

    def init(self, rng: np.random.Generator) -> np.ndarray:
        if self.kind == "logreg":
            return np.zeros(self.n_params)
        d, h = self.n_features, self.hidden
        w = np.zeros(self.n_params)
        w[: h * d] = rng.normal(0.0, 1.0 / math.sqrt(d), h * d)
        w[h * d + h: h * d + 2 * h] = rng.normal(0.0, 1.0 / math.sqrt(h), h)
        return w

    def _split_mlp(self, w):
        d, h = self.n_features, self.hidden
        W1 = w[: h * d].reshape(h, d)
        b1 = w[h * d: h * d + h]
        w2 = w[h * d + h: h * d + 2 * h]
        return W1, b1, w2, w[-1]

    def logits(self, w: np.ndarray, X: np.ndarray) -> np.ndarray:
        if self.kind == "logreg":
            return X @ w[:-1] + w[-1]
        W1, b1, w2, b2 = self._split_mlp(w)
        a = X @ W1.T + b1
        hid = np.tanh(a) if self.activation == "tanh" else np.maximum(a, 0.0)
        return hid @ w2 + b2

    def loss_and_grad(self, w: np.ndarray, X: np.ndarray, y: np.ndarray):
        """Mean binary cross-entropy and its gradient with respect to the flat weights."""
        n = len(y)
        if self.kind == "logreg":
            z = X @ w[:-1] + w[-1]
            r = (sigmoid(z) - y) / n
            return float(np.mean(softplus(z) - y * z)), np.concatenate([X.T @ r, [r.sum()]])
        W1, b1, w2, b2 = self._split_mlp(w)
        a = X @ W1.T + b1
        if self.activation == "tanh":
            hid = np.tanh(a)
            dact = 1.0 - hid * hid
        else:
            hid = np.maximum(a, 0.0)
            dact = (a > 0).astype(np.float64)
        z = hid @ w2 + b2
        r = (sigmoid(z) - y) / n
        dh = np.outer(r, w2) * dact
        grad = np.concatenate([(dh.T @ X).ravel(), dh.sum(axis=0), hid.T @ r, [r.sum()]])
        return float(np.mean(softplus(z) - y * z)), grad

    def loss(self, w: np.ndarray, X: np.ndarray, y: np.ndarray) -> float:
        z = self.logits(w, X)
        return float(np.mean(softplus(z) - y * z))


@dataclass(frozen=True)
class HyperParams:
    local_epochs: int = 1
    batch_size: int = 16
    lr0: float = 0.1
    lr_decay_rate: float = 1.0
    lr_decay_steps: float = 1.0
    server_lr: float = 1.0

    def __post_init__(self):
        if self.local_epochs < 1:
            raise ValueError("local_epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.lr0 < 0:
            raise ValueError("lr0 must be >= 0")
        if not 0 < self.lr_decay_rate <= 1:
            raise ValueError("lr_decay_rate must be in (0, 1]")
        if self.lr_decay_steps <= 0:
            raise ValueError("lr_decay_steps must be > 0")


@dataclass
class ModelParams:
    weights: np.ndarray
    version: int = 0

    def copy(self) -> "ModelParams":
        return ModelParams(self.weights.copy(), self.version)


@dataclass
class ClientUpdate:
    client_id: int
    delta: np.ndarray
    base_version: int
    n_examples: int
    duration: float = 0.0
    staleness: int = 0
    train_loss: float = field(default=float("nan"), compare=False)


def lr_at(hyper: HyperParams, round_index: float) -> float:
    """Exponential decay with a continuous exponent."""
    if round_index < 0:
        raise ValueError("round_index must be >= 0")
    return hyper.lr0 * hyper.lr_decay_rate ** (round_index / hyper.lr_decay_steps)


def local_train(arch: Architecture, params: ModelParams, X: np.ndarray, y: np.ndarray,
                hyper: HyperParams, task_seed: int, *, client_id: int = -1,
                lr: float | None = None, kernel=None) -> ClientUpdate:
    """Run E epochs of shuffled mini-batch SGD and return the weight delta.

    The learning rate defaults to the schedule evaluated at the base model
    version. ``kernel`` overrides the backend module (tests, benchmarks).
    """
    n = len(y)
    if n == 0:
        raise ValueError("empty partition")
    if params.weights.shape != (arch.n_params,):
        raise ValueError(f"weights have {params.weights.shape[0]} entries, "
                         f"architecture expects {arch.n_params}")
    if lr is None:
        lr = lr_at(hyper, params.version)
    k = kernel or kernels
    X = np.ascontiguousarray(X, dtype=np.float64)
    y = np.ascontiguousarray(y, dtype=np.float64)
    w = params.weights.copy()
    rng = np.random.default_rng(task_seed)
    total = 0.0
    for _ in range(hyper.local_epochs):
        order = rng.permutation(n).astype(np.intp)
        if arch.kind == "logreg":
            total = k.logreg_sgd_epoch(w, X, y, order, hyper.batch_size, lr)
        else:
            total = k.mlp_sgd_epoch(w, X, y, order, hyper.batch_size, lr,
                                    arch.hidden, arch._act_code)
        if not math.isfinite(total) or not np.all(np.isfinite(w)):
            raise TaskFailed(f"non-finite loss for client {client_id}")
    return ClientUpdate(client_id=client_id, delta=w - params.weights,
                        base_version=params.version, n_examples=n,
                        train_loss=total / n)


def update_size_bytes(n_params: int, encoding: str = "float32",
                      header: int = UPDATE_HEADER_BYTES) -> int:
    """Serialized size M of one update: payload plus fixed framing."""
    if encoding not in BYTES_PER_ELEMENT:
        raise ValueError(f"encoding must be one of {sorted(BYTES_PER_ELEMENT)}")
    return int(n_params) * BYTES_PER_ELEMENT[encoding] + header


# ---------------------------------------------------------------- metrics

def aupr(scores, labels) -> float:
    """Step-wise area under the precision-recall curve.

    Thresholds are placed between distinct score values, so tied scores enter
    the curve together: sum over tie groups of recall increase times precision.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    pos = labels > 0
    n_pos = int(pos.sum())
    if n_pos == 0:
        raise ValueError("AUPR needs at least one positive label")
    order = np.argsort(-scores, kind="stable")
    s = scores[order]
    tp = np.cumsum(pos[order])
    # last index of every tie group
    ends = np.flatnonzero(np.r_[s[1:] != s[:-1], True])
    tp_g = tp[ends].astype(np.float64)
    precision = tp_g / (ends + 1)
    recall_step = np.diff(np.r_[0.0, tp_g]) / n_pos
    return float(np.sum(recall_step * precision))


def ndcg(scores, relevance, groups, k: int) -> float:
    """Mean NDCG@k over query groups with gain 2^rel - 1.

    Items are ranked by descending score; equal scores keep input order.
    Groups whose relevances are all zero are left out of the mean.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    scores = np.asarray(scores, dtype=np.float64)
    rel = np.asarray(relevance, dtype=np.float64)
    groups = np.asarray(groups)
    discount = 1.0 / np.log2(np.arange(2, k + 2))
    vals = []
    for g in np.unique(groups):
        idx = np.flatnonzero(groups == g)
        r = rel[idx]
        if not np.any(r > 0):
            continue
        ranked = r[np.argsort(-scores[idx], kind="stable")][:k]
        ideal = np.sort(r)[::-1][:k]
        dcg = np.sum((2.0 ** ranked - 1.0) * discount[: len(ranked)])
        idcg = np.sum((2.0 ** ideal - 1.0) * discount[: len(ideal)])
        vals.append(dcg / idcg)
    if not vals:
        raise ValueError("every group has zero relevance")
    return float(np.mean(vals))


def eval_aupr(arch: Architecture, params: ModelParams, X, y) -> float:
    return aupr(arch.logits(params.weights, np.asarray(X, dtype=np.float64)), y)


def eval_ndcg(arch: Architecture, params: ModelParams, X, relevance, groups, k: int = 10) -> float:
    return ndcg(arch.logits(params.weights, np.asarray(X, dtype=np.float64)), relevance, groups, k)


def save_weights(path, params: ModelParams) -> None:
    """Flat float64 vector behind a small versioned header."""
    with open(path, "wb") as fh:
        fh.write(b"FSWT")
        fh.write(np.array([1, params.version, params.weights.size], dtype="<i8").tobytes())
        fh.write(np.ascontiguousarray(params.weights, dtype="<f8").tobytes())


def load_weights(path) -> ModelParams:
    with open(path, "rb") as fh:
        if fh.read(4) != b"FSWT":
            raise ValueError(f"{path}: not a weight file")
        fmt, version, n = np.frombuffer(fh.read(24), dtype="<i8")
        if fmt != 1:
            raise ValueError(f"{path}: unsupported weight format {fmt}")
        w = np.frombuffer(fh.read(8 * int(n)), dtype="<f8").copy()
    return ModelParams(w, int(version))
