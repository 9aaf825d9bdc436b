"""The black-box ranking network and its hand-written backward pass.

score(u, v) = sigmoid(W3 . relu(W2 . relu(W1 . [u; v] + b1) + b2) + b3)

Everything is float64 and batched over rows.  The ReLU derivative at 0 is
taken as 0.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import DimensionMismatch, DivergenceError, InputError

log = logging.getLogger(__name__)

MODEL_MAGIC = b"CFREX-MODEL 1\n"
PARAM_NAMES = ("W1", "b1", "W2", "b2", "W3", "b3")


def sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


@dataclass
class ScorerModel:
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    W3: np.ndarray
    b3: np.ndarray
    d_user: int
    d_item: int

    @classmethod
    def init(cls, d_user: int, d_item: int, hidden: Sequence[int] = (512, 256), seed: int = 0) -> "ScorerModel":
        """Symmetric uniform init with bound sqrt(6 / (fan_in + fan_out)); zero biases."""
        rng = np.random.default_rng(seed)
        h1, h2 = hidden
        d_in = d_user + d_item

        def glorot(fan_out, fan_in):
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            return rng.uniform(-bound, bound, size=(fan_out, fan_in))

        return cls(glorot(h1, d_in), np.zeros(h1), glorot(h2, h1), np.zeros(h2), glorot(1, h2), np.zeros(1),
                   d_user, d_item)

    @classmethod
    def zeros(cls, d_user: int, d_item: int, hidden: Sequence[int] = (512, 256)) -> "ScorerModel":
        h1, h2 = hidden
        d_in = d_user + d_item
        return cls(np.zeros((h1, d_in)), np.zeros(h1), np.zeros((h2, h1)), np.zeros(h2), np.zeros((1, h2)),
                   np.zeros(1), d_user, d_item)

    @property
    def d_in(self) -> int:
        return self.d_user + self.d_item

    @property
    def hidden(self) -> tuple[int, int]:
        return self.W1.shape[0], self.W2.shape[0]

    def params(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in PARAM_NAMES}

    def copy(self) -> "ScorerModel":
        return ScorerModel(*(getattr(self, n).copy() for n in PARAM_NAMES), self.d_user, self.d_item)

    def save(self, path, **meta) -> None:
        header = {
            "d_user": self.d_user,
            "d_item": self.d_item,
            "shapes": {n: list(getattr(self, n).shape) for n in PARAM_NAMES},
            "meta": meta,
        }
        with open(path, "wb") as fh:
            fh.write(MODEL_MAGIC)
            fh.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
            for n in PARAM_NAMES:
                fh.write(np.ascontiguousarray(getattr(self, n), dtype="<f8").tobytes(order="C"))

    @classmethod
    def load(cls, path) -> "ScorerModel":
        with open(path, "rb") as fh:
            if fh.readline() != MODEL_MAGIC:
                raise InputError(f"{path}: not a model file (bad magic/version)")
            header = json.loads(fh.readline())
            arrays = []
            for n in PARAM_NAMES:
                shape = tuple(header["shapes"][n])
                count = int(np.prod(shape))
                buf = fh.read(8 * count)
                if len(buf) != 8 * count:
                    raise InputError(f"{path}: truncated block {n}")
                arrays.append(np.frombuffer(buf, dtype="<f8").astype(np.float64).reshape(shape))
            if fh.read(1):
                raise InputError(f"{path}: trailing bytes")
        model = cls(*arrays, int(header["d_user"]), int(header["d_item"]))
        if model.W1.shape[1] != model.d_in:
            raise InputError(f"{path}: W1 width {model.W1.shape[1]} != d_user + d_item")
        return model

    @staticmethod
    def read_meta(path) -> dict:
        with open(path, "rb") as fh:
            fh.readline()
            return json.loads(fh.readline()).get("meta", {})


def _inputs(model: ScorerModel, users, items) -> np.ndarray:
    u = np.atleast_2d(np.asarray(users, dtype=np.float64))
    v = np.atleast_2d(np.asarray(items, dtype=np.float64))
    if u.shape[1] != model.d_user:
        raise DimensionMismatch(f"user vector width {u.shape[1]} != {model.d_user}",
                                expected=model.d_user, got=u.shape[1])
    if v.shape[1] != model.d_item:
        raise DimensionMismatch(f"item vector width {v.shape[1]} != {model.d_item}",
                                expected=model.d_item, got=v.shape[1])
    if u.shape[0] == 1 and v.shape[0] > 1:
        u = np.broadcast_to(u, (v.shape[0], u.shape[1]))
    elif v.shape[0] == 1 and u.shape[0] > 1:
        v = np.broadcast_to(v, (u.shape[0], v.shape[1]))
    elif u.shape[0] != v.shape[0]:
        raise DimensionMismatch(f"batch sizes differ: {u.shape[0]} users vs {v.shape[0]} items")
    return np.hstack([u, v])


def _forward(model: ScorerModel, x: np.ndarray):
    z1 = x @ model.W1.T + model.b1
    a1 = np.maximum(z1, 0.0)
    z2 = a1 @ model.W2.T + model.b2
    a2 = np.maximum(z2, 0.0)
    z3 = (a2 @ model.W3.T + model.b3)[:, 0]
    return z1, a1, z2, a2, z3


def score_pairs(model: ScorerModel, users, items) -> np.ndarray:
    """Scores for a batch of (user, item) rows; either side may be a single vector."""
    x = _inputs(model, users, items)
    return sigmoid(_forward(model, x)[-1])


def forward(model: ScorerModel, user, item) -> float:
    return float(score_pairs(model, user, item)[0])


def backward_params(model: ScorerModel, users, items, labels) -> tuple[float, dict[str, np.ndarray]]:
    """Mean binary cross-entropy over the batch and its exact parameter gradients."""
    x = _inputs(model, users, items)
    y = np.asarray(labels, dtype=np.float64).reshape(-1)
    if y.size != x.shape[0]:
        raise DimensionMismatch(f"{y.size} labels for {x.shape[0]} rows")
    n = x.shape[0]
    z1, a1, z2, a2, z3 = _forward(model, x)
    # BCE from logits: softplus(z) - y*z
    loss = float(np.mean(np.logaddexp(0.0, z3) - y * z3))

    dz3 = (sigmoid(z3) - y)[:, None] / n
    grads = {"W3": dz3.T @ a2, "b3": dz3.sum(axis=0)}
    dz2 = (dz3 @ model.W3) * (z2 > 0)
    grads["W2"] = dz2.T @ a1
    grads["b2"] = dz2.sum(axis=0)
    dz1 = (dz2 @ model.W2) * (z1 > 0)
    grads["W1"] = dz1.T @ x
    grads["b1"] = dz1.sum(axis=0)
    return loss, grads


def grad_input(model: ScorerModel, user, item) -> tuple[float, np.ndarray]:
    """Score and d score / d [u; v] for a single pair."""
    x = _inputs(model, user, item)
    z1, a1, z2, a2, z3 = _forward(model, x)
    s = sigmoid(z3)[0]
    dz3 = s * (1.0 - s)
    dz2 = dz3 * model.W3[0] * (z2[0] > 0)
    dz1 = (dz2 @ model.W2) * (z1[0] > 0)
    return float(s), dz1 @ model.W1


def grad_item_input(model: ScorerModel, user, item) -> np.ndarray:
    """d score / d item-vector."""
    return grad_input(model, user, item)[1][model.d_user:]


def score_and_item_grad(model: ScorerModel, user, item) -> tuple[float, np.ndarray]:
    s, g = grad_input(model, user, item)
    return s, g[model.d_user:]


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.01
    epochs: int = 20
    batch_size: int = 256
    seed: int = 0

    def __post_init__(self):
        if self.lr < 0:
            raise InputError("lr must be >= 0")
        if self.batch_size < 1 or self.epochs < 0:
            raise InputError("batch_size must be >= 1 and epochs >= 0")


def train(model: ScorerModel, users: np.ndarray, items: np.ndarray, labels: np.ndarray,
          cfg: TrainConfig = TrainConfig()) -> tuple[ScorerModel, list[float]]:
    """Plain minibatch SGD on mean BCE; returns a trained copy and per-epoch mean loss."""
    model = model.copy()
    users = np.asarray(users, dtype=np.float64)
    items = np.asarray(items, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    n = labels.size
    rng = np.random.default_rng(cfg.seed)
    trace = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            loss, grads = backward_params(model, users[idx], items[idx], labels[idx])
            if not np.isfinite(loss):
                raise DivergenceError(f"non-finite loss at epoch {epoch}, batch starting {start}")
            total += loss * idx.size
            for name, g in grads.items():
                getattr(model, name)[...] -= cfg.lr * g
        trace.append(total / max(n, 1))
        log.debug("epoch %d loss %.6f", epoch, trace[-1])
    for name in PARAM_NAMES:
        if not np.all(np.isfinite(getattr(model, name))):
            raise DivergenceError(f"parameter {name} became non-finite")
    return model, trace


@dataclass(frozen=True)
class RankedList:
    """Full ranking of a user's candidates; the first ``k`` entries are the top-K list."""

    user_id: str
    item_ids: tuple[str, ...]
    scores: tuple[float, ...]
    k: int

    @property
    def top(self) -> tuple[str, ...]:
        return self.item_ids[: self.k]

    @property
    def marginal_item(self) -> str:
        return self.item_ids[self.k]

    @property
    def marginal_score(self) -> float:
        return self.scores[self.k]

    def rank_of(self, item_id: str) -> int:
        return self.item_ids.index(item_id)


def order_by_score(item_ids: Sequence[str], scores: np.ndarray) -> np.ndarray:
    """Indices sorting by descending score, ties by ascending item id."""
    ids = np.asarray(item_ids, dtype=object)
    id_rank = np.argsort(np.argsort(ids.astype(str), kind="stable"), kind="stable")
    return np.lexsort((id_rank, -np.asarray(scores)))


def rank_topk(model: ScorerModel, user_id: str, user_vector, candidates: Mapping[str, np.ndarray], k: int) -> RankedList:
    if len(candidates) < k + 1:
        raise InputError(f"user {user_id!r}: need at least K+1={k + 1} candidates to define a marginal item, "
                         f"got {len(candidates)}")
    ids = list(candidates)
    scores = score_pairs(model, user_vector, np.array([candidates[i] for i in ids]))
    order = order_by_score(ids, scores)
    return RankedList(user_id, tuple(ids[i] for i in order), tuple(float(scores[i]) for i in order), k)


def ndcg(ranked: Mapping[str, Sequence[str]], truth: Mapping[str, set], k: int) -> float:
    """Binary-relevance NDCG@k with log2 discount, averaged over users with non-empty truth."""
    values = []
    for user, items in ranked.items():
        rel = truth.get(user, set())
        if not rel:
            continue
        dcg = sum(1.0 / np.log2(pos + 2) for pos, item in enumerate(list(items)[:k]) if item in rel)
        idcg = sum(1.0 / np.log2(pos + 2) for pos in range(min(len(rel), k)))
        values.append(dcg / idcg)
    return float(np.mean(values)) if values else 0.0
