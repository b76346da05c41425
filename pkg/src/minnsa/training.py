"""Loss, Adam, the epoch loop with best-epoch snapshotting, and prediction."""

import csv
import logging
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .bagdata import BagBatch, pad_and_mask
from .metrics import auc
from .network import backward, forward, sigmoid

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    batch_size: int = 32
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    selection_metric: str = "val_auc"
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")
        if self.batch_size < 2:
            raise ValueError("batch_size must be at least 2 (batch normalization)")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
        if self.selection_metric not in ("val_auc", "train_loss"):
            raise ValueError(f"unknown selection_metric {self.selection_metric!r}")


@dataclass
class TrainHistory:
    train_loss: list = field(default_factory=list)
    metric: list = field(default_factory=list)
    metric_name: str = "val_auc"
    best_epoch: int = -1

    @property
    def best_metric(self):
        return self.metric[self.best_epoch]

    def to_csv(self, sink):
        rows = [["epoch", "train_loss", self.metric_name]]
        rows += [[i, repr(float(l)), repr(float(m))] for i, (l, m) in enumerate(zip(self.train_loss, self.metric))]
        if hasattr(sink, "write"):
            csv.writer(sink, lineterminator="\n").writerows(rows)
        else:
            with open(sink, "w", newline="", encoding="utf-8") as fh:
                csv.writer(fh, lineterminator="\n").writerows(rows)


def bce_loss(logits, labels):
    """Mean binary cross-entropy on logits, and its gradient."""
    logits = np.asarray(logits, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if logits.shape != y.shape:
        raise ValueError(f"logits {logits.shape} and labels {y.shape} differ in shape")
    # softplus(l) - y*l, split so that max(l, 0) - y*l cancels exactly
    loss = np.maximum(logits, 0.0) - y * logits + np.log1p(np.exp(-np.abs(logits)))
    prob = sigmoid(logits)
    n = logits.size
    return float(loss.mean()), (prob - y) / n


class Adam:
    """Adaptive-moment optimizer with bias correction over a dict of arrays."""

    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {}
        self.v = {}
        self.t = 0

    def step(self, params, grads):
        for name, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for name, g in grads.items():
            m = self.m.get(name, 0.0)
            v = self.v.get(name, 0.0)
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            self.m[name], self.v[name] = m, v
            m_hat = m / (1 - b1 ** self.t)
            v_hat = v / (1 - b2 ** self.t)
            params[name] = np.asarray(params[name] - self.lr * m_hat / (np.sqrt(v_hat) + self.eps))
        return params


def optimizer_step(model, grads, optimizer):
    optimizer.step(model.params, grads)
    model.version += 1


def _as_batch(ds, m_star):
    if isinstance(ds, BagBatch):
        if ds.m_star != m_star:
            raise ValueError(f"batch padded to {ds.m_star}, model expects m_star={m_star}")
        return ds
    return pad_and_mask(ds, m_star)


class Prediction(NamedTuple):
    probabilities: np.ndarray  # (n,)
    attention: np.ndarray  # (n, m_star)
    features: np.ndarray  # (n, p) pooled, before batch norm


def predict(model, ds, chunk=512):
    """Eval-mode forward over every bag of ``ds``."""
    batch = _as_batch(ds, model.config.m_star)
    if batch.data.shape[2] != model.config.p:
        raise ValueError(f"dataset dimension {batch.data.shape[2]} does not match model p={model.config.p}")
    probs, attn, feats = [], [], []
    for start in range(0, len(batch), chunk):
        tr = forward(model, batch.take(np.arange(start, min(start + chunk, len(batch)))), "eval")
        probs.append(tr.probabilities)
        attn.append(tr.attention)
        feats.append(tr.pooled_features)
    return Prediction(np.concatenate(probs), np.concatenate(attn), np.concatenate(feats))


def _minibatches(n, batch_size, rng):
    order = rng.permutation(n)
    batches = [order[i:i + batch_size] for i in range(0, n, batch_size)]
    # batch norm cannot train on a single bag; it is picked up next epoch
    if len(batches) > 1 and len(batches[-1]) < 2:
        batches.pop()
    return batches


def train(model, train_ds, val_ds=None, cfg=TrainConfig()):
    """Train ``model`` and return ``(best_model, history)``.

    The returned model is a snapshot (parameters and running statistics)
    taken at the epoch with the best selection metric; ties go to the
    earliest epoch. ``model`` itself is left at its final-epoch state.
    """
    m_star = model.config.m_star
    if len(train_ds) == 0:
        raise ValueError("empty training set")
    # training never reads attention, so the padding tail can go
    train_batch = _as_batch(train_ds, m_star).trimmed()
    n = len(train_batch)
    if n < 2:
        raise ValueError("training needs at least 2 bags (batch normalization)")
    if cfg.selection_metric == "val_auc":
        if val_ds is None:
            raise ValueError("selection_metric='val_auc' needs a validation set")
        val_batch = _as_batch(val_ds, m_star)
        if len(np.unique(val_batch.labels)) < 2:
            raise ValueError("validation set must contain both classes")
    if cfg.learning_rate == 0:
        logger.warning("learning_rate is 0: parameters will not change")

    rng = np.random.default_rng([cfg.seed, 3])
    opt = Adam(cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.eps)
    history = TrainHistory(metric_name=cfg.selection_metric)
    best, best_value = None, None
    maximize = cfg.selection_metric == "val_auc"

    for epoch in range(cfg.epochs):
        total, count = 0.0, 0
        for idx in _minibatches(n, cfg.batch_size, rng):
            mb = train_batch.take(idx)
            trace = forward(model, mb, "train", rng)
            loss, dlogits = bce_loss(trace.logits, mb.labels)
            grads = backward(model, trace, dlogits)
            optimizer_step(model, grads, opt)
            total += loss * len(idx)
            count += len(idx)
        epoch_loss = total / count
        history.train_loss.append(epoch_loss)
        if maximize:
            probs = predict(model, val_batch).probabilities
            value = auc(probs, val_batch.labels)
            better = best_value is None or value > best_value
        else:
            value = epoch_loss
            better = best_value is None or value < best_value
        history.metric.append(value)
        if better:
            best_value = value
            best = model.copy()
            history.best_epoch = epoch
        logger.debug("epoch %d loss %.5f %s %.5f", epoch, epoch_loss, cfg.selection_metric, value)
    return best, history
