"""Cross-entropy loss, Adam, and the epoch training loop."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from .layers import BatchNorm, softmax
from .network import Model, flatten_grads
from .tensor import Rng, ShapeError

PROB_FLOOR = 1e-7
MAX_LOSS = -math.log(PROB_FLOOR)


def one_hot(labels, classes: int, dtype=np.float32):
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((labels.size, classes), dtype=dtype)
    out[np.arange(labels.size), labels] = 1
    return out


def _check_one_hot(y):
    if not (np.isin(y, (0, 1)).all() and (y.sum(axis=1) == 1).all()):
        raise ValueError("labels must be one-hot rows")


def categorical_crossentropy(y, yhat) -> float:
    """Mean over the batch of -sum(y * log(clamp(yhat, 1e-7, 1)))."""
    y = np.asarray(y)
    yhat = np.asarray(yhat)
    if y.shape != yhat.shape:
        raise ShapeError(f"label shape {y.shape} does not match prediction shape {yhat.shape}")
    _check_one_hot(y)
    if np.abs(yhat.sum(axis=1, dtype=np.float64) - 1.0).max() > 1e-4:
        raise ValueError("predictions are not normalized probability rows")
    p = np.clip(yhat.astype(np.float64), PROB_FLOOR, 1.0)
    return float(-(y * np.log(p)).sum(axis=1).mean())


def softmax_crossentropy_grad(logits, y):
    """Gradient of the mean cross-entropy with respect to the logits."""
    if logits.shape != y.shape:
        raise ShapeError(f"logit shape {logits.shape} does not match label shape {y.shape}")
    return (softmax(logits) - y.astype(logits.dtype)) / logits.shape[0]


@dataclass
class AdamState:
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState) -> None:
    """One Adam update, in place.  ``params`` and ``grads`` map names to arrays;
    parameters without a gradient (frozen) are skipped and their moments untouched."""
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** state.t
    bc2 = 1.0 - b2 ** state.t
    for name, theta in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != theta.shape:
            raise ShapeError(f"gradient for {name} has shape {g.shape}, parameter {theta.shape}")
        if name not in state.m:
            state.m[name] = np.zeros_like(theta)
            state.v[name] = np.zeros_like(theta)
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        mhat = m / bc1
        vhat = v / bc2
        theta -= (state.learning_rate * mhat / (np.sqrt(vhat) + state.eps)).astype(theta.dtype)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_acc: float
    val_loss: float = float("nan")
    val_acc: float = float("nan")


LOG_HEADER = ("epoch", "train_loss", "train_acc", "val_loss", "val_acc")


@dataclass
class TrainLog:
    records: list = field(default_factory=list)

    def append(self, rec: EpochRecord):
        self.records.append(rec)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(LOG_HEADER)
        for r in self.records:
            w.writerow([r.epoch] + [f"{v:.6g}" for v in (r.train_loss, r.train_acc, r.val_loss, r.val_acc)])
        return buf.getvalue()


def batch_slices(n: int, batch_size: int):
    """Full batches, then the final partial batch."""
    if batch_size < 1:
        raise ValueError("batch size must be >= 1")
    return [slice(i, min(i + batch_size, n)) for i in range(0, n, batch_size)]


def predicted_labels(probs):
    # argmax returns the first maximum, i.e. the lowest class index on ties
    return np.asarray(probs).argmax(axis=1)


def _has_batchnorm(model: Model) -> bool:
    def walk(layers):
        return any(isinstance(l, BatchNorm) or walk(getattr(l, "layers", ())) for _, l in layers)
    return walk(model.layers)


def train_step(model: Model, x, y_onehot, adam: AdamState, rng: Rng):
    probs, caches = model.forward(x, train=True, rng=rng)
    loss = categorical_crossentropy(y_onehot, probs)
    # fused softmax + cross-entropy: d loss / d logits = (p - y) / N
    grad_logits = (probs - y_onehot) / x.shape[0]
    _, grads = model.backward(grad_logits, caches, from_logits=True)
    params = dict(model.trainable_tensors())
    adam_step(params, flatten_grads(grads), adam)
    return loss, probs


def train_epoch(model: Model, images, labels, batch_size: int, adam: AdamState, rng: Rng,
                epoch: int = 0) -> EpochRecord:
    """One pass over the (re-shuffled) training set.  ``images`` are float NHWC."""
    n = len(labels)
    if n == 0:
        raise ValueError("training set is empty")
    order = rng.permutation(n)
    y = one_hot(labels, model.spec.classes, model.dtype)
    total_loss = 0.0
    correct = 0
    slices = batch_slices(n, batch_size)
    if len(slices) > 1 and slices[-1].stop - slices[-1].start == 1 and _has_batchnorm(model):
        # batch statistics need two samples; fold a lone trailing sample into the previous batch
        slices[-2:] = [slice(slices[-2].start, n)]
    for sl in slices:
        idx = order[sl]
        loss, probs = train_step(model, images[idx], y[idx], adam, rng)
        total_loss += loss * len(idx)
        correct += int((predicted_labels(probs) == np.asarray(labels)[idx]).sum())
    return EpochRecord(epoch, total_loss / n, correct / n)


def evaluate(model: Model, images, labels, batch_size: int = 64):
    """Inference-mode (mean loss, accuracy)."""
    n = len(labels)
    if n == 0:
        raise ValueError("evaluation set is empty")
    probs = model.predict(images, batch_size)
    loss = categorical_crossentropy(one_hot(labels, model.spec.classes), probs)
    acc = float((predicted_labels(probs) == np.asarray(labels)).mean())
    return loss, acc


def fit(model: Model, train_images, train_labels, epochs: int, batch_size: int, adam: AdamState,
        rng: Rng, val_images=None, val_labels=None, callback=None) -> TrainLog:
    log = TrainLog()
    for epoch in range(1, epochs + 1):
        rec = train_epoch(model, train_images, train_labels, batch_size, adam, rng, epoch)
        if val_labels is not None and len(val_labels):
            rec.val_loss, rec.val_acc = evaluate(model, val_images, val_labels)
        log.append(rec)
        if callback is not None:
            callback(rec)
    return log
