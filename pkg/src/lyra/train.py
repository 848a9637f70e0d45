"""Optimisation and evaluation: AdamW with per-parameter overrides, losses,
regression/classification metrics and a seeded mini-batch training loop."""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.stats import rankdata

from .model import LyraModel, forward
from .numerics import ConfigError, Parameter, Rng, Tensor, _node, as_tensor, backward, no_grad, square

logger = logging.getLogger(__name__)


class NumericalAbort(RuntimeError):
    pass


class UndefinedMetricError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Optimiser
# ---------------------------------------------------------------------------


class AdamW:
    """Adam with decoupled weight decay.

    A parameter's ``lr_override`` caps its learning rate (effective rate is
    ``min(override, lr)``); ``weight_decay_override`` replaces the decay.
    """

    def __init__(self, params: list[Parameter], lr: float = 1e-3, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.01):
        if lr < 0 or weight_decay < 0:
            raise ConfigError("lr and weight_decay must be non-negative")
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> None:
        for p in self.params:
            if not np.all(np.isfinite(p.grad)):
                raise NumericalAbort(f"non-finite gradient in parameter {p.name or '?'} "
                                     f"(shape {p.shape}) at step {self.t + 1}")
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            lr = self.lr if p.lr_override is None else min(p.lr_override, self.lr)
            wd = self.weight_decay if p.weight_decay_override is None else p.weight_decay_override
            g = p.grad
            if wd:
                p.data *= 1.0 - lr * wd
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {**{f"m.{i}": m for i, m in enumerate(self.m)},
                **{f"v.{i}": v for i, v in enumerate(self.v)}}


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


def mse_loss(pred, target) -> Tensor:
    pred = as_tensor(pred)
    target = np.asarray(target, dtype=pred.dtype)
    if pred.shape != target.shape:
        raise ValueError(f"mse_loss: pred {pred.shape} vs target {target.shape}")
    return square(pred - target).mean()


def cross_entropy_loss(logits, labels) -> Tensor:
    """Mean of -log softmax(logits)[label] over all leading positions."""
    logits = as_tensor(logits)
    labels = np.asarray(labels)
    C = logits.shape[-1]
    if labels.shape != logits.shape[:-1]:
        raise ValueError(f"cross_entropy_loss: labels {labels.shape} vs logits {logits.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= C):
        raise ValueError(f"class label out of range [0, {C})")
    z = logits.data.reshape(-1, C)
    y = labels.reshape(-1).astype(np.int64)
    zmax = z.max(axis=1, keepdims=True)
    lse = zmax[:, 0] + np.log(np.exp(z - zmax).sum(axis=1))
    n = len(y)
    loss = np.mean(lse - z[np.arange(n), y])

    def bw(g):
        p = np.exp(z - lse[:, None])
        p[np.arange(n), y] -= 1.0
        return ((g / n) * p.reshape(logits.shape),)

    return _node(np.asarray(loss, dtype=logits.dtype), (logits,), bw, "cross_entropy")


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


def r2(pred, target) -> float:
    pred = np.asarray(pred, dtype=np.float64).ravel()
    target = np.asarray(target, dtype=np.float64).ravel()
    if pred.shape != target.shape or pred.size < 2:
        raise UndefinedMetricError("r2 needs two equal-length arrays with n >= 2")
    ss_tot = np.sum((target - target.mean()) ** 2)
    if ss_tot == 0:
        raise UndefinedMetricError("r2 undefined: target has zero variance")
    return float(1.0 - np.sum((target - pred) ** 2) / ss_tot)


def spearman(pred, target) -> float:
    """Pearson correlation of average ranks."""
    pred = np.asarray(pred, dtype=np.float64).ravel()
    target = np.asarray(target, dtype=np.float64).ravel()
    if pred.shape != target.shape or pred.size < 2:
        raise UndefinedMetricError("spearman needs two equal-length arrays with n >= 2")
    a, b = rankdata(pred), rankdata(target)
    a -= a.mean()
    b -= b.mean()
    denom = math.sqrt(float(np.sum(a * a) * np.sum(b * b)))
    if denom == 0:
        raise UndefinedMetricError("spearman undefined: constant input")
    return float(np.clip(np.sum(a * b) / denom, -1.0, 1.0))


def accuracy(pred_labels, labels) -> float:
    pred_labels, labels = np.asarray(pred_labels), np.asarray(labels)
    if pred_labels.shape != labels.shape or labels.size == 0:
        raise UndefinedMetricError("accuracy needs two equal-shape non-empty arrays")
    return float(np.mean(pred_labels == labels))


def r2_by_order(pred, target, orders) -> dict[int, float]:
    """R^2 within each order bucket; buckets with < 2 samples or constant
    targets are left out rather than reported as zero."""
    pred, target, orders = (np.asarray(a).ravel() for a in (pred, target, orders))
    out = {}
    for k in np.unique(orders):
        sel = orders == k
        try:
            out[int(k)] = r2(pred[sel], target[sel])
        except UndefinedMetricError:
            continue
    return out


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


@dataclass
class TrainConfig:
    epochs: int = 100
    steps: int | None = None  # when set, run this many optimiser steps instead of epochs
    batch_size: int = 32
    seed: int = 0
    loss: str = "mse"  # "mse" or "cross_entropy"
    n_classes: int | None = None  # cross-entropy: logits are reshaped to (B, -1, n_classes)
    eval_every: int = 1  # in epochs, or in steps when ``steps`` is set
    lr: float = 1e-3
    weight_decay: float = 0.01

    def validate(self) -> None:
        if self.loss not in ("mse", "cross_entropy"):
            raise ConfigError(f"loss must be 'mse' or 'cross_entropy', got {self.loss!r}")
        for name in ("epochs", "batch_size", "eval_every"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.steps is not None and self.steps < 1:
            raise ConfigError(f"steps must be >= 1, got {self.steps}")
        if self.lr < 0 or self.weight_decay < 0:
            raise ConfigError("lr and weight_decay must be non-negative")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown train config field(s): {sorted(unknown)}")
        cfg = cls(**d)
        cfg.validate()
        return cfg


@dataclass
class TrainResult:
    history: list[dict] = field(default_factory=list)
    best_state: dict[str, np.ndarray] | None = None
    best_epoch: int | None = None
    best_loss: float = math.inf
    final_state: dict[str, np.ndarray] | None = None


def _batch_loss(model: LyraModel, x, y, cfg: TrainConfig, rng: Rng | None, training: bool):
    out = forward(model, x, rng, training)
    if cfg.loss == "mse":
        return mse_loss(out, y.reshape(out.shape)), out
    n_classes = cfg.n_classes or out.shape[-1]
    logits = out.reshape(out.shape[0], -1, n_classes)
    return cross_entropy_loss(logits, y.reshape(logits.shape[:2])), out


def predict(model: LyraModel, inputs: np.ndarray, batch_size: int = 256) -> np.ndarray:
    outs = []
    inputs = np.asarray(inputs).astype(model.dtype, copy=False)
    with no_grad():
        for i in range(0, len(inputs), batch_size):
            outs.append(forward(model, inputs[i:i + batch_size]).data)
    return np.concatenate(outs, axis=0)


MetricsFn = Callable[[np.ndarray, np.ndarray], dict]


def evaluate(model: LyraModel, inputs: np.ndarray, labels: np.ndarray, cfg: TrainConfig,
             batch_size: int = 256, metrics_fn: MetricsFn | None = None) -> dict[str, float]:
    """Loss plus the loss family's default metrics; ``metrics_fn(pred, labels)``
    may add task-specific columns."""
    pred = predict(model, inputs, batch_size)
    row: dict[str, float] = {}
    if cfg.loss == "mse":
        y = labels.reshape(pred.shape).astype(np.float64)
        row["loss"] = float(np.mean((pred - y) ** 2))
        for name, fn in (("r2", r2), ("spearman", spearman)):
            try:
                row[name] = fn(pred, y)
            except UndefinedMetricError:
                row[name] = float("nan")
    else:
        k = cfg.n_classes or pred.shape[-1]
        logits = pred.reshape(pred.shape[0], -1, k)
        y = labels.reshape(logits.shape[:2])
        row["loss"] = float(cross_entropy_loss(Tensor(logits), y).data)
        row["accuracy"] = accuracy(logits.argmax(-1), y)
    if metrics_fn is not None:
        row.update(metrics_fn(pred, labels))
    return row


def train_loop(model: LyraModel, dataset, cfg: TrainConfig, optimizer: AdamW | None = None,
               log_every: int = 0, metrics_fn: MetricsFn | None = None) -> TrainResult:
    """Mini-batch training on ``dataset.split == "train"`` rows.

    Evaluates on the "val" split when present, else "test". The best state is
    chosen by the evaluation loss; the final state is returned as well.
    """
    cfg.validate()
    x_tr, y_tr = dataset.subset("train")
    x_tr = x_tr.astype(model.dtype, copy=False)
    if len(x_tr) == 0:
        raise ConfigError("training split is empty")
    eval_split = "val" if np.any(dataset.split == "val") else "test"
    x_ev, y_ev = dataset.subset(eval_split)

    if optimizer is None:
        optimizer = AdamW(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    shuffle_rng = Rng(cfg.seed)
    drop_rng = Rng(cfg.seed).spawn(1)
    result = TrainResult()
    n = len(x_tr)
    bs = min(cfg.batch_size, n)
    steps_per_epoch = -(-n // bs)
    total_steps = cfg.steps if cfg.steps is not None else cfg.epochs * steps_per_epoch
    # with a step budget, rows are emitted every eval_every steps; "epoch" is
    # still the number of (possibly partial) passes over the training split
    period = cfg.eval_every if cfg.steps is not None else cfg.eval_every * steps_per_epoch

    step, running, count, epoch = 0, 0.0, 0, 0
    order = shuffle_rng.permutation(n)
    cursor = 0
    while step < total_steps:
        if cursor >= n:
            order, cursor = shuffle_rng.permutation(n), 0
        idx = order[cursor:cursor + bs]
        cursor += bs
        optimizer.zero_grad()
        loss, _ = _batch_loss(model, x_tr[idx], y_tr[idx], cfg, drop_rng, True)
        lv = float(loss.data)
        if not math.isfinite(lv):
            raise NumericalAbort(f"non-finite training loss at step {step + 1}")
        backward(loss)
        optimizer.step()
        step += 1
        running += lv * len(idx)
        count += len(idx)
        if log_every and step % log_every == 0:
            logger.info("step %d loss %.6g", step, running / count)
        if step % period == 0 or step == total_steps:
            epoch = -(-step // steps_per_epoch)
            result.history.append({"epoch": epoch, "step": step, "split": "train",
                                   "loss": running / count})
            running, count = 0.0, 0
            if len(x_ev):
                row = evaluate(model, x_ev, y_ev, cfg, metrics_fn=metrics_fn)
                result.history.append({"epoch": epoch, "step": step, "split": eval_split, **row})
                if row["loss"] < result.best_loss:
                    result.best_loss = row["loss"]
                    result.best_epoch = epoch
                    result.best_state = model.state_dict()
    result.final_state = model.state_dict()
    if result.best_state is None:
        result.best_state, result.best_epoch = result.final_state, epoch
    return result
