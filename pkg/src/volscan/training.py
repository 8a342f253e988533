"""Mini-batch training with Adam, gradient clipping and early stopping on
validation AUC."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .checkpoint import checkpoint_bytes, load_into, parse_checkpoint
from .errors import ConfigError, ShapeError, SplitError
from .fileio import csv_text, fmt
from .metrics import auc
from .models import ModelConfig, build_model
from .rand import rng_for

log = logging.getLogger("volscan.training")

HISTORY_HEADER = ("epoch", "train_loss", "val_auc", "elapsed_s")


@dataclass
class TrainConfig:
    kind: str
    epochs: int = 50
    batch_size: int = 8
    lr: float = 1e-3
    patience: int = 5
    min_delta: float = 1e-4
    seed: int = 0
    clip_norm: float | None = 5.0
    filters: tuple = ()
    record_time: bool = False

    def validate(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch size must be >= 1")
        if self.patience < 1:
            raise ConfigError("patience must be >= 1")
        if self.lr < 0:
            raise ConfigError("learning rate must be >= 0")
        if self.clip_norm is not None and self.clip_norm <= 0:
            raise ConfigError("clip norm must be positive (or disabled)")
        return self


class Adam:
    """Bias-corrected first/second-moment update."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p.value) for p in self.params]
        self.v = [np.zeros_like(p.value) for p in self.params]
        self.step_count = 0

    def step(self):
        self.step_count += 1
        t = self.step_count
        c1 = 1 - self.beta1**t
        c2 = 1 - self.beta2**t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            step = self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.value -= step.astype(p.value.dtype, copy=False)


def clip_gradients(params, max_norm):
    """Scale all gradients so their global L2 norm is at most ``max_norm``.
    Returns the norm before clipping."""
    norm = float(np.sqrt(sum(float(np.sum(np.square(p.grad, dtype=np.float64))) for p in params)))
    if max_norm is not None and norm > max_norm:
        scale = max_norm / norm
        for p in params:
            p.grad *= p.grad.dtype.type(scale)
    return norm


def _check_set(name, x, y):
    y = np.asarray(y)
    if len(x) == 0:
        raise SplitError(f"{name} set is empty")
    if len(x) != len(y):
        raise ShapeError(f"{name} set has {len(x)} volumes but {len(y)} labels")
    if len(np.unique(y)) < 2:
        raise SplitError(f"{name} set has a single class ({int(y[0])}); training needs both")


@dataclass
class TrainResult:
    model: object
    checkpoint: bytes
    history: list = field(default_factory=list)
    best_epoch: int = 0
    best_auc: float = float("nan")
    steps: int = 0


def evaluate(model, volumes):
    """Per-volume eval-mode probabilities (independent of order and batching)."""
    if len(volumes) == 0:
        raise ShapeError("cannot evaluate an empty dataset")
    return model.predict(np.asarray(volumes, dtype=np.float32))


def train(config: TrainConfig, train_set, val_set, model=None, on_epoch=None) -> TrainResult:
    """Train and keep the checkpoint with the best validation AUC.

    Patience counts epochs without an AUC gain above ``min_delta``; the
    kept checkpoint is the highest-AUC epoch seen (earliest on ties).
    """
    config.validate()
    x_tr, y_tr = train_set
    x_val, y_val = val_set
    _check_set("training", x_tr, y_tr)
    _check_set("validation", x_val, y_val)
    x_tr = np.asarray(x_tr, dtype=np.float32)
    y_tr = np.asarray(y_tr, dtype=np.float64)
    if model is None:
        model = build_model(ModelConfig(config.kind, x_tr.shape[1:], tuple(config.filters), config.seed))
    opt = Adam(model.params(), lr=config.lr)
    shuffle = rng_for(config.seed, "shuffle")
    result = TrainResult(model, b"")
    best_for_patience = -np.inf
    stale = 0
    start = time.perf_counter()
    n = len(x_tr)
    for epoch in range(1, config.epochs + 1):
        order = shuffle.permutation(n)
        total = 0.0
        for a in range(0, n, config.batch_size):
            idx = order[a:a + config.batch_size]
            model.zero_grad()
            loss = model.loss_and_grad(x_tr[idx], y_tr[idx], train=True)
            clip_gradients(model.params(), config.clip_norm)
            opt.step()
            total += loss * len(idx)
            result.steps += 1
        train_loss = total / n
        val_auc = auc(evaluate(model, x_val), y_val)
        elapsed = time.perf_counter() - start
        result.history.append((epoch, train_loss, val_auc, elapsed))
        log.info("epoch %d train_loss %.5f val_auc %.4f (%.1fs)", epoch, train_loss, val_auc, elapsed)
        if val_auc > result.best_auc or not result.checkpoint:
            result.best_auc, result.best_epoch = val_auc, epoch
            result.checkpoint = checkpoint_bytes(model)
        if val_auc > best_for_patience + config.min_delta:
            best_for_patience = val_auc
            stale = 0
        else:
            stale += 1
        if on_epoch is not None:
            on_epoch(epoch, train_loss, val_auc)
        if stale >= config.patience:
            log.info("early stop after epoch %d (best epoch %d, AUC %.4f)", epoch, result.best_epoch, result.best_auc)
            break
    _, params, stats = parse_checkpoint(result.checkpoint)
    result.model = load_into(model, params, stats)
    return result


def history_csv(history, record_time=False) -> str:
    """History as CSV. ``elapsed_s`` is left empty unless ``record_time``:
    wall-clock values would break bitwise-reproducible outputs."""
    rows = [(e, fmt(float(loss)), fmt(float(a)), f"{t:.3f}" if record_time else "") for e, loss, a, t in history]
    return csv_text(HISTORY_HEADER, rows)
