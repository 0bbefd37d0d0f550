"""Mini-batch training, prediction and trunk-level cross-validation."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from treeradar.mlff import layers as L
from treeradar.mlff.data import Sample, check_leakage, kfold_split, labels_of, stack_inputs
from treeradar.mlff.metrics import ConfusionMatrix, metrics
from treeradar.mlff.net import MLFFNet, NetConfig, NonFiniteActivationError, is_buffer
from treeradar.mlff.optim import AdamState, adam_step

THRESHOLD = 0.5


class DivergenceError(FloatingPointError):
    def __init__(self, epoch: int, loss: float):
        super().__init__(f"non-finite training loss {loss} at epoch {epoch}")
        self.epoch = epoch


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    lr: float = 5e-4
    batch: int = 64
    seed: int = 0


@dataclass
class TrainResult:
    params: dict
    history: list = field(default_factory=list)
    best_epoch: int = 0
    best_val_acc: Optional[float] = None


def batches(n: int, size: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Shuffled index batches; a trailing batch of one joins the previous one
    because train-mode batch norm needs two or more samples."""
    order = rng.permutation(n)
    out = [order[i:i + size] for i in range(0, n, size)]
    if len(out) > 1 and len(out[-1]) == 1:
        tail = out.pop()
        out[-1] = np.concatenate([out[-1], tail])
    return out


def predict_proba(net: MLFFNet, params: dict, x: np.ndarray, chunk: int = 64) -> np.ndarray:
    out = [net.predict_proba(params, x[i:i + chunk]) for i in range(0, len(x), chunk)]
    return np.concatenate(out) if out else np.zeros(0)


def predict(net: MLFFNet, params: dict, x: np.ndarray):
    """Labels and probabilities; p >= 0.5 is defective, ties included."""
    x = np.asarray(x, dtype=float)
    single = x.ndim == 3
    p = predict_proba(net, params, x[None] if single else x)
    labels = (p >= THRESHOLD).astype(int)
    return (int(labels[0]), float(p[0])) if single else (labels, p)


def accuracy(net, params, x, y) -> float:
    labels, _ = predict(net, params, x)
    return float(np.mean(labels == y))


def train(net: MLFFNet, train_x, train_y, val_x=None, val_y=None,
          config: TrainConfig = TrainConfig(), params: Optional[dict] = None,
          log=None) -> TrainResult:
    """Adam on mean binary cross-entropy.

    Keeps the parameters of the epoch with the best validation accuracy
    (training accuracy when no validation set is given); the earliest epoch
    wins ties.  ``log``, if callable, receives each history entry.
    """
    train_x = np.asarray(train_x, dtype=float)
    train_y = np.asarray(train_y, dtype=float)
    if len(train_x) == 0:
        raise ValueError("empty training set")
    if len(train_x) < 2:
        raise ValueError("train-mode batch norm needs at least two samples")
    params = net.init(config.seed) if params is None else dict(params)
    rng = np.random.default_rng(config.seed)
    state = AdamState()
    has_val = val_x is not None and len(val_x) > 0
    result = TrainResult(params=params)
    best = -1.0
    for epoch in range(1, config.epochs + 1):
        losses, weights = [], []
        for idx in batches(len(train_x), config.batch, rng):
            updates: dict = {}
            try:
                z, cache = net.forward(params, train_x[idx], train=True, updates=updates)
            except NonFiniteActivationError as exc:
                raise DivergenceError(epoch, float("nan")) from exc
            loss, dz = L.bce_with_logits(z, train_y[idx])
            if not np.isfinite(loss):
                raise DivergenceError(epoch, loss)
            grads = net.backward(params, cache, dz)
            params, state = adam_step(params, grads, state, config.lr)
            params.update(updates)
            losses.append(loss)
            weights.append(len(idx))
        epoch_loss = float(np.average(losses, weights=weights))
        if not np.isfinite(epoch_loss):
            raise DivergenceError(epoch, epoch_loss)
        if has_val:
            score = accuracy(net, params, val_x, np.asarray(val_y))
        else:
            score = accuracy(net, params, train_x, train_y.astype(int))
        entry = {"epoch": epoch, "train_loss": epoch_loss,
                 "val_acc": score if has_val else None}
        if not has_val:
            entry["train_acc"] = score
        result.history.append(entry)
        if log is not None:
            log(entry)
        if score > best:
            best = score
            result.params = dict(params)
            result.best_epoch = epoch
            result.best_val_acc = score if has_val else None
    return result


@dataclass
class FoldReport:
    fold: int
    train_trunks: list
    val_trunks: list
    cm: ConfusionMatrix
    best_epoch: int
    history: list

    def to_dict(self) -> dict:
        return {"fold": self.fold, "train_trunks": self.train_trunks,
                "val_trunks": self.val_trunks, "confusion": [list(r) for r in self.cm.counts],
                "metrics": metrics(self.cm).to_dict(), "best_epoch": self.best_epoch}


def cross_validate(samples: Sequence[Sample], net_config: NetConfig, k: int = 5,
                   train_config: TrainConfig = TrainConfig(), seed: int = 0, log=None):
    """Trunk-level k-fold protocol.

    Returns ``(fold_reports, pooled_confusion, fold_params)``.
    """
    folds = kfold_split(samples, k, seed)
    x = stack_inputs(samples)
    y = labels_of(samples)
    net = MLFFNet(net_config)
    reports, pooled, fold_params = [], ConfusionMatrix(((0, 0), (0, 0))), []
    for f, val_idx in enumerate(folds):
        train_idx = sorted(i for g, fold in enumerate(folds) if g != f for i in fold)
        check_leakage(samples, train_idx, val_idx)
        res = train(net, x[train_idx], y[train_idx], x[val_idx], y[val_idx], train_config,
                    log=None if log is None else (lambda e, f=f: log(f, e)))
        pred, _ = predict(net, res.params, x[val_idx])
        cm = ConfusionMatrix.from_labels(y[val_idx], pred)
        pooled = pooled + cm
        reports.append(FoldReport(f, sorted({samples[i].trunk_id for i in train_idx}),
                                  sorted({samples[i].trunk_id for i in val_idx}),
                                  cm, res.best_epoch, res.history))
        fold_params.append(res.params)
    return reports, pooled, fold_params


def trainable_count(params: dict) -> int:
    return int(sum(v.size for k, v in params.items() if not is_buffer(k)))
