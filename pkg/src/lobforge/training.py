"""Training loop with validation-based early stopping, plus evaluation.

Recurrent encoder-decoders are teacher-forced during training and roll out
their own predictions everywhere else, so validation loss reflects
inference behaviour. Gradients are clipped at global norm 5.0 to keep
high-variance tick windows from blowing up the recurrent models.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import metrics as mx
from .autodiff import Adam, Tensor
from .dataset import DatasetBundle, SplitData, iter_batches
from .errors import ConfigError, DivergenceError, InvariantError
from .models import Forecaster, predict_classes

CLIP_NORM = 5.0


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 32          # movement runs usually use 64
    lr: float = 1e-4
    early_stop_patience: int = 3
    seed: int = 0

    def validate(self) -> None:
        if min(self.epochs, self.batch_size, self.early_stop_patience) < 1 or self.lr <= 0:
            raise ConfigError("train config values must be positive")


class EarlyStopper:
    """Stop after `patience` epochs without strict val-loss improvement."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = np.inf
        self.best_epoch = 0
        self.stale = 0

    def update(self, epoch: int, val_loss: float) -> bool:
        if val_loss < self.best:
            self.best = val_loss
            self.best_epoch = epoch
            self.stale = 0
            return False
        self.stale += 1
        return self.stale >= self.patience


@dataclass
class TrainResult:
    train_losses: list[float] = field(default_factory=list)
    val_losses: list[float] = field(default_factory=list)
    best_epoch: int = 0
    stopped_epoch: int = 0


def _uses_teacher(model: Forecaster) -> bool:
    return model.cfg.kind in ("seq2seq", "attention") and model.cfg.head == "regression_seq"


def _batch_loss(model: Forecaster, x, y, ts, teacher: bool) -> ad.Tensor:
    out = model.forward(Tensor(x), ts, teacher=y if teacher else None)
    if model.cfg.head == "movement":
        return ad.cross_entropy(out, y)
    return ad.mse_loss(out, y)


def dataset_loss(model: Forecaster, split: SplitData, batch_size: int) -> float:
    """Mean per-sample loss in inference conditions (no teacher forcing)."""
    total = 0.0
    count = 0
    with ad.no_grad():
        for x, y, ts in iter_batches(split, batch_size):
            loss = _batch_loss(model, x, y, ts, teacher=False)
            total += float(loss.data) * len(x)
            count += len(x)
    return total / count


def train(model: Forecaster, bundle: DatasetBundle, cfg: TrainConfig) -> TrainResult:
    """Adam training with per-epoch validation and best-weights restore."""
    cfg.validate()
    if len(bundle.train) == 0 or len(bundle.val) == 0:
        raise ConfigError("train and validation splits must be non-empty")
    params = model.parameters()
    opt = Adam(params, lr=cfg.lr)
    teacher = _uses_teacher(model)
    stopper = EarlyStopper(cfg.early_stop_patience)
    result = TrainResult()
    best_state = {k: p.data.copy() for k, p in params.items()}
    for epoch in range(1, cfg.epochs + 1):
        total = 0.0
        count = 0
        for x, y, ts in iter_batches(bundle.train, cfg.batch_size, seed=cfg.seed, epoch=epoch):
            opt.zero_grad()
            try:
                loss = _batch_loss(model, x, y, ts, teacher=teacher)
            except InvariantError as exc:
                raise DivergenceError(f"epoch {epoch}: forward diverged: {exc}") from exc
            loss_val = float(loss.data)
            if not np.isfinite(loss_val):
                raise DivergenceError(f"epoch {epoch}: non-finite training loss")
            loss.backward()
            ad.clip_grad_norm(params, CLIP_NORM)
            opt.step()
            total += loss_val * len(x)
            count += len(x)
        train_loss = total / count
        val_loss = dataset_loss(model, bundle.val, cfg.batch_size)
        result.train_losses.append(train_loss)
        result.val_losses.append(val_loss)
        result.stopped_epoch = epoch
        if val_loss < stopper.best:
            best_state = {k: p.data.copy() for k, p in params.items()}
        if stopper.update(epoch, val_loss):
            break
    for k, p in params.items():
        p.data[...] = best_state[k]
    result.best_epoch = stopper.best_epoch
    return result


def predict(model: Forecaster, split: SplitData, batch_size: int = 256) -> np.ndarray:
    """(n, k) regression predictions or (n,) class predictions."""
    outs = []
    with ad.no_grad():
        for x, _, ts in iter_batches(split, batch_size):
            out = model.forward(Tensor(x), ts)
            outs.append(out.data)
    stacked = np.concatenate(outs, axis=0)
    if model.cfg.head == "movement":
        return predict_classes(stacked)
    return stacked


def evaluation_report(model: Forecaster, bundle: DatasetBundle,
                      split_name: str = "test") -> dict:
    """Metric document for one split; regression metrics are computed on the
    normalized target scale (R2 is unaffected by the affine scaling)."""
    split = {"train": bundle.train, "val": bundle.val, "test": bundle.test}[split_name]
    preds = predict(model, split)
    doc: dict = {"task": bundle.cfg.task, "horizon_k": bundle.cfg.k,
                 "split": split_name, "n_samples": len(split)}
    if model.cfg.head == "movement":
        report = mx.classification_report(preds, split.y)
        doc["classification"] = report.to_dict()
    else:
        per_step_r2 = []
        for step in range(bundle.cfg.k):
            truth = split.y[:, step]
            if truth.std() == 0:
                per_step_r2.append(None)
            else:
                per_step_r2.append(mx.r2_oos(preds[:, step], truth))
        doc["regression"] = {
            "mse": mx.mse(preds, split.y),
            "mae": mx.mae(preds, split.y),
            "r2_oos": mx.r2_oos(preds, split.y),
            "r2_per_step": per_step_r2,
        }
    return doc
