"""Training loop: momentum SGD, linear LR decay, early stopping on validation.

The finetuning entry point reuses the identical loop starting from a
pretrained parameter store, with its budget capped by the pretraining
budget recorded in the weights' metadata.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..core import float_repr
from .model import ModelWeights, evaluate_pinball, loss_and_gradients_raw

MOMENTUM = 0.9
GRAD_CLIP_NORM = 1.0

# Encodes "substantially smaller budget than pretraining" as defaults.
FINETUNE_LR_DIVISOR = 10.0
FINETUNE_EPOCH_DIVISOR = 5
FINETUNE_PATIENCE = 3


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss; message carries the epoch index."""


@dataclass(frozen=True)
class TrainConfig:
    initial_lr: float
    epochs: int
    batch_size: int = 32
    early_stopping_patience: int = 5
    seed: int = 0

    def __post_init__(self):
        if not (self.initial_lr >= 0.0 and math.isfinite(self.initial_lr)):
            raise ValueError("initial_lr must be finite and >= 0")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.early_stopping_patience < 1:
            raise ValueError("early_stopping_patience must be >= 1")
        if self.epochs > 0 and self.early_stopping_patience > self.epochs:
            raise ValueError("patience cannot exceed the epoch budget")


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    lr: float


def train(
    weights: ModelWeights,
    train_set,
    val_set,
    tcfg: TrainConfig,
) -> tuple[ModelWeights, list[EpochRecord]]:
    """Gradient descent with momentum; returns the best-validation weights.

    The learning rate decays linearly from initial_lr toward zero over the
    epoch budget (epoch e runs at initial_lr * (1 - e/epochs)). Training
    stops once validation pinball has not improved for `patience` epochs.
    """
    if tcfg.epochs == 0:
        return weights, []
    if not train_set or not val_set:
        raise ValueError("train and validation sets must be nonempty")

    config = weights.config
    params = {k: v.copy() for k, v in weights.params.items()}
    velocity = {k: np.zeros_like(v) for k, v in params.items()}
    rng = np.random.default_rng(np.random.PCG64(tcfg.seed))

    history: list[EpochRecord] = []
    best_val = math.inf
    best_epoch = -1
    best_params = {k: v.copy() for k, v in params.items()}

    for epoch in range(tcfg.epochs):
        lr = tcfg.initial_lr * (1.0 - epoch / tcfg.epochs)
        order = rng.permutation(len(train_set))
        epoch_losses = []
        for lo in range(0, len(order), tcfg.batch_size):
            batch = [train_set[i] for i in order[lo : lo + tcfg.batch_size]]
            loss, grads = loss_and_gradients_raw(config, params, batch, dropout_rng=rng)
            if not math.isfinite(loss):
                raise DivergenceError(f"non-finite training loss at epoch {epoch}")
            _clip_global_norm(grads, GRAD_CLIP_NORM)
            for name in params:
                velocity[name] = MOMENTUM * velocity[name] - lr * grads[name]
                params[name] = params[name] + velocity[name]
            epoch_losses.append(loss)
        train_loss = float(np.mean(epoch_losses))
        val_loss = evaluate_pinball(config, params, val_set)
        if not math.isfinite(val_loss):
            raise DivergenceError(f"non-finite validation loss at epoch {epoch}")
        history.append(EpochRecord(epoch, train_loss, val_loss, lr))
        if val_loss < best_val:
            best_val = val_loss
            best_epoch = epoch
            best_params = {k: v.copy() for k, v in params.items()}
        elif epoch - best_epoch >= tcfg.early_stopping_patience:
            break

    meta = dict(weights.meta)
    meta.update({"train_lr": tcfg.initial_lr, "train_epochs": tcfg.epochs})
    out = ModelWeights(
        config=config,
        rng_seed=weights.rng_seed,
        params=best_params,
        meta=meta,
        version=weights.version,
    )
    return out, history


def finetune(
    global_weights: ModelWeights,
    local_train,
    local_val,
    fcfg: TrainConfig,
) -> tuple[ModelWeights, list[EpochRecord]]:
    """Same loop as train(), started from the pretrained weights.

    When the pretraining budget is recorded in the weights' metadata, the
    finetuning budget may not exceed it (reduced LR and epochs are the
    point of the finetuning stage).
    """
    pre_lr = global_weights.meta.get("train_lr")
    if pre_lr is not None and fcfg.initial_lr > pre_lr + 1e-15:
        raise ValueError(
            f"finetune lr {fcfg.initial_lr} exceeds the pretraining lr {pre_lr}"
        )
    pre_epochs = global_weights.meta.get("train_epochs")
    if pre_epochs is not None and fcfg.epochs > pre_epochs:
        raise ValueError(
            f"finetune epoch budget {fcfg.epochs} exceeds the pretraining budget {pre_epochs}"
        )
    return train(global_weights, local_train, local_val, fcfg)


def default_finetune_config(pretrain: TrainConfig, seed: int | None = None) -> TrainConfig:
    return TrainConfig(
        initial_lr=pretrain.initial_lr / FINETUNE_LR_DIVISOR,
        epochs=max(1, pretrain.epochs // FINETUNE_EPOCH_DIVISOR),
        batch_size=pretrain.batch_size,
        early_stopping_patience=FINETUNE_PATIENCE,
        seed=pretrain.seed if seed is None else seed,
    )


def _clip_global_norm(grads: dict[str, np.ndarray], max_norm: float):
    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if total > max_norm:
        scale = max_norm / total
        for name in grads:
            grads[name] = grads[name] * scale


HISTORY_HEADER = "epoch,train_loss,val_loss,lr"


def write_history_csv(path, history):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(HISTORY_HEADER + "\n")
        for rec in history:
            fh.write(
                f"{rec.epoch},{float_repr(rec.train_loss)},"
                f"{float_repr(rec.val_loss)},{float_repr(rec.lr)}\n"
            )
