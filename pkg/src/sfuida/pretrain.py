"""Supervised source-domain training of the classifier path."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F

from .core import (
    NUM_STAGES,
    DivergedLoss,
    Hyperparameters,
    LabelOutOfRange,
    NoLabels,
    ShapeMismatch,
    SleepSequence,
    validate_hyperparameters,
)
from .model import SscModel, labels_to_tensor, sequences_to_tensor


def sequence_cross_entropy(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean over B x L of the negative log-softmax at the true class."""
    if logits.ndim != 3 or logits.shape[-1] != NUM_STAGES:
        raise ShapeMismatch(f"logits must be [B, L, {NUM_STAGES}], got {tuple(logits.shape)}")
    if labels.shape != logits.shape[:2]:
        raise ShapeMismatch(f"labels {tuple(labels.shape)} vs logits {tuple(logits.shape)}")
    if labels.numel() and (labels.min() < 0 or labels.max() >= NUM_STAGES):
        raise LabelOutOfRange(f"labels must be in 0..{NUM_STAGES - 1}")
    return F.cross_entropy(logits.reshape(-1, NUM_STAGES), labels.reshape(-1).long())


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    val_acc: float
    val_mf1: float


def write_history(history: Sequence[EpochStats], path: Path) -> None:
    lines = ["epoch,train_loss,val_acc,val_mf1"]
    lines += [f"{r.epoch},{r.train_loss:.6f},{r.val_acc:.6f},{r.val_mf1:.6f}" for r in history]
    from .dataio import atomic_write_text

    atomic_write_text(Path(path), "\n".join(lines) + "\n")


def _prepare(sequences: Sequence[SleepSequence]) -> Tuple[torch.Tensor, torch.Tensor]:
    if not sequences:
        raise NoLabels("no sequences given")
    if any(s.labels is None for s in sequences):
        raise NoLabels("pretraining needs labeled sequences")
    return sequences_to_tensor(sequences), labels_to_tensor(sequences)


@torch.no_grad()
def predict_stages(model: SscModel, x: torch.Tensor, batch_size: int = 64) -> np.ndarray:
    """Argmax stage predictions, flattened over the batch: [B * L]."""
    model.eval()
    preds = []
    for i in range(0, x.shape[0], batch_size):
        logits = model.forward_classify(x[i : i + batch_size])
        preds.append(logits.argmax(dim=-1).cpu().numpy())
    return np.concatenate(preds).reshape(-1)


def pretrain(
    model: SscModel,
    train: Sequence[SleepSequence],
    val: Sequence[SleepSequence],
    h: Hyperparameters,
    seed: int = 0,
    log: Optional[callable] = None,
) -> Tuple[SscModel, List[EpochStats]]:
    """Train the classifier path on labeled source sequences.

    Runs the full schedule and returns the parameter state with the best
    validation macro-F1. On a non-finite loss the best state so far is
    restored before DivergedLoss is raised.
    """
    validate_hyperparameters(h)
    from .evalharness import accuracy, macro_f1  # deferred: evalharness orchestrates us

    x_train, y_train = _prepare(train)
    x_val, y_val = _prepare(val)
    y_val_flat = y_val.numpy().reshape(-1)

    if h.pretrain_epochs == 0:
        return model, []

    optimizer = torch.optim.Adam(
        model.parameters(), lr=h.lr_pretrain, betas=h.adam_betas, weight_decay=h.weight_decay
    )
    rng = np.random.default_rng(seed)

    history: List[EpochStats] = []
    best_snap = model.snapshot()
    best_mf1 = -math.inf
    for epoch in range(h.pretrain_epochs):
        model.train()
        order = rng.permutation(x_train.shape[0])
        total, count = 0.0, 0
        for i in range(0, len(order), h.batch_size):
            idx = order[i : i + h.batch_size]
            logits = model.forward_classify(x_train[idx])
            loss = sequence_cross_entropy(logits, y_train[idx])
            if not torch.isfinite(loss):
                model.load(best_snap)
                raise DivergedLoss(f"non-finite loss at epoch {epoch}; best state restored")
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            total += float(loss.detach()) * len(idx)
            count += len(idx)

        val_preds = predict_stages(model, x_val)
        stats = EpochStats(
            epoch=epoch,
            train_loss=total / count,
            val_acc=accuracy(val_preds, y_val_flat),
            val_mf1=macro_f1(val_preds, y_val_flat),
        )
        history.append(stats)
        # ties go to the later epoch: margins keep improving after the small
        # validation set saturates
        if stats.val_mf1 >= best_mf1:
            best_mf1 = stats.val_mf1
            best_snap = model.snapshot()
        if log is not None:
            log(f"epoch {epoch}: loss {stats.train_loss:.4f} "
                f"val_acc {stats.val_acc:.4f} val_mf1 {stats.val_mf1:.4f}")

    model.load(best_snap)
    return model, history
