"""Stage three: teacher-guided pseudo-label fine-tuning on one subject.

An EMA teacher (a frozen deep copy of the student, blended toward it after
every optimization step) produces per-epoch stage probabilities. A sequence is
kept only when at least n_c of its epochs exceed the confidence threshold xi
strictly; retained sequences supply hard argmax targets for a cross-entropy
fine-tune of the whole student.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass
from typing import List, Optional

import numpy as np
import torch
import torch.nn.functional as F

from .core import (
    NUM_STAGES,
    Hyperparameters,
    InvalidConfig,
    ShapeMismatch,
    StructureMismatch,
    SubjectRecording,
    SubjectTooShort,
    validate_hyperparameters,
)
from .dataio import make_sequences
from .model import SscModel, sequences_to_tensor


@dataclass
class TeacherState:
    """EMA shadow of the student; structurally congruent at all times."""

    model: SscModel
    alpha: float


def init_teacher(student: SscModel, alpha: float) -> TeacherState:
    """Teacher starts as a deep copy of the student, frozen and in eval mode."""
    if not (0.0 <= alpha <= 1.0):
        raise InvalidConfig("0 ≤ alpha ≤ 1")
    teacher = copy.deepcopy(student)
    teacher.eval()
    for p in teacher.parameters():
        p.requires_grad_(False)
    return TeacherState(model=teacher, alpha=alpha)


@torch.no_grad()
def ema_update(teacher: TeacherState, student: SscModel) -> None:
    """Blend every teacher parameter toward the student: p_T <- a*p_T + (1-a)*p_S."""
    t_params = dict(teacher.model.named_parameters())
    s_params = dict(student.named_parameters())
    if set(t_params) != set(s_params):
        diff = set(t_params) ^ set(s_params)
        raise StructureMismatch(f"parameter names differ: {sorted(diff)[:4]}")
    a = teacher.alpha
    for name, p_t in t_params.items():
        p_s = s_params[name]
        if p_t.shape != p_s.shape:
            raise StructureMismatch(f"{name}: shape {tuple(p_t.shape)} vs {tuple(p_s.shape)}")
        p_t.mul_(a).add_(p_s.to(p_t.dtype), alpha=1.0 - a)


@dataclass
class PseudoLabelBatch:
    """Teacher probabilities plus the epoch/sequence retention masks."""

    probs: torch.Tensor  # [B, L, 5]
    hard_labels: torch.Tensor  # [B, L]
    epoch_confident: torch.Tensor  # [B, L] bool, max prob strictly above xi
    sequence_retained: torch.Tensor  # [B] bool, >= n_c confident epochs

    @classmethod
    def from_probs(cls, probs: torch.Tensor, xi: float, n_c: int) -> "PseudoLabelBatch":
        if isinstance(probs, np.ndarray):
            probs = torch.from_numpy(probs)
        if probs.ndim != 3 or probs.shape[-1] != NUM_STAGES:
            raise ShapeMismatch(f"probs must be [B, L, {NUM_STAGES}], got {tuple(probs.shape)}")
        row_sums = probs.sum(dim=-1)
        if not torch.allclose(row_sums, torch.ones_like(row_sums), atol=1e-5):
            raise ShapeMismatch("probability rows must sum to 1")
        max_prob, hard = probs.max(dim=-1)
        confident = max_prob > xi  # strict: a max of exactly xi is not confident
        retained = confident.sum(dim=-1) >= n_c
        return cls(probs=probs, hard_labels=hard, epoch_confident=confident,
                   sequence_retained=retained)


def pseudo_label(teacher: TeacherState, batch, h: Hyperparameters) -> PseudoLabelBatch:
    """Teacher softmax over a batch of sequences, filtered by Eq.-style retention."""
    x = sequences_to_tensor(batch, dtype=teacher.model.param_dtype)
    teacher.model.eval()
    with torch.no_grad():
        probs = F.softmax(teacher.model.forward_classify(x), dim=-1)
    return PseudoLabelBatch.from_probs(probs, h.xi, h.n_c)


def pseudo_ce_loss(
    student_logits: torch.Tensor, plb: PseudoLabelBatch, soft: bool = False
) -> torch.Tensor:
    """Cross-entropy against the teacher's labels over retained sequences only.

    Averaged over all L epochs of every retained sequence; non-retained
    sequences contribute neither loss nor gradient. Zero when nothing is
    retained. ``soft=True`` targets the full teacher distribution instead of
    the argmax labels.
    """
    if student_logits.shape != plb.probs.shape:
        raise ShapeMismatch(
            f"logits {tuple(student_logits.shape)} vs teacher {tuple(plb.probs.shape)}"
        )
    retained = plb.sequence_retained
    if not bool(retained.any()):
        return (student_logits * 0.0).sum()
    logits = student_logits[retained].reshape(-1, NUM_STAGES)
    if soft:
        targets = plb.probs[retained].reshape(-1, NUM_STAGES).to(logits.dtype)
        return -(targets * F.log_softmax(logits, dim=-1)).sum(dim=-1).mean()
    labels = plb.hard_labels[retained].reshape(-1)
    return F.cross_entropy(logits, labels)


def adapt_ssp(
    student: SscModel,
    subject: SubjectRecording,
    h: Hyperparameters,
    seed: int = 0,
    retention_log: Optional[List[float]] = None,
) -> SscModel:
    """Fine-tune the student on its own confident teacher pseudo-labels.

    The teacher is EMA-updated once per optimization step; batches with no
    retained sequence are skipped entirely so an all-unconfident subject
    leaves the student bit-identical. Only the subject's signal data is read.
    """
    validate_hyperparameters(h)
    sequences = make_sequences(subject, h.L, stride=h.L, with_labels=False)
    if not sequences:
        raise SubjectTooShort(
            f"subject {subject.subject_id!r}: {subject.num_epochs} epochs < L={h.L}"
        )
    if h.ssp_epochs == 0:
        return student

    teacher = init_teacher(student, h.alpha)
    x = sequences_to_tensor(sequences).to(student.param_dtype)
    optimizer = torch.optim.Adam(
        student.parameters(), lr=h.lr_ssp, betas=h.adam_betas, weight_decay=h.weight_decay
    )
    rng = np.random.default_rng(seed)

    for _ in range(h.ssp_epochs):
        order = rng.permutation(x.shape[0])
        retained_count, seen = 0, 0
        for i in range(0, len(order), h.batch_size):
            idx = order[i : i + h.batch_size]
            xb = x[idx]
            plb = pseudo_label(teacher, xb, h)
            retained_count += int(plb.sequence_retained.sum())
            seen += len(idx)
            if not bool(plb.sequence_retained.any()):
                continue
            student.train()
            loss = pseudo_ce_loss(student.forward_classify(xb), plb, soft=h.soft_pseudo_labels)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            ema_update(teacher, student)
        if retention_log is not None:
            retention_log.append(retained_count / seen)
    student.eval()
    return student
