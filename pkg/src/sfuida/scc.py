"""Stage two: sequential cross-view contrasting on one unlabeled subject.

A batch of target sequences is paired with its time-reversed view. Contexts
are encoded over the first T positions of each view and the K = L - T shared
prediction heads map each context to the other view's latents; head k applied
to the reversed context predicts the forward latent at position T + k, and
applied to the forward context predicts the reversed-view latent of epoch k.
The per-step multi-kernel MMD between the two prediction sets (over the batch
dimension) is minimized, which only touches the target subject's data.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch

from .core import (
    DimMismatch,
    EmptyInput,
    Hyperparameters,
    HeadCountMismatch,
    InvalidConfig,
    ShapeMismatch,
    SubjectRecording,
    SubjectTooShort,
    validate_hyperparameters,
)
from .dataio import make_sequences
from .model import SscModel, sequences_to_tensor


@dataclass
class CrossViewBatch:
    """Original and reversed views plus the (T+k, k) pairing, 1-based."""

    view_i: torch.Tensor  # [B, L, C, S]
    view_j: torch.Tensor  # [B, L, C, S], flipped along L
    pair_index: List[Tuple[int, int]]
    context_cut: int  # T

    @property
    def num_steps(self) -> int:
        return len(self.pair_index)


def reverse_augment(sequences, T: int) -> CrossViewBatch:
    """Build the reversed view and the cross-view index pairing."""
    x = sequences_to_tensor(sequences)
    L = x.shape[1]
    if not (1 < T < L):
        raise InvalidConfig(f"1 < T < L required, got T={T}, L={L}")
    view_j = torch.flip(x, dims=[1])
    pairs = [(T + k, k) for k in range(1, L - T + 1)]
    return CrossViewBatch(view_i=x, view_j=view_j, pair_index=pairs, context_cut=T)


def cross_view_predict(model: SscModel, cvb: CrossViewBatch) -> Tuple[torch.Tensor, torch.Tensor]:
    """Predict each view's latents from the other view's context.

    Returns (pred_i, pred_j), both [B, K, d_z]: pred_i[:, k-1] estimates the
    forward-view latent at position T+k from the reversed context, pred_j[:, k-1]
    the reversed-view latent of epoch k from the forward context.
    """
    if model.num_prediction_steps != cvb.num_steps:
        raise HeadCountMismatch(
            f"model has {model.num_prediction_steps} heads, batch needs {cvb.num_steps}"
        )
    T = cvb.context_cut
    z_i = model.encode_latents(cvb.view_i)
    z_j = model.encode_latents(cvb.view_j)
    c_i = model.context(z_i[:, :T])
    c_j = model.context(z_j[:, :T])
    pred_i = model.predict_latents(c_j)
    pred_j = model.predict_latents(c_i)
    return pred_i, pred_j


def _squared_distances(u: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    # quadratic expansion, no sqrt: keeps gradients finite at zero distance
    uu = (u * u).sum(dim=1, keepdim=True)
    vv = (v * v).sum(dim=1, keepdim=True).T
    return (uu + vv - 2.0 * (u @ v.T)).clamp_min(0.0)


def median_heuristic_bandwidths(
    a: torch.Tensor, b: torch.Tensor, scales=(0.5, 1.0, 2.0)
) -> List[torch.Tensor]:
    """Median pairwise distance over the pooled samples, at several scales."""
    pooled = torch.cat([a, b], dim=0)
    n = pooled.shape[0]
    iu = torch.triu_indices(n, n, offset=1)
    sq = _squared_distances(pooled, pooled)[iu[0], iu[1]]
    if sq.numel() == 0:
        sigma = pooled.new_tensor(1.0)
    else:
        med = sq.median()
        sigma = torch.sqrt(med) if float(med.detach()) > 1e-24 else pooled.new_tensor(1.0)
    return [s * sigma for s in scales]


def mmd_distance(a: torch.Tensor, b: torch.Tensor, bandwidths=None) -> torch.Tensor:
    """Multi-kernel Gaussian MMD between two sample sets, clamped at zero.

    Uses the V-statistic (diagonal kept) so single-sample sets degrade to a
    plain kernel distance.
    """
    if isinstance(a, np.ndarray):
        a = torch.from_numpy(a)
    if isinstance(b, np.ndarray):
        b = torch.from_numpy(b)
    if a.ndim != 2 or b.ndim != 2:
        raise DimMismatch(f"expected [n, d] sample sets, got {tuple(a.shape)}, {tuple(b.shape)}")
    if a.shape[0] < 1 or b.shape[0] < 1:
        raise EmptyInput("sample sets must be non-empty")
    if a.shape[1] != b.shape[1]:
        raise DimMismatch(f"dimension mismatch: {a.shape[1]} vs {b.shape[1]}")
    if bandwidths is None:
        bandwidths = median_heuristic_bandwidths(a, b)

    d_aa = _squared_distances(a, a)
    d_bb = _squared_distances(b, b)
    d_ab = _squared_distances(a, b)
    total = a.new_tensor(0.0)
    for sigma in bandwidths:
        sigma2 = sigma**2 if torch.is_tensor(sigma) else a.new_tensor(float(sigma) ** 2)
        total = total + (
            torch.exp(-d_aa / (2 * sigma2)).mean()
            + torch.exp(-d_bb / (2 * sigma2)).mean()
            - 2 * torch.exp(-d_ab / (2 * sigma2)).mean()
        )
    return torch.clamp(total / len(bandwidths), min=0.0)


def scc_loss(pred_i: torch.Tensor, pred_j: torch.Tensor, bandwidths=None) -> torch.Tensor:
    """Mean over the K steps of the batch-wise MMD between the two views'
    predictions. Positive and minimized: shrinking it pulls the cross-view
    predicted distributions together."""
    if pred_i.shape != pred_j.shape:
        raise ShapeMismatch(f"{tuple(pred_i.shape)} vs {tuple(pred_j.shape)}")
    if pred_i.ndim != 3:
        raise ShapeMismatch(f"expected [B, K, d_z], got {tuple(pred_i.shape)}")
    k_steps = pred_i.shape[1]
    total = pred_i.new_tensor(0.0)
    for k in range(k_steps):
        total = total + mmd_distance(pred_i[:, k, :], pred_j[:, k, :], bandwidths)
    return total / k_steps


def adapt_ssa(
    model: SscModel,
    subject: SubjectRecording,
    h: Hyperparameters,
    seed: int = 0,
    epoch_losses: Optional[list] = None,
) -> SscModel:
    """Adapt a pretrained model to one unlabeled subject via the cross-view task.

    The context model and prediction heads are re-attached with a fresh
    initialization; the classifier stays frozen so this stage only moves the
    representation. Only the given subject's signal data is read.
    """
    validate_hyperparameters(h)
    if h.L != model.seq_len or h.T != model.context_cut:
        raise HeadCountMismatch(
            f"hyperparameters (L={h.L}, T={h.T}) vs model "
            f"(L={model.seq_len}, T={model.context_cut})"
        )
    sequences = make_sequences(subject, h.L, stride=h.L, with_labels=False)
    if not sequences:
        raise SubjectTooShort(
            f"subject {subject.subject_id!r}: {subject.num_epochs} epochs < L={h.L}"
        )
    if h.ssa_epochs == 0:
        return model

    model.reset_context_and_heads(seed)
    x = sequences_to_tensor(sequences).to(model.param_dtype)

    frozen = list(model.classifier.parameters())
    for p in frozen:
        p.requires_grad_(False)
    trainable = [p for p in model.parameters() if p.requires_grad]
    optimizer = torch.optim.Adam(
        trainable, lr=h.lr_ssa, betas=h.adam_betas, weight_decay=h.weight_decay
    )
    rng = np.random.default_rng(seed)
    try:
        model.train()
        for _ in range(h.ssa_epochs):
            order = rng.permutation(x.shape[0])
            total, count = 0.0, 0
            for i in range(0, len(order), h.batch_size):
                idx = order[i : i + h.batch_size]
                cvb = reverse_augment(x[idx], h.T)
                pred_i, pred_j = cross_view_predict(model, cvb)
                loss = scc_loss(pred_i, pred_j)
                optimizer.zero_grad()
                loss.backward()
                optimizer.step()
                total += float(loss.detach()) * len(idx)
                count += len(idx)
            if epoch_losses is not None:
                epoch_losses.append(total / count)
    finally:
        for p in frozen:
            p.requires_grad_(True)
        model.eval()
    return model
