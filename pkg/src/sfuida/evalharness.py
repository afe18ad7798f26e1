"""Per-subject orchestration of the full pipeline, metrics and aggregation."""

from __future__ import annotations

import enum
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch

from .core import (
    NUM_STAGES,
    STAGE_NAMES,
    EmptyInput,
    Hyperparameters,
    LabelOutOfRange,
    NoLabels,
    PlanMismatch,
    SubjectRecording,
    SubjectTooShort,
    derive_seed,
)
from .dataio import DatasetManifest, FoldPlan, atomic_write_text, make_sequences, read_subject
from .model import ModelConfig, SscModel, sequences_to_tensor
from .personalize import adapt_ssp, init_teacher, pseudo_label
from .scc import adapt_ssa


class Variant(str, enum.Enum):
    """Ablation variants: which adaptation stages run on top of the source model."""

    SO = "so"
    SO_SSA = "so+ssa"
    SO_SSP = "so+ssp"
    SO_SSA_SSP = "so+ssa+ssp"

    @property
    def uses_ssa(self) -> bool:
        return self in (Variant.SO_SSA, Variant.SO_SSA_SSP)

    @property
    def uses_ssp(self) -> bool:
        return self in (Variant.SO_SSP, Variant.SO_SSA_SSP)


def _check_labels(preds: np.ndarray, labels: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    preds = np.asarray(preds).reshape(-1)
    labels = np.asarray(labels).reshape(-1)
    if preds.shape != labels.shape:
        raise EmptyInput(f"{preds.shape[0]} predictions vs {labels.shape[0]} labels")
    if preds.size == 0:
        raise EmptyInput("empty inputs")
    if labels.min() < 0 or labels.max() >= NUM_STAGES:
        raise LabelOutOfRange(f"labels must be in 0..{NUM_STAGES - 1}")
    return preds, labels


def accuracy(preds, labels) -> float:
    preds, labels = _check_labels(preds, labels)
    return float((preds == labels).mean())


def per_class_f1(preds, labels) -> np.ndarray:
    """F1 per stage; NaN for stages absent from the ground truth."""
    preds, labels = _check_labels(preds, labels)
    out = np.full(NUM_STAGES, np.nan)
    for c in range(NUM_STAGES):
        support = int((labels == c).sum())
        if support == 0:
            continue
        tp = int(((preds == c) & (labels == c)).sum())
        fp = int(((preds == c) & (labels != c)).sum())
        fn = support - tp
        denom = 2 * tp + fp + fn
        out[c] = 2 * tp / denom if denom else 0.0
    return out


def macro_f1(preds, labels) -> float:
    """Unweighted mean of per-class F1 over the stages present in the labels."""
    f1 = per_class_f1(preds, labels)
    return float(np.nanmean(f1))


@dataclass
class AdaptationReport:
    """Per-subject outcome of one variant run."""

    subject_id: str
    variant: Variant
    acc: float
    mf1: float
    per_class_f1: np.ndarray  # 5 entries, NaN where the stage is absent
    ssa_seconds: float
    ssp_seconds: float
    retained_sequence_fraction: float
    eval_seconds: float = 0.0
    total_seconds: float = 0.0


@dataclass
class FoldReport:
    fold_index: int
    reports: List[AdaptationReport]

    @property
    def mean_acc(self) -> float:
        return float(np.mean([r.acc for r in self.reports]))

    @property
    def mean_mf1(self) -> float:
        return float(np.mean([r.mf1 for r in self.reports]))


def evaluate_on_subject(model: SscModel, subject: SubjectRecording, L: int) -> Tuple[np.ndarray, np.ndarray]:
    """Argmax predictions and labels over the subject's stride-L tiling."""
    if subject.labels is None:
        raise NoLabels(f"subject {subject.subject_id!r} has no labels to score against")
    sequences = make_sequences(subject, L, stride=L)
    if not sequences:
        raise SubjectTooShort(f"subject {subject.subject_id!r}: fewer than L={L} epochs")
    x = sequences_to_tensor(sequences)
    model.eval()
    preds = []
    with torch.no_grad():
        for i in range(0, x.shape[0], 64):
            preds.append(model.forward_classify(x[i : i + 64]).argmax(dim=-1).numpy())
    preds = np.concatenate(preds).reshape(-1)
    labels = np.concatenate([s.labels for s in sequences])
    return preds, labels


def run_subject(
    source: SscModel,
    subject: SubjectRecording,
    variant: Variant,
    h: Hyperparameters,
    seed: int = 0,
) -> AdaptationReport:
    """Clone the frozen source model, adapt per variant, score on all sequences.

    Adaptation stages receive a label-stripped recording; labels are read only
    for the final metric computation.
    """
    variant = Variant(variant)
    if subject.labels is None:
        raise NoLabels(f"subject {subject.subject_id!r} has no labels to score against")
    t_start = time.perf_counter()
    model = source.clone()
    unlabeled = subject.without_labels()

    ssa_seconds = 0.0
    if variant.uses_ssa:
        t0 = time.perf_counter()
        adapt_ssa(model, unlabeled, h, seed=derive_seed(seed, "ssa"))
        ssa_seconds = time.perf_counter() - t0

    ssp_seconds = 0.0
    retention: List[float] = []
    if variant.uses_ssp:
        t0 = time.perf_counter()
        adapt_ssp(model, unlabeled, h, seed=derive_seed(seed, "ssp"), retention_log=retention)
        ssp_seconds = time.perf_counter() - t0

    t0 = time.perf_counter()
    preds, labels = evaluate_on_subject(model, subject, h.L)
    eval_seconds = time.perf_counter() - t0

    return AdaptationReport(
        subject_id=subject.subject_id,
        variant=variant,
        acc=accuracy(preds, labels),
        mf1=macro_f1(preds, labels),
        per_class_f1=per_class_f1(preds, labels),
        ssa_seconds=ssa_seconds,
        ssp_seconds=ssp_seconds,
        retained_sequence_fraction=retention[-1] if retention else 0.0,
        eval_seconds=eval_seconds,
        total_seconds=time.perf_counter() - t_start,
    )


def run_cv(
    manifest: DatasetManifest,
    plan: FoldPlan,
    h: Hyperparameters,
    model_config: ModelConfig,
    variant: Variant = Variant.SO_SSA_SSP,
    seed: int = 0,
    jobs: int = 1,
    log: Optional[callable] = None,
) -> List[FoldReport]:
    """Pretrain per fold on train+val subjects, then adapt/score each test
    subject independently from the same frozen source checkpoint."""
    from .pretrain import pretrain  # deferred: pretrain imports our metrics

    plan_ids = sorted({sid for _, _, test in plan.folds for sid in test})
    if plan_ids != sorted(manifest.subject_ids):
        raise PlanMismatch("fold plan test sets do not cover the manifest's subjects")

    fold_reports = []
    for fold_index, (train_ids, val_ids, test_ids) in enumerate(plan.folds):
        train_seqs, val_seqs = [], []
        for sid in train_ids:
            train_seqs += make_sequences(read_subject(manifest.root_path, sid), h.L, stride=h.L)
        for sid in val_ids:
            val_seqs += make_sequences(read_subject(manifest.root_path, sid), h.L, stride=h.L)

        source = SscModel(model_config, h.L, h.T, seed=derive_seed(seed, f"fold{fold_index}/init"))
        pretrain(source, train_seqs, val_seqs, h, seed=derive_seed(seed, f"fold{fold_index}/train"))
        source.eval()

        def _one(sid: str) -> AdaptationReport:
            rec = read_subject(manifest.root_path, sid)
            return run_subject(source, rec, variant, h, seed=derive_seed(seed, f"fold{fold_index}/{sid}"))

        if jobs > 1:
            with ThreadPoolExecutor(max_workers=jobs) as pool:
                reports = list(pool.map(_one, test_ids))
        else:
            reports = [_one(sid) for sid in test_ids]
        fold_reports.append(FoldReport(fold_index, reports))
        if log is not None:
            fr = fold_reports[-1]
            log(f"fold {fold_index}: mean acc {fr.mean_acc:.4f} mean mf1 {fr.mean_mf1:.4f}")
    return fold_reports


def export_embeddings(model: SscModel, subject: SubjectRecording, path: Path) -> None:
    """Write one CSV row per epoch: index, label (-1 if unlabeled), latent vector.

    Epochs are covered exactly once; a trailing remainder shorter than L is
    encoded through a window ending at the recording's last epoch.
    """
    L = model.seq_len
    n = subject.num_epochs
    if n < L:
        raise SubjectTooShort(f"subject {subject.subject_id!r}: {n} epochs < L={L}")
    starts = list(range(0, n - L + 1, L))
    covered = starts[-1] + L
    tail_start = n - L if covered < n else None

    model.eval()
    latents = np.empty((n, model.config.d_z), dtype=np.float64)
    with torch.no_grad():
        for start in starts:
            x = subject.epochs[np.newaxis, start : start + L]
            latents[start : start + L] = model.encode_latents(x)[0].numpy()
        if tail_start is not None:
            x = subject.epochs[np.newaxis, tail_start:]
            z = model.encode_latents(x)[0].numpy()
            latents[covered:] = z[covered - tail_start :]

    header = "epoch,label," + ",".join(f"z{i}" for i in range(model.config.d_z))
    rows = [header]
    for i in range(n):
        label = int(subject.labels[i]) if subject.labels is not None else -1
        vec = ",".join(f"{v:.8g}" for v in latents[i])
        rows.append(f"{i},{label},{vec}")
    atomic_write_text(Path(path), "\n".join(rows) + "\n")


def subject_retention_fraction(model: SscModel, subject: SubjectRecording, h: Hyperparameters) -> float:
    """Fraction of the subject's sequences a fresh teacher would retain."""
    sequences = make_sequences(subject, h.L, stride=h.L, with_labels=False)
    if not sequences:
        raise SubjectTooShort(f"subject {subject.subject_id!r}: fewer than L={h.L} epochs")
    teacher = init_teacher(model, h.alpha)
    plb = pseudo_label(teacher, sequences, h)
    return float(plb.sequence_retained.float().mean())


# --- report serialization ---------------------------------------------------

_REPORT_HEADER = (
    "subject_id,variant,acc,mf1,"
    + ",".join(f"f1_{name}" for name in STAGE_NAMES)
    + ",ssa_seconds,ssp_seconds,retained_sequence_fraction"
)


def reports_to_csv(reports: Sequence[AdaptationReport]) -> str:
    lines = [_REPORT_HEADER]
    for r in reports:
        f1 = ",".join("nan" if np.isnan(v) else f"{v:.6f}" for v in r.per_class_f1)
        lines.append(
            f"{r.subject_id},{r.variant.value},{r.acc:.6f},{r.mf1:.6f},{f1},"
            f"{r.ssa_seconds:.3f},{r.ssp_seconds:.3f},{r.retained_sequence_fraction:.4f}"
        )
    return "\n".join(lines) + "\n"


def write_fold_reports(fold_reports: Sequence[FoldReport], out_dir: Path) -> None:
    """One CSV per fold plus an aggregate text summary."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for fr in fold_reports:
        atomic_write_text(out_dir / f"fold{fr.fold_index:02d}.csv", reports_to_csv(fr.reports))
    all_reports = [r for fr in fold_reports for r in fr.reports]
    lines = [
        f"folds={len(fold_reports)}",
        f"subjects={len(all_reports)}",
        f"mean_acc={np.mean([r.acc for r in all_reports]):.6f}",
        f"mean_mf1={np.mean([r.mf1 for r in all_reports]):.6f}",
        f"mean_ssa_seconds={np.mean([r.ssa_seconds for r in all_reports]):.3f}",
        f"mean_ssp_seconds={np.mean([r.ssp_seconds for r in all_reports]):.3f}",
    ]
    for fr in fold_reports:
        lines.append(f"fold{fr.fold_index:02d}: acc={fr.mean_acc:.6f} mf1={fr.mean_mf1:.6f}")
    atomic_write_text(out_dir / "summary.txt", "\n".join(lines) + "\n")
