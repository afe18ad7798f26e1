"""Shared domain types, the stage-label vocabulary and hyperparameter records."""

from __future__ import annotations

import enum
import zlib
from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np

NUM_STAGES = 5
EPOCH_SECONDS = 30.0
DEFAULT_SAMPLE_RATE = 100.0

# An epoch is a [channels, samples] float32 matrix; 30 s of multichannel signal.
Epoch = np.ndarray


class StageLabel(enum.IntEnum):
    """Five-class sleep stage vocabulary, encoding stable across all modules."""

    W = 0
    N1 = 1
    N2 = 2
    N3 = 3
    REM = 4


STAGE_NAMES = tuple(s.name for s in StageLabel)


class SfuidaError(Exception):
    """Base class for all package errors."""


class InvalidConfig(SfuidaError):
    pass


class FormatError(SfuidaError):
    pass


class EmptyRecording(SfuidaError):
    pass


class TooFewSubjects(SfuidaError):
    pass


class InvalidSpec(SfuidaError):
    pass


class ShapeMismatch(SfuidaError):
    pass


class DimMismatch(ShapeMismatch):
    pass


class StructureMismatch(SfuidaError):
    pass


class NoLabels(SfuidaError):
    pass


class DivergedLoss(SfuidaError):
    pass


class LabelOutOfRange(SfuidaError):
    pass


class HeadCountMismatch(SfuidaError):
    pass


class SubjectTooShort(SfuidaError):
    pass


class EmptyInput(SfuidaError):
    pass


class PlanMismatch(SfuidaError):
    pass


def derive_seed(base: int, tag: str) -> int:
    """Deterministically derive a sub-seed from a base seed and a string tag.

    Used to fan a single global seed out to per-fold / per-subject / per-stage
    seeds so any sub-run is reproducible in isolation.
    """
    return (int(base) * 1_000_003 + zlib.crc32(tag.encode("utf-8"))) % (2**31 - 1)


@dataclass
class SubjectRecording:
    """One individual's ordered 30 s epochs, with optional stage labels.

    ``epochs`` is a [num_epochs, channels, samples] float32 array; ``labels``,
    when present, is a [num_epochs] int array of stage codes aligned 1:1.
    """

    subject_id: str
    epochs: np.ndarray
    sample_rate: float
    labels: Optional[np.ndarray] = None

    def __post_init__(self) -> None:
        self.epochs = np.ascontiguousarray(self.epochs, dtype=np.float32)
        if self.epochs.ndim != 3:
            raise ShapeMismatch(
                f"epochs must be [num_epochs, channels, samples], got ndim={self.epochs.ndim}"
            )
        if self.epochs.shape[0] == 0:
            raise EmptyRecording(f"subject {self.subject_id!r} has no epochs")
        if not np.isfinite(self.epochs).all():
            raise FormatError(f"subject {self.subject_id!r} contains non-finite samples")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (self.epochs.shape[0],):
                raise ShapeMismatch(
                    f"labels length {self.labels.shape} does not match "
                    f"{self.epochs.shape[0]} epochs"
                )
            if self.labels.min() < 0 or self.labels.max() >= NUM_STAGES:
                raise LabelOutOfRange(
                    f"labels must be in 0..{NUM_STAGES - 1}, "
                    f"got range [{self.labels.min()}, {self.labels.max()}]"
                )

    @property
    def num_epochs(self) -> int:
        return self.epochs.shape[0]

    @property
    def num_channels(self) -> int:
        return self.epochs.shape[1]

    @property
    def samples_per_epoch(self) -> int:
        return self.epochs.shape[2]

    def without_labels(self) -> "SubjectRecording":
        """A label-stripped view sharing the signal array."""
        rec = SubjectRecording.__new__(SubjectRecording)
        rec.subject_id = self.subject_id
        rec.epochs = self.epochs
        rec.sample_rate = self.sample_rate
        rec.labels = None
        return rec


@dataclass
class SleepSequence:
    """A window of L consecutive epochs, the model's input unit.

    ``origin`` records (subject_id, start_index) of the window in the source
    recording.
    """

    epochs: np.ndarray  # [L, channels, samples]
    origin: Tuple[str, int]
    labels: Optional[np.ndarray] = None  # [L]

    def __len__(self) -> int:
        return self.epochs.shape[0]


@dataclass(frozen=True)
class Hyperparameters:
    """Schedule and threshold constants shared by all three stages.

    ``L`` is the sequence length, ``T`` the context cut (1 < T < L) and
    ``K = L - T`` the number of cross-view prediction steps. ``alpha`` is the
    teacher EMA momentum, ``xi`` the per-epoch confidence threshold and
    ``n_c`` the minimum count of confident epochs for a sequence to be kept.
    """

    L: int = 20
    T: int = 17
    pretrain_epochs: int = 100
    ssa_epochs: int = 5
    ssp_epochs: int = 10
    lr_pretrain: float = 1e-4
    lr_ssa: float = 1e-7
    lr_ssp: float = 1e-7
    alpha: float = 0.996
    xi: float = 0.8
    n_c: int = 15
    batch_size: int = 32
    adam_betas: Tuple[float, float] = (0.5, 0.99)
    weight_decay: float = 3e-4
    soft_pseudo_labels: bool = False

    @property
    def K(self) -> int:
        return self.L - self.T


def validate_hyperparameters(h: Hyperparameters) -> None:
    """Raise InvalidConfig naming the first violated constraint."""
    checks = [
        (h.L >= 1, "L ≥ 1"),
        (1 < h.T, "1 < T"),
        (h.T < h.L, "T < L"),
        (h.n_c >= 0, "n_c ≥ 0"),
        (h.n_c <= h.L, "n_c ≤ L"),
        (0.0 < h.xi, "0 < xi"),
        (h.xi < 1.0, "xi < 1"),
        (0.0 <= h.alpha <= 1.0, "0 ≤ alpha ≤ 1"),
        (h.pretrain_epochs >= 0, "pretrain_epochs ≥ 0"),
        (h.ssa_epochs >= 0, "ssa_epochs ≥ 0"),
        (h.ssp_epochs >= 0, "ssp_epochs ≥ 0"),
        (h.lr_pretrain >= 0.0, "lr_pretrain ≥ 0"),
        (h.lr_ssa >= 0.0, "lr_ssa ≥ 0"),
        (h.lr_ssp >= 0.0, "lr_ssp ≥ 0"),
        (h.batch_size >= 1, "batch_size ≥ 1"),
        (0.0 <= h.adam_betas[0] < 1.0, "0 ≤ beta1 < 1"),
        (0.0 <= h.adam_betas[1] < 1.0, "0 ≤ beta2 < 1"),
        (h.weight_decay >= 0.0, "weight_decay ≥ 0"),
    ]
    for ok, name in checks:
        if not ok:
            raise InvalidConfig(name)
