"""Canonical on-disk dataset format, ingestion hooks, fold planning and the
synthetic multi-subject benchmark generator.

On-disk layout: one directory per subject containing
  meta           text, key=value: subject_id, num_epochs, channels, sample_rate
  signals.f32le  row-major [epoch][channel][sample], little-endian float32
  labels.u8      optional, one unsigned byte per epoch (stage codes 0..4)
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy import signal as sps

from .core import (
    EPOCH_SECONDS,
    NUM_STAGES,
    EmptyRecording,
    FormatError,
    InvalidConfig,
    InvalidSpec,
    SleepSequence,
    StageLabel,
    SubjectRecording,
    TooFewSubjects,
)

META_FILE = "meta"
SIGNALS_FILE = "signals.f32le"
LABELS_FILE = "labels.u8"


def _epoch_samples(sample_rate: float) -> int:
    s = EPOCH_SECONDS * sample_rate
    if abs(s - round(s)) > 1e-6:
        raise FormatError(f"sample_rate {sample_rate} does not give an integer 30 s epoch length")
    return int(round(s))


def atomic_write_bytes(path: Path, payload: bytes) -> None:
    """Write via a temp file and rename, so readers never see partial files."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(payload)
    os.replace(tmp, path)


def atomic_write_text(path: Path, text: str) -> None:
    atomic_write_bytes(Path(path), text.encode("utf-8"))


def write_subject(rec: SubjectRecording, root: Path, channel_names: Optional[Sequence[str]] = None) -> Path:
    """Write one subject directory under ``root``; returns the directory path."""
    if rec.samples_per_epoch != _epoch_samples(rec.sample_rate):
        raise FormatError(
            f"subject {rec.subject_id!r}: {rec.samples_per_epoch} samples per epoch "
            f"does not match 30 s at {rec.sample_rate} Hz"
        )
    if channel_names is None:
        channel_names = [f"ch{i}" for i in range(rec.num_channels)]
    if len(channel_names) != rec.num_channels:
        raise FormatError(
            f"{len(channel_names)} channel names for {rec.num_channels} channels"
        )
    subject_dir = Path(root) / rec.subject_id
    subject_dir.mkdir(parents=True, exist_ok=True)
    meta = (
        f"subject_id={rec.subject_id}\n"
        f"num_epochs={rec.num_epochs}\n"
        f"channels={','.join(channel_names)}\n"
        f"sample_rate={rec.sample_rate!r}\n"
    )
    atomic_write_text(subject_dir / META_FILE, meta)
    atomic_write_bytes(subject_dir / SIGNALS_FILE, rec.epochs.astype("<f4").tobytes())
    if rec.labels is not None:
        atomic_write_bytes(subject_dir / LABELS_FILE, rec.labels.astype(np.uint8).tobytes())
    else:
        # stale labels from an earlier write must not resurface
        labels_path = subject_dir / LABELS_FILE
        if labels_path.exists():
            labels_path.unlink()
    return subject_dir


def _parse_meta(path: Path) -> dict:
    meta = {}
    for line in path.read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise FormatError(f"{path}: malformed meta line {line!r}")
        key, value = line.split("=", 1)
        meta[key.strip()] = value.strip()
    for key in ("subject_id", "num_epochs", "channels", "sample_rate"):
        if key not in meta:
            raise FormatError(f"{path}: missing meta key {key!r}")
    return meta


def read_subject_raw(root: Path, subject_id: str) -> Tuple[SubjectRecording, Optional[np.ndarray]]:
    """Read signals plus the raw label bytes, without interpreting label codes.

    The ingestion path uses this to accept R&K-scored inputs whose byte codes
    exceed the 5-class vocabulary.
    """
    subject_dir = Path(root) / subject_id
    meta = _parse_meta(subject_dir / META_FILE)
    num_epochs = int(meta["num_epochs"])
    channels = meta["channels"].split(",") if meta["channels"] else []
    sample_rate = float(meta["sample_rate"])
    samples = _epoch_samples(sample_rate)

    raw = (subject_dir / SIGNALS_FILE).read_bytes()
    expected = num_epochs * len(channels) * samples * 4
    if len(raw) != expected:
        raise FormatError(
            f"{subject_dir}: header declares {num_epochs} epochs "
            f"({expected} bytes), payload holds {len(raw)} bytes"
        )
    epochs = np.frombuffer(raw, dtype="<f4").reshape(num_epochs, len(channels), samples)

    labels = None
    labels_path = subject_dir / LABELS_FILE
    if labels_path.exists():
        labels = np.frombuffer(labels_path.read_bytes(), dtype=np.uint8)
        if labels.shape[0] != num_epochs:
            raise FormatError(
                f"{subject_dir}: {labels.shape[0]} labels for {num_epochs} epochs"
            )

    rec = SubjectRecording(meta["subject_id"], epochs.copy(), sample_rate, None)
    return rec, labels


def read_subject(root: Path, subject_id: str) -> SubjectRecording:
    """Read one subject back; bit-exact inverse of write_subject."""
    rec, raw_labels = read_subject_raw(root, subject_id)
    if raw_labels is None:
        return rec
    if raw_labels.size and raw_labels.max() >= NUM_STAGES:
        raise FormatError(
            f"{Path(root) / subject_id}: label byte {raw_labels.max()} out of range 0..4"
        )
    return SubjectRecording(rec.subject_id, rec.epochs, rec.sample_rate, raw_labels.astype(np.int64))


def subject_channel_names(root: Path, subject_id: str) -> List[str]:
    meta = _parse_meta(Path(root) / subject_id / META_FILE)
    return meta["channels"].split(",") if meta["channels"] else []


@dataclass
class DatasetManifest:
    """Directory-level summary of a canonical dataset."""

    root_path: Path
    subjects: List[Tuple[str, int, bool]]  # (subject_id, num_epochs, has_labels)
    sample_rate: float
    channels: List[str]

    @property
    def subject_ids(self) -> List[str]:
        return [s[0] for s in self.subjects]


def scan_dataset(root: Path) -> DatasetManifest:
    """Build a manifest from a dataset root, validating each subject's shapes."""
    root = Path(root)
    subject_dirs = sorted(p for p in root.iterdir() if (p / META_FILE).exists())
    if not subject_dirs:
        raise FormatError(f"{root}: no subject directories found")
    subjects = []
    sample_rate = None
    channels = None
    for d in subject_dirs:
        rec = read_subject(root, d.name)  # validates header/payload agreement
        names = subject_channel_names(root, d.name)
        if sample_rate is None:
            sample_rate, channels = rec.sample_rate, names
        elif rec.sample_rate != sample_rate or names != channels:
            raise FormatError(
                f"{d}: sample_rate/channels disagree with the rest of the dataset"
            )
        subjects.append((rec.subject_id, rec.num_epochs, rec.labels is not None))
    return DatasetManifest(root, subjects, sample_rate, channels)


def make_sequences(
    rec: SubjectRecording, L: int, stride: Optional[int] = None, with_labels: bool = True
) -> List[SleepSequence]:
    """Cut a recording into length-L windows; the trailing remainder is dropped.

    Adaptation stages call this with ``with_labels=False`` so target labels are
    never touched.
    """
    if L < 1 or (stride is not None and stride < 1):
        raise InvalidConfig("L ≥ 1 and stride ≥ 1")
    if stride is None:
        stride = L
    n = rec.epochs.shape[0]
    if n == 0:
        raise EmptyRecording(f"subject {rec.subject_id!r} has no epochs")
    out = []
    labels = rec.labels if with_labels else None
    for start in range(0, n - L + 1, stride):
        out.append(
            SleepSequence(
                epochs=rec.epochs[start : start + L],
                origin=(rec.subject_id, start),
                labels=None if labels is None else labels[start : start + L],
            )
        )
    return out


@dataclass
class FoldPlan:
    """Subject-disjoint cross-validation plan at an 8:1:1 train/val/test ratio."""

    folds: List[Tuple[List[str], List[str], List[str]]]  # (train, val, test)


def plan_folds(subject_ids: Sequence[str], n_folds: int, seed: int) -> FoldPlan:
    """Split subjects so each appears in exactly one test set across the folds."""
    ids = list(subject_ids)
    if len(set(ids)) != len(ids):
        raise InvalidConfig("duplicate subject ids")
    if n_folds < 2:
        raise InvalidConfig("n_folds ≥ 2")
    if len(ids) < n_folds:
        raise TooFewSubjects(f"{len(ids)} subjects for {n_folds} folds")

    rng = np.random.default_rng(seed)
    order = [ids[i] for i in rng.permutation(len(ids))]
    test_sets = [list(chunk) for chunk in np.array_split(np.array(order, dtype=object), n_folds)]

    folds = []
    for k, test in enumerate(test_sets):
        rest = [s for s in order if s not in test]
        # of the 9/10 not under test, 1/9 goes to validation -> 8:1:1 overall
        n_val = max(1, round(len(rest) / 9))
        val = rest[:n_val]
        train = rest[n_val:]
        folds.append((train, val, list(test)))
    return FoldPlan(folds)


# Stage-dependent waveform recipes: (frequency Hz, amplitude) components plus an
# optional slow burst envelope on the second component. Any distinguishable
# family works; these are fixed so tests are reproducible.
STAGE_WAVEFORMS = {
    StageLabel.W: ((10.0, 1.0), (20.0, 0.2), False),
    StageLabel.N1: ((7.0, 1.0), (14.0, 0.15), False),
    StageLabel.N2: ((5.0, 1.0), (13.0, 0.8), True),  # spindle-like bursts
    StageLabel.N3: ((1.5, 2.0), (3.0, 0.3), False),
    StageLabel.REM: ((6.0, 0.5), (1.0, 0.15), False),
}


@dataclass
class SyntheticSubjectSpec:
    """Per-subject knobs of the synthetic benchmark.

    ``amplitude_gain`` and ``frequency_shift`` operationalize between-subject
    discrepancies; ``noise_sigma`` sets the additive noise level before gain.
    """

    seed: int
    stage_transition_matrix: np.ndarray  # 5x5 row-stochastic
    amplitude_gain: float = 1.0
    frequency_shift: float = 0.0
    noise_sigma: float = 0.1


def default_transition_matrix() -> np.ndarray:
    """An ergodic stage-transition chain with sleep-like dwell times."""
    return np.array(
        [
            [0.80, 0.15, 0.03, 0.01, 0.01],  # W
            [0.05, 0.60, 0.25, 0.05, 0.05],  # N1
            [0.01, 0.05, 0.75, 0.12, 0.07],  # N2
            [0.01, 0.01, 0.15, 0.80, 0.03],  # N3
            [0.03, 0.05, 0.10, 0.02, 0.80],  # REM
        ]
    )


def stationary_distribution(transition: np.ndarray) -> np.ndarray:
    """Left eigenvector of the chain for eigenvalue 1, normalized to sum 1."""
    w, v = np.linalg.eig(transition.T)
    idx = np.argmin(np.abs(w - 1.0))
    pi = np.real(v[:, idx])
    pi = np.abs(pi)
    return pi / pi.sum()


def generate_synthetic(
    spec: SyntheticSubjectSpec,
    num_epochs: int,
    sample_rate: float = 100.0,
    num_channels: int = 2,
    subject_id: Optional[str] = None,
) -> SubjectRecording:
    """Generate one labeled synthetic subject, deterministic given the seed.

    Labels follow the Markov chain (starting awake, as recordings do); each
    epoch's signal is the stage waveform mixture, frequency-shifted and scaled
    by the subject's gain, plus Gaussian noise. The gain scales signal and
    noise alike, so two subjects differing only in gain differ by an exact
    scale factor.
    """
    if num_epochs < 1:
        raise InvalidSpec("num_epochs ≥ 1")
    P = np.asarray(spec.stage_transition_matrix, dtype=np.float64)
    if P.shape != (NUM_STAGES, NUM_STAGES):
        raise InvalidSpec(f"transition matrix must be 5x5, got {P.shape}")
    if (P < 0).any() or np.abs(P.sum(axis=1) - 1.0).max() > 1e-9:
        raise InvalidSpec("transition matrix rows must be non-negative and sum to 1")
    if spec.noise_sigma < 0:
        raise InvalidSpec("noise_sigma ≥ 0")

    samples = _epoch_samples(sample_rate)
    rng = np.random.default_rng(spec.seed)

    labels = np.empty(num_epochs, dtype=np.int64)
    state = int(StageLabel.W)
    for i in range(num_epochs):
        labels[i] = state
        state = int(rng.choice(NUM_STAGES, p=P[state]))

    t = np.arange(samples, dtype=np.float64) / sample_rate
    epochs = np.empty((num_epochs, num_channels, samples), dtype=np.float32)
    for i in range(num_epochs):
        (f1, a1), (f2, a2), burst = STAGE_WAVEFORMS[StageLabel(labels[i])]
        f1 = f1 + spec.frequency_shift
        f2 = f2 + spec.frequency_shift
        phases = rng.uniform(0.0, 2.0 * np.pi, size=(num_channels, 3))
        noise = rng.normal(0.0, spec.noise_sigma, size=(num_channels, samples))
        for c in range(num_channels):
            wave = a1 * np.sin(2.0 * np.pi * f1 * t + phases[c, 0])
            second = a2 * np.sin(2.0 * np.pi * f2 * t + phases[c, 1])
            if burst:
                second = second * 0.5 * (1.0 + np.sin(2.0 * np.pi * 0.5 * t + phases[c, 2]))
            epochs[i, c] = spec.amplitude_gain * (wave + second + noise[c])

    sid = subject_id if subject_id is not None else f"synth{spec.seed:04d}"
    return SubjectRecording(sid, epochs, sample_rate, labels)


def resample_recording(rec: SubjectRecording, target_rate: float) -> SubjectRecording:
    """Polyphase resampling of every epoch to the target rate (e.g. to 100 Hz)."""
    if target_rate == rec.sample_rate:
        return rec
    ratio = Fraction(target_rate / rec.sample_rate).limit_denominator(1000)
    out = sps.resample_poly(rec.epochs.astype(np.float64), ratio.numerator, ratio.denominator, axis=2)
    expected = _epoch_samples(target_rate)
    if out.shape[2] != expected:
        raise FormatError(
            f"resampling {rec.sample_rate}->{target_rate} Hz gave {out.shape[2]} "
            f"samples per epoch, expected {expected}"
        )
    return SubjectRecording(rec.subject_id, out.astype(np.float32), target_rate, rec.labels)


def bandpass_recording(rec: SubjectRecording, low_hz: float, high_hz: float) -> SubjectRecording:
    """Zero-phase 4th-order Butterworth band-pass (the 0.3-35 Hz ingestion hook)."""
    nyq = rec.sample_rate / 2.0
    if not (0.0 < low_hz < high_hz < nyq):
        raise InvalidConfig(f"band ({low_hz}, {high_hz}) Hz invalid for {rec.sample_rate} Hz data")
    sos = sps.butter(4, [low_hz / nyq, high_hz / nyq], btype="bandpass", output="sos")
    out = sps.sosfiltfilt(sos, rec.epochs.astype(np.float64), axis=2)
    return SubjectRecording(rec.subject_id, out.astype(np.float32), rec.sample_rate, rec.labels)


# R&K scoring uses byte codes 0:W 1:S1 2:S2 3:S3 4:S4 5:REM 6:MOVEMENT 7:UNKNOWN.
# AASM merges S3/S4 into N3; MOVEMENT/UNKNOWN epochs are dropped.
RK_TO_AASM = {0: 0, 1: 1, 2: 2, 3: 3, 4: 3, 5: 4}
RK_DROP = (6, 7)


def convert_rk_labels(rec: SubjectRecording, raw_labels: np.ndarray) -> SubjectRecording:
    """Map R&K byte codes onto the 5-class vocabulary, dropping unscorable epochs."""
    raw = np.asarray(raw_labels)
    if raw.shape != (rec.num_epochs,):
        raise FormatError(f"{raw.shape[0]} R&K labels for {rec.num_epochs} epochs")
    if raw.size and raw.max() > max(RK_DROP):
        raise FormatError(f"R&K label byte {raw.max()} out of range 0..7")
    keep = ~np.isin(raw, RK_DROP)
    if not keep.any():
        raise EmptyRecording(f"subject {rec.subject_id!r}: every epoch unscorable")
    mapped = np.array([RK_TO_AASM[int(v)] for v in raw[keep]], dtype=np.int64)
    return SubjectRecording(rec.subject_id, rec.epochs[keep], rec.sample_rate, mapped)
