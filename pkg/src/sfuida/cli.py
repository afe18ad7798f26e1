"""Command-line entry point: synth, import, pretrain, adapt, evaluate,
export-embeddings.

Configuration precedence is flag > config file > built-in default. The config
file is flat key=value text whose keys match the Hyperparameters field names
(plus d_z / d_c for model widths). SFUIDA_DATA_ROOT supplies the default
dataset root.
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import fields
from pathlib import Path
from typing import Dict, Optional

import numpy as np

from . import dataio, evalharness
from .core import (
    Hyperparameters,
    InvalidConfig,
    SfuidaError,
    derive_seed,
    validate_hyperparameters,
)
from .model import ModelConfig, SscModel, load_checkpoint, save_checkpoint
from .pretrain import pretrain, write_history

VARIANTS = {
    "so": evalharness.Variant.SO,
    "ssa": evalharness.Variant.SO_SSA,
    "ssp": evalharness.Variant.SO_SSP,
    "full": evalharness.Variant.SO_SSA_SSP,
}

_DEFAULTS = Hyperparameters()

# (field, parser) for every config key; adam_betas is a comma pair
_HPARAM_TYPES = {
    "L": int,
    "T": int,
    "pretrain_epochs": int,
    "ssa_epochs": int,
    "ssp_epochs": int,
    "lr_pretrain": float,
    "lr_ssa": float,
    "lr_ssp": float,
    "alpha": float,
    "xi": float,
    "n_c": int,
    "batch_size": int,
    "weight_decay": float,
}
_MODEL_KEYS = {"d_z": int, "d_c": int}


def _parse_bool(value: str) -> bool:
    low = value.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {value!r}")


def _positive_int(value: str) -> int:
    n = int(value)
    if n < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {n}")
    return n


def parse_config_file(path: Path) -> Dict[str, str]:
    """Flat key=value text; '#' starts a comment."""
    values: Dict[str, str] = {}
    for raw in Path(path).read_text().splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InvalidConfig(f"{path}: malformed config line {raw!r}")
        key, value = line.split("=", 1)
        values[key.strip()] = value.strip()
    return values


def resolve_hyperparameters(file_cfg: Dict[str, str], overrides: Dict[str, object]) -> Hyperparameters:
    """Merge defaults <- config file <- explicit flags, then validate."""
    kwargs = {f.name: getattr(_DEFAULTS, f.name) for f in fields(Hyperparameters)}
    for key, raw in file_cfg.items():
        if key in _HPARAM_TYPES:
            kwargs[key] = _HPARAM_TYPES[key](raw)
        elif key == "adam_betas":
            parts = raw.split(",")
            if len(parts) != 2:
                raise InvalidConfig(f"adam_betas needs two comma-separated values, got {raw!r}")
            kwargs[key] = (float(parts[0]), float(parts[1]))
        elif key == "soft_pseudo_labels":
            kwargs[key] = _parse_bool(raw)
        # unknown keys (paths, model widths) are not hyperparameters
    for key, value in overrides.items():
        if value is not None:
            kwargs[key] = value
    h = Hyperparameters(**kwargs)
    validate_hyperparameters(h)
    return h


def resolve_model_widths(file_cfg: Dict[str, str], overrides: Dict[str, Optional[int]]) -> Dict[str, int]:
    out = {"d_z": 64, "d_c": 64}
    for key, cast in _MODEL_KEYS.items():
        if key in file_cfg:
            out[key] = cast(file_cfg[key])
        if overrides.get(key) is not None:
            out[key] = overrides[key]
    return out


def _hyperparameter_overrides(args: argparse.Namespace) -> Dict[str, object]:
    over: Dict[str, object] = {}
    for name in _HPARAM_TYPES:
        over[name] = getattr(args, name, None)
    beta1, beta2 = getattr(args, "adam_beta1", None), getattr(args, "adam_beta2", None)
    if beta1 is not None or beta2 is not None:
        b1 = beta1 if beta1 is not None else _DEFAULTS.adam_betas[0]
        b2 = beta2 if beta2 is not None else _DEFAULTS.adam_betas[1]
        over["adam_betas"] = (b1, b2)
    over["soft_pseudo_labels"] = getattr(args, "soft_pseudo_labels", None)
    return over


def _add_hyperparameter_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("hyperparameters (override config file and defaults)")
    for name, cast in _HPARAM_TYPES.items():
        flag = "--" + name.replace("_", "-")
        g.add_argument(flag, dest=name, type=cast, default=None,
                       help=f"(default: {getattr(_DEFAULTS, name)})")
    g.add_argument("--adam-beta1", type=float, default=None,
                   help=f"(default: {_DEFAULTS.adam_betas[0]})")
    g.add_argument("--adam-beta2", type=float, default=None,
                   help=f"(default: {_DEFAULTS.adam_betas[1]})")
    g.add_argument("--soft-pseudo-labels", dest="soft_pseudo_labels", type=_parse_bool,
                   default=None, metavar="BOOL",
                   help=f"(default: {_DEFAULTS.soft_pseudo_labels})")


def _add_model_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("model widths")
    g.add_argument("--d-z", dest="d_z", type=int, default=None, help="(default: 64)")
    g.add_argument("--d-c", dest="d_c", type=int, default=None, help="(default: 64)")


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, default=None, help="key=value config file")
    p.add_argument("--seed", type=int, default=0, help="global seed (default: 0)")


def _data_root_default() -> Optional[str]:
    return os.environ.get("SFUIDA_DATA_ROOT")


def _require(args: argparse.Namespace, attr: str, flag: str) -> Path:
    value = getattr(args, attr)
    if value is None:
        raise _Usage(f"{flag} is required (or set SFUIDA_DATA_ROOT)")
    return Path(value)


class _Usage(Exception):
    """Configuration/usage problem: exits with status 2."""


def _load_file_cfg(args: argparse.Namespace) -> Dict[str, str]:
    if getattr(args, "config", None) is None:
        return {}
    if not Path(args.config).exists():
        raise _Usage(f"--config: file not found: {args.config}")
    return parse_config_file(args.config)


# --- commands ----------------------------------------------------------------


def cmd_synth(args: argparse.Namespace) -> int:
    out = _require(args, "out", "--out")
    rng = np.random.default_rng(derive_seed(args.seed, "synth/population"))
    transition = dataio.default_transition_matrix()
    print(f"writing {args.subjects} synthetic subjects to {out}")
    for k in range(args.subjects):
        spec = dataio.SyntheticSubjectSpec(
            seed=derive_seed(args.seed, f"synth/{k}"),
            stage_transition_matrix=transition,
            amplitude_gain=float(rng.uniform(args.gain_min, args.gain_max)),
            frequency_shift=float(rng.uniform(args.shift_min, args.shift_max)),
            noise_sigma=args.noise_sigma,
        )
        rec = dataio.generate_synthetic(
            spec, args.epochs_per_subject, sample_rate=args.sample_rate,
            num_channels=args.channels, subject_id=f"s{k:02d}",
        )
        dataio.write_subject(rec, out)
    manifest = dataio.scan_dataset(out)
    for sid, n, has_labels in manifest.subjects:
        print(f"  {sid}: {n} epochs, labels={'yes' if has_labels else 'no'}")
    print(f"sample_rate={manifest.sample_rate} channels={','.join(manifest.channels)}")
    return 0


def cmd_import(args: argparse.Namespace) -> int:
    src = Path(args.src)
    out = _require(args, "out", "--out")
    if not src.exists():
        raise _Usage(f"--src: directory not found: {src}")
    subject_dirs = sorted(p.name for p in src.iterdir() if (p / dataio.META_FILE).exists())
    if not subject_dirs:
        raise _Usage(f"--src: no subjects under {src}")
    for sid in subject_dirs:
        rec, raw_labels = dataio.read_subject_raw(src, sid)
        if raw_labels is not None:
            if args.label_scheme == "rk":
                rec = dataio.convert_rk_labels(rec, raw_labels)
            else:
                rec = dataio.SubjectRecording(
                    rec.subject_id, rec.epochs, rec.sample_rate, raw_labels.astype(np.int64)
                )
        if args.bandpass is not None:
            rec = dataio.bandpass_recording(rec, args.bandpass[0], args.bandpass[1])
        if args.resample_to is not None:
            rec = dataio.resample_recording(rec, args.resample_to)
        dataio.write_subject(rec, out, channel_names=dataio.subject_channel_names(src, sid))
        print(f"  imported {sid}: {rec.num_epochs} epochs at {rec.sample_rate} Hz")
    return 0


def _split_ids(raw: Optional[str]) -> Optional[list]:
    if raw is None:
        return None
    return [s for s in raw.split(",") if s]


def cmd_pretrain(args: argparse.Namespace) -> int:
    data = _require(args, "data", "--data")
    if not Path(data).exists():
        raise _Usage(f"--data: directory not found: {data}")
    file_cfg = _load_file_cfg(args)
    h = resolve_hyperparameters(file_cfg, _hyperparameter_overrides(args))
    widths = resolve_model_widths(file_cfg, {"d_z": args.d_z, "d_c": args.d_c})

    manifest = dataio.scan_dataset(data)
    train_ids = _split_ids(args.train_subjects)
    val_ids = _split_ids(args.val_subjects)
    if train_ids is None or val_ids is None:
        ids = manifest.subject_ids
        order = [ids[i] for i in np.random.default_rng(args.seed).permutation(len(ids))]
        n_val = max(1, round(len(order) / 9))
        val_ids = val_ids or order[:n_val]
        train_ids = train_ids or [s for s in order if s not in val_ids]
    if set(train_ids) & set(val_ids):
        raise _Usage("--train-subjects and --val-subjects overlap")

    train_seqs, val_seqs = [], []
    for sid in train_ids:
        train_seqs += dataio.make_sequences(dataio.read_subject(data, sid), h.L, stride=h.L)
    for sid in val_ids:
        val_seqs += dataio.make_sequences(dataio.read_subject(data, sid), h.L, stride=h.L)

    config = ModelConfig(
        in_channels=len(manifest.channels),
        samples_per_epoch=dataio._epoch_samples(manifest.sample_rate),
        d_z=widths["d_z"],
        d_c=widths["d_c"],
    )
    model = SscModel(config, h.L, h.T, seed=derive_seed(args.seed, "pretrain/init"))
    model, history = pretrain(model, train_seqs, val_seqs, h,
                              seed=derive_seed(args.seed, "pretrain/train"), log=print)
    save_checkpoint(model, args.out)
    if args.history is not None:
        write_history(history, args.history)
    best = max((r.val_mf1 for r in history), default=float("nan"))
    print(f"saved checkpoint to {args.out} (best val MF1 {best:.4f})")
    return 0


def cmd_adapt(args: argparse.Namespace) -> int:
    data = _require(args, "data", "--data")
    if not Path(args.source).exists():
        raise _Usage(f"--source: checkpoint not found: {args.source}")
    file_cfg = _load_file_cfg(args)
    h = resolve_hyperparameters(file_cfg, _hyperparameter_overrides(args))

    source = load_checkpoint(args.source)
    rec = dataio.read_subject(data, args.subject)
    report = evalharness.run_subject(
        source, rec, VARIANTS[args.variant], h, seed=derive_seed(args.seed, f"adapt/{args.subject}")
    )
    dataio.atomic_write_text(Path(args.out), evalharness.reports_to_csv([report]))
    print(
        f"{report.subject_id} [{report.variant.value}]: acc {report.acc:.4f} "
        f"mf1 {report.mf1:.4f} (ssa {report.ssa_seconds:.1f}s, ssp {report.ssp_seconds:.1f}s)"
    )
    return 0


def cmd_evaluate(args: argparse.Namespace) -> int:
    data = _require(args, "data", "--data")
    if not Path(data).exists():
        raise _Usage(f"--data: directory not found: {data}")
    file_cfg = _load_file_cfg(args)
    h = resolve_hyperparameters(file_cfg, _hyperparameter_overrides(args))
    widths = resolve_model_widths(file_cfg, {"d_z": args.d_z, "d_c": args.d_c})

    manifest = dataio.scan_dataset(data)
    plan = dataio.plan_folds(manifest.subject_ids, args.folds, args.seed)
    config = ModelConfig(
        in_channels=len(manifest.channels),
        samples_per_epoch=dataio._epoch_samples(manifest.sample_rate),
        d_z=widths["d_z"],
        d_c=widths["d_c"],
    )
    fold_reports = evalharness.run_cv(
        manifest, plan, h, config, variant=VARIANTS[args.variant],
        seed=args.seed, jobs=args.jobs, log=print,
    )
    evalharness.write_fold_reports(fold_reports, args.out)
    print(f"wrote {len(fold_reports)} fold reports to {args.out}")
    return 0


def cmd_export(args: argparse.Namespace) -> int:
    data = _require(args, "data", "--data")
    if not Path(args.source).exists():
        raise _Usage(f"--source: checkpoint not found: {args.source}")
    model = load_checkpoint(args.source)
    rec = dataio.read_subject(data, args.subject)
    evalharness.export_embeddings(model, rec, args.out)
    print(f"wrote embeddings for {args.subject} to {args.out}")
    return 0


# --- parser -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sfuida",
        description="Pretrain a sleep-stage sequence classifier, then adapt it "
        "per subject without source data.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic multi-subject dataset")
    _add_common(p)
    p.add_argument("--out", type=Path, default=_data_root_default(),
                   help="dataset root (default: $SFUIDA_DATA_ROOT)")
    p.add_argument("--subjects", type=_positive_int, required=True)
    p.add_argument("--epochs-per-subject", type=_positive_int, default=800,
                   help="(default: 800)")
    p.add_argument("--sample-rate", type=float, default=100.0, help="(default: 100)")
    p.add_argument("--channels", type=_positive_int, default=2, help="(default: 2)")
    p.add_argument("--noise-sigma", type=float, default=0.1, help="(default: 0.1)")
    p.add_argument("--gain-min", type=float, default=0.8, help="(default: 0.8)")
    p.add_argument("--gain-max", type=float, default=1.2, help="(default: 1.2)")
    p.add_argument("--shift-min", type=float, default=-0.5, help="(default: -0.5)")
    p.add_argument("--shift-max", type=float, default=0.5, help="(default: 0.5)")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("import", help="ingest a canonical-format dataset")
    _add_common(p)
    p.add_argument("--src", type=Path, required=True, help="source dataset root")
    p.add_argument("--out", type=Path, default=_data_root_default(),
                   help="destination root (default: $SFUIDA_DATA_ROOT)")
    p.add_argument("--label-scheme", choices=("aasm", "rk"), default="aasm",
                   help="rk merges S3/S4 into N3 and drops unscorable epochs (default: aasm)")
    p.add_argument("--resample-to", type=float, default=None, help="target Hz (default: keep)")
    p.add_argument("--bandpass", type=float, nargs=2, metavar=("LO", "HI"), default=None,
                   help="zero-phase band-pass in Hz (default: off)")
    p.set_defaults(func=cmd_import)

    p = sub.add_parser("pretrain", help="supervised source-domain training")
    _add_common(p)
    p.add_argument("--data", type=Path, default=_data_root_default(),
                   help="dataset root (default: $SFUIDA_DATA_ROOT)")
    p.add_argument("--train-subjects", default=None, help="comma list (default: auto 8:1 split)")
    p.add_argument("--val-subjects", default=None, help="comma list (default: auto 8:1 split)")
    p.add_argument("--out", type=Path, required=True, help="checkpoint path")
    p.add_argument("--history", type=Path, default=None, help="per-epoch metrics CSV")
    _add_hyperparameter_flags(p)
    _add_model_flags(p)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("adapt", help="adapt a source checkpoint to one subject")
    _add_common(p)
    p.add_argument("--data", type=Path, default=_data_root_default(),
                   help="dataset root (default: $SFUIDA_DATA_ROOT)")
    p.add_argument("--source", type=Path, required=True, help="source checkpoint")
    p.add_argument("--subject", required=True)
    p.add_argument("--variant", choices=sorted(VARIANTS), default="full",
                   help="(default: full)")
    p.add_argument("--out", type=Path, required=True, help="report CSV path")
    _add_hyperparameter_flags(p)
    p.set_defaults(func=cmd_adapt)

    p = sub.add_parser("evaluate", help="subject-disjoint cross-validation")
    _add_common(p)
    p.add_argument("--data", type=Path, default=_data_root_default(),
                   help="dataset root (default: $SFUIDA_DATA_ROOT)")
    p.add_argument("--folds", type=_positive_int, default=10, help="(default: 10)")
    p.add_argument("--variant", choices=sorted(VARIANTS), default="full",
                   help="(default: full)")
    p.add_argument("--jobs", type=_positive_int, default=1,
                   help="subject-level parallelism (default: 1)")
    p.add_argument("--out", type=Path, required=True, help="report directory")
    _add_hyperparameter_flags(p)
    _add_model_flags(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("export-embeddings", help="write per-epoch latents to CSV")
    _add_common(p)
    p.add_argument("--data", type=Path, default=_data_root_default(),
                   help="dataset root (default: $SFUIDA_DATA_ROOT)")
    p.add_argument("--source", type=Path, required=True, help="source checkpoint")
    p.add_argument("--subject", required=True)
    p.add_argument("--out", type=Path, required=True, help="embedding CSV path")
    p.set_defaults(func=cmd_export)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except _Usage as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except InvalidConfig as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except (SfuidaError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
