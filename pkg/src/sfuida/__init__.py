"""Source-free per-subject adaptation for sleep-stage sequence classifiers.

Pipeline: supervised pretraining on a labeled source population, then for each
new unlabeled individual (1) cross-view contrastive alignment of the
representation and (2) EMA-teacher pseudo-label fine-tuning of the classifier.
"""

from .core import (
    Hyperparameters,
    SleepSequence,
    StageLabel,
    SubjectRecording,
    validate_hyperparameters,
)
from .dataio import (
    DatasetManifest,
    FoldPlan,
    SyntheticSubjectSpec,
    generate_synthetic,
    make_sequences,
    plan_folds,
    read_subject,
    scan_dataset,
    write_subject,
)
from .evalharness import AdaptationReport, FoldReport, Variant, run_cv, run_subject
from .model import ModelConfig, SscModel, load_checkpoint, save_checkpoint
from .personalize import PseudoLabelBatch, TeacherState, adapt_ssp, ema_update, pseudo_label
from .pretrain import pretrain, sequence_cross_entropy
from .scc import CrossViewBatch, adapt_ssa, mmd_distance, reverse_augment, scc_loss

__version__ = "0.1.0"
