import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from helpers import (
    fd_tensor_grad,
    rel_error,
    synth_subject,
    tiny_hparams,
    tiny_model,
    RecordingSpy,
)
from sfuida.core import ShapeMismatch, StructureMismatch, SubjectTooShort
from sfuida.model import SscModel
from sfuida.personalize import (
    PseudoLabelBatch,
    TeacherState,
    adapt_ssp,
    ema_update,
    init_teacher,
    pseudo_ce_loss,
    pseudo_label,
)


class TestEmaUpdate:
    def test_alpha_blend_arithmetic(self):
        student = tiny_model(seed=0)
        teacher = init_teacher(student, alpha=0.996)
        with torch.no_grad():
            for p in teacher.model.parameters():
                p.fill_(1.0)
            for p in student.parameters():
                p.zero_()
        ema_update(teacher, student)
        for p in teacher.model.parameters():
            assert torch.allclose(p, torch.full_like(p, 0.996), atol=1e-7)

    def test_alpha_one_is_fixed_point(self):
        student = tiny_model(seed=1)
        teacher = init_teacher(student, alpha=1.0)
        before = teacher.model.snapshot()
        with torch.no_grad():
            for p in student.parameters():
                p.add_(3.0)
        ema_update(teacher, student)
        for name, arr in teacher.model.snapshot().items():
            assert np.array_equal(arr, before[name])

    def test_alpha_zero_copies_student(self):
        student = tiny_model(seed=2)
        teacher = init_teacher(student, alpha=0.0)
        with torch.no_grad():
            for p in student.parameters():
                p.mul_(0.5).add_(0.25)
        ema_update(teacher, student)
        for (n, p_t), (_, p_s) in zip(
            teacher.model.named_parameters(), student.named_parameters()
        ):
            assert torch.allclose(p_t, p_s, atol=1e-7), n

    def test_contraction_is_exactly_alpha_pow_n(self):
        # with a constant student, the gap shrinks by alpha each update
        student = tiny_model(seed=3).double()
        teacher = init_teacher(student, alpha=0.9)
        with torch.no_grad():
            for p in teacher.model.parameters():
                p.add_(1.0)  # initial gap of exactly 1 everywhere
        for n_updates in range(1, 6):
            ema_update(teacher, student)
            expected_gap = 0.9**n_updates
            for (name, p_t), (_, p_s) in zip(
                teacher.model.named_parameters(), student.named_parameters()
            ):
                gap = (p_t - p_s).abs()
                assert torch.allclose(
                    gap, torch.full_like(gap, expected_gap), rtol=1e-12, atol=1e-12
                ), name

    def test_structure_mismatch(self):
        student = tiny_model(seed=4)
        h = tiny_hparams()
        other = SscModel(student.config, h.L, h.T - 1, seed=0)  # different head count
        teacher = init_teacher(other, alpha=0.9)
        with pytest.raises(StructureMismatch):
            ema_update(teacher, student)


def _probs_from_max(max_probs):
    """Rows with a chosen max probability at class 0, rest spread evenly."""
    L = len(max_probs)
    rows = np.empty((L, 5))
    for i, m in enumerate(max_probs):
        rows[i] = [(1 - m) / 4] * 5
        rows[i, 0] = m
    return torch.tensor(rows[np.newaxis])  # [1, L, 5]


class TestPseudoLabelRetention:
    def test_paper_thresholds_retain_fifteen_confident(self):
        probs = _probs_from_max([0.85] * 15 + [0.5] * 5)
        plb = PseudoLabelBatch.from_probs(probs, xi=0.8, n_c=15)
        assert plb.epoch_confident[0].sum() == 15
        assert bool(plb.sequence_retained[0])

    def test_fourteen_confident_not_retained(self):
        probs = _probs_from_max([0.85] * 14 + [0.5] * 6)
        plb = PseudoLabelBatch.from_probs(probs, xi=0.8, n_c=15)
        assert not bool(plb.sequence_retained[0])

    def test_exactly_xi_is_not_confident(self):
        probs = _probs_from_max([0.80] * 20)
        plb = PseudoLabelBatch.from_probs(probs, xi=0.8, n_c=15)
        assert plb.epoch_confident.sum() == 0
        assert not bool(plb.sequence_retained[0])

    def test_hard_labels_are_argmax(self):
        rng = np.random.default_rng(0)
        raw = rng.random((3, 20, 5))
        probs = torch.tensor(raw / raw.sum(axis=-1, keepdims=True))
        plb = PseudoLabelBatch.from_probs(probs, xi=0.8, n_c=15)
        assert np.array_equal(plb.hard_labels.numpy(), raw.argmax(axis=-1))

    def test_retention_monotone_in_xi_and_n_c(self):
        rng = np.random.default_rng(1)
        raw = rng.random((8, 20, 5)) ** 3
        probs = torch.tensor(raw / raw.sum(axis=-1, keepdims=True))
        for _ in range(50):
            xi1, xi2 = sorted(rng.uniform(0.05, 0.95, 2))
            nc1, nc2 = sorted(rng.integers(0, 21, 2))
            loose = PseudoLabelBatch.from_probs(probs, xi=xi1, n_c=int(nc1))
            tight = PseudoLabelBatch.from_probs(probs, xi=xi2, n_c=int(nc2))
            # tightening either threshold never retains a previously rejected row
            gained = tight.sequence_retained & ~loose.sequence_retained
            assert not bool(gained.any())

    def test_hard_labels_invariant_under_logit_scaling(self):
        rng = np.random.default_rng(2)
        logits = torch.tensor(rng.normal(size=(4, 20, 5)))
        for c in (0.5, 2.0, 10.0):
            a = PseudoLabelBatch.from_probs(F.softmax(logits, dim=-1), 0.8, 15)
            b = PseudoLabelBatch.from_probs(F.softmax(c * logits, dim=-1), 0.8, 15)
            assert torch.equal(a.hard_labels, b.hard_labels)

    def test_unnormalized_rows_rejected(self):
        with pytest.raises(ShapeMismatch):
            PseudoLabelBatch.from_probs(torch.full((1, 4, 5), 0.3), 0.8, 2)

    def test_teacher_probs_rows_sum_to_one(self):
        h = tiny_hparams()
        teacher = init_teacher(tiny_model(seed=5), h.alpha)
        rec = synth_subject(seed=50, num_epochs=40)
        from sfuida.dataio import make_sequences

        plb = pseudo_label(teacher, make_sequences(rec, h.L, with_labels=False), h)
        sums = plb.probs.sum(dim=-1)
        assert torch.allclose(sums, torch.ones_like(sums), atol=1e-6)


class TestPseudoCeLoss:
    def test_nothing_retained_gives_zero(self):
        probs = _probs_from_max([0.5] * 20)
        plb = PseudoLabelBatch.from_probs(probs, xi=0.8, n_c=15)
        logits = torch.randn(1, 20, 5)
        assert float(pseudo_ce_loss(logits, plb)) == 0.0

    def test_perfect_student_loss_vanishes(self):
        probs = _probs_from_max([0.9] * 20)  # retained, labels all class 0
        plb = PseudoLabelBatch.from_probs(probs, xi=0.8, n_c=15)
        logits = torch.zeros(1, 20, 5)
        logits[..., 0] = 50.0
        assert float(pseudo_ce_loss(logits, plb)) < 1e-6

    def test_matches_hand_computation(self):
        # oracle: -sum log softmax at the teacher argmax, by scalar arithmetic
        probs = torch.tensor([[[0.9, 0.025, 0.025, 0.025, 0.025],
                               [0.05, 0.85, 0.05, 0.025, 0.025]]])
        plb = PseudoLabelBatch.from_probs(probs, xi=0.8, n_c=2)
        assert bool(plb.sequence_retained[0])
        logits = torch.tensor([[[1.0, 0.0, 0.0, 0.0, 0.0],
                                [0.2, 2.0, -1.0, 0.0, 0.5]]])
        expected = 0.0
        for row, lab in zip(logits[0].tolist(), [0, 1]):
            z = [math.exp(v) for v in row]
            expected += -math.log(z[lab] / sum(z))
        expected /= 2
        assert abs(float(pseudo_ce_loss(logits, plb)) - expected) < 1e-6

    def test_non_retained_rows_get_zero_gradient(self):
        probs = torch.tensor(np.stack([
            _probs_from_max([0.9] * 20)[0].numpy(),
            _probs_from_max([0.5] * 20)[0].numpy(),
        ]))
        plb = PseudoLabelBatch.from_probs(probs, xi=0.8, n_c=15)
        logits = torch.randn(2, 20, 5, requires_grad=True)
        pseudo_ce_loss(logits, plb).backward()
        assert torch.equal(logits.grad[1], torch.zeros_like(logits.grad[1]))
        assert not torch.equal(logits.grad[0], torch.zeros_like(logits.grad[0]))

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(3)
        probs_raw = rng.random((4, 20, 5)) ** 4
        probs = torch.tensor(probs_raw / probs_raw.sum(axis=-1, keepdims=True))
        plb = PseudoLabelBatch.from_probs(probs, xi=0.5, n_c=10)
        assert bool(plb.sequence_retained.any())
        logits = torch.tensor(rng.normal(size=(4, 20, 5)), requires_grad=True)
        pseudo_ce_loss(logits, plb).backward()
        fd = fd_tensor_grad(lambda t: pseudo_ce_loss(t, plb), logits.detach(), eps=1e-6)
        assert rel_error(logits.grad, fd) < 1e-4

    def test_soft_mode_targets_full_distribution(self):
        probs = _probs_from_max([0.9] * 20)
        plb = PseudoLabelBatch.from_probs(probs, xi=0.8, n_c=15)
        logits = torch.randn(1, 20, 5, dtype=torch.float64)
        got = float(pseudo_ce_loss(logits, plb, soft=True))
        want = float(-(plb.probs * F.log_softmax(logits, dim=-1)).sum(-1).mean())
        assert abs(got - want) < 1e-9

    def test_shape_mismatch(self):
        probs = _probs_from_max([0.9] * 20)
        plb = PseudoLabelBatch.from_probs(probs, xi=0.8, n_c=15)
        with pytest.raises(ShapeMismatch):
            pseudo_ce_loss(torch.randn(1, 19, 5), plb)


class TestAdaptSsp:
    def test_zero_epochs_unchanged(self):
        h = tiny_hparams(ssp_epochs=0)
        m = tiny_model(h, seed=6)
        before = m.snapshot()
        rec = synth_subject(seed=60, num_epochs=40)
        adapt_ssp(m, rec.without_labels(), h, seed=0)
        for name, arr in m.snapshot().items():
            assert np.array_equal(arr, before[name])

    def test_unconfident_teacher_leaves_student_bit_identical(self):
        # an untrained tiny model is near-uniform: nothing passes xi=0.999
        h = tiny_hparams(ssp_epochs=3, lr_ssp=1e-3, xi=0.999, n_c=20)
        m = tiny_model(h, seed=7)
        before = m.snapshot()
        rec = synth_subject(seed=61, num_epochs=60)
        retention = []
        adapt_ssp(m, rec.without_labels(), h, seed=0, retention_log=retention)
        assert retention == [0.0, 0.0, 0.0]
        for name, arr in m.snapshot().items():
            assert np.array_equal(arr, before[name])

    def test_subject_too_short(self):
        h = tiny_hparams()
        with pytest.raises(SubjectTooShort):
            adapt_ssp(tiny_model(h, seed=8), synth_subject(seed=62, num_epochs=10), h)

    def test_teacher_changes_only_through_ema(self):
        # with alpha = 1 the EMA is the identity, so any teacher drift would
        # have to come from a gradient leak; require bit-equality with the
        # initial student state
        h = tiny_hparams(ssp_epochs=2, lr_ssp=1e-3, alpha=1.0, xi=0.2, n_c=1)
        m = tiny_model(h, seed=9)
        initial = m.snapshot()
        rec = synth_subject(seed=63, num_epochs=60)

        captured = {}
        import sfuida.personalize as mod

        orig_init = mod.init_teacher

        def spy_init(student, alpha):
            state = orig_init(student, alpha)
            captured["teacher"] = state
            return state

        mod.init_teacher = spy_init
        try:
            adapt_ssp(m, rec.without_labels(), h, seed=0)
        finally:
            mod.init_teacher = orig_init

        teacher = captured["teacher"]
        assert all(not p.requires_grad for p in teacher.model.parameters())
        assert all(p.grad is None for p in teacher.model.parameters())
        for name, arr in teacher.model.snapshot().items():
            assert np.array_equal(arr, initial[name]), name
        # and the student itself did move
        moved = any(
            not np.array_equal(arr, initial[name]) for name, arr in m.snapshot().items()
        )
        assert moved

    def test_never_reads_labels(self):
        h = tiny_hparams(ssp_epochs=1, lr_ssp=1e-4, xi=0.2, n_c=1)
        m = tiny_model(h, seed=10)
        rec = synth_subject(seed=64, num_epochs=40)
        spy = RecordingSpy(rec)
        adapt_ssp(m, spy, h, seed=0)
        assert spy.reads["labels"] == 0
        assert spy.reads["epochs"] > 0
