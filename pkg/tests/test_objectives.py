import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from retrorank.objectives import (
    LengthMismatch,
    NonSquare,
    NoPositive,
    kld_loss,
    kld_loss_rows,
    smoothed_targets,
    stage1_loss,
    stage2_loss,
    stage2_loss_rows,
)


def fd_check(fn, x, grad, h=1e-6, rtol=1e-4):
    """Central finite differences against an analytic gradient."""
    x = x.astype(np.float64)
    for i in range(x.size):
        xp = x.copy()
        xp.flat[i] += h
        xm = x.copy()
        xm.flat[i] -= h
        fd = (fn(xp) - fn(xm)) / (2 * h)
        an = grad.flat[i]
        assert abs(fd - an) <= rtol * max(abs(fd), abs(an), 1e-7), (i, fd, an)


class TestStage1Loss:
    def test_single_element(self):
        loss, grad = stage1_loss(np.array([[3.7]]))
        assert loss == 0.0
        np.testing.assert_allclose(grad, 0.0)

    def test_uniform_two_by_two(self):
        loss, _ = stage1_loss(np.full((2, 2), 1.3))
        np.testing.assert_allclose(loss, np.log(2), rtol=1e-12)

    def test_strong_diagonal(self):
        # brute force: every row/col softmax gives -log(e^10/(e^10+1))
        expected = np.log(1 + np.exp(-10.0))
        loss, _ = stage1_loss(np.array([[10.0, 0.0], [0.0, 10.0]]))
        np.testing.assert_allclose(loss, expected, rtol=1e-9)
        assert abs(loss - 4.54e-5) < 1e-6

    def test_non_square(self):
        with pytest.raises(NonSquare):
            stage1_loss(np.zeros((2, 3)))

    def test_global_shift_invariance(self):
        rng = np.random.default_rng(0)
        S = rng.standard_normal((5, 5))
        base, _ = stage1_loss(S)
        shifted, _ = stage1_loss(S + 11.0)
        np.testing.assert_allclose(shifted, base, rtol=1e-9)

    def test_row_direction_term_row_shift_invariant(self):
        # the symmetric loss is not row-shift invariant (the column term
        # moves); the row-direction cross entropy is
        rng = np.random.default_rng(1)
        S = rng.standard_normal((4, 4))

        def row_term(M):
            z = M - M.max(1, keepdims=True)
            log_sm = z - np.log(np.exp(z).sum(1, keepdims=True))
            return -np.mean(np.diag(log_sm))

        S2 = S.copy()
        S2[2] += 7.0
        np.testing.assert_allclose(row_term(S2), row_term(S), rtol=1e-9)

    def test_gradient_finite_differences(self):
        rng = np.random.default_rng(2)
        S = rng.standard_normal((4, 4))
        _, grad = stage1_loss(S)
        fd_check(lambda x: stage1_loss(x)[0], S, grad)


class TestSmoothedTargets:
    def test_paper_default(self):
        mask = np.zeros(64, dtype=bool)
        mask[5] = True
        t = smoothed_targets(mask, 0.02)
        np.testing.assert_allclose(t.probs[5], 0.9803125)
        np.testing.assert_allclose(t.probs[0], 0.0003125)

    def test_zero_epsilon_one_hot(self):
        mask = np.array([False, True, False])
        t = smoothed_targets(mask, 0.0)
        np.testing.assert_array_equal(t.probs, [0.0, 1.0, 0.0])

    def test_all_positive_uniform(self):
        t = smoothed_targets(np.ones(8, dtype=bool), 0.3)
        np.testing.assert_allclose(t.probs, 1 / 8)

    def test_no_positive(self):
        with pytest.raises(NoPositive):
            smoothed_targets(np.zeros(4, dtype=bool), 0.02)

    @given(
        st.integers(min_value=1, max_value=64),
        st.integers(min_value=2, max_value=128),
        st.floats(min_value=0.0, max_value=0.99),
    )
    def test_sums_to_one(self, m, c, eps):
        m = min(m, c)
        mask = np.zeros(c, dtype=bool)
        mask[:m] = True
        t = smoothed_targets(mask, eps)
        assert abs(t.probs.sum() - 1.0) <= 1e-12


class TestStage2Loss:
    def test_uniform_scores(self):
        mask = np.array([True, False, False, False])
        t = smoothed_targets(mask, 0.0)
        loss, _ = stage2_loss(np.zeros(4), t, 0.0)
        np.testing.assert_allclose(loss, np.log(4), rtol=1e-12)

    def test_uniform_with_entropy(self):
        mask = np.array([True, False, False, False])
        t = smoothed_targets(mask, 0.0)
        loss, _ = stage2_loss(np.zeros(4), t, 0.001)
        np.testing.assert_allclose(loss, np.log(4) * (1 - 0.001), rtol=1e-12)
        assert abs(loss - 1.38491) < 1e-4

    def test_dominant_positive_drives_loss_to_zero(self):
        mask = np.array([True, False, False])
        t = smoothed_targets(mask, 0.0)
        loss, _ = stage2_loss(np.array([60.0, 0.0, 0.0]), t, 0.0)
        assert loss < 1e-12

    def test_length_mismatch(self):
        t = smoothed_targets(np.array([True, False]), 0.0)
        with pytest.raises(LengthMismatch):
            stage2_loss(np.zeros(3), t, 0.0)

    def test_matches_plain_cross_entropy(self):
        # eps=0, beta=0, m=1 equals standard cross entropy on 100 instances
        rng = np.random.default_rng(3)
        for _ in range(100):
            c = int(rng.integers(2, 12))
            scores = rng.standard_normal(c)
            pos = int(rng.integers(0, c))
            mask = np.zeros(c, dtype=bool)
            mask[pos] = True
            loss, _ = stage2_loss(scores, smoothed_targets(mask, 0.0), 0.0)
            shifted = scores - scores.max()
            expected = -(shifted[pos] - np.log(np.exp(shifted).sum()))
            np.testing.assert_allclose(loss, expected, rtol=1e-10)

    def test_gradient_finite_differences(self):
        rng = np.random.default_rng(4)
        for _ in range(20):
            c = int(rng.integers(2, 10))
            scores = rng.standard_normal(c)
            m = int(rng.integers(1, c))
            mask = np.zeros(c, dtype=bool)
            mask[rng.choice(c, size=m, replace=False)] = True
            t = smoothed_targets(mask, 0.05)
            _, grad = stage2_loss(scores, t, 0.01)
            fd_check(lambda x, t=t: stage2_loss(x, t, 0.01)[0], scores, grad)

    def test_rows_match_scalar_version(self):
        rng = np.random.default_rng(5)
        scores = rng.standard_normal((6, 8))
        masks = rng.random((6, 8)) < 0.3
        masks[:, 0] = True
        probs = np.stack([smoothed_targets(m, 0.02).probs for m in masks])
        losses, grads = stage2_loss_rows(scores, probs, 0.001)
        for i in range(6):
            li, gi = stage2_loss(scores[i], smoothed_targets(masks[i], 0.02), 0.001)
            np.testing.assert_allclose(losses[i], li, rtol=1e-12)
            np.testing.assert_allclose(grads[i], gi, rtol=1e-12)


class TestKldLoss:
    def test_equal_distributions(self):
        s = np.array([0.3, -0.2, 1.0])
        loss, grad = kld_loss(s, s.copy())
        assert abs(loss) < 1e-12
        np.testing.assert_allclose(grad, 0.0, atol=1e-12)

    def test_half_half_vs_ninety_ten(self):
        teacher = np.log(np.array([0.5, 0.5]))
        student = np.log(np.array([0.9, 0.1]))
        loss, _ = kld_loss(teacher, student)
        expected = 0.5 * np.log(0.5 / 0.9) + 0.5 * np.log(0.5 / 0.1)
        np.testing.assert_allclose(loss, expected, rtol=1e-12)
        assert abs(loss - 0.5108) < 1e-4

    def test_one_hot_teacher_uniform_student_limit(self):
        c = 8
        teacher = np.zeros(c)
        teacher[0] = 200.0  # effectively one-hot
        student = np.zeros(c)
        loss, _ = kld_loss(teacher, student)
        np.testing.assert_allclose(loss, np.log(c), rtol=1e-9)

    def test_length_mismatch(self):
        with pytest.raises(LengthMismatch):
            kld_loss(np.zeros(2), np.zeros(3))

    @settings(max_examples=50)
    @given(st.integers(min_value=0, max_value=10_000))
    def test_nonnegative_zero_iff_equal(self, seed):
        rng = np.random.default_rng(seed)
        c = int(rng.integers(2, 10))
        t = rng.standard_normal(c)
        s = rng.standard_normal(c)
        loss, _ = kld_loss(t, s)
        assert loss >= -1e-15
        same, _ = kld_loss(t, t + 3.0)  # shift leaves softmax unchanged
        assert abs(same) < 1e-9

    def test_gradient_finite_differences_student_only(self):
        rng = np.random.default_rng(6)
        for _ in range(20):
            c = int(rng.integers(2, 10))
            teacher = rng.standard_normal(c)
            student = rng.standard_normal(c)
            _, grad = kld_loss(teacher, student)
            fd_check(lambda x: kld_loss(teacher, x)[0], student, grad)

    def test_rows_match_scalar_version(self):
        rng = np.random.default_rng(7)
        t = rng.standard_normal((5, 6))
        s = rng.standard_normal((5, 6))
        losses, grads = kld_loss_rows(t, s)
        for i in range(5):
            li, gi = kld_loss(t[i], s[i])
            np.testing.assert_allclose(losses[i], li, rtol=1e-12)
            np.testing.assert_allclose(grads[i], gi, rtol=1e-12)
