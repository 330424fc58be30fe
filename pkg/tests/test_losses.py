import math

import numpy as np
import pytest

from jedssl import autodiff as ad
from jedssl.autodiff import Tensor, backward
from jedssl.losses import (
    JointFinetuneWeights,
    JointSSLWeights,
    cross_entropy,
    ctc_loss,
    ctc_min_length,
    ctc_nll,
    joint_finetune_loss,
    joint_ssl_loss,
    masked_prediction_loss,
    sequence_loss,
)

from oracles import all_ctc_labels, ctc_brute_force, log_softmax_np


def _ce_manual(logits, target, eps=0.0):
    lp = log_softmax_np(logits)
    V = len(logits)
    q = np.full(V, eps / V)
    q[target] += 1 - eps
    return -(q * lp).sum()


class TestCrossEntropy:
    def test_masked_prediction_averages_masked_frames_only(self, rng):
        logits = rng.normal(size=(2, 5, 4))
        targets = rng.integers(0, 4, (2, 5))
        masked = np.array([[1, 0, 0, 1, 0], [0, 0, 1, 0, 0]], dtype=bool)
        ref = np.mean([_ce_manual(logits[b, t], targets[b, t]) for b, t in zip(*np.nonzero(masked))])
        assert masked_prediction_loss(Tensor(logits), targets, masked).item() == pytest.approx(ref, rel=1e-12)

    def test_unmasked_logits_get_zero_gradient(self, rng):
        logits = Tensor(rng.normal(size=(1, 6, 3)), requires_grad=True)
        masked = np.array([[0, 1, 1, 0, 0, 0]], dtype=bool)
        backward(masked_prediction_loss(logits, rng.integers(0, 3, (1, 6)), masked))
        assert np.all(logits.grad[~masked] == 0.0)
        assert np.all(np.abs(logits.grad[masked]).sum(-1) > 0)

    def test_no_masked_frames_raises(self, rng):
        with pytest.raises(ValueError, match="no masked"):
            masked_prediction_loss(Tensor(rng.normal(size=(1, 3, 2))), np.zeros((1, 3), int), np.zeros((1, 3), bool))

    def test_label_smoothing(self, rng):
        logits = rng.normal(size=(3, 5))
        targets = np.array([0, 4, 2])
        got = sequence_loss(Tensor(logits[None]), targets[None], smoothing=0.1).item()
        ref = np.mean([_ce_manual(l, t, 0.1) for l, t in zip(logits, targets)])
        assert got == pytest.approx(ref, rel=1e-12)

    def test_sequence_loss_ignores_padding(self, rng):
        logits = rng.normal(size=(1, 4, 3))
        a = sequence_loss(Tensor(logits), np.array([[1, 2, 0, 0]]), np.array([[1, 1, 0, 0]], bool)).item()
        b = sequence_loss(Tensor(logits[:, :2]), np.array([[1, 2]])).item()
        assert a == pytest.approx(b, rel=1e-12)

    def test_target_out_of_range(self, rng):
        with pytest.raises(IndexError):
            cross_entropy(Tensor(rng.normal(size=(2, 3))), np.array([0, 3]), np.ones(2))

    def test_sequence_length_mismatch_reports_lengths(self, rng):
        with pytest.raises(ValueError, match="targets"):
            sequence_loss(Tensor(rng.normal(size=(1, 3, 4))), np.zeros((1, 4), int))


class TestJointWeights:
    @pytest.mark.parametrize("alpha", [0.0, 0.5, 1.0])
    def test_ssl_combination(self, alpha):
        lm, ls = Tensor(np.array(1.7)), Tensor(np.array(0.4))
        assert joint_ssl_loss(lm, ls, alpha).item() == alpha * 1.7 + (1 - alpha) * 0.4

    @pytest.mark.parametrize("beta", [0.0, 0.3, 1.0])
    def test_finetune_combination(self, beta):
        c, a = Tensor(np.array(2.5)), Tensor(np.array(0.9))
        assert joint_finetune_loss(c, a, beta).item() == beta * 2.5 + (1 - beta) * 0.9

    def test_weight_ranges(self):
        with pytest.raises(ValueError):
            JointSSLWeights(1.5)
        with pytest.raises(ValueError):
            JointFinetuneWeights(-0.1)


class TestCTC:
    def test_two_frames_single_label_uniform(self):
        # paths for "a" over 2 frames: aa, a_, _a out of 4 equally likely
        loss = ctc_loss(Tensor(np.zeros((2, 2))), [1]).item()
        assert loss == pytest.approx(-math.log(3 / 4), abs=1e-12)

    def test_matches_brute_force(self, rng):
        for _ in range(60):
            T, V = int(rng.integers(1, 6)), int(rng.integers(2, 4))
            logp = log_softmax_np(rng.normal(0, 2, (T, V)))
            L = int(rng.integers(0, 4))
            label = list(rng.integers(1, V, L))
            if ctc_min_length(label) > T:
                continue
            got = ctc_nll(Tensor(logp[None]), [label]).data[0]
            assert got == pytest.approx(ctc_brute_force(logp, label), abs=1e-10)

    def test_total_probability_is_one(self, rng):
        T, V = 4, 3
        logp = log_softmax_np(rng.normal(size=(T, V)))
        total = sum(math.exp(-ctc_nll(Tensor(logp[None]), [list(l)]).data[0]) for l in all_ctc_labels(T, V))
        assert total == pytest.approx(1.0, abs=1e-12)

    def test_batch_with_lengths_matches_individual(self, rng):
        logits = rng.normal(size=(3, 6, 4))
        labels, lengths = [[1, 2], [], [3, 3]], [6, 2, 4]
        batch = ctc_nll(ad.log_softmax(Tensor(logits)), labels, lengths).data
        for b in range(3):
            ref = ctc_brute_force(log_softmax_np(logits[b, : lengths[b]]), labels[b])
            assert batch[b] == pytest.approx(ref, abs=1e-10)

    def test_padding_frames_get_zero_gradient(self, rng):
        logits = Tensor(rng.normal(size=(1, 6, 3)), requires_grad=True)
        backward(ctc_loss(logits, [[1, 2]], [4]))
        assert np.all(logits.grad[0, 4:] == 0.0)

    def test_repeat_needs_separating_blank(self):
        assert ctc_min_length([1, 1, 2]) == 4
        with pytest.raises(ValueError, match="needs 4 frames"):
            ctc_loss(Tensor(np.zeros((3, 3))), [1, 1, 2])

    def test_blank_in_label_rejected(self):
        with pytest.raises(ValueError, match="blank"):
            ctc_loss(Tensor(np.zeros((4, 3))), [0, 1])
