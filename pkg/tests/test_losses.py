"""Objective assembly: closed-form cross-entropy values, clamp counting,
weighted-total linearity, and breakdown consistency."""

import math

import numpy as np
import pytest

from ggvit import autodiff as ad
from ggvit.autodiff import Tensor
from ggvit.losses import (LossBreakdown, ce_sum_from_probs, l_fusion, l_vit,
                          one_hot, total_loss)


def probs_tensor(rows):
    return Tensor(np.asarray(rows, dtype=np.float64))


def test_l_vit_perfect_prediction_is_zero():
    labels = [1]
    streams = [probs_tensor([[0.0, 1.0]]) for _ in range(5)]
    val, clamps = l_vit(streams, labels)
    assert val.item() == 0.0
    assert clamps == 0


def test_l_vit_uniform_is_5_ln2():
    labels = [0]
    streams = [probs_tensor([[0.5, 0.5]]) for _ in range(5)]
    val, _ = l_vit(streams, labels)
    assert val.item() == pytest.approx(5 * math.log(2), abs=1e-12)


def test_l_vit_single_stream_quarter_wrong():
    labels = [0]
    streams = [probs_tensor([[0.75, 0.25]])] + \
        [probs_tensor([[1.0, 0.0]]) for _ in range(4)]
    val, _ = l_vit(streams, labels)
    assert val.item() == pytest.approx(-math.log(0.75), abs=1e-12)


def test_l_vit_batch_sums_over_samples():
    labels = [0, 1]
    streams = [probs_tensor([[0.5, 0.5], [0.25, 0.75]]) for _ in range(5)]
    val, _ = l_vit(streams, labels)
    assert val.item() == pytest.approx(5 * (math.log(2) - math.log(0.75)), abs=1e-12)


def test_clamp_counter_on_saturated_true_class():
    val, clamps = ce_sum_from_probs(probs_tensor([[1.0, 0.0], [0.0, 1.0]]), [1, 1])
    assert clamps == 1                       # first sample's true class is at 0
    assert val.item() == pytest.approx(-math.log(1e-12), abs=1e-6)


def test_l_fusion_closed_forms():
    assert l_fusion(Tensor(np.array([[0.0, 0.0]])), [0])[0].item() == pytest.approx(
        math.log(2), abs=1e-12)
    assert l_fusion(Tensor(np.array([[1.0, 0.0]])), [0])[0].item() == pytest.approx(
        math.log(1 + math.exp(-1)), abs=1e-12)
    big = l_fusion(Tensor(np.array([[40.0, 0.0]])), [0])[0].item()
    assert 0 <= big < 1e-12                  # saturated toward the truth


def test_total_loss_arithmetic_and_breakdown():
    lv, lm, lf = Tensor(np.asarray(1.0)), Tensor(np.asarray(2.0)), Tensor(np.asarray(1.0))
    total, br = total_loss(lv, lm, lf, lam=0.1, clamp_count=3)
    assert total.item() == pytest.approx(2.2, abs=1e-12)
    assert br == LossBreakdown(l_vit=1.0, l_lmc=2.0, l_fusion=1.0, total=total.item(),
                               lam=0.1, clamp_count=3)
    assert abs(br.total - (br.lam * br.l_lmc + br.l_vit + br.l_fusion)) <= 1e-9


def test_total_loss_lambda_zero_and_missing_terms():
    lv, lm = Tensor(np.asarray(1.5)), Tensor(np.asarray(99.0))
    total, br = total_loss(lv, lm, None, lam=0.0)
    assert total.item() == pytest.approx(1.5)
    assert br.l_fusion == 0.0
    total, br = total_loss(lv, None, None, lam=0.1)
    assert total.item() == pytest.approx(1.5)
    assert br.l_lmc == 0.0
    with pytest.raises(ValueError):
        total_loss(lv, None, None, lam=-0.5)


def test_total_loss_linear_in_lambda():
    rng = np.random.default_rng(0)
    lv = Tensor(np.asarray(float(rng.uniform(0, 3))))
    lm = Tensor(np.asarray(float(rng.uniform(0, 3))))
    lf = Tensor(np.asarray(float(rng.uniform(0, 3))))
    t0 = total_loss(lv, lm, lf, lam=0.0)[0].item()
    t1 = total_loss(lv, lm, lf, lam=1.0)[0].item()
    for lam in (0.1, 0.25, 0.7):
        t = total_loss(lv, lm, lf, lam=lam)[0].item()
        assert t == pytest.approx(t0 + lam * (t1 - t0), abs=1e-12)


def test_one_hot_validation():
    oh = one_hot([0, 1, 1], 2)
    assert np.array_equal(oh, [[1, 0], [0, 1], [0, 1]])
    with pytest.raises(ValueError):
        one_hot([0, 2], 2)


def test_ce_gradient_matches_fd_through_probs():
    rng = np.random.default_rng(1)
    logits = ad.param(rng.normal(size=(3, 2)))
    labels = rng.integers(0, 2, size=3)

    def loss():
        probs = ad.softmax(logits, axis=-1)
        val, _ = ce_sum_from_probs(probs, labels)
        return val

    report = ad.finite_diff_check(loss, {"logits": logits})
    assert report.passed, "\n".join(report.lines())
