import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from adcpnet import reference
from adcpnet import tensor as T
from adcpnet.gradcheck import finite_diff_check
from adcpnet.regression import (
    LossWeights,
    all_metrics,
    format_report,
    metric_a95,
    metric_d1,
    metric_epe,
    metric_px,
    parse_report,
    smooth_l1,
    soft_argmin_candidates,
    soft_argmin_full,
    total_loss,
)
from adcpnet.tensor import Tensor

finite = st.floats(-50, 50, allow_nan=False)


def test_uniform_full_is_midpoint():
    assert np.array_equal(soft_argmin_full(Tensor(np.zeros((4, 2, 3)))).data, np.full((2, 3), 1.5))


@pytest.mark.parametrize("D", [1, 2, 7, 12])
def test_uniform_full_exact_for_any_depth(D):
    out = soft_argmin_full(Tensor(np.full((D, 1, 2), 3.25))).data
    assert np.all(out == (D - 1) / 2)


def test_one_low_cost_level():
    costs = np.array([-10.0, 0, 0, 0]).reshape(4, 1, 1)
    sigma = 1.0 / (math.exp(10) + 3)
    assert soft_argmin_full(Tensor(costs)).data[0, 0] == pytest.approx(6 * sigma, rel=1e-12)
    assert 6 * sigma == pytest.approx(2.72e-4, rel=1e-2)


def test_candidate_examples():
    cands = Tensor(np.array([7.0, 10.0, 15.0]).reshape(3, 1, 1))
    assert soft_argmin_candidates(Tensor(np.zeros((3, 1, 1))), cands).data[0, 0] == pytest.approx(32 / 3)
    costs = np.array([0.0, -20.0, 0.0]).reshape(3, 1, 1)
    assert abs(soft_argmin_candidates(Tensor(costs), cands).data[0, 0] - 10) < 1e-6
    one = Tensor(np.array([[[4.25]]]))
    assert soft_argmin_candidates(Tensor(np.array([[[3.0]]])), one).data[0, 0] == 4.25


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, (4, 2, 3), elements=finite), st.floats(-100, 100))
def test_full_shift_invariance(costs, c):
    a = soft_argmin_full(Tensor(costs)).data
    b = soft_argmin_full(Tensor(costs + c)).data
    assert np.abs(a - b).max() <= 1e-9


def test_candidate_hull_1000_instances():
    rng = np.random.default_rng(7)
    for _ in range(1000):
        N = int(rng.integers(1, 8))
        costs = rng.normal(0, rng.uniform(0.1, 30), (N, 2, 2))
        cands = rng.uniform(0, 47, (N, 2, 2))
        d = soft_argmin_candidates(Tensor(costs), Tensor(cands)).data
        assert np.all(d >= cands.min(0) - 1e-9) and np.all(d <= cands.max(0) + 1e-9)
        shifted = soft_argmin_candidates(Tensor(costs + 7.0), Tensor(cands)).data
        assert np.abs(shifted - d).max() <= 1e-9


def test_full_within_range():
    rng = np.random.default_rng(3)
    for _ in range(200):
        d = soft_argmin_full(Tensor(rng.normal(0, 20, (6, 3, 3)))).data
        assert d.min() >= 0 and d.max() <= 5


def test_regression_gradients(rng):
    costs = Tensor(rng.uniform(-1, 1, (4, 2, 3)))
    cands = Tensor(rng.uniform(0, 10, (4, 2, 3)))
    r = rng.uniform(-1, 1, (2, 3))
    assert finite_diff_check(lambda t: T.tsum(T.mul(soft_argmin_full(t), r)), costs) < 1e-4
    f = lambda c, k: T.tsum(T.mul(soft_argmin_candidates(c, k), r))  # noqa: E731
    assert finite_diff_check(lambda t: f(t, cands), costs) < 1e-4
    assert finite_diff_check(lambda t: f(costs, t), cands) < 1e-4


@pytest.mark.parametrize("x,y", [(0.5, 0.125), (2.0, 1.5), (-2.0, 1.5), (1.0, 0.5), (-1.0, 0.5), (0.0, 0.0)])
def test_smooth_l1_scalar(x, y):
    assert smooth_l1(x) == y


def test_smooth_l1_continuity_at_one():
    assert 0.5 * 1.0**2 == abs(1.0) - 0.5 == smooth_l1(1.0)


def test_loss_weights_default():
    assert LossWeights().as_tuple() == (0.25, 0.5, 0.5, 1.0)


def test_total_loss_zero_when_exact(rng):
    gt = rng.uniform(0, 20, (16, 16))
    outs = [Tensor(gt.copy()) for _ in range(4)]
    assert total_loss(outs, gt, np.ones((16, 16), bool)).data == 0


def test_total_loss_single_pixel_contribution():
    gt = np.zeros((4, 4))
    mask = np.zeros((4, 4), bool)
    mask[1, 2] = True
    outs = [Tensor(np.zeros((4, 4))) for _ in range(4)]
    outs[3] = Tensor(np.where(mask, 2.0, 0.0))
    w = LossWeights(1.0, 1.0, 1.0, 1.0)
    assert total_loss(outs, gt, mask, w).data == 1.5


def test_total_loss_upsamples_coarse_with_value_scaling():
    gt = np.full((8, 8), 8.0)
    coarse = Tensor(np.full((2, 2), 2.0))  # x4 in width -> 8
    fine = Tensor(np.full((4, 4), 4.0))
    loss = total_loss([coarse, coarse, fine, Tensor(gt.copy())], gt, np.ones((8, 8), bool))
    assert loss.data == 0


def test_total_loss_positive_when_off_and_errors_on_empty(rng):
    gt = rng.uniform(0, 5, (4, 4))
    outs = [Tensor(gt.copy()) for _ in range(4)]
    outs[0] = Tensor(gt + 1e-3)
    assert total_loss(outs, gt, np.ones((4, 4), bool)).data > 0
    with pytest.raises(ValueError):
        total_loss(outs, gt, np.zeros((4, 4), bool))


def test_total_loss_gradient(rng):
    gt = rng.uniform(0, 8, (8, 8))
    mask = rng.uniform(size=(8, 8)) > 0.3
    outs = [Tensor(rng.uniform(0, 2, (2, 2))), Tensor(rng.uniform(0, 2, (2, 2))),
            Tensor(rng.uniform(0, 8, (4, 4))), Tensor(rng.uniform(0, 8, (8, 8)))]
    for i in range(4):
        def f(t, i=i):
            parts = list(outs)
            parts[i] = t
            return total_loss(parts, gt, mask)
        assert finite_diff_check(f, outs[i]) < 1e-4


def test_total_loss_batched_counts_all_pixels(rng):
    gt = rng.uniform(0, 4, (2, 4, 4))
    mask = np.ones((2, 4, 4), bool)
    pred = gt + 0.5
    outs = [Tensor(pred)] * 4
    each = sum(LossWeights().as_tuple()) * 0.125
    assert total_loss(outs, gt, mask).data == pytest.approx(each)


def test_d1_boundary_examples():
    mask = np.ones((1, 1), bool)
    assert metric_d1(np.array([[64.0]]), np.array([[60.0]]), mask) == 100
    assert metric_d1(np.array([[104.0]]), np.array([[100.0]]), mask) == 0


def test_a95_nearest_rank():
    err = np.arange(1, 21, dtype=float).reshape(4, 5)
    assert metric_a95(err, np.zeros_like(err), np.ones_like(err, bool)) == 19


def test_metric_examples():
    gt = np.full((3, 3), 5.0)
    mask = np.ones((3, 3), bool)
    assert metric_epe(gt, gt, mask) == 0 and metric_d1(gt, gt, mask) == 0
    zero = np.zeros_like(gt)
    assert metric_epe(zero, gt, mask) == 5 and metric_px(zero, gt, mask, 3) == 100
    with pytest.raises(ValueError):
        metric_epe(zero, gt, np.zeros_like(mask))


def test_metrics_match_loop_oracle_100_maps():
    rng = np.random.default_rng(11)
    for _ in range(100):
        H, W = rng.integers(2, 12, size=2)
        gt = rng.uniform(0, 120, (H, W))
        pred = gt + rng.normal(0, rng.uniform(0.5, 8), (H, W))
        mask = rng.uniform(size=(H, W)) < rng.uniform(0.2, 1)
        mask.flat[rng.integers(mask.size)] = True
        ours = all_metrics(pred, gt, mask)
        ref = reference.metrics_loops(pred, gt, mask)
        for k in ref:
            assert abs(ours[k] - ref[k]) <= 1e-9, k


def test_report_round_trip():
    rec = {"full.epe": 0.25, "full.d1": 3.5, "checkpoint": "a.ckpt"}
    assert parse_report(format_report(rec)) == rec
