import numpy as np
import pytest

import tensor_core as tc
from exceptions import NumericError, ShapeError
from losses_matching import (NO_OBJECT_WEIGHT, SI_LAMBDA, brute_force_assignment, detect_loss, dice_loss,
                             hungarian, pairwise_mask_cost, pose_loss, recon_loss, seg_loss, si_depth_loss)
from task_heads import DetectOutput, SegOutput
from tensor_core import Tensor


def test_hungarian_matches_exhaustive_search():
    rng = np.random.default_rng(7)
    for _ in range(200):
        m = int(rng.integers(1, 8))
        g = int(rng.integers(0, m + 1))
        cost = rng.uniform(0.0, 10.0, size=(m, g))
        assert hungarian(cost).total_cost == pytest.approx(brute_force_assignment(cost).total_cost, abs=1e-9)


def test_hungarian_ties_resolve_canonically():
    assignment = hungarian(np.zeros((3, 2)))
    assert assignment.pairs == ((0, 0), (1, 1))
    assert assignment.queries == [0, 1]
    assert assignment.targets == [0, 1]


def test_hungarian_edge_cases():
    assert hungarian(np.zeros((4, 0))).pairs == ()
    with pytest.raises(ShapeError, match='more targets'):
        hungarian(np.zeros((2, 3)))
    with pytest.raises(NumericError):
        hungarian(np.array([[np.nan]]))


def test_recon_loss_gradient_formula():
    rng = np.random.default_rng(0)
    with tc.precision(np.float64):
        pred = Tensor(rng.standard_normal((6, 12)), requires_grad=True)
        target = rng.standard_normal((6, 12))
        loss = recon_loss(pred, target)
        loss.backward()
    assert loss.item() == pytest.approx(((pred.data - target) ** 2).sum() / 6)
    np.testing.assert_allclose(pred.grad, 2.0 * (pred.data - target) / 6, atol=1e-6)


def test_recon_loss_shape_mismatch():
    with pytest.raises(ShapeError, match='recon_loss'):
        recon_loss(Tensor(np.zeros((3, 4))), np.zeros((3, 5)))


def _detect_pred(boxes, logits):
    return DetectOutput(Tensor(np.asarray(boxes, dtype=np.float64), requires_grad=True),
                        Tensor(np.asarray(logits, dtype=np.float64), requires_grad=True))


def test_detect_loss_matches_by_box_and_class():
    with tc.precision(np.float64):
        pred = _detect_pred([[0.2, 0.2, 0.1, 0.1], [0.7, 0.7, 0.2, 0.2], [0.5, 0.5, 0.1, 0.1]],
                            np.zeros((3, 4)))
        out = detect_loss(pred, [[0.7, 0.7, 0.2, 0.2], [0.2, 0.2, 0.1, 0.1]], [1, 0])
        out.loss.backward()
    assert out.assignment.pairs == ((0, 1), (1, 0))
    assert out.parts['l1'] == pytest.approx(0.0)
    assert pred.class_logits.grad is not None


def test_detect_loss_without_objects_is_pure_no_object_ce():
    with tc.precision(np.float64):
        pred = _detect_pred(np.full((2, 4), 0.5), np.zeros((2, 4)))
        out = detect_loss(pred, np.zeros((0, 4)), [])
    assert out.assignment.pairs == ()
    assert 'l1' not in out.parts
    assert out.loss.item() == pytest.approx(2.0 * np.log(4.0))


def test_no_object_weight_value():
    assert NO_OBJECT_WEIGHT == 0.1


def test_detect_loss_rejects_more_targets_than_queries():
    pred = _detect_pred(np.zeros((1, 4)), np.zeros((1, 4)))
    with pytest.raises(ShapeError):
        detect_loss(pred, np.zeros((2, 4)), [0, 1])


def test_pairwise_mask_cost_prefers_the_right_mask():
    targets = np.array([[1.0, 1.0, 0.0, 0.0], [0.0, 0.0, 1.0, 1.0]])
    logits = np.array([[8.0, 8.0, -8.0, -8.0], [-8.0, -8.0, 8.0, 8.0]])
    cost = pairwise_mask_cost(logits, targets)
    assert cost[0, 0] < cost[0, 1]
    assert cost[1, 1] < cost[1, 0]


def test_dice_loss_closed_form():
    # s = 0.5 against t = 1: 1 - 2(0.5)/(0.25 + 1)
    with tc.precision(np.float64):
        half = dice_loss(Tensor(np.zeros((2, 6))), np.ones((2, 6)))
        perfect = dice_loss(Tensor(np.array([[20.0, 20.0, -20.0, -20.0]])), np.array([[1.0, 1.0, 0.0, 0.0]]))
    assert half.item() == pytest.approx(0.2, abs=1e-6)
    assert perfect.item() == pytest.approx(0.0, abs=1e-6)


def test_pairwise_mask_cost_closed_form():
    cost = pairwise_mask_cost(np.zeros((1, 8)), np.ones((1, 8)))
    assert cost[0, 0] == pytest.approx(np.log(2.0) + 0.2, abs=1e-6)


def test_seg_loss_parts_for_a_half_confident_mask():
    with tc.precision(np.float64):
        f_b = Tensor(np.ones((2, 2, 4)))
        pred = SegOutput(Tensor(np.zeros((1, 4))), Tensor(np.zeros((1, 3))))
        out = seg_loss(pred, f_b, np.ones((1, 2, 2)), [1])
    assert out.parts['bce'] == pytest.approx(np.log(2.0), abs=1e-6)
    assert out.parts['dice'] == pytest.approx(0.2, abs=1e-6)


def test_seg_loss_backpropagates_into_features():
    rng = np.random.default_rng(2)
    with tc.precision(np.float64):
        f_b = Tensor(rng.standard_normal((4, 4, 6)), requires_grad=True)
        pred = SegOutput(Tensor(rng.standard_normal((3, 6)), requires_grad=True),
                         Tensor(rng.standard_normal((3, 5)), requires_grad=True))
        masks = np.zeros((2, 4, 4))
        masks[0, :2] = 1.0
        masks[1, 2:] = 1.0
        out = seg_loss(pred, f_b, masks, [0, 2])
        out.loss.backward()
    assert len(out.assignment.pairs) == 2
    assert {'cls', 'bce', 'dice'} <= set(out.parts)
    assert np.abs(f_b.grad).sum() > 0


def test_seg_loss_checks_mask_resolution():
    pred = SegOutput(Tensor(np.zeros((3, 6))), Tensor(np.zeros((3, 5))))
    with pytest.raises(ShapeError, match='1/4-scale'):
        seg_loss(pred, Tensor(np.zeros((4, 4, 6))), np.zeros((1, 8, 8)), [0])


def test_si_depth_loss_value_and_validity():
    target = np.full((2, 3), 2.0)
    with tc.precision(np.float64):
        loss = si_depth_loss(Tensor(target * 2.0), target)
    assert loss.item() == pytest.approx(np.sqrt(1.0 - SI_LAMBDA) * np.log(2.0))
    with pytest.raises(NumericError, match='valid'):
        si_depth_loss(Tensor(target), target, valid=np.zeros((2, 3), dtype=bool))
    with pytest.raises(NumericError, match='positive'):
        si_depth_loss(Tensor(-target), target)


def test_pose_loss_is_smooth_l1():
    with tc.precision(np.float64):
        loss = pose_loss(Tensor(np.array([0.5, 3.0])), np.zeros(2))
    assert loss.item() == pytest.approx((0.125 + 2.5) / 2)
