import numpy as np
import pytest

from evaluation import (HIGHER_IS_BETTER, PRIMARY_METRIC, DepthEvaluator, DetectEvaluator, InstsegEvaluator,
                        PanopticEvaluator, PoseEvaluator, ReconEvaluator, SemsegEvaluator, average_precision,
                        box_iou, evaluate, make_evaluator, mask_iou)
from exceptions import ShapeError
from task_heads import task_spec


def test_every_primary_metric_has_a_direction():
    assert set(PRIMARY_METRIC.values()) <= set(HIGHER_IS_BETTER)


def test_box_iou():
    iou = box_iou(np.array([[0.5, 0.5, 0.2, 0.2]]), np.array([[0.5, 0.5, 0.2, 0.2], [0.6, 0.5, 0.2, 0.2],
                                                               [0.9, 0.9, 0.1, 0.1]]))
    np.testing.assert_allclose(iou, [[1.0, 1.0 / 3.0, 0.0]])


def test_mask_iou():
    a = np.zeros((1, 4, 4), dtype=bool)
    a[0, :2] = True
    b = np.zeros((1, 4, 4), dtype=bool)
    b[0, :, :2] = True
    assert mask_iou(a, b)[0, 0] == pytest.approx(4 / 12)


def test_average_precision_edge_cases():
    assert np.isnan(average_precision(np.array([0.9]), np.array([True]), 0))
    assert average_precision(np.array([]), np.array([]), 3) == 0.0
    assert average_precision(np.array([0.9, 0.8]), np.array([True, True]), 2) == pytest.approx(1.0)
    # a false positive ranked first halves the precision at full recall
    assert average_precision(np.array([0.9, 0.8]), np.array([False, True]), 1) == pytest.approx(0.5)


def test_semseg_miou_over_present_classes():
    evaluator = SemsegEvaluator()
    gt = np.array([[0, 0], [1, 1]])
    evaluator.update({'class_map': np.array([[0, 0], [1, 0]])}, {'class_map': gt})
    # class 0: inter 2, union 3; class 1: inter 1, union 2
    assert evaluator.results()[0].value == pytest.approx((2 / 3 + 1 / 2) / 2)
    with pytest.raises(ShapeError):
        evaluator.update({'class_map': np.zeros((3, 3))}, {'class_map': gt})


def test_detect_ap_perfect_and_duplicate():
    boxes = np.array([[0.3, 0.3, 0.2, 0.2], [0.7, 0.7, 0.2, 0.2]])
    truth = {'boxes': boxes, 'classes': np.array([0, 1])}
    perfect = DetectEvaluator()
    perfect.update({'boxes': boxes, 'classes': np.array([0, 1]), 'scores': np.array([0.9, 0.8])}, truth)
    assert perfect.results()[0].value == pytest.approx(1.0)
    duplicated = DetectEvaluator()
    duplicated.update({'boxes': np.stack([boxes[0], boxes[0]]), 'classes': np.array([0, 0]),
                       'scores': np.array([0.9, 0.8])}, truth)
    # class 0 perfect, class 1 never found
    assert duplicated.results()[0].value == pytest.approx(0.5)


def test_ap_without_any_truth():
    empty = {'boxes': np.zeros((0, 4)), 'classes': np.zeros(0)}
    quiet = DetectEvaluator()
    quiet.update({'boxes': np.zeros((0, 4)), 'classes': np.zeros(0), 'scores': np.zeros(0)}, empty)
    assert quiet.results()[0].value == 1.0
    noisy = DetectEvaluator()
    noisy.update({'boxes': np.array([[0.5, 0.5, 0.1, 0.1]]), 'classes': np.array([2]), 'scores': np.array([0.7])},
                 empty)
    assert noisy.results()[0].value == 0.0


def test_instseg_ap():
    masks = np.zeros((1, 4, 4), dtype=bool)
    masks[0, 1:3, 1:3] = True
    evaluator = InstsegEvaluator()
    evaluator.update({'masks': masks, 'classes': np.array([2]), 'scores': np.array([0.6])},
                     {'masks': masks, 'classes': np.array([2])})
    assert evaluator.results()[0].value == pytest.approx(1.0)


def test_panoptic_quality():
    gt = np.array([[0, 0, 1, 1]] * 4)
    truth = {'segment_map': gt, 'segment_classes': np.array([2, 3])}
    evaluator = PanopticEvaluator()
    evaluator.update({'segment_map': gt.copy(), 'segment_classes': np.array([2, 3])}, truth)
    assert evaluator.results()[0].value == pytest.approx(1.0)
    wrong = PanopticEvaluator()
    wrong.update({'segment_map': gt.copy(), 'segment_classes': np.array([1, 3])}, truth)
    # stuff perfect (PQ 1); class 2 missed (FN) and class 1 spurious (FP) each give 0
    assert wrong.results()[0].value == pytest.approx(1.0 / 3.0)


def test_depth_rmse_and_rel():
    evaluator = DepthEvaluator()
    evaluator.update({'depth': np.array([2.0, 4.0])}, {'depth': np.array([1.0, 4.0])})
    rmse, rel = evaluator.results()
    assert (rmse.metric, rel.metric) == ('RMSE', 'REL')
    assert rmse.value == pytest.approx(np.sqrt(0.5))
    assert rel.value == pytest.approx(0.5)


def test_pose_pck_radius_scales_with_image():
    evaluator = PoseEvaluator(image_size=64)
    evaluator.update({'keypoints': np.array([[10.0, 10.0], [30.0, 30.0]])},
                     {'keypoints': np.array([[15.0, 12.0], [40.0, 30.0]])})
    assert evaluator.results()[0].value == pytest.approx(0.5)


def test_recon_mse():
    evaluator = ReconEvaluator()
    evaluator.update({'patches': np.ones((2, 3))}, {'patches': np.zeros((2, 3))})
    assert evaluator.results()[0].value == pytest.approx(1.0)


@pytest.mark.parametrize('task', sorted(PRIMARY_METRIC))
def test_make_evaluator_covers_every_task(task):
    assert make_evaluator(task_spec(task), 64).task == task


def test_single_scene_evaluate():
    results = evaluate(task_spec('depth'), {'depth': np.ones((2, 2))}, {'depth': np.ones((2, 2))})
    assert results[0].value == 0.0
