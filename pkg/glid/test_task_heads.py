import numpy as np
import pytest

import tensor_core as tc
from exceptions import ShapeError, TaskError
from masking import make_mask
from nn_layers import ParamStore
from task_heads import (DEFAULT_QUERIES, NUM_KEYPOINTS, DepthOutput, DetectOutput, PoseOutput, ReconOutput,
                        SegOutput, TaskSpec, bin_centers, build_head, decode_keypoints, depth_map,
                        depth_probabilities, head_forward, image_patches, place_patches, postprocess,
                        recon_targets, task_spec)
from tensor_core import Tensor

DIM, FEATURES = 32, 16


def test_task_spec_defaults():
    spec = task_spec('semseg')
    assert spec.num_queries == DEFAULT_QUERIES['semseg']
    assert spec.no_object == 4
    assert task_spec('panoptic').num_classes == 4
    assert task_spec('detect', 8).num_queries == 8
    assert task_spec('pose', 16).num_queries == NUM_KEYPOINTS


def test_task_spec_rejects_bad_requests():
    with pytest.raises(TaskError, match='Unknown task'):
        task_spec('caption')
    with pytest.raises(TaskError):
        TaskSpec('pose', 3, num_keypoints=4)
    with pytest.raises(TaskError):
        task_spec('depth', d_min=5.0, d_max=5.0)


def test_bin_centers_prefix_sum():
    with tc.precision(np.float64):
        centers = bin_centers(Tensor([0.2, 0.3, 0.5]), 0.0, 10.0).data
    np.testing.assert_allclose(centers, [1.0, 3.5, 7.5], atol=1e-6)


def test_bin_centers_respect_depth_range():
    with tc.precision(np.float64):
        lengths = np.random.default_rng(0).dirichlet(np.ones(6))
        centers = bin_centers(Tensor(lengths), 1.0, 10.0).data
    assert np.all(np.diff(centers) > 0)
    assert 1.0 < centers[0] and centers[-1] < 10.0


def test_depth_map_is_a_convex_combination():
    rng = np.random.default_rng(1)
    with tc.precision(np.float64), tc.no_grad():
        embed = Tensor(rng.standard_normal((5, 8)) * 4.0)
        f_b = Tensor(rng.standard_normal((3, 4, 8)))
        probs = depth_probabilities(embed, f_b).data
        depth = depth_map(embed, f_b, bin_centers(Tensor(np.full(5, 0.2)), 1.0, 10.0)).data
    np.testing.assert_allclose(probs.sum(axis=-1), 1.0, atol=1e-6)
    assert depth.shape == (3, 4)
    assert depth.min() >= 1.0 and depth.max() <= 10.0


def test_depth_map_checks_embedding_width():
    with pytest.raises(ShapeError):
        depth_probabilities(Tensor(np.zeros((5, 7))), Tensor(np.zeros((3, 4, 8))))


def test_decode_keypoints_returns_cell_centres():
    heatmaps = np.zeros((8, 8, 2))
    heatmaps[2, 3, 0] = 1.0
    heatmaps[7, 0, 1] = 1.0
    np.testing.assert_allclose(decode_keypoints(heatmaps, 4), [[14.0, 10.0], [2.0, 30.0]])


def test_recon_targets_are_normalized_per_patch(image):
    plan = make_mask('random', 0.75, 8, 8, seed=0)
    targets = recon_targets(image, plan, 4)
    assert targets.shape == (48, 48)
    np.testing.assert_allclose(targets.mean(axis=1), 0.0, atol=1e-5)
    np.testing.assert_allclose(targets.std(axis=1), 1.0, atol=1e-3)
    raw = recon_targets(image, plan, 4, normalize=False)
    np.testing.assert_allclose(raw, image_patches(image, 4)[list(plan.masked)])


def test_recon_targets_need_matching_grid(image):
    with pytest.raises(ShapeError):
        recon_targets(image, make_mask('random', 0.5, 4, 4, seed=0), 4)


def test_place_patches_inverts_image_patches(image):
    patches = image_patches(image, 4)
    rebuilt = place_patches(np.zeros_like(image), patches, range(len(patches)), 4)
    np.testing.assert_array_equal(rebuilt, image)


@pytest.mark.parametrize('task,kind', [('pretrain', ReconOutput), ('detect', DetectOutput), ('semseg', SegOutput),
                                       ('depth', DepthOutput), ('pose', PoseOutput)])
def test_head_forward_shapes(task, kind):
    store = ParamStore(0)
    spec = task_spec(task, 6)
    build_head(store, spec, DIM, FEATURES, 4)
    assert all(name.startswith(f"head.{task}.") for name in store.names())
    rows = spec.num_queries + (1 if task == 'pretrain' else 0)
    with tc.no_grad():
        out = head_forward(spec, Tensor(np.random.default_rng(0).standard_normal((rows, DIM))), store)
    assert isinstance(out, kind)
    if task == 'pretrain':
        assert out.pixels.shape == (spec.num_queries, 48)
    elif task == 'detect':
        assert out.boxes.shape == (6, 4) and out.class_logits.shape == (6, 4)
        assert out.boxes.data.min() > 0.0 and out.boxes.data.max() < 1.0
    elif task == 'semseg':
        assert out.mask_embed.shape == (6, FEATURES) and out.class_logits.shape == (6, 5)
    elif task == 'depth':
        assert out.bin_lengths.data.sum() == pytest.approx(1.0, abs=1e-5)
    else:
        assert out.hm_embed.shape == (NUM_KEYPOINTS, FEATURES)


def test_finetune_query_embeddings_start_at_zero():
    store = ParamStore(0)
    build_head(store, task_spec('instseg', 5), DIM, FEATURES, 4)
    assert not store['head.instseg.query_embed'].data.any()


def test_missing_head_parameters_raise_task_error():
    with pytest.raises(TaskError):
        head_forward(task_spec('detect', 2), Tensor(np.zeros((2, DIM))), ParamStore(0))


def test_detect_postprocess_drops_no_object_queries():
    spec = task_spec('detect', 3)
    logits = np.array([[5.0, 0.0, 0.0, 0.0], [0.0, 0.0, 0.0, 9.0], [0.0, 0.0, 6.0, 0.0]])
    boxes = np.array([[0.5, 0.5, 0.2, 0.2], [0.1, 0.1, 0.1, 0.1], [0.3, 0.3, 0.2, 0.2]])
    pred = postprocess(spec, DetectOutput(Tensor(boxes), Tensor(logits)), Tensor(np.zeros((4, 4, FEATURES))))
    np.testing.assert_array_equal(pred['classes'], [0, 2])
    assert pred['boxes'].shape == (2, 4)
    assert np.all(pred['scores'] > 0.9)


def _two_region_features():
    f_b = np.zeros((4, 4, 2))
    f_b[:, :2, 0] = 1.0
    f_b[:, 2:, 1] = 1.0
    return Tensor(f_b)


def test_semseg_postprocess_assigns_regions():
    spec = task_spec('semseg', 2)
    embed = np.array([[10.0, -10.0], [-10.0, 10.0]])
    logits = np.full((2, 5), -10.0)
    logits[0, 0] = 10.0  # background
    logits[1, 2] = 10.0  # square
    pred = postprocess(spec, SegOutput(Tensor(embed), Tensor(logits)), _two_region_features())
    assert np.all(pred['class_map'][:, :2] == 0)
    assert np.all(pred['class_map'][:, 2:] == 2)


def test_panoptic_postprocess_builds_segments():
    spec = task_spec('panoptic', 3)
    embed = np.array([[10.0, -10.0], [-10.0, 10.0], [-10.0, -10.0]])
    logits = np.full((3, 5), -10.0)
    logits[0, 3] = 10.0  # background stuff
    logits[1, 1] = 10.0  # square
    logits[2, 4] = 10.0  # no-object
    pred = postprocess(spec, SegOutput(Tensor(embed), Tensor(logits)), _two_region_features())
    assert sorted(pred['segment_classes'].tolist()) == [1, 3]
    assert set(np.unique(pred['segment_map'])) == {0, 1}
