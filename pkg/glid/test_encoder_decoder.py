from dataclasses import replace

import numpy as np
import pytest

import tensor_core as tc
from encoder_pyramid import Encoder, EncoderConfig, FeaturePyramid, merged_cells
from exceptions import ConfigError, MaskError, ShapeError
from masking import make_mask, visible_plan
from nn_layers import ParamStore
from query_decoder import (QueryDecoder, QuerySet, build_finetune_queries, build_pretrain_queries,
                           create_query_params, level_sequence)
from tensor_core import Tensor


@pytest.fixture
def encoder(encoder_cfg):
    return Encoder(ParamStore(0), encoder_cfg)


def test_full_encoding_builds_three_level_pyramid(encoder, image):
    with tc.no_grad():
        pyramid = encoder.encode_full(image)
    assert pyramid.level_shapes() == [(8, 8, 16), (4, 4, 16), (2, 2, 16)]
    assert pyramid.quarter_map.shape == (8, 8, 16)


def test_visible_encoding_ignores_masked_pixels(encoder, image):
    plan = make_mask('random', 0.75, 8, 8, seed=0)
    altered = image.copy()
    for r, c in plan.coords(plan.masked):
        altered[4 * r:4 * r + 4, 4 * c:4 * c + 4] = 0.0
    with tc.no_grad():
        a = encoder.encode_visible(image, plan)
        b = encoder.encode_visible(altered, plan)
    assert a.tokens.shape == (plan.num_visible, 16)
    assert [lv.grid for lv in a.levels] == [(8, 8), (4, 4), (2, 2)]
    for level, (lv_a, lv_b) in enumerate(zip(a.levels, b.levels)):
        cells = merged_cells(plan.coords(plan.visible), 8, level)
        np.testing.assert_array_equal(lv_a.coords, cells)
        assert lv_a.tokens.shape == (len(cells), 16)
        np.testing.assert_array_equal(lv_a.tokens.data, lv_b.tokens.data)


def test_merged_cells_cover_every_visible_child():
    coords = np.array([[0, 1], [3, 3], [2, 2], [7, 0]])
    np.testing.assert_array_equal(merged_cells(coords, 8, 1), [[0, 0], [1, 1], [3, 0]])
    np.testing.assert_array_equal(merged_cells(coords, 8, 2), [[0, 0], [1, 0]])
    np.testing.assert_array_equal(merged_cells(coords, 8, 0), coords)


def test_mask_grid_must_match_patch_grid(encoder, image):
    with pytest.raises(MaskError, match='does not match'):
        encoder.encode_visible(image, make_mask('random', 0.5, 4, 4, seed=0))


def test_input_sides_must_divide(encoder):
    with pytest.raises(ShapeError, match='divisible'):
        encoder.encode_full(np.zeros((24, 32, 3)))


def test_invalid_encoder_config_lists_every_problem():
    with pytest.raises(ConfigError) as info:
        EncoderConfig(stage_dims=(18, 12), stage_depths=(1,), stage_heads=(4, 5))
    assert len(info.value.errors) >= 3


def test_level_sequence_is_coarse_to_fine_round_robin():
    assert level_sequence(6, 3) == [2, 1, 0, 2, 1, 0]
    assert level_sequence(4, 3) == [2, 1, 0, 2]


def test_pretrain_queries_are_cls_plus_one_per_masked_cell():
    store = ParamStore(0)
    create_query_params(store, 32)
    plan = make_mask('random', 0.75, 8, 8, seed=1)
    queries = build_pretrain_queries(plan, store)
    assert queries.count == plan.num_masked + 1
    assert queries.cls_index == 0
    np.testing.assert_allclose(queries.tokens.data[0], store['queries.cls'].data)


def test_pretrain_queries_need_a_masked_cell():
    store = ParamStore(0)
    create_query_params(store, 32)
    with pytest.raises(MaskError):
        build_pretrain_queries(visible_plan(4, 4), store)


def test_finetune_queries_are_identical_with_zero_embeddings():
    cls = Tensor(np.arange(8.0))
    queries = build_finetune_queries(5, cls, Tensor(np.zeros((5, 8))))
    assert queries.kind == 'finetune'
    np.testing.assert_array_equal(queries.tokens.data, np.tile(np.arange(8.0), (5, 1)))
    with pytest.raises(ShapeError):
        build_finetune_queries(4, cls, Tensor(np.zeros((5, 8))))


def test_decoder_hook_sees_every_layer(encoder, decoder_cfg, image):
    store = encoder.store
    decoder = QueryDecoder(store, decoder_cfg, 16)
    create_query_params(store, decoder_cfg.dim)
    seen = []
    with tc.no_grad():
        pyramid = encoder.encode_full(image)
        queries = build_finetune_queries(3, store['queries.cls'], Tensor(np.zeros((3, decoder_cfg.dim))))
        hidden = decoder.decode(queries, pyramid, attn_hook=lambda i, level, w: seen.append((i, level, w.shape)))
    assert hidden.shape == (3, decoder_cfg.dim)
    assert seen == [(0, '1/16', (3, 4)), (1, '1/8', (3, 16))]
    # identical queries attend identically and stay identical
    np.testing.assert_allclose(hidden.data, np.tile(hidden.data[:1], (3, 1)), atol=1e-6)


def test_pretrain_decoding_cycles_over_occupied_cells(encoder, decoder_cfg, image):
    store = encoder.store
    decoder = QueryDecoder(store, decoder_cfg, 16)
    create_query_params(store, decoder_cfg.dim)
    plan = make_mask('random', 0.75, 8, 8, seed=2)
    seen = []
    with tc.no_grad():
        features = encoder.encode_visible(image, plan)
        queries = build_pretrain_queries(plan, store)
        decoder.decode(queries, features, attn_hook=lambda i, level, w: seen.append((i, level, w.shape)))
    visible = plan.coords(plan.visible)
    assert seen == [(0, '1/16', (queries.count, len(merged_cells(visible, 8, 2)))),
                    (1, '1/8', (queries.count, len(merged_cells(visible, 8, 1))))]
    with pytest.raises(ShapeError, match='token level'):
        decoder.decode(queries, replace(features, levels=features.levels[:1]))


def test_decoder_rejects_wrong_query_width(encoder, decoder_cfg, image):
    decoder = QueryDecoder(encoder.store, decoder_cfg, 16)
    with tc.no_grad():
        pyramid = encoder.encode_full(image)
    with pytest.raises(ShapeError, match='decode'):
        decoder.decode(QuerySet(Tensor(np.zeros((2, 8))), 'finetune'), pyramid)


def test_decoder_checks_pyramid_depth(encoder, decoder_cfg, image):
    decoder = QueryDecoder(encoder.store, decoder_cfg, 16)
    with tc.no_grad():
        pyramid = encoder.encode_full(image)
    with pytest.raises(ShapeError, match='pyramid'):
        decoder.decode(QuerySet(Tensor(np.zeros((2, decoder_cfg.dim))), 'finetune'), FeaturePyramid(pyramid.maps[:2]))
