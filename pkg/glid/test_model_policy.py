import numpy as np
import pytest

import tensor_core as tc
from exceptions import ConfigError, PolicyError, TaskError
from losses_matching import recon_loss
from masking import make_mask
from model import LOAD_POLICIES, build_model, select_names
from query_decoder import DecoderConfig
from task_heads import recon_targets


@pytest.fixture
def pretrained(encoder_cfg, decoder_cfg):
    model = build_model(encoder_cfg, decoder_cfg, seed=1, tasks=['pretrain'])
    for _, param in model.store.items():
        param.data[...] = 0.5
    return model.to_checkpoint(task='pretrain')


def test_policies_nest_strictly(encoder_cfg, decoder_cfg):
    model = build_model(encoder_cfg, decoder_cfg, seed=0, tasks=['pretrain', 'semseg'])
    selected = [set(model.policy_names(p)) for p in LOAD_POLICIES]
    assert selected[0] == set()
    for smaller, larger in zip(selected, selected[1:]):
        assert smaller < larger
    assert 'queries.cls' in selected[1]
    assert not any(n.startswith('fpn.') for n in selected[1])
    assert any(n.startswith('fpn.') for n in selected[2])
    assert not any(n.startswith('decoder.') for n in selected[2])
    assert 'queries.mask_token' in selected[3]


def test_heads_are_never_loaded():
    names = ['encoder.a', 'head.semseg.query_embed', 'head.pretrain.pixels.weight', 'decoder.norm.gamma']
    for policy in LOAD_POLICIES:
        assert not [n for n in select_names(names, policy) if n.startswith('head.')]


def test_unknown_policy():
    with pytest.raises(PolicyError):
        select_names(['encoder.a'], 'everything')


def test_full_policy_copies_trunk_and_keeps_fresh_head(encoder_cfg, decoder_cfg, pretrained):
    model = build_model(encoder_cfg, decoder_cfg, seed=0, tasks=['semseg'])
    loaded = model.apply_policy(pretrained, 'full')
    assert set(loaded) == set(model.policy_names('full'))
    assert np.all(model.store['queries.cls'].data == 0.5)
    assert np.all(model.store['head.semseg.query_embed'].data == 0.0)


def test_backbone_policy_leaves_decoder_fresh(encoder_cfg, decoder_cfg, pretrained):
    model = build_model(encoder_cfg, decoder_cfg, seed=0, tasks=['semseg'])
    before = model.store['decoder.input_proj.weight'].data.copy()
    model.apply_policy(pretrained, 'backbone')
    np.testing.assert_array_equal(model.store['decoder.input_proj.weight'].data, before)
    assert np.all(model.store['encoder.patch_embed.weight'].data == 0.5)


def test_none_policy_needs_no_checkpoint(encoder_cfg, decoder_cfg):
    model = build_model(encoder_cfg, decoder_cfg, seed=0, tasks=['semseg'])
    assert model.apply_policy(None, 'none') == []
    with pytest.raises(PolicyError, match='requires a checkpoint'):
        model.apply_policy(None, 'backbone')


def test_incompatible_checkpoint_lists_offenders(encoder_cfg, pretrained):
    wider = DecoderConfig(layers=2, dim=48, heads=2)
    model = build_model(encoder_cfg, wider, seed=0, tasks=['semseg'])
    with pytest.raises(PolicyError) as info:
        model.apply_policy(pretrained, 'full')
    assert 'queries.cls' in info.value.mismatched
    assert 'shape mismatch' in str(info.value)

    deeper = build_model(encoder_cfg, DecoderConfig(layers=3, dim=32, heads=2), seed=0, tasks=['semseg'])
    with pytest.raises(PolicyError) as info:
        deeper.apply_policy(pretrained, 'full')
    assert any(n.startswith('decoder.layer2.') for n in info.value.missing)


def test_failed_policy_copies_nothing(encoder_cfg, pretrained):
    model = build_model(encoder_cfg, DecoderConfig(layers=2, dim=48, heads=2), seed=0, tasks=['semseg'])
    before = model.store['encoder.patch_embed.weight'].data.copy()
    with pytest.raises(PolicyError):
        model.apply_policy(pretrained, 'full')
    np.testing.assert_array_equal(model.store['encoder.patch_embed.weight'].data, before)


def test_strict_load_state_round_trip(encoder_cfg, decoder_cfg):
    source = build_model(encoder_cfg, decoder_cfg, seed=3, tasks=['detect'])
    target = build_model(encoder_cfg, decoder_cfg, seed=4, tasks=['detect'])
    target.load_state(source.to_checkpoint())
    assert target.to_checkpoint().same_tensors(source.to_checkpoint())
    other = build_model(encoder_cfg, decoder_cfg, seed=4, tasks=['semseg'])
    with pytest.raises(PolicyError):
        other.load_state(source.to_checkpoint())


def test_queries_identical_after_loading(encoder_cfg, decoder_cfg, pretrained, image):
    model = build_model(encoder_cfg, decoder_cfg, seed=0, tasks=['instseg'], num_queries=5)
    model.apply_policy(pretrained, 'full')
    with tc.no_grad():
        _, quarter_map, hidden = model.finetune_forward(image, 'instseg')
    assert hidden.shape[0] == 5
    np.testing.assert_allclose(hidden.data, np.repeat(hidden.data[:1], 5, axis=0), atol=1e-6)
    assert quarter_map.shape[:2] == (8, 8)


def test_missing_head_and_mismatched_levels(encoder_cfg, decoder_cfg):
    model = build_model(encoder_cfg, decoder_cfg, seed=0, tasks=['semseg'])
    with pytest.raises(TaskError):
        model.head('depth')
    with pytest.raises(ConfigError):
        build_model(encoder_cfg, DecoderConfig(layers=2, dim=32, heads=2, levels=2), seed=0, tasks=[])


def test_pretraining_backward_reaches_every_shared_parameter(encoder_cfg, decoder_cfg, image):
    model = build_model(encoder_cfg, decoder_cfg, seed=0, tasks=['pretrain'])
    plan = make_mask('random', 0.75, 8, 8, seed=0)
    output, _ = model.pretrain_forward(image, plan)
    recon_loss(output.pixels, recon_targets(image, plan, encoder_cfg.patch_size)).backward()
    untouched = [name for name, param in model.store.items() if not name.startswith('head.') and param.grad is None]
    assert untouched == []
    assert any(name.startswith('fpn.bu2.') for name, _ in model.store.items())
