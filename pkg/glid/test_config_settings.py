import json
from dataclasses import replace

import pytest

from config_settings import (SCHEMA_VERSION, Config, ConfigValidator, FINETUNE_SCHEMA, RunConfig, config_hash,
                             load_run_config, parse_run_config)
from exceptions import ConfigError


def test_defaults_round_trip():
    cfg = RunConfig()
    assert parse_run_config(cfg.to_dict()) == cfg


def test_fixture_config_round_trips_through_file(run_cfg, config_file):
    assert load_run_config(config_file) == run_cfg


def test_partial_document_keeps_defaults():
    cfg = parse_run_config({'schema_version': SCHEMA_VERSION, 'pretrain': {'steps': 5}})
    assert cfg.pretrain.steps == 5
    assert cfg.pretrain.lr == RunConfig().pretrain.lr
    assert cfg.finetune == RunConfig().finetune


def test_seed_reaches_both_phases():
    cfg = parse_run_config({'schema_version': SCHEMA_VERSION, 'seed': 7})
    assert cfg.pretrain.seed == cfg.finetune.seed == 7
    assert cfg.with_seed(3).finetune.seed == 3


def test_every_error_is_collected():
    raw = {
        'schema_version': SCHEMA_VERSION,
        'extras': {},
        'model': {'patch_size': 'four', 'colour': 1},
        'pretrain': {'mask_ratio': 1.5, 'hflip': 1},
        'finetune': {'task': 'caption'},
    }
    with pytest.raises(ConfigError) as info:
        parse_run_config(raw)
    errors = info.value.errors
    assert 'extras is not a known section' in errors
    assert 'model.colour is not a known setting' in errors
    assert 'model.patch_size must be of type int' in errors
    assert 'pretrain.mask_ratio must be no more than 0.99' in errors
    assert 'pretrain.hflip must be of type bool' in errors
    assert any(e.startswith('finetune.task must be one of') for e in errors)


def test_bool_is_not_a_number():
    result = ConfigValidator.validate_section({'steps': True}, FINETUNE_SCHEMA, 'finetune')
    assert not result['valid']
    assert result['errors'] == ['finetune.steps must be of type int']


def test_int_is_accepted_for_float():
    result = ConfigValidator.validate_section({'lr': 1}, FINETUNE_SCHEMA, 'finetune')
    assert result['valid']
    assert isinstance(result['data']['lr'], float)


def test_schema_version_is_required():
    with pytest.raises(ConfigError) as info:
        parse_run_config({})
    assert any('schema_version' in e for e in info.value.errors)


def test_cross_field_checks():
    raw = RunConfig().to_dict()
    raw['model']['decoder_dim'] = 30
    raw['data']['d_max'] = 0.5
    with pytest.raises(ConfigError) as info:
        parse_run_config(raw)
    assert any(e.startswith('model:') for e in info.value.errors)
    assert any(e.startswith('data:') for e in info.value.errors)


def test_multitask_needs_two_segmentation_tasks():
    raw = RunConfig().to_dict()
    raw['finetune']['tasks'] = ['semseg']
    with pytest.raises(ConfigError):
        parse_run_config(raw)
    raw['finetune']['tasks'] = ['semseg', 'depth']
    with pytest.raises(ConfigError):
        parse_run_config(raw)
    raw['finetune']['tasks'] = ['semseg', 'panoptic']
    cfg = parse_run_config(raw)
    assert cfg.finetune.multitask
    assert cfg.finetune.task_list == ('semseg', 'panoptic')


def test_missing_and_malformed_files(tmp_path):
    with pytest.raises(ConfigError, match='not found'):
        load_run_config(tmp_path / 'absent.json')
    bad = tmp_path / 'bad.json'
    bad.write_text('{"schema_version": 1,', encoding='utf-8')
    with pytest.raises(ConfigError, match='not valid JSON'):
        load_run_config(bad)
    listed = tmp_path / 'list.json'
    listed.write_text(json.dumps([1, 2]), encoding='utf-8')
    with pytest.raises(ConfigError):
        load_run_config(listed)


def test_config_hash_tracks_content():
    cfg = RunConfig()
    assert config_hash(cfg) == config_hash(parse_run_config(cfg.to_dict()))
    assert config_hash(cfg) != config_hash(replace(cfg, pretrain=replace(cfg.pretrain, steps=1)))
    assert len(config_hash(cfg)) == 64


def test_environment_settings(monkeypatch):
    monkeypatch.setenv('GLID_LOG_LEVEL', 'debug')
    monkeypatch.setenv('GLID_METRICS_FLUSH_EVERY', '5')
    monkeypatch.setenv('GLID_LOCK_TIMEOUT', '2.5')
    try:
        Config.reload()
        assert Config.get_config() == {'log_level': 'DEBUG', 'metrics_flush_every': 5, 'lock_timeout': 2.5,
                                       'schema_version': SCHEMA_VERSION}
    finally:
        monkeypatch.undo()
        Config.reload()
