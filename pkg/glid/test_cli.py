import json
import logging

import pytest
from click.testing import CliRunner

import cli as cli_module
import tensor_core as tc
from checkpoint_io import load_checkpoint
from cli import (EXIT_CONFIG, EXIT_NUMERIC, EXIT_OK, EXIT_POLICY, EXIT_VERIFY_FAILED, cli, exit_code_for,
                 metrics_path)
from exceptions import CheckpointError, ConfigError, MaskError, NumericError, PolicyError
from metrics_log import read_metrics_csv
from run_manifest import manifest_path


@pytest.fixture(autouse=True)
def restore_logging():
    root = logging.getLogger()
    handlers, level = root.handlers[:], root.level
    yield
    root.handlers[:] = handlers
    root.setLevel(level)


@pytest.fixture
def runner():
    return CliRunner()


def _manifest(path):
    return json.loads(path.read_text(encoding='utf-8'))


def test_exit_code_mapping():
    assert exit_code_for(NumericError('nan')) == EXIT_NUMERIC
    assert exit_code_for(PolicyError('missing')) == EXIT_POLICY
    assert exit_code_for(CheckpointError('truncated')) == EXIT_POLICY
    assert exit_code_for(ConfigError('bad')) == EXIT_CONFIG
    assert exit_code_for(MaskError('ratio')) == EXIT_CONFIG
    assert exit_code_for(OSError('read-only')) == EXIT_CONFIG


def test_pretrain_writes_checkpoint_metrics_and_manifest(runner, config_file, tmp_path):
    out = tmp_path / 'pre.ckpt'
    result = runner.invoke(cli, ['pretrain', '--config', str(config_file), '--out', str(out), '--steps', '2'])
    assert result.exit_code == EXIT_OK, result.output
    assert load_checkpoint(out).metadata['step'] == 2
    rows = read_metrics_csv(metrics_path(out))
    assert [r['step'] for r in rows if r['metric'] == 'loss'] == [1, 2]
    manifest = _manifest(manifest_path(out))
    assert manifest['status'] == 'ok'
    assert manifest['exit_code'] == 0
    assert manifest['config']['pretrain']['steps'] == 2
    assert 'pretrain/recon-MSE' in manifest['final_metrics']
    assert manifest['outputs']['checkpoint'] == str(out)


def test_missing_config_exits_2(runner, tmp_path):
    out = tmp_path / 'pre.ckpt'
    result = runner.invoke(cli, ['pretrain', '--config', str(tmp_path / 'nope.json'), '--out', str(out)])
    assert result.exit_code == EXIT_CONFIG
    assert not out.exists()
    manifest = _manifest(manifest_path(out))
    assert manifest['status'] == 'failed'
    assert 'not found' in manifest['error']


def test_unexpected_error_exits_2_and_records_failure(runner, config_file, tmp_path, monkeypatch):
    def broken(cfg, metrics=None):
        raise ValueError('boom')

    monkeypatch.setattr(cli_module, 'pretrain', broken)
    out = tmp_path / 'pre.ckpt'
    result = runner.invoke(cli, ['pretrain', '--config', str(config_file), '--out', str(out)])
    assert result.exit_code == EXIT_CONFIG
    assert not isinstance(result.exception, ValueError)
    manifest = _manifest(manifest_path(out))
    assert manifest['status'] == 'failed'
    assert manifest['exit_code'] == EXIT_CONFIG
    assert manifest['error'] == 'ValueError: boom'


def test_finetune_policy_without_init_exits_4(runner, config_file, tmp_path):
    out = tmp_path / 'ft.ckpt'
    result = runner.invoke(cli, ['finetune', '--task', 'semseg', '--init', 'none', '--load-policy', 'full',
                                 '--config', str(config_file), '--out', str(out)])
    assert result.exit_code == EXIT_POLICY
    assert not out.exists()


def test_finetune_corrupt_init_exits_4(runner, config_file, tmp_path):
    init = tmp_path / 'broken.ckpt'
    init.write_bytes(b'GLID\x01')
    result = runner.invoke(cli, ['finetune', '--task', 'semseg', '--init', str(init),
                                 '--config', str(config_file), '--out', str(tmp_path / 'ft.ckpt')])
    assert result.exit_code == EXIT_POLICY


def test_finetune_from_scratch_and_from_pretraining(runner, config_file, tmp_path):
    scratch = tmp_path / 'scratch.ckpt'
    result = runner.invoke(cli, ['finetune', '--task', 'depth', '--init', 'none', '--config', str(config_file),
                                 '--out', str(scratch)])
    assert result.exit_code == EXIT_OK, result.output
    assert _manifest(manifest_path(scratch))['config']['finetune']['load_policy'] == 'none'

    pre = tmp_path / 'pre.ckpt'
    assert runner.invoke(cli, ['pretrain', '--config', str(config_file), '--out', str(pre)]).exit_code == EXIT_OK
    joint = tmp_path / 'joint.ckpt'
    result = runner.invoke(cli, ['finetune', '--task', 'semseg,panoptic', '--init', str(pre),
                                 '--load-policy', 'backbone_fpn', '--data-frac', '0.5',
                                 '--config', str(config_file), '--out', str(joint)])
    assert result.exit_code == EXIT_OK, result.output
    manifest = _manifest(manifest_path(joint))
    assert manifest['config']['finetune']['tasks'] == ['semseg', 'panoptic']
    assert manifest['config']['finetune']['data_frac'] == 0.5
    assert {'semseg/mIoU', 'panoptic/PQ'} <= set(manifest['final_metrics'])
    assert load_checkpoint(joint).task == 'semseg+panoptic'


def test_finetune_rejects_unknown_task(runner, config_file, tmp_path):
    result = runner.invoke(cli, ['finetune', '--task', 'caption', '--init', 'none', '--config', str(config_file),
                                 '--out', str(tmp_path / 'ft.ckpt')])
    assert result.exit_code == EXIT_CONFIG


def test_finetune_data_frac_range(runner, config_file, tmp_path):
    result = runner.invoke(cli, ['finetune', '--task', 'semseg', '--init', 'none', '--data-frac', '0',
                                 '--config', str(config_file), '--out', str(tmp_path / 'ft.ckpt')])
    assert result.exit_code == 2
    assert 'data-frac' in result.output


def test_verify_passes(runner):
    result = runner.invoke(cli, ['verify', '--trials', '2'])
    assert result.exit_code == EXIT_OK, result.output
    assert 'All' in result.output and 'checks passed' in result.output


def test_verify_reports_broken_backward(runner, monkeypatch):
    monkeypatch.setattr(tc.Softmax, 'backward', staticmethod(lambda ctx, grad: grad))
    result = runner.invoke(cli, ['verify', '--trials', '2'])
    assert result.exit_code == EXIT_VERIFY_FAILED
    assert 'softmax' in result.output
    assert 'checks failed' in result.output


def test_dump_scenes_is_reproducible(runner, config_file, tmp_path):
    for name in ('a', 'b'):
        result = runner.invoke(cli, ['dump', '--scenes', '2', '--config', str(config_file), '--seed', '1',
                                     '--out', str(tmp_path / name)])
        assert result.exit_code == EXIT_OK, result.output

    def contents(directory):
        return {p.name: p.read_bytes() for p in directory.iterdir() if p.suffix != '.json' or 'manifest' not in p.name}

    assert contents(tmp_path / 'a') == contents(tmp_path / 'b')
    assert (tmp_path / 'a' / 'scene_0001.ppm').exists()
    assert _manifest(tmp_path / 'a' / 'dump.manifest.json')['status'] == 'ok'


def test_dump_needs_exactly_one_mode(runner, tmp_path):
    result = runner.invoke(cli, ['dump', '--out', str(tmp_path)])
    assert result.exit_code == 2
    assert 'exactly one' in result.output


def test_ablate_writes_summary(runner, config_file, tmp_path):
    out = tmp_path / 'abl'
    result = runner.invoke(cli, ['ablate', '--what', 'data-frac', '--config', str(config_file), '--out', str(out)])
    assert result.exit_code == EXIT_OK, result.output
    assert (out / 'summary.csv').exists()
    manifest = _manifest(out / 'ablation.manifest.json')
    assert set(manifest['final_metrics']) == {'data-frac/1.0/full', 'data-frac/1.0/none'}


def test_pretrain_metrics_are_byte_identical_on_rerun(runner, config_file, tmp_path):
    outs = [tmp_path / 'a.ckpt', tmp_path / 'b.ckpt']
    for out in outs:
        assert runner.invoke(cli, ['pretrain', '--config', str(config_file), '--out', str(out)]).exit_code == EXIT_OK
    assert metrics_path(outs[0]).read_bytes() == metrics_path(outs[1]).read_bytes()
    assert outs[0].read_bytes() == outs[1].read_bytes()


def test_pretrain_zero_steps_saves_initial_weights(runner, config_file, tmp_path):
    out = tmp_path / 'init.ckpt'
    result = runner.invoke(cli, ['pretrain', '--config', str(config_file), '--out', str(out), '--steps', '0'])
    assert result.exit_code == EXIT_OK, result.output
    checkpoint = load_checkpoint(out)
    assert checkpoint.metadata['step'] == 0
    assert [r for r in read_metrics_csv(metrics_path(out)) if r['metric'] == 'loss'] == []
