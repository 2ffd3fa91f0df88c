#!/usr/bin/env python3
"""
Command-line surface: pretrain, finetune, ablate, verify, dump

Exit codes:
    0  success
    1  verification failure
    2  configuration, task or I/O error, or any unexpected failure
    3  numeric abort (NaN/Inf loss or gradient)
    4  checkpoint incompatible with the requested load policy, or unreadable
"""
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Callable, Dict, Optional

import click
from rich.console import Console
from rich.logging import RichHandler
from rich.table import Table

from ablations import ABLATIONS, run_ablation
from checkpoint_io import load_checkpoint, save_checkpoint
from config_settings import Config, RunConfig, load_run_config
from dumps import dump_attention, dump_scenes
from exceptions import CheckpointError, ConfigError, GlidError, NumericError, PolicyError
from metrics_log import MetricsLog
from model import LOAD_POLICIES
from pipeline import finetune, pretrain
from run_manifest import RunManifest, manifest_path
from verify_suite import run_verify

cli_logger = logging.getLogger('glid.cli')
console = Console()

EXIT_OK = 0
EXIT_VERIFY_FAILED = 1
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_POLICY = 4

DEFAULT_CONFIG = Path(__file__).resolve().parent.parent / 'configs' / 'default.json'


def exit_code_for(error: Exception) -> int:
    """Map a GlidError or OSError onto the documented exit codes"""
    if isinstance(error, NumericError):
        return EXIT_NUMERIC
    if isinstance(error, (PolicyError, CheckpointError)):
        return EXIT_POLICY
    # ConfigError, TaskError, MaskError, ShapeError and unwritable outputs
    return EXIT_CONFIG


def metrics_path(out: Path) -> Path:
    return out.with_name(out.name + '.metrics.csv')


def _setup_logging(level: str):
    logging.basicConfig(level=level, format='%(message)s', datefmt='[%X]',
                        handlers=[RichHandler(console=Console(stderr=True), show_path=False)], force=True)


def _load_config(path: Optional[str]) -> RunConfig:
    return load_run_config(path or DEFAULT_CONFIG)


def _run(manifest: RunManifest, manifest_file: Path, body: Callable[[], Dict[str, float]]):
    """
    Run a command body, write its manifest and exit with the mapped code

    Args:
        manifest: manifest started before the body runs
        manifest_file: where the manifest goes, whatever the outcome
        body: returns the final metrics on success
    """
    try:
        final_metrics = body()
    except (GlidError, OSError) as e:
        code = exit_code_for(e)
        cli_logger.error(f"{type(e).__name__}: {e}", extra={'exit_code': code})
        console.print(f"[red]❌ {type(e).__name__}:[/red] {e}")
        manifest.finish(code, error=str(e))
        _write_manifest(manifest, manifest_file)
        sys.exit(code)
    except Exception as e:
        # 1 is reserved for verification failures
        cli_logger.exception(f"Unexpected {type(e).__name__}: {e}", extra={'exit_code': EXIT_CONFIG})
        console.print(f"[red]❌ Unexpected {type(e).__name__}:[/red] {e}")
        manifest.finish(EXIT_CONFIG, error=f"{type(e).__name__}: {e}")
        _write_manifest(manifest, manifest_file)
        sys.exit(EXIT_CONFIG)
    manifest.finish(EXIT_OK, final_metrics)
    _write_manifest(manifest, manifest_file)
    _print_metrics(final_metrics)


def _write_manifest(manifest: RunManifest, path: Path):
    try:
        manifest.write(path)
    except OSError as e:
        cli_logger.warning(f"Could not write manifest {path}: {e}")


def _print_metrics(final_metrics: Dict[str, float]):
    if not final_metrics:
        return
    table = Table(title='Final metrics')
    table.add_column('metric')
    table.add_column('value', justify='right')
    for name, value in sorted(final_metrics.items()):
        table.add_row(name, f"{value:.4f}")
    console.print(table)


@click.group()
@click.option('--log-level', default=None, help='Overrides GLID_LOG_LEVEL')
def cli(log_level: Optional[str]):
    """GLID: masked-image-modeling pre-training and query-based fine-tuning on synthetic scenes"""
    _setup_logging((log_level or Config.LOG_LEVEL).upper())


# ---------------------------------------------------------------------- #
# pretrain
# ---------------------------------------------------------------------- #
@cli.command('pretrain')
@click.option('--config', 'config_path', type=click.Path(dir_okay=False), default=None,
              help='Run config JSON (configs/default.json when omitted)')
@click.option('--out', required=True, type=click.Path(dir_okay=False), help='Checkpoint to write')
@click.option('--seed', type=click.IntRange(min=0), default=None, help='Overrides the config seed')
@click.option('--steps', type=click.IntRange(min=0), default=None, help='Overrides pretrain.steps')
def cmd_pretrain(config_path, out, seed, steps):
    """Masked-image-modeling pre-training"""
    out = Path(out)
    manifest = RunManifest.start()

    def body():
        cfg = _load_config(config_path)
        if seed is not None:
            cfg = cfg.with_seed(seed)
        if steps is not None:
            cfg = replace(cfg, pretrain=replace(cfg.pretrain, steps=steps))
        manifest.attach_config(cfg)
        metrics = MetricsLog(metrics_path(out))
        manifest.add_output('metrics', metrics.path)
        result = pretrain(cfg, metrics)
        manifest.add_output('checkpoint', save_checkpoint(result.checkpoint, out))
        return result.final_metrics()

    _run(manifest, manifest_path(out), body)


# ---------------------------------------------------------------------- #
# finetune
# ---------------------------------------------------------------------- #
@cli.command('finetune')
@click.option('--task', 'task_arg', required=True,
              help='Downstream task, or a comma list of segmentation tasks for joint training')
@click.option('--init', 'init', required=True, help="Pre-trained checkpoint, or 'none'")
@click.option('--load-policy', type=click.Choice(LOAD_POLICIES), default=None,
              help="Parameters copied from --init (config value, or 'none' with --init none)")
@click.option('--config', 'config_path', type=click.Path(dir_okay=False), default=None)
@click.option('--out', required=True, type=click.Path(dir_okay=False), help='Checkpoint to write')
@click.option('--data-frac', type=click.FloatRange(min=0.0, max=1.0, min_open=True), default=None,
              help='Fraction of the training scene pool')
def cmd_finetune(task_arg, init, load_policy, config_path, out, data_frac):
    """Fine-tune one task (or several segmentation tasks jointly) from a pre-trained checkpoint"""
    out = Path(out)
    manifest = RunManifest.start()

    def body():
        cfg = _load_config(config_path)
        tasks = tuple(t.strip() for t in task_arg.split(',') if t.strip())
        if not tasks:
            raise ConfigError('--task is empty', 'task')
        no_init = init.lower() == 'none'
        policy = load_policy or ('none' if no_init else cfg.finetune.load_policy)
        overrides = {'task': tasks[0], 'tasks': tasks if len(tasks) > 1 else (), 'load_policy': policy}
        if data_frac is not None:
            overrides['data_frac'] = data_frac
        cfg = replace(cfg, finetune=replace(cfg.finetune, **overrides))
        manifest.attach_config(cfg)
        checkpoint = None if no_init else load_checkpoint(init)
        if checkpoint is not None:
            manifest.add_output('init', init)
        metrics = MetricsLog(metrics_path(out))
        manifest.add_output('metrics', metrics.path)
        result = finetune(cfg, checkpoint, metrics)
        manifest.add_output('checkpoint', save_checkpoint(result.checkpoint, out))
        return result.final_metrics()

    _run(manifest, manifest_path(out), body)


# ---------------------------------------------------------------------- #
# ablate
# ---------------------------------------------------------------------- #
@cli.command('ablate')
@click.option('--what', required=True, type=click.Choice(ABLATIONS))
@click.option('--config', 'config_path', type=click.Path(dir_okay=False), default=None)
@click.option('--out', required=True, type=click.Path(file_okay=False), help='Output directory')
def cmd_ablate(what, config_path, out):
    """Run one ablation grid and write summary.csv"""
    out = Path(out)
    manifest = RunManifest.start()

    def body():
        cfg = _load_config(config_path)
        manifest.attach_config(cfg)
        summary = run_ablation(what, cfg, out)
        for path in summary.files:
            manifest.add_output(path.stem, path)
        table = Table(title=f"{what} ({summary.task}, {summary.metric})")
        for column in summary.header():
            table.add_column(column)
        for row in summary.table():
            table.add_row(*row)
        console.print(table)
        return {f"{what}/{'/'.join(str(v) for v in row.setting.values())}": row.mean for row in summary.rows}

    _run(manifest, out / 'ablation.manifest.json', body)


# ---------------------------------------------------------------------- #
# verify
# ---------------------------------------------------------------------- #
@cli.command('verify')
@click.option('--trials', type=click.IntRange(min=1), default=20, help='Random trials per gradient check')
def cmd_verify(trials):
    """Gradient checks, matching and formula oracles, masking and query invariants"""
    results = run_verify(trial_count=trials)
    table = Table(title='Verification')
    table.add_column('#', justify='right')
    table.add_column('check')
    table.add_column('status')
    table.add_column('detail')
    for result in results:
        table.add_row(str(result.number), result.name, result.status, result.detail)
    console.print(table)
    failed = [r.name for r in results if not r.passed]
    if failed:
        console.print(f"[red]❌ {len(failed)} of {len(results)} checks failed:[/red] {', '.join(failed)}")
        sys.exit(EXIT_VERIFY_FAILED)
    console.print(f"[green]✅ All {len(results)} checks passed[/green]")


# ---------------------------------------------------------------------- #
# dump
# ---------------------------------------------------------------------- #
@cli.command('dump')
@click.option('--scenes', type=click.IntRange(min=1), default=None, help='Number of scenes to write')
@click.option('--attn', nargs=2, type=(click.Path(dir_okay=False), int), default=None,
              help='Checkpoint and image seed for cross-attention maps')
@click.option('--task', default=None, help='Head to visualize with --attn (first head when omitted)')
@click.option('--config', 'config_path', type=click.Path(dir_okay=False), default=None,
              help='Scene settings for --scenes')
@click.option('--seed', type=click.IntRange(min=0), default=0, help='Scene seed for --scenes')
@click.option('--out', required=True, type=click.Path(file_okay=False), help='Output directory')
def cmd_dump(scenes, attn, task, config_path, seed, out):
    """Write synthetic scenes or decoder cross-attention maps as PPM/PGM files"""
    if (scenes is None) == (attn is None):
        raise click.UsageError('Give exactly one of --scenes N or --attn CKPT IMAGE_SEED')
    out = Path(out)
    manifest = RunManifest.start()

    def body():
        if scenes is not None:
            cfg = _load_config(config_path) if config_path else RunConfig()
            manifest.attach_config(cfg)
            written = dump_scenes(scenes, out, cfg.data.scene, seed)
        else:
            checkpoint_path, image_seed = attn
            written = dump_attention(load_checkpoint(checkpoint_path), image_seed, out, task)
        manifest.add_output('files', len(written))
        manifest.add_output('dir', out)
        console.print(f"✅ Wrote {len(written)} files to {out}")
        return {}

    _run(manifest, out / 'dump.manifest.json', body)


if __name__ == '__main__':
    cli()
