"""
Pre-training and fine-tuning loops

Budgets are step based. Each step draws a batch from a SceneStream, runs one
forward/backward per sample (gradients accumulate in sample order, each loss
scaled by 1/batch) and takes one AdamW step. Every random choice comes from
``default_rng([seed, step, sample])`` so a (config, seed) pair fully
determines every logged number.
"""
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

import tensor_core as tc
from checkpoint_io import Checkpoint
from config_settings import RunConfig, TrainConfig, config_hash
from evaluation import PRIMARY_METRIC, EvalResult, make_evaluator
from exceptions import ConfigError, NumericError, TaskError
from losses_matching import detect_loss, pose_loss, recon_loss, seg_loss, si_depth_loss
from masking import make_mask
from metrics_log import MetricsLog
from model import GlidModel, build_model
from optim import AdamW, lr_at
from synth_data import STRIDE, Scene, SceneStream, TaskLabels, derive_labels, hflip_scene
from task_heads import (DEFAULT_QUERIES, SEGMENTATION_TASKS, HeadOutput, TaskSpec, bin_centers, depth_map,
                        pose_heatmaps, postprocess, recon_targets, task_spec)
from tensor_core import Tensor

pipeline_logger = logging.getLogger('glid.pipeline')

EVAL_NAMESPACE = 'eval'
TRAIN_NAMESPACE = 'train'


@dataclass
class RunResult:
    checkpoint: Checkpoint
    metrics: MetricsLog
    final: List[EvalResult] = field(default_factory=list)
    curve: Dict[str, List[Tuple[int, float]]] = field(default_factory=dict)
    loaded: List[str] = field(default_factory=list)
    task_counts: Dict[str, int] = field(default_factory=dict)
    losses: List[float] = field(default_factory=list)

    def final_metrics(self) -> Dict[str, float]:
        return {f"{r.task}/{r.metric}": r.value for r in self.final}

    def primary(self, task: str) -> Optional[float]:
        metric = PRIMARY_METRIC[task]
        for result in self.final:
            if result.task == task and result.metric == metric:
                return result.value
        return None


def sample_rng(seed: int, step: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, step, index])


def task_schedule(tasks: Sequence[str], steps: int) -> List[str]:
    """Round-robin task order: step t trains tasks[t % n]"""
    if not tasks:
        raise TaskError('Task schedule needs at least one task')
    return [tasks[t % len(tasks)] for t in range(steps)]


def _check_compatible(cfg: RunConfig, tasks: Sequence[str]):
    errors = []
    if cfg.encoder.patch_size != STRIDE:
        errors.append(f'patch_size must be {STRIDE} so the fused map matches the 1/{STRIDE}-scale labels')
    if cfg.data.scene.image_size % cfg.encoder.input_multiple:
        errors.append(f'image_size must be divisible by {cfg.encoder.input_multiple}')
    queries = cfg.finetune.num_queries or DEFAULT_QUERIES['detect']
    for task in tasks:
        if task in ('detect', 'instseg', 'panoptic'):
            needed = cfg.data.scene.max_instances + (1 if task == 'panoptic' else 0)
            if queries < needed:
                errors.append(f'{task} needs at least {needed} queries for {cfg.data.scene.max_instances} instances')
    if errors:
        raise ConfigError('Run config is inconsistent', 'config', errors)


def _check_loss(loss: Tensor, step: int, phase: str):
    value = loss.item()
    if not np.isfinite(value):
        raise NumericError(f"{phase}: non-finite loss at step {step}", step=step)


def _train_step(model: GlidModel, optimizer: AdamW, lr: float, step: int, phase: str, losses) -> float:
    """Accumulate per-sample gradients, then one optimizer update"""
    model.store.zero_grad()
    total = 0.0
    for loss in losses:
        _check_loss(loss, step, phase)
        loss.backward()
        total += loss.item()
    try:
        optimizer.step(lr)
    except NumericError as e:
        raise NumericError(f"{phase}: {e.message} at step {step}", step=step, parameter=e.parameter) from None
    return total


def _log_progress(phase: str, task: str, step: int, total_steps: int, loss: float, lr: float):
    pipeline_logger.info(f"{phase} step {step + 1}/{total_steps} loss={loss:.5f} lr={lr:.3e}",
                         extra={'phase': phase, 'task': task, 'step': step + 1, 'loss': loss, 'lr': lr})


# ---------------------------------------------------------------------- #
# Pre-training
# ---------------------------------------------------------------------- #
def _pretrain_losses(model: GlidModel, scenes: List[Scene], tc_cfg: TrainConfig, step: int):
    patch = model.encoder_cfg.patch_size
    batch = len(scenes)
    for index, scene in enumerate(scenes):
        rng = sample_rng(tc_cfg.seed, step, index)
        if tc_cfg.hflip and rng.random() < 0.5:
            scene = hflip_scene(scene)
        grid = scene.size // patch
        block = (tc_cfg.block_size, tc_cfg.block_size) if tc_cfg.block_size else None
        plan = make_mask(tc_cfg.mask_strategy, tc_cfg.mask_ratio, grid, grid, int(rng.integers(0, 2 ** 31)), block)
        output, _ = model.pretrain_forward(scene.image, plan)
        target = recon_targets(scene.image, plan, patch, tc_cfg.normalize_targets)
        yield recon_loss(output.pixels, target) * (1.0 / batch)


def evaluate_pretrain(model: GlidModel, cfg: RunConfig) -> List[EvalResult]:
    """Masked-patch reconstruction error on the held-out split with per-scene fixed masks"""
    spec = model.head('pretrain')
    evaluator = make_evaluator(spec, cfg.data.scene.image_size)
    stream = SceneStream(cfg.seed, cfg.data.scene, EVAL_NAMESPACE, pool_size=cfg.data.eval_scenes)
    patch = model.encoder_cfg.patch_size
    with tc.no_grad():
        for index in range(cfg.data.eval_scenes):
            scene = stream[index]
            grid = scene.size // patch
            block = (cfg.pretrain.block_size,) * 2 if cfg.pretrain.block_size else None
            plan = make_mask(cfg.pretrain.mask_strategy, cfg.pretrain.mask_ratio, grid, grid, index, block)
            output, _ = model.pretrain_forward(scene.image, plan)
            target = recon_targets(scene.image, plan, patch, cfg.pretrain.normalize_targets)
            evaluator.update({'patches': output.pixels.data}, {'patches': target})
    return evaluator.results()


def pretrain(cfg: RunConfig, metrics: Optional[MetricsLog] = None) -> RunResult:
    """
    Masked-image-modeling pre-training

    Args:
        cfg: run config; the ``pretrain`` section drives the loop
        metrics: destination for metric rows (an in-memory log when None)

    Returns:
        RunResult whose checkpoint holds encoder, pyramid, decoder, [CLS],
        mask token and reconstruction head
    """
    metrics = metrics or MetricsLog()
    run = cfg.pretrain
    model = GlidModel(cfg.encoder, cfg.decoder, cfg.seed)
    model.add_head(model_spec('pretrain', cfg))
    optimizer = AdamW(model.store, run.weight_decay)
    stream = SceneStream(cfg.seed, cfg.data.scene, TRAIN_NAMESPACE, pool_size=cfg.data.pool_size)
    pipeline_logger.info(f"Pre-training {run.steps} steps, batch {run.batch_size}, "
                         f"{run.mask_strategy} masking at {run.mask_ratio}",
                         extra={'phase': 'pretrain', 'parameters': model.store.num_values()})
    losses = []
    for step in range(run.steps):
        lr = lr_at(step, run.lr, run.warmup_steps, run.steps, run.min_lr_ratio)
        scenes = stream.batch(step, run.batch_size)
        loss = _train_step(model, optimizer, lr, step, 'pretrain', _pretrain_losses(model, scenes, run, step))
        losses.append(loss)
        metrics.append(step + 1, 'train', 'pretrain', 'loss', loss)
        metrics.append(step + 1, 'train', 'pretrain', 'lr', lr)
        if (step + 1) % run.log_every == 0 or step + 1 == run.steps:
            _log_progress('pretrain', 'pretrain', step, run.steps, loss, lr)
            metrics.flush()
    final = evaluate_pretrain(model, cfg)
    for result in final:
        metrics.append(run.steps, 'eval', result.task, result.metric, result.value)
    metrics.flush()
    checkpoint = model.to_checkpoint(**_metadata(cfg, ['pretrain'], run.steps))
    return RunResult(checkpoint, metrics, final, losses=losses)


def model_spec(task: str, cfg: RunConfig) -> TaskSpec:
    queries = None if task == 'pretrain' else cfg.finetune.num_queries
    return task_spec(task, queries, cfg.data.scene.d_min, cfg.data.scene.d_max)


def _metadata(cfg: RunConfig, tasks: Sequence[str], step: int) -> Dict[str, object]:
    return {
        'task': '+'.join(tasks),
        'tasks': list(tasks),
        'step': step,
        'config_hash': config_hash(cfg),
        'rng_state': {'seed': cfg.seed, 'next_step': step},
        'model': cfg.to_dict()['model'],
        'num_queries': cfg.finetune.num_queries,
        'scene': {'image_size': cfg.data.scene.image_size, 'd_min': cfg.data.scene.d_min,
                  'd_max': cfg.data.scene.d_max},
    }


# ---------------------------------------------------------------------- #
# Fine-tuning
# ---------------------------------------------------------------------- #
def task_loss(spec: TaskSpec, output: HeadOutput, f_b: Tensor, labels: TaskLabels) -> Tensor:
    if spec.task == 'detect':
        return detect_loss(output, labels.boxes, labels.classes).loss
    if spec.task in SEGMENTATION_TASKS:
        return seg_loss(output, f_b, labels.masks, labels.classes).loss
    if spec.task == 'depth':
        centers = bin_centers(output.bin_lengths, spec.d_min, spec.d_max)
        return si_depth_loss(depth_map(output.bin_embed, f_b, centers), labels.depth)
    if spec.task == 'pose':
        return pose_loss(pose_heatmaps(output.hm_embed, f_b), labels.heatmaps)
    raise TaskError(f"No training loss for task {spec.task}")


def _finetune_losses(model: GlidModel, spec: TaskSpec, scenes: List[Scene]):
    batch = len(scenes)
    for scene in scenes:
        labels = derive_labels(scene, spec)
        output, f_b, _ = model.finetune_forward(scene.image, spec.task)
        yield task_loss(spec, output, f_b, labels) * (1.0 / batch)


def evaluate_task(model: GlidModel, cfg: RunConfig, task: str) -> List[EvalResult]:
    """Metrics of one head on the held-out split"""
    spec = model.head(task)
    evaluator = make_evaluator(spec, cfg.data.scene.image_size)
    stream = SceneStream(cfg.seed, cfg.data.scene, EVAL_NAMESPACE, pool_size=cfg.data.eval_scenes,
                         pose=(task == 'pose'))
    with tc.no_grad():
        for index in range(cfg.data.eval_scenes):
            scene = stream[index]
            output, f_b, _ = model.finetune_forward(scene.image, task)
            prediction = postprocess(spec, output, f_b, stride=STRIDE)
            evaluator.update(prediction, derive_labels(scene, spec).eval)
    return evaluator.results()


def _record_eval(metrics: MetricsLog, result: RunResult, step: int, results: List[EvalResult]):
    for item in results:
        metrics.append(step, 'eval', item.task, item.metric, item.value)
        if item.metric == PRIMARY_METRIC[item.task]:
            result.curve.setdefault(item.task, []).append((step, item.value))


def _finetune_run(cfg: RunConfig, init: Optional[Checkpoint], tasks: Sequence[str],
                  metrics: Optional[MetricsLog]) -> RunResult:
    metrics = metrics or MetricsLog()
    run = cfg.finetune
    _check_compatible(cfg, tasks)
    model = build_model(cfg.encoder, cfg.decoder, cfg.seed, tasks, run.num_queries,
                        cfg.data.scene.d_min, cfg.data.scene.d_max)
    loaded = model.apply_policy(init, run.load_policy)
    optimizer = AdamW(model.store, run.weight_decay)
    pose = list(tasks) == ['pose']
    stream = SceneStream(cfg.seed, cfg.data.scene, TRAIN_NAMESPACE, pool_size=cfg.data.pool_size,
                         data_frac=run.data_frac, pose=pose)
    schedule = task_schedule(list(tasks), run.steps)
    result = RunResult(Checkpoint(), metrics, loaded=loaded, task_counts={t: 0 for t in tasks})
    label = '+'.join(tasks)
    pipeline_logger.info(f"Fine-tuning {label} for {run.steps} steps with load policy {run.load_policy}",
                         extra={'phase': 'finetune', 'tasks': list(tasks), 'loaded': len(loaded),
                                'data_pool': stream.pool})
    for step, task in enumerate(schedule):
        lr = lr_at(step, run.lr, run.warmup_steps, run.steps, run.min_lr_ratio)
        spec = model.head(task)
        scenes = stream.batch(step, run.batch_size)
        loss = _train_step(model, optimizer, lr, step, 'finetune', _finetune_losses(model, spec, scenes))
        result.task_counts[task] += 1
        result.losses.append(loss)
        metrics.append(step + 1, 'train', task, 'loss', loss)
        metrics.append(step + 1, 'train', task, 'lr', lr)
        if (step + 1) % run.log_every == 0 or step + 1 == run.steps:
            _log_progress('finetune', task, step, run.steps, loss, lr)
            metrics.flush()
        if run.eval_every and (step + 1) % run.eval_every == 0 and step + 1 < run.steps:
            for name in tasks:
                _record_eval(metrics, result, step + 1, evaluate_task(model, cfg, name))
            metrics.flush()
    for name in tasks:
        final = evaluate_task(model, cfg, name)
        result.final.extend(final)
        _record_eval(metrics, result, run.steps, final)
        pipeline_logger.info(f"{name} final " + ', '.join(f"{r.metric}={r.value:.4f}" for r in final),
                             extra={'phase': 'eval', 'task': name, 'step': run.steps})
    metrics.flush()
    result.checkpoint = model.to_checkpoint(**_metadata(cfg, tasks, run.steps))
    return result


def finetune(cfg: RunConfig, init: Optional[Checkpoint] = None, metrics: Optional[MetricsLog] = None) -> RunResult:
    """
    Single-task fine-tuning (dispatches to finetune_multitask when ``finetune.tasks`` lists several)

    Parameters selected by the load policy are copied from ``init`` by name;
    everything else, including the task head and the zero query embeddings,
    starts fresh.
    """
    if cfg.finetune.multitask:
        return finetune_multitask(cfg, init, metrics)
    return _finetune_run(cfg, init, [cfg.finetune.task], metrics)


def finetune_multitask(cfg: RunConfig, init: Optional[Checkpoint] = None,
                       metrics: Optional[MetricsLog] = None) -> RunResult:
    """Joint segmentation-family fine-tuning with round-robin task batches and one head per task"""
    tasks = list(cfg.finetune.tasks)
    if len(tasks) < 2:
        raise TaskError('Multitask fine-tuning needs at least two tasks')
    if len(set(tasks)) != len(tasks):
        raise TaskError('Multitask task list has duplicates')
    outside = [t for t in tasks if t not in SEGMENTATION_TASKS]
    if outside:
        raise TaskError(f"Multitask fine-tuning covers segmentation tasks only, got {', '.join(outside)}")
    return _finetune_run(cfg, init, tasks, metrics)
