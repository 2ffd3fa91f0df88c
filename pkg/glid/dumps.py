"""
Human-inspectable dumps: scenes as PPM/PGM + JSON sidecars, decoder attention as PGM mosaics + CSV
"""
import csv
import json
import logging
import math
from pathlib import Path
from typing import Dict, List, Tuple, Union

import numpy as np
from PIL import Image

import tensor_core as tc
from checkpoint_io import Checkpoint
from encoder_pyramid import LEVEL_NAMES, EncoderConfig, merged_cells
from exceptions import CheckpointError
from masking import make_mask
from model import GlidModel
from query_decoder import DecoderConfig
from synth_data import Scene, SceneConfig, gen_scene
from task_heads import task_spec

dump_logger = logging.getLogger('glid.dump')

PathLike = Union[str, Path]


def _to_uint8(values: np.ndarray) -> np.ndarray:
    return np.clip(np.round(np.asarray(values, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def depth_to_gray(depth: np.ndarray, d_min: float, d_max: float) -> np.ndarray:
    """Nearer is brighter; background (d_max) is black"""
    return _to_uint8((d_max - np.asarray(depth)) / (d_max - d_min))


def save_scene_dump(scene: Scene, out_dir: PathLike, index: int) -> List[Path]:
    """
    Write one scene as scene_XXXX.ppm, scene_XXXX_mask_K.pgm per instance,
    scene_XXXX_depth.pgm and the scene_XXXX.json label sidecar

    Returns:
        list: written paths
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    stem = f"scene_{index:04d}"
    written = []
    image_path = out_dir / f"{stem}.ppm"
    Image.fromarray(_to_uint8(scene.image)).save(image_path, format='PPM')
    written.append(image_path)
    for k, instance in enumerate(scene.instances):
        mask_path = out_dir / f"{stem}_mask_{k}.pgm"
        Image.fromarray(instance.mask.astype(np.uint8) * 255).save(mask_path, format='PPM')
        written.append(mask_path)
    depth_path = out_dir / f"{stem}_depth.pgm"
    Image.fromarray(depth_to_gray(scene.depth, scene.config.d_min, scene.config.d_max)).save(
        depth_path, format='PPM')
    written.append(depth_path)
    sidecar = out_dir / f"{stem}.json"
    sidecar.write_text(json.dumps(scene.to_dict(), indent=2, sort_keys=True) + '\n', encoding='utf-8')
    written.append(sidecar)
    return written


def dump_scenes(count: int, out_dir: PathLike, cfg: SceneConfig, seed: int = 0) -> List[Path]:
    """Scenes 0..count-1 of seed ``seed``; reruns write identical bytes"""
    written = []
    for index in range(count):
        written.extend(save_scene_dump(gen_scene(seed * 1_000_003 + index, cfg), out_dir, index))
    dump_logger.info(f"Wrote {count} scenes to {out_dir}", extra={'files': len(written)})
    return written


# ---------------------------------------------------------------------- #
# Attention
# ---------------------------------------------------------------------- #
def model_from_checkpoint(checkpoint: Checkpoint) -> Tuple[GlidModel, Dict[str, object]]:
    """Rebuild the architecture recorded in checkpoint metadata and load every tensor"""
    meta = checkpoint.metadata
    model_cfg = meta.get('model')
    if not isinstance(model_cfg, dict):
        raise CheckpointError('Checkpoint metadata has no model description')
    try:
        encoder = EncoderConfig(patch_size=model_cfg['patch_size'], stage_dims=tuple(model_cfg['stage_dims']),
                                stage_depths=tuple(model_cfg['stage_depths']),
                                stage_heads=tuple(model_cfg['stage_heads']), fpn_dim=model_cfg['fpn_dim'],
                                mlp_ratio=model_cfg['mlp_ratio'])
        decoder = DecoderConfig(layers=model_cfg['decoder_layers'], dim=model_cfg['decoder_dim'],
                                heads=model_cfg['decoder_heads'], mlp_ratio=model_cfg['decoder_mlp_ratio'],
                                levels=encoder.num_stages)
    except KeyError as e:
        raise CheckpointError(f"Checkpoint model description lacks {e}") from None
    scene = meta.get('scene', {})
    d_min, d_max = scene.get('d_min', 1.0), scene.get('d_max', 10.0)
    model = GlidModel(encoder, decoder)
    for task in meta.get('tasks') or [meta.get('task', 'pretrain')]:
        queries = None if task == 'pretrain' else meta.get('num_queries')
        model.add_head(task_spec(task, queries, d_min, d_max))
    model.load_state(checkpoint)
    return model, scene


def _mosaic(weights: np.ndarray, grid: Tuple[int, int], scale: int) -> np.ndarray:
    """One tile per query, each normalized to its own maximum, laid out row-major"""
    count = weights.shape[0]
    cols = int(math.ceil(math.sqrt(count)))
    rows = int(math.ceil(count / cols))
    h, w = grid[0] * scale, grid[1] * scale
    canvas = np.zeros((rows * (h + 1) - 1, cols * (w + 1) - 1), dtype=np.uint8)
    for q in range(count):
        tile = weights[q].reshape(grid)
        peak = tile.max()
        tile = tile / peak if peak > 0 else tile
        tile = np.kron(tile, np.ones((scale, scale)))
        r, c = divmod(q, cols)
        canvas[r * (h + 1):r * (h + 1) + h, c * (w + 1):c * (w + 1) + w] = _to_uint8(tile)
    return canvas


def dump_attention(checkpoint: Checkpoint, image_seed: int, out_dir: PathLike, task: str = None) -> List[Path]:
    """
    Per-layer cross-attention maps of ``task`` on scene ``image_seed``

    Writes attn_layerL_<level>.pgm (one tile per query, upsampled to the 1/4
    grid) and attention.csv with every raw weight.
    """
    model, scene_meta = model_from_checkpoint(checkpoint)
    task = task or next(iter(model.heads))
    scene_cfg = SceneConfig(image_size=scene_meta.get('image_size', 64), d_min=scene_meta.get('d_min', 1.0),
                            d_max=scene_meta.get('d_max', 10.0))
    scene = gen_scene(image_seed, scene_cfg, pose=(task == 'pose'))
    grid = scene.size // model.encoder_cfg.patch_size
    captured = []

    def hook(layer: int, level: str, weights: np.ndarray):
        captured.append((layer, level, np.array(weights)))

    visible = None
    with tc.no_grad():
        if task == 'pretrain':
            plan = make_mask('random', 0.75, grid, grid, image_seed)
            model.pretrain_forward(scene.image, plan, attn_hook=hook)
            visible = plan.coords(plan.visible)
        else:
            model.finetune_forward(scene.image, task, attn_hook=hook)

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    csv_rows = []
    for layer, level, weights in captured:
        index = LEVEL_NAMES.index(level)
        factor = 2 ** index
        level_grid, scale = (grid // factor, grid // factor), factor
        if visible is not None:
            # scatter weights over occupied cells back onto the level grid
            cells = merged_cells(visible, grid, index)
            dense = np.zeros((weights.shape[0], level_grid[0] * level_grid[1]))
            dense[:, cells[:, 0] * level_grid[1] + cells[:, 1]] = weights
            weights = dense
        path = out_dir / f"attn_layer{layer}_{level.replace('/', '-')}.pgm"
        Image.fromarray(_mosaic(weights, level_grid, scale)).save(path, format='PPM')
        written.append(path)
        for q in range(weights.shape[0]):
            for k in range(weights.shape[1]):
                row, col = divmod(k, level_grid[1])
                csv_rows.append([layer, level, q, row, col, repr(float(weights[q, k]))])
    csv_path = out_dir / 'attention.csv'
    with open(csv_path, 'w', encoding='utf-8', newline='') as fh:
        writer = csv.writer(fh, lineterminator='\n')
        writer.writerow(['layer', 'level', 'query', 'row', 'col', 'weight'])
        writer.writerows(csv_rows)
    written.append(csv_path)
    dump_logger.info(f"Wrote {len(captured)} attention maps for {task}", extra={'task': task, 'seed': image_seed})
    return written
