import csv
import json
from dataclasses import replace

import numpy as np
import pytest
from PIL import Image

from dumps import depth_to_gray, dump_attention, dump_scenes, model_from_checkpoint
from exceptions import CheckpointError
from pipeline import finetune, pretrain
from synth_data import gen_scene


def _contents(directory):
    return {p.name: p.read_bytes() for p in sorted(directory.iterdir())}


def test_scene_dump_files_and_reruns(tmp_path, scene_cfg):
    written = dump_scenes(2, tmp_path / 'a', scene_cfg, seed=3)
    dump_scenes(2, tmp_path / 'b', scene_cfg, seed=3)
    assert _contents(tmp_path / 'a') == _contents(tmp_path / 'b')

    names = {p.name for p in written}
    for index in range(2):
        scene = gen_scene(3 * 1_000_003 + index, scene_cfg)
        stem = f"scene_{index:04d}"
        assert {f"{stem}.ppm", f"{stem}_depth.pgm", f"{stem}.json"} <= names
        masks = [n for n in names if n.startswith(f"{stem}_mask_")]
        assert len(masks) == len(scene.instances)
        with Image.open(tmp_path / 'a' / f"{stem}.ppm") as img:
            assert img.size == (32, 32) and img.mode == 'RGB'
        with Image.open(tmp_path / 'a' / f"{stem}_mask_0.pgm") as img:
            assert img.mode == 'L'
            assert set(np.unique(np.asarray(img))) <= {0, 255}
        sidecar = json.loads((tmp_path / 'a' / f"{stem}.json").read_text(encoding='utf-8'))
        assert sidecar == json.loads(json.dumps(scene.to_dict()))


def test_depth_gray_is_near_bright():
    gray = depth_to_gray(np.array([[1.0, 10.0, 5.5]]), 1.0, 10.0)
    assert gray.tolist() == [[255, 0, 128]]


@pytest.fixture
def semseg_checkpoint(run_cfg):
    cfg = replace(run_cfg, finetune=replace(run_cfg.finetune, load_policy='none', steps=1))
    return finetune(cfg, None).checkpoint


def test_model_rebuilds_from_metadata(semseg_checkpoint):
    model, scene = model_from_checkpoint(semseg_checkpoint)
    assert list(model.heads) == ['semseg']
    assert model.head('semseg').num_queries == 4
    assert scene['image_size'] == 32
    assert model.to_checkpoint().same_tensors(semseg_checkpoint)


def test_attention_dump_for_finetuned_head(tmp_path, semseg_checkpoint):
    written = dump_attention(semseg_checkpoint, 5, tmp_path)
    assert sorted(p.name for p in written) == ['attention.csv', 'attn_layer0_1-16.pgm', 'attn_layer1_1-8.pgm']
    with Image.open(tmp_path / 'attn_layer0_1-16.pgm') as img:
        # 2x2 tiles of a 2x2 grid scaled by 4, one-pixel gutters
        assert img.size == (17, 17)
    with open(tmp_path / 'attention.csv', encoding='utf-8', newline='') as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 4 * 4 + 4 * 16
    per_query = {}
    for row in rows:
        key = (row['layer'], row['query'])
        per_query[key] = per_query.get(key, 0.0) + float(row['weight'])
    assert all(abs(total - 1.0) < 1e-4 for total in per_query.values())


def test_attention_dump_for_pretraining(tmp_path, run_cfg):
    checkpoint = pretrain(run_cfg).checkpoint
    written = dump_attention(checkpoint, 0, tmp_path)
    assert sorted(p.name for p in written) == ['attention.csv', 'attn_layer0_1-16.pgm', 'attn_layer1_1-8.pgm']
    with open(tmp_path / 'attention.csv', encoding='utf-8', newline='') as fh:
        rows = list(csv.DictReader(fh))
    # weights scattered onto the full 2x2 and 4x4 level grids
    cls_cells = {}
    for row in rows:
        if row['query'] == '0':
            cls_cells[row['level']] = cls_cells.get(row['level'], 0) + 1
    assert cls_cells == {'1/16': 4, '1/8': 16}
    per_query = {}
    for row in rows:
        key = (row['layer'], row['query'])
        per_query[key] = per_query.get(key, 0.0) + float(row['weight'])
    assert all(abs(total - 1.0) < 1e-4 for total in per_query.values())


def test_checkpoint_without_model_description(semseg_checkpoint, tmp_path):
    semseg_checkpoint.metadata.pop('model')
    with pytest.raises(CheckpointError):
        dump_attention(semseg_checkpoint, 0, tmp_path)
