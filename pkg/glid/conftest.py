"""
Shared fixtures: a tiny model and scene setup so the suite stays fast
"""
import json

import numpy as np
import pytest

from config_settings import AblationConfig, DataConfig, RunConfig, TrainConfig
from encoder_pyramid import EncoderConfig
from query_decoder import DecoderConfig
from synth_data import SceneConfig

TINY_ENCODER = EncoderConfig(stage_dims=(16, 24, 32), stage_depths=(1, 1, 1), stage_heads=(2, 2, 2), fpn_dim=16)
TINY_DECODER = DecoderConfig(layers=2, dim=32, heads=2)
TINY_SCENE = SceneConfig(image_size=32, max_instances=2, min_extent=8, max_extent=14)


@pytest.fixture
def encoder_cfg():
    return TINY_ENCODER


@pytest.fixture
def decoder_cfg():
    return TINY_DECODER


@pytest.fixture
def scene_cfg():
    return TINY_SCENE


@pytest.fixture
def image():
    return np.random.default_rng(0).uniform(0.0, 1.0, size=(32, 32, 3)).astype(np.float32)


@pytest.fixture
def run_cfg():
    train = dict(steps=3, batch_size=2, warmup_steps=1, log_every=1)
    return RunConfig(
        seed=0,
        encoder=TINY_ENCODER,
        decoder=TINY_DECODER,
        data=DataConfig(TINY_SCENE, pool_size=16, eval_scenes=2),
        pretrain=TrainConfig(**train),
        finetune=TrainConfig(lr=5e-4, num_queries=4, **train),
        ablation=AblationConfig(seeds=(0,), decoder_depths=(2,), data_fracs=(1.0,), pretrain_step_scales=(1.0,)),
    )


@pytest.fixture
def config_file(tmp_path, run_cfg):
    path = tmp_path / 'tiny.json'
    path.write_text(json.dumps(run_cfg.to_dict()), encoding='utf-8')
    return path
