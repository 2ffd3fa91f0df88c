"""
Configuration settings for GLID runs

Process-level settings come from the environment (a ``.env`` file is read
first); run settings come from a versioned JSON document validated against
per-section schemas. Unknown keys are errors.
"""
import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

from dotenv import load_dotenv

from encoder_pyramid import EncoderConfig
from exceptions import ConfigError, GlidError
from masking import STRATEGIES as MASK_STRATEGIES
from model import LOAD_POLICIES
from query_decoder import DecoderConfig
from synth_data import DEFAULT_POOL_SIZE, SceneConfig
from task_heads import DOWNSTREAM_TASKS, SEGMENTATION_TASKS

load_dotenv()

SCHEMA_VERSION = 1


class Config:
    """Process settings read from the environment"""

    LOG_LEVEL = os.environ.get('GLID_LOG_LEVEL', 'INFO').upper()
    # rows buffered by MetricsLog before an early append; 0 = append once per logging interval
    METRICS_FLUSH_EVERY = int(os.environ.get('GLID_METRICS_FLUSH_EVERY', '0'))
    LOCK_TIMEOUT = float(os.environ.get('GLID_LOCK_TIMEOUT', '30'))

    @classmethod
    def reload(cls):
        load_dotenv()
        cls.LOG_LEVEL = os.environ.get('GLID_LOG_LEVEL', 'INFO').upper()
        cls.METRICS_FLUSH_EVERY = int(os.environ.get('GLID_METRICS_FLUSH_EVERY', '0'))
        cls.LOCK_TIMEOUT = float(os.environ.get('GLID_LOCK_TIMEOUT', '30'))

    @staticmethod
    def get_config() -> Dict[str, Any]:
        return {
            'log_level': Config.LOG_LEVEL,
            'metrics_flush_every': Config.METRICS_FLUSH_EVERY,
            'lock_timeout': Config.LOCK_TIMEOUT,
            'schema_version': SCHEMA_VERSION,
        }


# ---------------------------------------------------------------------- #
# Run configuration
# ---------------------------------------------------------------------- #
@dataclass(frozen=True)
class DataConfig:
    scene: SceneConfig = field(default_factory=SceneConfig)
    pool_size: int = DEFAULT_POOL_SIZE
    eval_scenes: int = 32


@dataclass(frozen=True)
class TrainConfig:
    """Optimization loop settings shared by pre-training and fine-tuning"""

    steps: int = 300
    batch_size: int = 32
    lr: float = 1.2e-3
    weight_decay: float = 0.05
    warmup_steps: int = 20
    min_lr_ratio: float = 0.0
    seed: int = 0
    log_every: int = 10
    # pre-training
    mask_strategy: str = 'random'
    mask_ratio: float = 0.75
    block_size: Optional[int] = None
    normalize_targets: bool = True
    hflip: bool = True
    # fine-tuning
    task: str = 'semseg'
    tasks: Tuple[str, ...] = ()
    num_queries: Optional[int] = None
    load_policy: str = 'full'
    data_frac: float = 1.0
    eval_every: int = 0

    def __post_init__(self):
        errors = []
        if self.steps < 0:
            errors.append('steps must be >= 0')
        if self.batch_size < 1:
            errors.append('batch_size must be >= 1')
        if not self.lr > 0:
            errors.append('lr must be > 0')
        if self.warmup_steps < 0 or self.log_every < 1 or self.eval_every < 0:
            errors.append('warmup_steps, log_every and eval_every must be non-negative (log_every >= 1)')
        if not 0.0 < self.data_frac <= 1.0:
            errors.append('data_frac must lie in (0, 1]')
        if self.task not in DOWNSTREAM_TASKS:
            errors.append(f'unknown task {self.task}')
        if self.load_policy not in LOAD_POLICIES:
            errors.append(f'unknown load policy {self.load_policy}')
        if self.mask_strategy not in MASK_STRATEGIES:
            errors.append(f'unknown mask strategy {self.mask_strategy}')
        outside = [t for t in self.tasks if t not in SEGMENTATION_TASKS]
        if outside:
            errors.append(f"multitask fine-tuning covers segmentation tasks only, got {', '.join(outside)}")
        if errors:
            raise ConfigError('Invalid training config', 'train', errors)

    @property
    def multitask(self) -> bool:
        return len(self.tasks) > 1

    @property
    def task_list(self) -> Tuple[str, ...]:
        return self.tasks if self.tasks else (self.task,)


@dataclass(frozen=True)
class AblationConfig:
    seeds: Tuple[int, ...] = (0, 1, 2)
    mask_strategies: Tuple[str, ...] = MASK_STRATEGIES
    mask_ratios: Tuple[float, ...] = (0.5, 0.6, 0.75)
    load_policies: Tuple[str, ...] = LOAD_POLICIES
    decoder_depths: Tuple[int, ...] = (3, 6, 9)
    data_fracs: Tuple[float, ...] = (0.1, 0.2, 0.5, 1.0)
    pretrain_step_scales: Tuple[float, ...] = (0.5, 1.0, 1.5)
    task: str = 'semseg'


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    data: DataConfig = field(default_factory=DataConfig)
    pretrain: TrainConfig = field(default_factory=TrainConfig)
    finetune: TrainConfig = field(default_factory=lambda: TrainConfig(steps=400, batch_size=8, lr=5e-4))
    ablation: AblationConfig = field(default_factory=AblationConfig)

    def to_dict(self) -> Dict[str, Any]:
        model = asdict(self.encoder)
        model.update({'decoder_layers': self.decoder.layers, 'decoder_dim': self.decoder.dim,
                      'decoder_heads': self.decoder.heads, 'decoder_mlp_ratio': self.decoder.mlp_ratio})
        data = asdict(self.data.scene)
        data.update({'pool_size': self.data.pool_size, 'eval_scenes': self.data.eval_scenes})
        pretrain = {key: getattr(self.pretrain, key) for key in PRETRAIN_SCHEMA}
        finetune = {key: getattr(self.finetune, key) for key in FINETUNE_SCHEMA}
        return _jsonable({
            'schema_version': SCHEMA_VERSION,
            'seed': self.seed,
            'model': model,
            'data': data,
            'pretrain': pretrain,
            'finetune': finetune,
            'ablation': asdict(self.ablation),
        })

    def with_seed(self, seed: int) -> 'RunConfig':
        return replace(self, seed=seed, pretrain=replace(self.pretrain, seed=seed),
                       finetune=replace(self.finetune, seed=seed))

    def with_decoder_layers(self, layers: int) -> 'RunConfig':
        return replace(self, decoder=replace(self.decoder, layers=layers))


def _jsonable(value):
    if isinstance(value, dict):
        return {k: _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    return value


def config_hash(cfg: RunConfig) -> str:
    canonical = json.dumps(cfg.to_dict(), sort_keys=True, separators=(',', ':'))
    return hashlib.sha256(canonical.encode('utf-8')).hexdigest()


# ---------------------------------------------------------------------- #
# Schemas
# ---------------------------------------------------------------------- #
_TASKS = DOWNSTREAM_TASKS

MODEL_SCHEMA = {
    'patch_size': {'type': int, 'min_value': 1, 'max_value': 16},
    'stage_dims': {'type': list, 'item_type': int, 'min_value': 4},
    'stage_depths': {'type': list, 'item_type': int, 'min_value': 1},
    'stage_heads': {'type': list, 'item_type': int, 'min_value': 1},
    'fpn_dim': {'type': int, 'min_value': 4},
    'mlp_ratio': {'type': float, 'min_value': 0.25, 'max_value': 8.0},
    'decoder_layers': {'type': int, 'min_value': 1, 'max_value': 24},
    'decoder_dim': {'type': int, 'min_value': 4},
    'decoder_heads': {'type': int, 'min_value': 1},
    'decoder_mlp_ratio': {'type': float, 'min_value': 0.25, 'max_value': 8.0},
}

DATA_SCHEMA = {
    'image_size': {'type': int, 'min_value': 16, 'max_value': 512},
    'max_instances': {'type': int, 'min_value': 1, 'max_value': 16},
    'min_instances': {'type': int, 'min_value': 1, 'max_value': 16},
    'd_min': {'type': float, 'min_value': 1e-3},
    'd_max': {'type': float, 'min_value': 1e-3},
    'min_extent': {'type': int, 'min_value': 4},
    'max_extent': {'type': int, 'min_value': 4},
    'pool_size': {'type': int, 'min_value': 1},
    'eval_scenes': {'type': int, 'min_value': 1},
}

_TRAIN_COMMON = {
    'steps': {'type': int, 'min_value': 0},
    'batch_size': {'type': int, 'min_value': 1},
    'lr': {'type': float, 'min_value': 1e-12, 'max_value': 1.0},
    'weight_decay': {'type': float, 'min_value': 0.0, 'max_value': 1.0},
    'warmup_steps': {'type': int, 'min_value': 0},
    'min_lr_ratio': {'type': float, 'min_value': 0.0, 'max_value': 1.0},
    'log_every': {'type': int, 'min_value': 1},
}

PRETRAIN_SCHEMA = dict(_TRAIN_COMMON, **{
    'mask_strategy': {'type': str, 'choices': MASK_STRATEGIES},
    'mask_ratio': {'type': float, 'min_value': 0.01, 'max_value': 0.99},
    'block_size': {'type': int, 'min_value': 1, 'nullable': True},
    'normalize_targets': {'type': bool},
    'hflip': {'type': bool},
})

FINETUNE_SCHEMA = dict(_TRAIN_COMMON, **{
    'task': {'type': str, 'choices': _TASKS},
    'tasks': {'type': list, 'item_type': str, 'choices': SEGMENTATION_TASKS},
    'num_queries': {'type': int, 'min_value': 1, 'nullable': True},
    'load_policy': {'type': str, 'choices': LOAD_POLICIES},
    'data_frac': {'type': float, 'min_value': 1e-6, 'max_value': 1.0},
    'eval_every': {'type': int, 'min_value': 0},
})

ABLATION_SCHEMA = {
    'seeds': {'type': list, 'item_type': int, 'min_value': 0},
    'mask_strategies': {'type': list, 'item_type': str, 'choices': MASK_STRATEGIES},
    'mask_ratios': {'type': list, 'item_type': float, 'min_value': 0.01, 'max_value': 0.99},
    'load_policies': {'type': list, 'item_type': str, 'choices': LOAD_POLICIES},
    'decoder_depths': {'type': list, 'item_type': int, 'min_value': 1},
    'data_fracs': {'type': list, 'item_type': float, 'min_value': 1e-6, 'max_value': 1.0},
    'pretrain_step_scales': {'type': list, 'item_type': float, 'min_value': 0.0},
    'task': {'type': str, 'choices': _TASKS},
}

SECTION_SCHEMAS = {
    'model': MODEL_SCHEMA,
    'data': DATA_SCHEMA,
    'pretrain': PRETRAIN_SCHEMA,
    'finetune': FINETUNE_SCHEMA,
    'ablation': ABLATION_SCHEMA,
}
TOP_LEVEL_KEYS = {'schema_version', 'seed'} | set(SECTION_SCHEMAS)


class ConfigValidator:
    """Schema checks for run-config sections"""

    @staticmethod
    def _check_scalar(name: str, value: Any, rules: Dict[str, Any], expected: type) -> Tuple[Any, Optional[str]]:
        # bool is an int subclass; never accept it for numeric fields
        if expected is float and isinstance(value, int) and not isinstance(value, bool):
            value = float(value)
        if isinstance(value, bool) and expected is not bool:
            return None, f'{name} must be of type {expected.__name__}'
        if not isinstance(value, expected):
            return None, f'{name} must be of type {expected.__name__}'
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            min_val = rules.get('min_value')
            max_val = rules.get('max_value')
            if min_val is not None and value < min_val:
                return None, f'{name} must be at least {min_val}'
            if max_val is not None and value > max_val:
                return None, f'{name} must be no more than {max_val}'
        choices = rules.get('choices')
        if choices is not None and value not in choices:
            return None, f"{name} must be one of {', '.join(str(c) for c in choices)}"
        return value, None

    @staticmethod
    def validate_section(data: Dict[str, Any], schema: Dict[str, Dict], section: str) -> Dict[str, Any]:
        """Validate one section against its schema; absent keys keep their defaults"""
        errors = []
        sanitized = {}
        if not isinstance(data, dict):
            return {'valid': False, 'errors': [f'{section} must be an object'], 'data': {}}
        for key in data:
            if key not in schema:
                errors.append(f'{section}.{key} is not a known setting')
        for key, rules in schema.items():
            if key not in data:
                if rules.get('required', False):
                    errors.append(f'{section}.{key} is required')
                continue
            value = data[key]
            name = f'{section}.{key}'
            if value is None:
                if rules.get('nullable', False):
                    sanitized[key] = None
                else:
                    errors.append(f'{name} must not be null')
                continue
            expected = rules.get('type', str)
            if expected is list:
                if not isinstance(value, list):
                    errors.append(f'{name} must be a list')
                    continue
                items = []
                for i, item in enumerate(value):
                    checked, error = ConfigValidator._check_scalar(f'{name}[{i}]', item, rules, rules['item_type'])
                    if error:
                        errors.append(error)
                    items.append(checked)
                sanitized[key] = tuple(items)
                continue
            checked, error = ConfigValidator._check_scalar(name, value, rules, expected)
            if error:
                errors.append(error)
            else:
                sanitized[key] = checked
        return {'valid': len(errors) == 0, 'errors': errors, 'data': sanitized}


def _build(factory, section: str, kwargs: Dict[str, Any], errors: List[str]):
    try:
        return factory(**kwargs)
    except ConfigError as e:
        errors.extend(f'{section}: {message}' for message in (e.errors or [e.message]))
    except GlidError as e:
        errors.append(f'{section}: {e.message}')
    return None


def parse_run_config(raw: Dict[str, Any]) -> RunConfig:
    """Turn a decoded JSON document into a RunConfig; every problem is reported at once"""
    if not isinstance(raw, dict):
        raise ConfigError('Config must be a JSON object', 'config')
    errors = []
    version = raw.get('schema_version')
    if version != SCHEMA_VERSION:
        errors.append(f'schema_version must be {SCHEMA_VERSION} (got {version!r})')
    for key in raw:
        if key not in TOP_LEVEL_KEYS:
            errors.append(f'{key} is not a known section')
    seed = raw.get('seed', 0)
    if isinstance(seed, bool) or not isinstance(seed, int) or seed < 0:
        errors.append('seed must be a non-negative integer')
        seed = 0

    sections = {}
    for section, schema in SECTION_SCHEMAS.items():
        result = ConfigValidator.validate_section(raw.get(section, {}), schema, section)
        errors.extend(result['errors'])
        sections[section] = result['data']
    if errors:
        raise ConfigError('Invalid run config', 'config', errors)

    model = dict(sections['model'])
    decoder_kwargs = {k[len('decoder_'):]: model.pop(k) for k in list(model) if k.startswith('decoder_')}
    encoder = _build(EncoderConfig, 'model', model, errors)
    if encoder is not None:
        decoder_kwargs.setdefault('levels', encoder.num_stages)
    decoder = _build(DecoderConfig, 'model', decoder_kwargs, errors)

    data = dict(sections['data'])
    data_extra = {k: data.pop(k) for k in ('pool_size', 'eval_scenes') if k in data}
    scene = _build(SceneConfig, 'data', data, errors)

    pretrain = _build(TrainConfig, 'pretrain', dict(sections['pretrain'], seed=seed), errors)
    finetune_defaults = RunConfig().finetune
    finetune = _build(lambda **kw: replace(finetune_defaults, **kw), 'finetune',
                      dict(sections['finetune'], seed=seed), errors)
    if finetune is not None and len(finetune.tasks) == 1:
        errors.append('finetune.tasks needs at least two tasks (use finetune.task for one)')
    ablation = _build(AblationConfig, 'ablation', sections['ablation'], errors)
    if errors:
        raise ConfigError('Invalid run config', 'config', errors)
    return RunConfig(seed, encoder, decoder, DataConfig(scene, **data_extra), pretrain, finetune, ablation)


def load_run_config(path: Union[str, Path]) -> RunConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding='utf-8'))
    except FileNotFoundError:
        raise ConfigError(f"Config file not found: {path}", 'config') from None
    except (OSError, UnicodeDecodeError) as e:
        raise ConfigError(f"Cannot read config {path}: {e}", 'config') from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"Config {path} is not valid JSON: {e}", 'config') from None
    return parse_run_config(raw)
