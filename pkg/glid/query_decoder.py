"""
Query-based transformer decoder

Each layer runs cross-attention to image features, then self-attention among
the queries, then an MLP; all three are pre-norm residual. Layers visit the
pyramid levels coarse to fine in round-robin order: the dense maps when
fine-tuning, the cells occupied by visible tokens when pre-training.
"""
from dataclasses import dataclass
from typing import Callable, List, Optional, Tuple, Union

import numpy as np

import tensor_core as tc
from encoder_pyramid import LEVEL_NAMES, FeaturePyramid, TokenFeatures
from exceptions import ConfigError, MaskError, ShapeError
from masking import MaskPlan
from nn_layers import MLP, LayerNorm, Linear, MultiHeadAttention, ParamStore, grid_coords, sincos_2d
from tensor_core import Tensor

AttentionHook = Callable[[int, str, np.ndarray], None]


@dataclass(frozen=True)
class DecoderConfig:
    layers: int = 6
    dim: int = 64
    heads: int = 4
    mlp_ratio: float = 2.0
    levels: int = 3

    def __post_init__(self):
        errors = []
        if self.layers < 1:
            errors.append('decoder needs at least one layer')
        if self.heads < 1 or self.dim % self.heads:
            errors.append(f'decoder dim {self.dim} is not divisible by {self.heads} heads')
        if self.dim % 4:
            errors.append('decoder dim must be divisible by 4 (sinusoidal positions)')
        if errors:
            raise ConfigError('Invalid decoder config', 'model', errors)


@dataclass
class QuerySet:
    tokens: Tensor
    kind: str  # 'pretrain' | 'finetune'
    cls_index: Optional[int] = None

    @property
    def count(self) -> int:
        return self.tokens.shape[0]


def level_sequence(layers: int, levels: int) -> List[int]:
    """Pyramid index per layer, coarsest first: [2, 1, 0, 2, 1, 0] for 6 layers, 3 levels"""
    return [levels - 1 - (layer % levels) for layer in range(layers)]


def _cell_centres(coords: np.ndarray, level: int) -> np.ndarray:
    """Level-grid cells to their centres in stage-1 grid units"""
    return (np.asarray(coords, dtype=np.float64) + 0.5) * 2 ** level - 0.5


def create_query_params(store: ParamStore, dim: int):
    store.create('queries.cls', (dim,), 'normal')
    store.create('queries.mask_token', (dim,), 'normal')


def build_pretrain_queries(plan: MaskPlan, store: ParamStore) -> QuerySet:
    """[CLS] followed by one mask token (+ its sinusoidal position) per masked cell"""
    if plan.num_masked == 0:
        raise MaskError('Pre-training queries need at least one masked token')
    cls = store['queries.cls']
    mask_token = store['queries.mask_token']
    dim = cls.shape[0]
    positions = sincos_2d(dim, plan.coords(plan.masked))
    masked = mask_token.reshape(1, dim) + positions
    return QuerySet(tc.concat([cls.reshape(1, dim), masked], axis=0), 'pretrain', cls_index=0)


def build_finetune_queries(count: int, cls_seed: Tensor, embeds: Tensor) -> QuerySet:
    """q_i = cls_seed + e_i; identical tokens when e is still zero"""
    dim = cls_seed.shape[-1]
    if cls_seed.size != dim:
        raise ShapeError('build_finetune_queries', [cls_seed.shape], 'cls seed must be a single vector')
    if embeds.shape != (count, dim):
        raise ShapeError('build_finetune_queries', [embeds.shape, (count, dim)])
    return QuerySet(cls_seed.reshape(1, dim) + embeds, 'finetune')


class DecoderLayer:
    def __init__(self, store: ParamStore, name: str, dim: int, heads: int, mlp_ratio: float):
        self.norm_cross = LayerNorm(store, f"{name}.norm_cross", dim)
        self.cross_attn = MultiHeadAttention(store, f"{name}.cross_attn", dim, heads)
        self.norm_self = LayerNorm(store, f"{name}.norm_self", dim)
        self.self_attn = MultiHeadAttention(store, f"{name}.self_attn", dim, heads)
        self.norm_mlp = LayerNorm(store, f"{name}.norm_mlp", dim)
        self.mlp = MLP(store, f"{name}.mlp", dim, mlp_ratio)

    def __call__(self, x: Tensor, keys: Tensor, values: Tensor) -> Tuple[Tensor, np.ndarray]:
        attended, weights = self.cross_attn(self.norm_cross(x), keys, values, return_weights=True)
        x = x + attended
        h = self.norm_self(x)
        x = x + self.self_attn(h, h, h)
        return x + self.mlp(self.norm_mlp(x)), weights


class QueryDecoder:
    def __init__(self, store: ParamStore, cfg: DecoderConfig, feature_dim: int):
        self.store = store
        self.cfg = cfg
        self.feature_dim = feature_dim
        self.input_proj = Linear(store, 'decoder.input_proj', feature_dim, cfg.dim)
        store.create('decoder.level_embed', (cfg.levels, cfg.dim), 'normal')
        self.layers = [DecoderLayer(store, f"decoder.layer{i}", cfg.dim, cfg.heads, cfg.mlp_ratio)
                       for i in range(cfg.layers)]
        self.norm = LayerNorm(store, 'decoder.norm', cfg.dim)

    def _memory(self, tokens: Tensor, coords: np.ndarray, level: int) -> Tuple[Tensor, Tensor]:
        """Keys carry position + level embedding, values do not"""
        if tokens.shape[-1] != self.feature_dim:
            raise ShapeError('decode', [tokens.shape, (self.feature_dim,)], 'feature channels differ from decoder input')
        values = self.input_proj(tokens)
        level_embed = self.store['decoder.level_embed'][level:level + 1]
        keys = values + sincos_2d(self.cfg.dim, coords) + level_embed
        return keys, values

    def _pyramid_memory(self, pyramid: FeaturePyramid) -> List[Tuple[Tensor, Tensor]]:
        memory = []
        for level, feature_map in enumerate(pyramid.maps):
            h, w, c = feature_map.shape
            memory.append(self._memory(feature_map.reshape(h * w, c), _cell_centres(grid_coords(h, w), level), level))
        return memory

    def _sparse_memory(self, features: TokenFeatures) -> List[Tuple[Tensor, Tensor]]:
        return [self._memory(lv.tokens, _cell_centres(lv.coords, level), level)
                for level, lv in enumerate(features.levels)]

    def decode(self, queries: QuerySet, features: Union[FeaturePyramid, TokenFeatures],
               attn_hook: Optional[AttentionHook] = None) -> Tensor:
        """
        Run every decoder layer over the queries

        Args:
            queries: pre-training or fine-tuning QuerySet
            features: FeaturePyramid (fine-tuning) or TokenFeatures (pre-training)
            attn_hook: optional fn(layer, level_name, weights) receiving head-averaged
                cross-attention weights of shape (queries, keys)

        Returns:
            Tensor: (queries, dim) hidden states
        """
        if queries.tokens.shape[-1] != self.cfg.dim:
            raise ShapeError('decode', [queries.tokens.shape, (self.cfg.dim,)])
        if isinstance(features, FeaturePyramid):
            if len(features.maps) != self.cfg.levels:
                raise ShapeError('decode', [(len(features.maps),), (self.cfg.levels,)], 'pyramid level count')
            memory = self._pyramid_memory(features)
        else:
            if len(features.levels) != self.cfg.levels:
                raise ShapeError('decode', [(len(features.levels),), (self.cfg.levels,)], 'token level count')
            memory = self._sparse_memory(features)
        order = level_sequence(self.cfg.layers, self.cfg.levels)
        x = queries.tokens
        for index, (layer, level) in enumerate(zip(self.layers, order)):
            keys, values = memory[level]
            x, weights = layer(x, keys, values)
            if attn_hook is not None:
                attn_hook(index, LEVEL_NAMES[level] if level < len(LEVEL_NAMES) else str(level), weights)
        return self.norm(x)
