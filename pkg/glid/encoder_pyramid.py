"""
Hierarchical patch encoder and bidirectional feature pyramid

Stages run global self-attention over a token set; between stages a 2x2
patch merge halves the grid. The same code serves dense fine-tuning (every
token present) and sparse pre-training (visible tokens only): a merged token
exists when at least one of its four children exists, and absent children
contribute zeros to the merge.

The pyramid fuser sees every level as a dense zero-filled grid and produces
maps at 1/4, 1/8 and 1/16 of the input, all with ``fpn_dim`` channels.
Sparse encodings read each map back out at the cells its stage occupied.
"""
from dataclasses import dataclass, field
from typing import List, Sequence, Tuple

import numpy as np

import tensor_core as tc
from exceptions import ConfigError, MaskError, ShapeError
from masking import MaskPlan, visible_plan
from nn_layers import LayerNorm, Linear, ParamStore, TransformerBlock, sincos_2d
from tensor_core import Tensor

LEVEL_NAMES = ('1/4', '1/8', '1/16')


@dataclass(frozen=True)
class EncoderConfig:
    patch_size: int = 4
    stage_dims: Tuple[int, ...] = (32, 48, 64)
    stage_depths: Tuple[int, ...] = (2, 1, 1)
    stage_heads: Tuple[int, ...] = (2, 2, 2)
    fpn_dim: int = 32
    mlp_ratio: float = 2.0

    def __post_init__(self):
        errors = []
        n = len(self.stage_dims)
        if n < 2:
            errors.append('at least two stages are required')
        if len(self.stage_depths) != n or len(self.stage_heads) != n:
            errors.append('stage_dims, stage_depths and stage_heads must have equal length')
        if any(b < a for a, b in zip(self.stage_dims, self.stage_dims[1:])):
            errors.append('stage_dims must be non-decreasing')
        for dim, heads in zip(self.stage_dims, self.stage_heads):
            if heads < 1 or dim % heads:
                errors.append(f'stage dim {dim} is not divisible by {heads} heads')
        if self.stage_dims and self.stage_dims[0] % 4:
            errors.append('first stage dim must be divisible by 4 (sinusoidal positions)')
        if self.patch_size < 1:
            errors.append('patch_size must be positive')
        if errors:
            raise ConfigError('Invalid encoder config', 'model', errors)

    @property
    def num_stages(self) -> int:
        return len(self.stage_dims)

    @property
    def input_multiple(self) -> int:
        """Input sides must be divisible by this"""
        return self.patch_size * 2 ** (self.num_stages - 1)


@dataclass
class FeaturePyramid:
    """Dense maps ordered fine to coarse: [1/4, 1/8, 1/16] for a 3-stage encoder"""

    maps: List[Tensor]

    @property
    def quarter_map(self) -> Tensor:
        return self.maps[0]

    def level_shapes(self) -> List[Tuple[int, ...]]:
        return [m.shape for m in self.maps]


@dataclass
class TokenLevel:
    tokens: Tensor
    coords: np.ndarray  # (N, 2) row/col on this stage's grid
    grid: Tuple[int, int]


@dataclass
class TokenFeatures:
    """
    Pyramid features read out at the occupied cells of every level

    tokens/coords/grid describe the finest level in input row order; levels
    holds one TokenLevel per pyramid level, finest first, with coords on that
    level's own grid.
    """

    tokens: Tensor
    coords: np.ndarray
    grid: Tuple[int, int]
    levels: List[TokenLevel] = field(default_factory=list)


def merged_cells(coords: np.ndarray, grid_w: int, level: int) -> np.ndarray:
    """Cells of `level` covering any of the stage-1 coords, row-major as token merging emits them"""
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, 2)
    if level == 0:
        return coords
    factor = 2 ** level
    cells = np.unique((coords[:, 0] // factor) * (grid_w // factor) + coords[:, 1] // factor)
    return np.stack(np.divmod(cells, grid_w // factor), axis=1)


class BiFPN:
    """One top-down and one bottom-up pass with softplus-normalized fusion weights"""

    def __init__(self, store: ParamStore, in_dims: Sequence[int], dim: int):
        self.store = store
        self.levels = len(in_dims)
        self.laterals = [Linear(store, f"fpn.lateral{i}", d, dim) for i, d in enumerate(in_dims)]
        self.nodes = {}
        # top-down nodes on every level but the coarsest, bottom-up on every level but the finest
        for i in range(self.levels - 1):
            self._node(f"td{i}", 2, dim)
        for i in range(1, self.levels):
            self._node(f"bu{i}", 3 if i < self.levels - 1 else 2, dim)

    def _node(self, name: str, fan_in: int, dim: int):
        prefix = f"fpn.{name}"
        self.store.create(f"{prefix}.fuse", (fan_in,), 'zeros')
        self.nodes[name] = (Linear(self.store, f"{prefix}.proj", dim, dim), LayerNorm(self.store, f"{prefix}.norm", dim))

    def _fuse(self, name: str, inputs: List[Tensor]) -> Tensor:
        weights = tc.softplus(self.store[f"fpn.{name}.fuse"])
        weights = weights / (weights.sum() + 1e-4)
        mixed = inputs[0] * weights[0:1]
        for i, item in enumerate(inputs[1:], start=1):
            mixed = mixed + item * weights[i:i + 1]
        proj, norm = self.nodes[name]
        return norm(proj(mixed))

    def __call__(self, maps: List[Tensor]) -> List[Tensor]:
        lateral = [layer(m) for layer, m in zip(self.laterals, maps)]
        top = self.levels - 1
        td = [None] * self.levels
        td[top] = lateral[top]
        for i in range(top - 1, -1, -1):
            td[i] = self._fuse(f"td{i}", [lateral[i], tc.upsample2x(td[i + 1])])
        out = [None] * self.levels
        out[0] = td[0]
        for i in range(1, self.levels):
            down = tc.avgpool2x(out[i - 1])
            if i < top:
                out[i] = self._fuse(f"bu{i}", [lateral[i], td[i], down])
            else:
                out[i] = self._fuse(f"bu{i}", [lateral[i], down])
        return out


class Encoder:
    """Patch embedding, attention stages with 2x2 merges, and the BiFPN fuser"""

    def __init__(self, store: ParamStore, cfg: EncoderConfig):
        self.store = store
        self.cfg = cfg
        p = cfg.patch_size
        self.patch_embed = Linear(store, 'encoder.patch_embed', p * p * 3, cfg.stage_dims[0])
        self.stages = []
        self.merges = []
        for s, (dim, depth, heads) in enumerate(zip(cfg.stage_dims, cfg.stage_depths, cfg.stage_heads)):
            if s > 0:
                prev = cfg.stage_dims[s - 1]
                self.merges.append((LayerNorm(store, f"encoder.merge{s}.norm", 4 * prev),
                                    Linear(store, f"encoder.merge{s}.reduction", 4 * prev, dim)))
            blocks = [TransformerBlock(store, f"encoder.stage{s}.block{b}", dim, heads, cfg.mlp_ratio)
                      for b in range(depth)]
            self.stages.append((blocks, LayerNorm(store, f"encoder.stage{s}.norm", dim)))
        self.fpn = BiFPN(store, cfg.stage_dims, cfg.fpn_dim)

    # ------------------------------------------------------------------ #
    def patch_grid(self, height: int, width: int) -> Tuple[int, int]:
        m = self.cfg.input_multiple
        if height % m or width % m:
            raise ShapeError('encoder', [(height, width, 3)], f'input sides must be divisible by {m}')
        return height // self.cfg.patch_size, width // self.cfg.patch_size

    def _check_image(self, image: Tensor) -> Tuple[int, int]:
        if image.ndim != 3 or image.shape[2] != 3:
            raise ShapeError('encoder', [image.shape], 'expected an H x W x 3 image')
        return self.patch_grid(image.shape[0], image.shape[1])

    def _merge(self, s: int, level: TokenLevel) -> TokenLevel:
        gh, gw = level.grid
        rows, cols = level.coords[:, 0], level.coords[:, 1]
        slot = np.full((gh, gw), len(rows), dtype=np.int64)
        slot[rows, cols] = np.arange(len(rows))
        parents = np.unique((rows // 2) * (gw // 2) + cols // 2)
        pr, pc = np.divmod(parents, gw // 2)
        # child order (0,0), (1,0), (0,1), (1,1)
        children = np.stack([slot[2 * pr, 2 * pc], slot[2 * pr + 1, 2 * pc],
                             slot[2 * pr, 2 * pc + 1], slot[2 * pr + 1, 2 * pc + 1]], axis=1)
        dim = level.tokens.shape[1]
        padded = tc.concat([level.tokens, np.zeros((1, dim), dtype=level.tokens.data.dtype)], axis=0)
        gathered = tc.take(padded, children.reshape(-1), axis=0).reshape(len(parents), 4 * dim)
        norm, reduction = self.merges[s - 1]
        return TokenLevel(reduction(norm(gathered)), np.stack([pr, pc], axis=1), (gh // 2, gw // 2))

    @staticmethod
    def _to_dense(level: TokenLevel) -> Tensor:
        gh, gw = level.grid
        n, dim = level.tokens.shape
        index = np.full(gh * gw, n, dtype=np.int64)
        index[level.coords[:, 0] * gw + level.coords[:, 1]] = np.arange(n)
        padded = tc.concat([level.tokens, np.zeros((1, dim), dtype=level.tokens.data.dtype)], axis=0)
        return tc.take(padded, index, axis=0).reshape(gh, gw, dim)

    def encode_tokens(self, patches: Tensor, coords: np.ndarray, grid: Tuple[int, int]):
        """
        Run every stage and the pyramid on an arbitrary token set

        Args:
            patches: (N, p*p*3) flattened pixel patches
            coords: (N, 2) stage-1 grid row/col of each patch, unique
            grid: stage-1 grid dims

        Returns:
            (TokenFeatures in the input row order, FeaturePyramid of dense maps)
        """
        coords = np.asarray(coords, dtype=np.int64).reshape(-1, 2)
        gh, gw = grid
        if gh % 2 ** (self.cfg.num_stages - 1) or gw % 2 ** (self.cfg.num_stages - 1):
            raise ShapeError('encoder', [tuple(grid)], 'grid must halve cleanly at every stage')
        if patches.shape[0] != coords.shape[0]:
            raise ShapeError('encoder', [patches.shape, coords.shape], 'one coordinate per patch')
        x = self.patch_embed(patches) + sincos_2d(self.cfg.stage_dims[0], coords)
        level = TokenLevel(x, coords, (gh, gw))
        stage_levels = []
        for s, (blocks, norm) in enumerate(self.stages):
            if s > 0:
                level = self._merge(s, level)
            h = level.tokens
            for block in blocks:
                h = block(h)
            level = TokenLevel(norm(h), level.coords, level.grid)
            stage_levels.append(level)
        maps = self.fpn([self._to_dense(lv) for lv in stage_levels])
        read_out = []
        for feature_map, lv in zip(maps, stage_levels):
            lh, lw = lv.grid
            flat = feature_map.reshape(lh * lw, self.cfg.fpn_dim)
            read_out.append(TokenLevel(tc.take(flat, lv.coords[:, 0] * lw + lv.coords[:, 1], axis=0), lv.coords, lv.grid))
        fine = read_out[0]
        return TokenFeatures(fine.tokens, fine.coords, fine.grid, read_out), FeaturePyramid(list(maps))

    def encode_visible(self, image: Tensor, plan: MaskPlan) -> TokenFeatures:
        """MAE-style encoding of the plan's visible tokens only"""
        image = tc.as_tensor(image)
        grid = self._check_image(image)
        if (plan.grid_h, plan.grid_w) != grid:
            raise MaskError(f"Mask grid {plan.grid_h}x{plan.grid_w} does not match patch grid {grid[0]}x{grid[1]}")
        patches = tc.take(tc.patchify(image, self.cfg.patch_size), list(plan.visible), axis=0)
        features, _ = self.encode_tokens(patches, plan.coords(plan.visible), grid)
        return features

    def encode_full(self, image: Tensor) -> FeaturePyramid:
        image = tc.as_tensor(image)
        grid = self._check_image(image)
        plan = visible_plan(*grid)
        patches = tc.patchify(image, self.cfg.patch_size)
        _, pyramid = self.encode_tokens(patches, plan.coords(plan.visible), grid)
        return pyramid
