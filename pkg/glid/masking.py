"""
Token-grid masks for masked image modeling

Three strategies share one contract: exactly round-half-up(ratio * N) of the
N grid cells are masked, and the plan is a pure function of
(strategy, ratio, grid_h, grid_w, seed).
"""
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from exceptions import MaskError

STRATEGIES = ('random', 'block', 'grid')
MIN_BLOCK = 2
MAX_BLOCK = 4

Rect = Tuple[int, int, int, int]  # top, left, height, width


@dataclass(frozen=True)
class MaskPlan:
    grid_h: int
    grid_w: int
    masked: Tuple[int, ...]
    visible: Tuple[int, ...]
    ratio: float
    strategy: str
    blocks: Tuple[Rect, ...] = field(default=())
    block_shape: Optional[Tuple[int, int]] = None

    @property
    def num_tokens(self) -> int:
        return self.grid_h * self.grid_w

    @property
    def num_masked(self) -> int:
        return len(self.masked)

    @property
    def num_visible(self) -> int:
        return len(self.visible)

    def mask_grid(self) -> np.ndarray:
        """grid_h x grid_w boolean array, True where masked"""
        grid = np.zeros(self.num_tokens, dtype=bool)
        grid[list(self.masked)] = True
        return grid.reshape(self.grid_h, self.grid_w)

    def coords(self, indices: Sequence[int]) -> np.ndarray:
        rows, cols = np.divmod(np.asarray(indices, dtype=np.int64), self.grid_w)
        return np.stack([rows, cols], axis=1)

    def to_dict(self) -> Dict[str, object]:
        return {
            'grid_h': self.grid_h,
            'grid_w': self.grid_w,
            'strategy': self.strategy,
            'ratio': self.ratio,
            'masked': list(self.masked),
            'visible': list(self.visible),
            'blocks': [list(b) for b in self.blocks],
            'block_shape': list(self.block_shape) if self.block_shape else None,
        }


def masked_count(ratio: float, total: int) -> int:
    """round-half-up(ratio * total)"""
    return int(math.floor(ratio * total + 0.5))


def _plan(grid_h, grid_w, masked, ratio, strategy, blocks=(), block_shape=None) -> MaskPlan:
    masked_set = set(int(i) for i in masked)
    visible = tuple(i for i in range(grid_h * grid_w) if i not in masked_set)
    return MaskPlan(grid_h, grid_w, tuple(sorted(masked_set)), visible, float(ratio), strategy,
                    tuple(blocks), block_shape)


def visible_plan(grid_h: int, grid_w: int) -> MaskPlan:
    """Every token visible; the dense fine-tuning path and the ratio->0 test path"""
    return _plan(grid_h, grid_w, (), 0.0, 'none')


def make_mask(strategy: str, ratio: float, grid_h: int, grid_w: int, seed: int,
              block_size: Optional[Tuple[int, int]] = None) -> MaskPlan:
    """
    Build a MaskPlan for one image

    Args:
        strategy: 'random', 'block' or 'grid'
        ratio: target masked fraction in (0, 1)
        grid_h, grid_w: token grid dims, each >= 2
        seed: plan seed
        block_size: fixed (h, w) block for the block strategy; drawn from 2..4 when None

    Returns:
        MaskPlan with exactly masked_count(ratio, grid_h * grid_w) masked cells
    """
    if strategy not in STRATEGIES:
        raise MaskError(f"Unknown mask strategy: {strategy}")
    if not 0.0 < ratio < 1.0:
        raise MaskError(f"Mask ratio must lie in (0, 1), got {ratio}")
    if grid_h < 2 or grid_w < 2:
        raise MaskError(f"Grid dims must be >= 2, got {grid_h}x{grid_w}")
    rng = np.random.default_rng(seed)
    count = masked_count(ratio, grid_h * grid_w)
    if strategy == 'random':
        return _random_mask(rng, ratio, grid_h, grid_w, count)
    if strategy == 'block':
        return _block_mask(rng, ratio, grid_h, grid_w, count, block_size)
    return _grid_mask(rng, ratio, grid_h, grid_w, count)


def _random_mask(rng, ratio, grid_h, grid_w, count) -> MaskPlan:
    order = rng.permutation(grid_h * grid_w)
    return _plan(grid_h, grid_w, order[:count], ratio, 'random')


def _block_mask(rng, ratio, grid_h, grid_w, count, block_size) -> MaskPlan:
    if block_size is None:
        bh = int(rng.integers(MIN_BLOCK, min(MAX_BLOCK, grid_h) + 1))
        bw = int(rng.integers(MIN_BLOCK, min(MAX_BLOCK, grid_w) + 1))
    else:
        bh, bw = (int(v) for v in block_size)
        if bh > grid_h or bw > grid_w:
            raise MaskError(f"Block {bh}x{bw} is larger than the {grid_h}x{grid_w} grid")
        if bh < 1 or bw < 1:
            raise MaskError(f"Block dims must be positive, got {bh}x{bw}")

    # Tile the grid; whole tiles first (random order), clipped edge tiles only when those run out
    full, partial = [], []
    for top in range(0, grid_h, bh):
        for left in range(0, grid_w, bw):
            tile = (top, left, min(bh, grid_h - top), min(bw, grid_w - left))
            (full if tile[2] == bh and tile[3] == bw else partial).append(tile)
    tiles = [full[i] for i in rng.permutation(len(full))] + [partial[i] for i in rng.permutation(len(partial))]

    masked: List[int] = []
    blocks: List[Rect] = []
    for top, left, h, w in tiles:
        remaining = count - len(masked)
        if remaining <= 0:
            break
        if h * w <= remaining:
            blocks.append((top, left, h, w))
            rows = h
        else:
            # trim the last tile row-major: some whole rows plus a partial row
            rows, extra = divmod(remaining, w)
            if rows:
                blocks.append((top, left, rows, w))
            if extra:
                blocks.append((top + rows, left, 1, extra))
            masked.extend((top + rows) * grid_w + left + c for c in range(extra))
        masked.extend((top + r) * grid_w + left + c for r in range(rows) for c in range(w))
    return _plan(grid_h, grid_w, masked, ratio, 'block', blocks, (bh, bw))


def grid_cell_size(ratio: float, grid_h: int, grid_w: int) -> int:
    """Cell side c whose one-visible-per-cell pattern masks closest to ``ratio``"""
    candidates = range(2, min(grid_h, grid_w) + 1)
    return min(candidates, key=lambda c: (abs((1.0 - 1.0 / (c * c)) - ratio), c))


def _grid_mask(rng, ratio, grid_h, grid_w, count) -> MaskPlan:
    cell = grid_cell_size(ratio, grid_h, grid_w)
    off_r, off_c = (int(v) for v in rng.integers(0, cell, size=2))
    rows, cols = np.divmod(np.arange(grid_h * grid_w), grid_w)
    keep = ((rows - off_r) % cell == 0) & ((cols - off_c) % cell == 0)
    masked = np.flatnonzero(~keep)
    visible = np.flatnonzero(keep)
    if len(masked) < count:
        extra = rng.choice(visible, size=count - len(masked), replace=False)
        masked = np.concatenate([masked, extra])
    elif len(masked) > count:
        masked = rng.choice(masked, size=count, replace=False)
    return _plan(grid_h, grid_w, masked, ratio, 'grid', block_shape=(cell, cell))
