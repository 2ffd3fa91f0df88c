"""
Named parameter store and the transformer building blocks built on it

Parameters live in one ordered ParamStore keyed by dotted names such as
``encoder.stage0.block1.attn.q.weight``. Layers only remember their names;
every forward call reads the current Tensor from the store, so loading a
checkpoint (which overwrites ``.data`` in place) is seen immediately.
"""
import zlib
from collections import OrderedDict
from typing import Dict, Iterable, Iterator, List, Optional, Sequence, Tuple

import numpy as np
from scipy import stats

import tensor_core as tc
from exceptions import GlidError, ShapeError
from tensor_core import Tensor

INIT_STD = 0.02


class ParamStore:
    """Ordered map from hierarchical parameter names to trainable Tensors"""

    def __init__(self, seed: int = 0):
        self.seed = int(seed)
        self._params: 'OrderedDict[str, Tensor]' = OrderedDict()

    def _rng(self, name: str) -> np.random.Generator:
        # Per-name streams: a parameter's init never depends on creation order
        return np.random.default_rng([self.seed, zlib.crc32(name.encode('utf-8'))])

    def create(self, name: str, shape: Sequence[int], init: str = 'normal') -> Tensor:
        """
        Create (or return the existing) parameter ``name``

        Args:
            name: dotted parameter name
            shape: parameter shape
            init: 'normal' (truncated normal, std 0.02, cut at 2 std), 'zeros' or 'ones'

        Returns:
            Tensor: the registered parameter
        """
        shape = tuple(int(s) for s in shape)
        if name in self._params:
            existing = self._params[name]
            if existing.shape != shape:
                raise ShapeError(f"param {name}", [existing.shape, shape])
            return existing
        if init == 'normal':
            values = stats.truncnorm.rvs(-2.0, 2.0, loc=0.0, scale=INIT_STD, size=shape,
                                         random_state=self._rng(name))
        elif init == 'zeros':
            values = np.zeros(shape)
        elif init == 'ones':
            values = np.ones(shape)
        else:
            raise GlidError(f"Unknown init scheme: {init}")
        param = Tensor(np.asarray(values, dtype=np.float32).reshape(shape), requires_grad=True, name=name)
        self._params[name] = param
        return param

    def __getitem__(self, name: str) -> Tensor:
        try:
            return self._params[name]
        except KeyError:
            raise KeyError(f"Unknown parameter: {name}") from None

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def names(self, prefix: str = '') -> List[str]:
        return [name for name in self._params if name.startswith(prefix)]

    def items(self) -> Iterable[Tuple[str, Tensor]]:
        return self._params.items()

    def num_values(self) -> int:
        return int(sum(p.size for p in self._params.values()))

    def zero_grad(self):
        for param in self._params.values():
            param.zero_grad()

    def state_dict(self) -> 'OrderedDict[str, np.ndarray]':
        return OrderedDict((name, p.data.copy()) for name, p in self._params.items())

    def load_arrays(self, arrays: Dict[str, np.ndarray], names: Optional[Iterable[str]] = None) -> List[str]:
        """Copy arrays into existing parameters in place; shapes must match exactly"""
        names = list(arrays) if names is None else list(names)
        for name in names:
            param = self[name]
            value = np.asarray(arrays[name])
            if value.shape != param.shape:
                raise ShapeError(f"load {name}", [value.shape, param.shape])
            param.data[...] = value
        return names


# ---------------------------------------------------------------------- #
# Positional encodings
# ---------------------------------------------------------------------- #
def sincos_1d(dim: int, positions: np.ndarray) -> np.ndarray:
    if dim % 2:
        raise ShapeError('sincos_1d', [(dim,)], 'embedding dim must be even')
    omega = 1.0 / 10000 ** (np.arange(dim // 2, dtype=np.float64) / (dim / 2.0))
    angles = np.outer(np.asarray(positions, dtype=np.float64).reshape(-1), omega)
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=1)


def sincos_2d(dim: int, coords: np.ndarray) -> np.ndarray:
    """
    Fixed 2-D sine-cosine embedding of (row, col) coordinates

    Half of the channels encode the row, the other half the column.

    Args:
        dim: embedding width, divisible by 4
        coords: (N, 2) array of row/col coordinates (may be fractional)

    Returns:
        np.ndarray: (N, dim) float32 embedding
    """
    if dim % 4:
        raise ShapeError('sincos_2d', [(dim,)], 'embedding dim must be divisible by 4')
    coords = np.asarray(coords, dtype=np.float64).reshape(-1, 2)
    emb = np.concatenate([sincos_1d(dim // 2, coords[:, 0]), sincos_1d(dim // 2, coords[:, 1])], axis=1)
    return emb.astype(np.float32)


def grid_coords(grid_h: int, grid_w: int) -> np.ndarray:
    rows, cols = np.divmod(np.arange(grid_h * grid_w), grid_w)
    return np.stack([rows, cols], axis=1)


# ---------------------------------------------------------------------- #
# Layers
# ---------------------------------------------------------------------- #
class Linear:
    def __init__(self, store: ParamStore, name: str, in_dim: int, out_dim: int, bias: bool = True,
                 init: str = 'normal'):
        self.store = store
        self.name = name
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.bias = bias
        store.create(f"{name}.weight", (in_dim, out_dim), init)
        if bias:
            store.create(f"{name}.bias", (out_dim,), 'zeros')

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.in_dim:
            raise ShapeError(self.name, [x.shape, (self.in_dim, self.out_dim)])
        out = x @ self.store[f"{self.name}.weight"]
        if self.bias:
            out = out + self.store[f"{self.name}.bias"]
        return out


class LayerNorm:
    def __init__(self, store: ParamStore, name: str, dim: int, eps: float = 1e-5):
        self.store = store
        self.name = name
        self.eps = eps
        store.create(f"{name}.weight", (dim,), 'ones')
        store.create(f"{name}.bias", (dim,), 'zeros')

    def __call__(self, x: Tensor) -> Tensor:
        return tc.layer_norm(x, self.store[f"{self.name}.weight"], self.store[f"{self.name}.bias"], self.eps)


class MultiHeadAttention:
    """Scaled dot-product attention over token rows; no causal masking"""

    def __init__(self, store: ParamStore, name: str, dim: int, heads: int, kv_dim: Optional[int] = None):
        if dim % heads:
            raise ShapeError(name, [(dim,), (heads,)], 'dim must be divisible by heads')
        kv_dim = kv_dim or dim
        self.name = name
        self.dim = dim
        self.heads = heads
        self.head_dim = dim // heads
        self.q = Linear(store, f"{name}.q", dim, dim)
        self.k = Linear(store, f"{name}.k", kv_dim, dim)
        self.v = Linear(store, f"{name}.v", kv_dim, dim)
        self.out = Linear(store, f"{name}.out", dim, dim)

    def _split(self, x: Tensor) -> Tensor:
        # (N, D) -> (heads, N, head_dim)
        return x.reshape(x.shape[0], self.heads, self.head_dim).transpose(1, 0, 2)

    def __call__(self, query: Tensor, key: Tensor, value: Tensor,
                 return_weights: bool = False):
        q = self._split(self.q(query))
        k = self._split(self.k(key))
        v = self._split(self.v(value))
        scores = (q @ k.transpose(0, 2, 1)) * (1.0 / np.sqrt(self.head_dim))
        weights = tc.softmax(scores, axis=-1)
        mixed = (weights @ v).transpose(1, 0, 2).reshape(query.shape[0], self.dim)
        out = self.out(mixed)
        if return_weights:
            return out, weights.data.mean(axis=0)
        return out


class MLP:
    def __init__(self, store: ParamStore, name: str, dim: int, ratio: float = 2.0):
        hidden = max(1, int(round(dim * ratio)))
        self.fc1 = Linear(store, f"{name}.fc1", dim, hidden)
        self.fc2 = Linear(store, f"{name}.fc2", hidden, dim)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(tc.gelu(self.fc1(x)))


class TransformerBlock:
    """Pre-norm self-attention block: x + attn(ln(x)), then x + mlp(ln(x))"""

    def __init__(self, store: ParamStore, name: str, dim: int, heads: int, mlp_ratio: float = 2.0):
        self.norm1 = LayerNorm(store, f"{name}.norm1", dim)
        self.attn = MultiHeadAttention(store, f"{name}.attn", dim, heads)
        self.norm2 = LayerNorm(store, f"{name}.norm2", dim)
        self.mlp = MLP(store, f"{name}.mlp", dim, mlp_ratio)

    def __call__(self, x: Tensor) -> Tensor:
        h = self.norm1(x)
        x = x + self.attn(h, h, h)
        return x + self.mlp(self.norm2(x))
