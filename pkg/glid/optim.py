"""
AdamW with decoupled weight decay and the warmup + cosine learning-rate schedule
"""
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, Optional, Tuple

import numpy as np

from exceptions import NumericError, ShapeError
from nn_layers import ParamStore

NO_DECAY_SUFFIXES = ('query_embed', 'level_embed')


@dataclass
class AdamState:
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def decays(name: str, value: np.ndarray) -> bool:
    """Weight decay only on matrices; biases, norms, fusion weights and tokens are exempt"""
    return np.ndim(value) >= 2 and not name.endswith(NO_DECAY_SUFFIXES)


def _check_grad(name: str, shape: Tuple[int, ...], grad: np.ndarray):
    if grad.shape != tuple(shape):
        raise ShapeError(f"adamw {name}", [shape, grad.shape])
    if not np.all(np.isfinite(grad)):
        raise NumericError(f"Non-finite gradient for parameter {name}", parameter=name)


def _update(name: str, param: np.ndarray, grad: np.ndarray, m: np.ndarray, v: np.ndarray, t: int, lr: float,
            weight_decay: float, beta1: float, beta2: float, eps: float):
    _check_grad(name, param.shape, grad)
    m = beta1 * m + (1.0 - beta1) * grad
    v = beta2 * v + (1.0 - beta2) * grad * grad
    m_hat = m / (1.0 - beta1 ** t)
    v_hat = v / (1.0 - beta2 ** t)
    param = param * (1.0 - lr * weight_decay) - lr * m_hat / (np.sqrt(v_hat) + eps)
    return param, m, v


def adamw_step(params: Dict[str, np.ndarray], grads: Dict[str, Optional[np.ndarray]], state: AdamState, lr: float,
               weight_decay: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
               decay: Optional[Callable[[str, np.ndarray], bool]] = None) -> Tuple[Dict[str, np.ndarray], AdamState]:
    """
    One AdamW update on plain arrays

    Args:
        params: name -> value
        grads: name -> gradient (None skips the parameter)
        state: moments from the previous step
        decay: predicate choosing which parameters receive weight decay (all by default)

    Returns:
        tuple: (new params, new state); inputs are left untouched
    """
    t = state.step + 1
    new_params = dict(params)
    new_state = AdamState(t, dict(state.m), dict(state.v))
    for name, value in params.items():
        grad = grads.get(name)
        if grad is None:
            continue
        value = np.asarray(value)
        grad = np.asarray(grad, dtype=np.float64)
        wd = weight_decay if decay is None or decay(name, value) else 0.0
        m = new_state.m.get(name, np.zeros(value.shape))
        v = new_state.v.get(name, np.zeros(value.shape))
        updated, new_state.m[name], new_state.v[name] = _update(name, value.astype(np.float64), grad, m, v, t, lr,
                                                                wd, beta1, beta2, eps)
        new_params[name] = updated.astype(value.dtype)
    return new_params, new_state


class AdamW:
    """Stateful optimizer over a ParamStore; writes updates into the parameters in place"""

    def __init__(self, store: ParamStore, weight_decay: float = 0.05, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.store = store
        self.weight_decay = weight_decay
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.state = AdamState()

    def step(self, lr: float):
        t = self.state.step + 1
        # every gradient is checked before any parameter moves
        for name, param in self.store.items():
            if param.grad is not None:
                _check_grad(name, param.shape, np.asarray(param.grad))
        for name, param in self.store.items():
            if param.grad is None:
                continue
            wd = self.weight_decay if decays(name, param.data) else 0.0
            m = self.state.m.get(name, np.zeros(param.shape))
            v = self.state.v.get(name, np.zeros(param.shape))
            updated, self.state.m[name], self.state.v[name] = _update(
                name, param.data.astype(np.float64), np.asarray(param.grad, dtype=np.float64), m, v, t, lr, wd,
                self.beta1, self.beta2, self.eps)
            param.data[...] = updated
        self.state.step = t


def lr_at(step: int, base_lr: float, warmup: int, total: int, min_ratio: float = 0.0) -> float:
    """
    Linear warmup to ``base_lr`` then cosine decay to ``min_ratio * base_lr`` at step ``total - 1``

    lr(warmup) == base_lr exactly.
    """
    if warmup > 0 and step < warmup:
        return base_lr * (step + 1) / warmup
    progress = min(1.0, (step - warmup) / max(1, total - 1 - warmup))
    cosine = 0.5 * (1.0 + math.cos(math.pi * progress))
    return base_lr * (min_ratio + (1.0 - min_ratio) * cosine)
