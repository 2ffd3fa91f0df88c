"""
Finite-difference gradient checks for every registered primitive

Each op id maps to an input builder that draws random inputs for one trial
and returns the function to differentiate. Checks always run in float64.
"""
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Sequence, Tuple

import numpy as np

import tensor_core as tc
from exceptions import UnknownOpError
from tensor_core import Tensor, no_grad, precision


@dataclass(frozen=True)
class GradCheckReport:
    op: str
    max_relative_error: float
    tolerance: float
    trials: int
    passed: bool = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, 'passed', bool(self.max_relative_error <= self.tolerance))

    def to_dict(self) -> Dict[str, object]:
        return {
            'op': self.op,
            'max_relative_error': self.max_relative_error,
            'tolerance': self.tolerance,
            'trials': self.trials,
            'passed': self.passed,
        }


Builder = Callable[[np.random.Generator], Tuple[Callable[..., Tensor], List[np.ndarray]]]


def _away_from(values: np.ndarray, points: Sequence[float], margin: float) -> np.ndarray:
    # keep inputs off kinks so central differences stay smooth
    for point in points:
        close = np.abs(values - point) < margin
        values = np.where(close, point + margin * np.sign(values - point + 1e-12), values)
    return values


def _binary(fn):
    def build(rng):
        a = rng.standard_normal((3, 4))
        b = rng.standard_normal((1, 4))
        return fn, [a, b]
    return build


def _build_div(rng):
    a = rng.standard_normal((3, 4))
    b = rng.uniform(0.5, 2.0, size=(3, 1)) * rng.choice([-1.0, 1.0], size=(3, 1))
    return (lambda x, y: x / y), [a, b]


def _build_matmul(rng):
    return (lambda x, y: x @ y), [rng.standard_normal((3, 5)), rng.standard_normal((5, 2))]


def _build_batched_matmul(rng):
    return (lambda x, y: x @ y), [rng.standard_normal((2, 3, 4)), rng.standard_normal((2, 4, 3))]


def _build_transpose(rng):
    return (lambda x: x.transpose(2, 0, 1)), [rng.standard_normal((2, 3, 4))]


def _build_reshape(rng):
    return (lambda x: x.reshape(4, 6)), [rng.standard_normal((2, 3, 4))]


def _build_slice(rng):
    return (lambda x: x[1:, ::2]), [rng.standard_normal((4, 5))]


def _build_take(rng):
    indices = rng.integers(0, 5, size=7)
    return (lambda x: tc.take(x, indices, axis=0)), [rng.standard_normal((5, 3))]


def _build_concat(rng):
    return (lambda x, y: tc.concat([x, y], axis=1)), [rng.standard_normal((3, 2)), rng.standard_normal((3, 4))]


def _build_softmax(rng):
    axis = int(rng.integers(0, 2))
    return (lambda x: tc.softmax(x, axis=axis)), [rng.standard_normal((4, 5))]


def _build_unary(fn, low=None, high=None):
    def build(rng):
        if low is None:
            x = rng.standard_normal((3, 4))
        else:
            x = rng.uniform(low, high, size=(3, 4))
        return fn, [x]
    return build


def _build_abs(rng):
    x = _away_from(rng.standard_normal((3, 4)), [0.0], 1e-2)
    return (lambda t: t.abs()), [x]


def _build_layernorm(rng):
    dim = 6
    return (lambda x, g, b: tc.layer_norm(x, g, b)), [
        rng.standard_normal((4, dim)), 1.0 + 0.1 * rng.standard_normal(dim), 0.1 * rng.standard_normal(dim)]


def _build_mse(rng):
    return tc.mse_loss, [rng.standard_normal((4, 3)), rng.standard_normal((4, 3))]


def _build_cross_entropy(rng):
    targets = rng.integers(0, 5, size=6)
    weights = rng.uniform(0.1, 1.0, size=5)
    return (lambda x: tc.cross_entropy(x, targets, weights)), [rng.standard_normal((6, 5))]


def _build_smooth_l1(rng):
    pred = rng.standard_normal((4, 5)) * 2.0
    target = rng.standard_normal((4, 5))
    diff = _away_from(pred - target, [-1.0, 0.0, 1.0], 1e-2)
    return tc.smooth_l1, [target + diff, target]


def _build_bce(rng):
    return tc.bce_with_logits, [rng.standard_normal((4, 5)), rng.uniform(0.0, 1.0, size=(4, 5))]


def _build_reduce(method):
    def build(rng):
        axis = [None, 0, 1][int(rng.integers(0, 3))]
        return (lambda x: getattr(x, method)(axis=axis)), [rng.standard_normal((3, 4))]
    return build


def _build_patchify(rng):
    return (lambda x: tc.patchify(x, 2)), [rng.standard_normal((4, 6, 3))]


def _build_upsample(rng):
    return tc.upsample2x, [rng.standard_normal((2, 3, 2))]


def _build_avgpool(rng):
    return tc.avgpool2x, [rng.standard_normal((4, 6, 2))]


GRADCHECK_CASES: Dict[str, Builder] = {
    'add': _binary(lambda x, y: x + y),
    'sub': _binary(lambda x, y: x - y),
    'mul': _binary(lambda x, y: x * y),
    'div': _build_div,
    'neg': _build_unary(lambda x: -x),
    'matmul': _build_matmul,
    'batched_matmul': _build_batched_matmul,
    'transpose': _build_transpose,
    'reshape': _build_reshape,
    'slice': _build_slice,
    'take': _build_take,
    'concat': _build_concat,
    'exp': _build_unary(tc.exp),
    'log': _build_unary(tc.log, 0.5, 3.0),
    'sqrt': _build_unary(tc.sqrt, 0.5, 3.0),
    'abs': _build_abs,
    'sigmoid': _build_unary(tc.sigmoid),
    'softplus': _build_unary(tc.softplus),
    'gelu': _build_unary(tc.gelu),
    'softmax': _build_softmax,
    'layernorm': _build_layernorm,
    'sum': _build_reduce('sum'),
    'mean': _build_reduce('mean'),
    'mse': _build_mse,
    'cross_entropy': _build_cross_entropy,
    'smooth_l1': _build_smooth_l1,
    'bce_with_logits': _build_bce,
    'patchify': _build_patchify,
    'upsample2x': _build_upsample,
    'avgpool2x': _build_avgpool,
}


def registered_ops() -> List[str]:
    return list(GRADCHECK_CASES)


def _relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    denom = max(np.linalg.norm(analytic) + np.linalg.norm(numeric), 1e-12)
    return float(np.linalg.norm(analytic - numeric) / denom)


def gradcheck(op_id: str, trial_count: int = 20, seed: int = 0,
              tolerance: float = 1e-5, step: float = 1e-4) -> GradCheckReport:
    """Compare analytic gradients with central finite differences in float64

    Args:
        op_id: name from GRADCHECK_CASES
        trial_count: number of random input draws
        seed: seed of the input generator
        tolerance: maximum accepted relative error
        step: finite-difference half step

    Returns:
        GradCheckReport with the worst relative error over all trials
    """
    if op_id not in GRADCHECK_CASES:
        raise UnknownOpError(op_id)
    builder = GRADCHECK_CASES[op_id]
    rng = np.random.default_rng(seed)
    worst = 0.0
    with precision(np.float64):
        for _ in range(trial_count):
            fn, arrays = builder(rng)
            leaves = [Tensor(a, requires_grad=True) for a in arrays]
            out = fn(*leaves)
            projection = rng.standard_normal(out.shape)
            loss = (out * projection).sum()
            loss.backward()
            analytic = np.concatenate([leaf.grad.reshape(-1) for leaf in leaves])

            numeric_parts = []
            with no_grad():
                for leaf in leaves:
                    flat = leaf.data.reshape(-1)
                    grad = np.zeros_like(flat)
                    for i in range(flat.size):
                        original = flat[i]
                        flat[i] = original + step
                        plus = float((fn(*leaves).data * projection).sum())
                        flat[i] = original - step
                        minus = float((fn(*leaves).data * projection).sum())
                        flat[i] = original
                        grad[i] = (plus - minus) / (2.0 * step)
                    numeric_parts.append(grad)
            worst = max(worst, _relative_error(analytic, np.concatenate(numeric_parts)))
    return GradCheckReport(op=op_id, max_relative_error=worst, tolerance=tolerance, trials=trial_count)


def gradcheck_all(trial_count: int = 20, seed: int = 0, tolerance: float = 1e-5) -> List[GradCheckReport]:
    return [gradcheck(op, trial_count, seed, tolerance) for op in GRADCHECK_CASES]
