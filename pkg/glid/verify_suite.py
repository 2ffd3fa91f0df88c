"""
Runtime verification suite behind ``cli verify``

Numbered checks, each either passing or failing with a one-line detail:
gradient checks per primitive, the matching oracle, read-out formula
oracles, masking counts, query identity at init and the [CLS] gradient.
"""
import logging
from dataclasses import dataclass
from typing import Callable, List, Tuple

import numpy as np

import tensor_core as tc
from checkpoint_io import decode_checkpoint, encode_checkpoint
from encoder_pyramid import EncoderConfig
from gradcheck import gradcheck, registered_ops
from losses_matching import brute_force_assignment, hungarian, recon_loss
from masking import STRATEGIES, make_mask, masked_count
from model import LOAD_POLICIES, build_model, select_names
from query_decoder import DecoderConfig
from task_heads import bin_centers, depth_map, depth_probabilities, recon_targets
from tensor_core import Tensor

verify_logger = logging.getLogger('glid.verify')

MATCHING_TRIALS = 200
MATCHING_MAX_QUERIES = 7
ORACLE_TOLERANCE = 1e-6
MASK_RATIOS = (0.5, 0.6, 0.75)
MASK_GRIDS = ((8, 8), (16, 16), (6, 10))

# Small enough that the model checks stay well under a second
VERIFY_ENCODER = EncoderConfig(stage_dims=(16, 24, 32), stage_depths=(1, 1, 1), stage_heads=(2, 2, 2), fpn_dim=16)
VERIFY_DECODER = DecoderConfig(layers=3, dim=32, heads=2)
VERIFY_IMAGE_SIZE = 32


@dataclass
class CheckResult:
    number: int
    name: str
    passed: bool
    detail: str = ''

    @property
    def status(self) -> str:
        return '✅ pass' if self.passed else '❌ FAIL'

    def to_dict(self):
        return {'number': self.number, 'name': self.name, 'passed': self.passed, 'detail': self.detail}


Check = Callable[[], Tuple[bool, str]]


def check_hungarian(trials: int = MATCHING_TRIALS, seed: int = 0) -> Tuple[bool, str]:
    rng = np.random.default_rng(seed)
    mismatches = 0
    for _ in range(trials):
        m = int(rng.integers(1, MATCHING_MAX_QUERIES + 1))
        g = int(rng.integers(0, m + 1))
        cost = rng.uniform(0.0, 10.0, size=(m, g))
        if abs(hungarian(cost).total_cost - brute_force_assignment(cost).total_cost) > 1e-9:
            mismatches += 1
    return mismatches == 0, f"{mismatches} mismatches over {trials} cost matrices"


def check_bin_centers(seed: int = 0) -> Tuple[bool, str]:
    with tc.precision(np.float64):
        centers = bin_centers(Tensor([0.2, 0.3, 0.5]), 0.0, 10.0).data
        worst = float(np.abs(centers - np.array([1.0, 3.5, 7.5])).max())
        rng = np.random.default_rng(seed)
        for _ in range(20):
            lengths = rng.dirichlet(np.ones(int(rng.integers(2, 17))))
            d_min, d_max = sorted(rng.uniform(0.1, 20.0, size=2))
            expected = [d_min + (d_max - d_min) * (lengths[i] / 2 + lengths[:i].sum()) for i in range(lengths.size)]
            got = bin_centers(Tensor(lengths), d_min, d_max).data
            worst = max(worst, float(np.abs(got - np.array(expected)).max()))
    return worst <= ORACLE_TOLERANCE, f"max deviation {worst:.2e}"


def check_depth_map(seed: int = 0) -> Tuple[bool, str]:
    rng = np.random.default_rng(seed)
    d_min, d_max = 1.0, 10.0
    worst_norm, out_of_range = 0.0, 0
    with tc.precision(np.float64), tc.no_grad():
        for _ in range(10):
            bins, dim = int(rng.integers(2, 17)), 8
            embed = Tensor(rng.standard_normal((bins, dim)) * 3.0)
            f_b = Tensor(rng.standard_normal((6, 5, dim)))
            lengths = tc.softmax(Tensor(rng.standard_normal(bins)), axis=0)
            probs = depth_probabilities(embed, f_b).data
            worst_norm = max(worst_norm, float(np.abs(probs.sum(axis=-1) - 1.0).max()))
            depth = depth_map(embed, f_b, bin_centers(lengths, d_min, d_max)).data
            out_of_range += int(((depth < d_min - 1e-9) | (depth > d_max + 1e-9)).sum())
    passed = worst_norm <= ORACLE_TOLERANCE and out_of_range == 0
    return passed, f"normalization error {worst_norm:.2e}, {out_of_range} pixels out of range"


def check_recon_gradient(seed: int = 0) -> Tuple[bool, str]:
    rng = np.random.default_rng(seed)
    with tc.precision(np.float64):
        pred = Tensor(rng.standard_normal((12, 48)), requires_grad=True)
        target = rng.standard_normal((12, 48))
        recon_loss(pred, target).backward()
        expected = 2.0 * (pred.data - target) / pred.shape[0]
        worst = float(np.abs(pred.grad - expected).max())
    return worst <= ORACLE_TOLERANCE, f"max deviation {worst:.2e}"


def check_masking(seeds: int = 5) -> Tuple[bool, str]:
    failures = []
    for strategy in STRATEGIES:
        for ratio in MASK_RATIOS:
            for grid_h, grid_w in MASK_GRIDS:
                total = grid_h * grid_w
                for seed in range(seeds):
                    plan = make_mask(strategy, ratio, grid_h, grid_w, seed)
                    masked, visible = set(plan.masked), set(plan.visible)
                    if (len(masked) != masked_count(ratio, total) or masked & visible
                            or len(masked | visible) != total):
                        failures.append(f"{strategy}/{ratio}/{grid_h}x{grid_w}/seed{seed}")
    checked = len(STRATEGIES) * len(MASK_RATIOS) * len(MASK_GRIDS) * seeds
    if failures:
        return False, f"{len(failures)} of {checked} plans wrong, first {failures[0]}"
    return True, f"{checked} plans exact"


def _verify_model(tasks):
    return build_model(VERIFY_ENCODER, VERIFY_DECODER, seed=0, tasks=tasks, num_queries=8)


def _verify_image(seed: int = 0) -> np.ndarray:
    return np.random.default_rng(seed).uniform(0.0, 1.0, size=(VERIFY_IMAGE_SIZE, VERIFY_IMAGE_SIZE, 3))


def check_query_identity() -> Tuple[bool, str]:
    model = _verify_model(['semseg'])
    with tc.no_grad():
        _, _, hidden = model.finetune_forward(_verify_image(), 'semseg')
    rows = hidden.data
    spread = float(np.abs(rows - rows[0:1]).max())
    return spread <= ORACLE_TOLERANCE, f"max row difference {spread:.2e} over {rows.shape[0]} queries"


def check_cls_gradient() -> Tuple[bool, str]:
    model = _verify_model(['pretrain'])
    grid = VERIFY_IMAGE_SIZE // VERIFY_ENCODER.patch_size
    image = _verify_image(1)
    plan = make_mask('random', 0.75, grid, grid, seed=0)
    output, _ = model.pretrain_forward(image, plan)
    target = recon_targets(image, plan, VERIFY_ENCODER.patch_size)
    model.store.zero_grad()
    recon_loss(output.pixels, target).backward()
    grad = model.store['queries.cls'].grad
    norm = 0.0 if grad is None else float(np.linalg.norm(grad))
    return norm > 0.0, f"|grad [CLS]| = {norm:.3e}"


def check_checkpoint_and_policies() -> Tuple[bool, str]:
    model = _verify_model(['pretrain', 'semseg'])
    checkpoint = model.to_checkpoint(task='verify')
    restored = decode_checkpoint(encode_checkpoint(checkpoint))
    if not checkpoint.same_tensors(restored):
        return False, 'checkpoint round trip changed tensors'
    names = model.store.names()
    selected = [set(select_names(names, policy)) for policy in LOAD_POLICIES]
    nested = all(a < b for a, b in zip(selected, selected[1:]))
    if selected[0] or not nested:
        return False, 'load policies do not nest: ' + ', '.join(
            f"{p}={len(s)}" for p, s in zip(LOAD_POLICIES, selected))
    return True, ' < '.join(f"{p}({len(s)})" for p, s in zip(LOAD_POLICIES, selected))


FIXED_CHECKS: List[Tuple[str, Check]] = [
    ('hungarian vs exhaustive search', check_hungarian),
    ('bin centers oracle', check_bin_centers),
    ('depth map normalization and bounds', check_depth_map),
    ('recon loss gradient', check_recon_gradient),
    ('mask counts', check_masking),
    ('query identity at init', check_query_identity),
    ('[CLS] gradient in pre-training', check_cls_gradient),
    ('checkpoint round trip and policy nesting', check_checkpoint_and_policies),
]


def _run_check(number: int, name: str, check: Check) -> CheckResult:
    try:
        passed, detail = check()
    except Exception as e:
        verify_logger.exception(f"Check {name} raised")
        passed, detail = False, f"{type(e).__name__}: {e}"
    result = CheckResult(number, name, bool(passed), detail)
    level = logging.INFO if result.passed else logging.ERROR
    # 'name' is a reserved LogRecord attribute and cannot be passed through extra=
    fields = {('check_name' if key == 'name' else key): value for key, value in result.to_dict().items()}
    verify_logger.log(level, f"{number}. {name}: {result.status} {detail}", extra=fields)
    return result


def run_verify(trial_count: int = 20, seed: int = 0, tolerance: float = 1e-5) -> List[CheckResult]:
    """
    Run every check in order

    Args:
        trial_count: random trials per gradient check
        seed: seed for the gradient-check inputs
        tolerance: relative error bound of the gradient checks

    Returns:
        list: one CheckResult per check, gradient checks first
    """
    results = []
    for op in registered_ops():
        def check(op=op):
            report = gradcheck(op, trial_count, seed, tolerance)
            return report.passed, f"max relative error {report.max_relative_error:.2e}"
        results.append(_run_check(len(results) + 1, f"gradcheck {op}", check))
    for name, check in FIXED_CHECKS:
        results.append(_run_check(len(results) + 1, name, check))
    return results
