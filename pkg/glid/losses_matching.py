"""
Training losses and bipartite matching

Set losses follow the DETR / Mask2Former recipe: a Hungarian assignment on a
class + geometry cost decides which query answers which ground-truth
instance; unmatched queries are pushed to the no-object class.
"""
import itertools
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np
from scipy import optimize, special

import tensor_core as tc
from exceptions import NumericError, ShapeError
from task_heads import DetectOutput, SegOutput, seg_mask_logits
from tensor_core import Tensor

CLS_WEIGHT = 2.0
L1_WEIGHT = 5.0
MASK_WEIGHT = 5.0
NO_OBJECT_WEIGHT = 0.1
SI_LAMBDA = 0.85
DICE_EPS = 1e-6


@dataclass(frozen=True)
class Assignment:
    pairs: Tuple[Tuple[int, int], ...]
    total_cost: float

    @property
    def queries(self) -> List[int]:
        return [q for q, _ in self.pairs]

    @property
    def targets(self) -> List[int]:
        return [g for _, g in self.pairs]


@dataclass
class SetLoss:
    loss: Tensor
    assignment: Assignment
    parts: dict


def _check_cost(cost: np.ndarray) -> np.ndarray:
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ShapeError('hungarian', [cost.shape], 'cost must be queries x targets')
    if cost.shape[1] > cost.shape[0]:
        raise ShapeError('hungarian', [cost.shape], 'more targets than queries')
    if not np.all(np.isfinite(cost)):
        raise NumericError('hungarian: cost matrix has non-finite entries')
    return cost


def _as_assignment(cost: np.ndarray, rows, cols) -> Assignment:
    pairs = tuple(sorted((int(r), int(c)) for r, c in zip(rows, cols)))
    return Assignment(pairs, float(sum(cost[r, c] for r, c in pairs)))


def _forced_cost(cost: np.ndarray, fixed: Dict[int, Optional[int]], big: float) -> np.ndarray:
    forced = cost.copy()
    for row, col in fixed.items():
        forced[row, :] = big
        if col is not None:
            forced[:, col] = big
    for row, col in fixed.items():
        if col is not None:
            forced[row, col] = cost[row, col]
    return forced


def hungarian(cost, canonical: bool = True, tol: float = 1e-9) -> Assignment:
    """
    Minimum-cost assignment of every target (column) to a distinct query (row)

    With ``canonical`` set, ties between optimal assignments resolve to the
    lexicographically smallest sorted pair list.
    """
    cost = _check_cost(cost)
    m, g = cost.shape
    if g == 0:
        return Assignment((), 0.0)
    rows, cols = optimize.linear_sum_assignment(cost)
    if not canonical:
        return _as_assignment(cost, rows, cols)
    best = float(cost[rows, cols].sum())
    slack = tol * max(1.0, abs(best))

    # Walk the query rows in order, pinning each to the smallest target (else to nothing)
    # that still admits an optimal completion
    big = (float(np.abs(cost).sum()) + 1.0) * (m + g + 1)
    fixed: Dict[int, Optional[int]] = {}
    for row in range(m):
        used = {c for c in fixed.values() if c is not None}
        if len(used) == g:
            break
        for choice in [c for c in range(g) if c not in used] + [None]:
            trial = dict(fixed)
            trial[row] = choice
            forced = _forced_cost(cost, trial, big)
            rr, cc = optimize.linear_sum_assignment(forced)
            if float(forced[rr, cc].sum()) <= best + slack:
                fixed = trial
                break
    pairs = [(r, c) for r, c in fixed.items() if c is not None]
    return _as_assignment(cost, [r for r, _ in pairs], [c for _, c in pairs])


def brute_force_assignment(cost) -> Assignment:
    """Exhaustive search over all injections of targets into queries; small matrices only"""
    cost = _check_cost(cost)
    m, g = cost.shape
    best_pairs, best_total = (), np.inf
    for queries in itertools.permutations(range(m), g):
        total = float(sum(cost[q, t] for t, q in enumerate(queries)))
        if total < best_total - 1e-12:
            best_total = total
            best_pairs = tuple(sorted((q, t) for t, q in enumerate(queries)))
    return Assignment(best_pairs, 0.0 if g == 0 else best_total)


# ---------------------------------------------------------------------- #
# Reconstruction
# ---------------------------------------------------------------------- #
def recon_loss(pred: Tensor, target) -> Tensor:
    """(1/N) * sum_i ||p_i - t_i||^2 over the N masked tokens"""
    target = np.asarray(target)
    if pred.shape != target.shape or pred.ndim != 2:
        raise ShapeError('recon_loss', [pred.shape, target.shape])
    return tc.mse_loss(pred, target) * float(pred.shape[1])


# ---------------------------------------------------------------------- #
# Detection
# ---------------------------------------------------------------------- #
def _class_weights(num_classes: int) -> np.ndarray:
    weights = np.ones(num_classes + 1)
    weights[-1] = NO_OBJECT_WEIGHT
    return weights


def _class_probs(logits: np.ndarray) -> np.ndarray:
    return special.softmax(logits.astype(np.float64), axis=1)


def detect_cost(pred: DetectOutput, gt_boxes: np.ndarray, gt_classes: np.ndarray) -> np.ndarray:
    probs = _class_probs(pred.class_logits.data)
    l1 = np.abs(pred.boxes.data[:, None, :].astype(np.float64) - gt_boxes[None, :, :]).sum(axis=-1)
    return CLS_WEIGHT * -probs[:, gt_classes] + L1_WEIGHT * l1


def _targets_with_no_object(m: int, assignment: Assignment, gt_classes: np.ndarray, no_object: int) -> np.ndarray:
    targets = np.full(m, no_object, dtype=np.int64)
    for q, g in assignment.pairs:
        targets[q] = gt_classes[g]
    return targets


def detect_loss(pred: DetectOutput, gt_boxes, gt_classes, canonical: bool = False) -> SetLoss:
    """
    Hungarian-matched detection loss

    Args:
        pred: DetectOutput with M boxes (cxcywh in [0, 1]) and M x (K+1) class logits
        gt_boxes: (G, 4) cxcywh
        gt_classes: (G,) class ids in 0..K-1

    Returns:
        SetLoss: 2 * weighted CE over all queries + 5 * L1 over matched boxes / G
    """
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    gt_classes = np.asarray(gt_classes, dtype=np.int64).reshape(-1)
    m, k1 = pred.class_logits.shape
    g = len(gt_classes)
    if g > m:
        raise ShapeError('detect_loss', [(m,), (g,)], 'more ground-truth instances than queries')
    no_object = k1 - 1
    if g:
        assignment = hungarian(detect_cost(pred, gt_boxes, gt_classes), canonical=canonical)
    else:
        assignment = Assignment((), 0.0)
    targets = _targets_with_no_object(m, assignment, gt_classes, no_object)
    loss_cls = tc.cross_entropy(pred.class_logits, targets, _class_weights(no_object))
    loss = loss_cls * CLS_WEIGHT
    parts = {'cls': loss_cls.item()}
    if g:
        matched = tc.take(pred.boxes, assignment.queries, axis=0)
        loss_l1 = (matched - gt_boxes[assignment.targets]).abs().sum() * (1.0 / g)
        loss = loss + loss_l1 * L1_WEIGHT
        parts['l1'] = loss_l1.item()
    return SetLoss(loss, assignment, parts)


# ---------------------------------------------------------------------- #
# Segmentation
# ---------------------------------------------------------------------- #
def pairwise_mask_cost(logits: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """
    BCE + Dice between every predicted mask and every target mask

    Args:
        logits: (M, P) mask logits
        targets: (G, P) soft or binary target masks

    Returns:
        np.ndarray: (M, G)
    """
    logits = logits.astype(np.float64)
    targets = targets.astype(np.float64)
    pixels = logits.shape[1]
    bce = (np.logaddexp(0.0, logits).sum(axis=1)[:, None] - logits @ targets.T) / pixels
    probs = special.expit(logits)
    numerator = 2.0 * probs @ targets.T
    denominator = (probs ** 2).sum(axis=1)[:, None] + (targets ** 2).sum(axis=1)[None, :] + DICE_EPS
    return bce + (1.0 - numerator / denominator)


def dice_loss(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean over rows of 1 - 2 sum(s t) / (sum(s^2) + sum(t^2))"""
    targets = np.asarray(targets, dtype=np.float64)
    probs = tc.sigmoid(logits)
    numerator = (probs * targets).sum(axis=1) * 2.0
    denominator = (probs * probs).sum(axis=1) + ((targets ** 2).sum(axis=1) + DICE_EPS)
    return (1.0 - numerator / denominator).mean()


def seg_loss(pred: SegOutput, f_b: Tensor, gt_masks, gt_classes, canonical: bool = False) -> SetLoss:
    """
    Hungarian-matched mask-classification loss on the 1/4-scale map

    Args:
        pred: SegOutput with M mask embeddings and M x (K+1) class logits
        f_b: (h, w, C) fused 1/4-scale features
        gt_masks: (G, h, w) target masks (soft area fractions allowed)
        gt_classes: (G,) class ids

    Returns:
        SetLoss: 2 * weighted CE + 5 * (BCE + Dice) over matched masks
    """
    gt_classes = np.asarray(gt_classes, dtype=np.int64).reshape(-1)
    h, w = f_b.shape[:2]
    gt_masks = np.asarray(gt_masks, dtype=np.float64)
    if len(gt_classes) == 0:
        gt_masks = np.zeros((0, h, w))
    if gt_masks.shape[1:] != (h, w):
        raise ShapeError('seg_loss', [gt_masks.shape, f_b.shape], 'target masks must match the 1/4-scale map')
    m, k1 = pred.class_logits.shape
    g = len(gt_classes)
    if g > m:
        raise ShapeError('seg_loss', [(m,), (g,)], 'more ground-truth instances than queries')
    no_object = k1 - 1
    logits = seg_mask_logits(pred.mask_embed, f_b).reshape(h * w, m).T  # (M, P)
    flat_targets = gt_masks.reshape(g, h * w)
    if g:
        probs = _class_probs(pred.class_logits.data)
        cost = CLS_WEIGHT * -probs[:, gt_classes] + MASK_WEIGHT * pairwise_mask_cost(logits.data, flat_targets)
        assignment = hungarian(cost, canonical=canonical)
    else:
        assignment = Assignment((), 0.0)
    targets = _targets_with_no_object(m, assignment, gt_classes, no_object)
    loss_cls = tc.cross_entropy(pred.class_logits, targets, _class_weights(no_object))
    loss = loss_cls * CLS_WEIGHT
    parts = {'cls': loss_cls.item()}
    if g:
        matched = tc.take(logits, assignment.queries, axis=0)
        matched_targets = flat_targets[assignment.targets]
        loss_bce = tc.bce_with_logits(matched, matched_targets)
        loss_dice = dice_loss(matched, matched_targets)
        loss = loss + (loss_bce + loss_dice) * MASK_WEIGHT
        parts.update(bce=loss_bce.item(), dice=loss_dice.item())
    return SetLoss(loss, assignment, parts)


# ---------------------------------------------------------------------- #
# Depth and pose
# ---------------------------------------------------------------------- #
def si_depth_loss(pred: Tensor, target, valid: Optional[np.ndarray] = None, lam: float = SI_LAMBDA) -> Tensor:
    """sqrt(mean(g^2) - lam * mean(g)^2) with g = log d - log d* over valid pixels"""
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ShapeError('si_depth_loss', [pred.shape, target.shape])
    if valid is None:
        valid = np.ones(target.shape, dtype=bool)
    index = np.flatnonzero(np.asarray(valid).reshape(-1))
    if index.size == 0:
        raise NumericError('si_depth_loss: no valid pixels')
    if np.any(pred.data.reshape(-1)[index] <= 0) or np.any(target.reshape(-1)[index] <= 0):
        raise NumericError('si_depth_loss: depths must be positive')
    g = tc.take(tc.log(pred.reshape(-1)), index, axis=0) - np.log(target.reshape(-1)[index])
    mean_g = g.mean()
    return tc.sqrt((g * g).mean() - mean_g * mean_g * lam)


def pose_loss(pred: Tensor, target) -> Tensor:
    target = np.asarray(target)
    if pred.shape != target.shape:
        raise ShapeError('pose_loss', [pred.shape, target.shape])
    return tc.smooth_l1(pred, target, beta=1.0)
