"""
Task metrics accumulated over an evaluation split

Each Evaluator takes (prediction, ground truth) dictionaries one scene at a
time: predictions come from ``task_heads.postprocess`` and ground truth from
``TaskLabels.eval``. ``results()`` returns the finished EvalResult list.
"""
from dataclasses import dataclass
from typing import Dict, List, Tuple

import numpy as np

from exceptions import ShapeError, TaskError
from task_heads import NUM_CLASSES, TaskSpec

IOU_THRESHOLD = 0.5
PCK_RADIUS = 0.1

PRIMARY_METRIC = {
    'pretrain': 'recon-MSE',
    'detect': 'AP50',
    'semseg': 'mIoU',
    'instseg': 'AP50',
    'panoptic': 'PQ',
    'depth': 'RMSE',
    'pose': 'PCK@0.1',
}
HIGHER_IS_BETTER = {'mIoU': True, 'AP50': True, 'PQ': True, 'PCK@0.1': True,
                    'RMSE': False, 'REL': False, 'recon-MSE': False}


@dataclass(frozen=True)
class EvalResult:
    task: str
    metric: str
    value: float

    def to_dict(self) -> Dict[str, object]:
        return {'task': self.task, 'metric': self.metric, 'value': self.value}


def _same_shape(op: str, a: np.ndarray, b: np.ndarray):
    if a.shape != b.shape:
        raise ShapeError(op, [a.shape, b.shape])


# ---------------------------------------------------------------------- #
# IoU helpers
# ---------------------------------------------------------------------- #
def box_iou(boxes_a: np.ndarray, boxes_b: np.ndarray) -> np.ndarray:
    """Pairwise IoU of cxcywh boxes: (A, 4) x (B, 4) -> (A, B)"""
    a = np.asarray(boxes_a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(boxes_b, dtype=np.float64).reshape(-1, 4)
    a0, a1 = a[:, :2] - a[:, 2:] / 2, a[:, :2] + a[:, 2:] / 2
    b0, b1 = b[:, :2] - b[:, 2:] / 2, b[:, :2] + b[:, 2:] / 2
    lo = np.maximum(a0[:, None], b0[None])
    hi = np.minimum(a1[:, None], b1[None])
    inter = np.clip(hi - lo, 0, None).prod(axis=-1)
    union = a[:, 2:].prod(axis=1)[:, None] + b[:, 2:].prod(axis=1)[None] - inter
    return np.where(union > 0, inter / np.maximum(union, 1e-12), 0.0)


def mask_iou(masks_a: np.ndarray, masks_b: np.ndarray) -> np.ndarray:
    a = np.asarray(masks_a, dtype=bool).reshape(len(masks_a), -1).astype(np.float64)
    b = np.asarray(masks_b, dtype=bool).reshape(len(masks_b), -1).astype(np.float64)
    inter = a @ b.T
    union = a.sum(axis=1)[:, None] + b.sum(axis=1)[None] - inter
    return np.where(union > 0, inter / np.maximum(union, 1e-12), 0.0)


def average_precision(scores: np.ndarray, hits: np.ndarray, num_gt: int) -> float:
    """All-point interpolated area under the precision/recall curve"""
    if num_gt == 0:
        return float('nan')
    if len(scores) == 0:
        return 0.0
    order = np.argsort(-np.asarray(scores), kind='stable')
    hits = np.asarray(hits, dtype=np.float64)[order]
    tp = np.cumsum(hits)
    fp = np.cumsum(1.0 - hits)
    recall = np.concatenate([[0.0], tp / num_gt, [1.0]])
    precision = np.concatenate([[0.0], tp / np.maximum(tp + fp, 1e-12), [0.0]])
    precision = np.maximum.accumulate(precision[::-1])[::-1]
    steps = np.nonzero(recall[1:] != recall[:-1])[0]
    return float(np.sum((recall[steps + 1] - recall[steps]) * precision[steps + 1]))


# ---------------------------------------------------------------------- #
# Evaluators
# ---------------------------------------------------------------------- #
class Evaluator:
    task = ''

    def __init__(self):
        self.count = 0

    def update(self, prediction: Dict[str, np.ndarray], truth: Dict[str, np.ndarray]):
        raise NotImplementedError

    def results(self) -> List[EvalResult]:
        raise NotImplementedError


class SemsegEvaluator(Evaluator):
    """mIoU from a pooled confusion matrix over classes present in truth or prediction"""

    task = 'semseg'

    def __init__(self, num_classes: int = NUM_CLASSES['semseg']):
        super().__init__()
        self.num_classes = num_classes
        self.confusion = np.zeros((num_classes, num_classes), dtype=np.int64)

    def update(self, prediction, truth):
        pred = np.asarray(prediction['class_map'], dtype=np.int64)
        gt = np.asarray(truth['class_map'], dtype=np.int64)
        _same_shape('semseg_eval', pred, gt)
        self.confusion += np.bincount(gt.reshape(-1) * self.num_classes + pred.reshape(-1),
                                      minlength=self.num_classes ** 2).reshape(self.num_classes, self.num_classes)
        self.count += 1

    def per_class_iou(self) -> Dict[int, float]:
        inter = np.diag(self.confusion).astype(np.float64)
        union = self.confusion.sum(axis=0) + self.confusion.sum(axis=1) - inter
        return {c: float(inter[c] / union[c]) for c in range(self.num_classes) if union[c] > 0}

    def results(self):
        ious = self.per_class_iou()
        return [EvalResult(self.task, 'mIoU', float(np.mean(list(ious.values()))) if ious else 0.0)]


class _APEvaluator(Evaluator):
    """Detections pooled per class, greedy score-ordered matching at IoU >= 0.5, mean over classes with truth"""

    key = ''

    def __init__(self, num_classes: int):
        super().__init__()
        self.num_classes = num_classes
        self.scores: Dict[int, List[float]] = {c: [] for c in range(num_classes)}
        self.hits: Dict[int, List[bool]] = {c: [] for c in range(num_classes)}
        self.num_gt = np.zeros(num_classes, dtype=np.int64)

    def _iou(self, pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def update(self, prediction, truth):
        pred_items = np.asarray(prediction[self.key])
        pred_classes = np.asarray(prediction['classes'], dtype=np.int64).reshape(-1)
        scores = np.asarray(prediction['scores'], dtype=np.float64).reshape(-1)
        gt_items = np.asarray(truth[self.key])
        gt_classes = np.asarray(truth['classes'], dtype=np.int64).reshape(-1)
        if len(pred_items) != len(pred_classes) or len(scores) != len(pred_classes):
            raise ShapeError(f'{self.task}_eval', [pred_items.shape, pred_classes.shape, scores.shape])
        if len(gt_items) != len(gt_classes):
            raise ShapeError(f'{self.task}_eval', [gt_items.shape, gt_classes.shape])
        for cls in range(self.num_classes):
            p_idx = np.flatnonzero(pred_classes == cls)
            g_idx = np.flatnonzero(gt_classes == cls)
            self.num_gt[cls] += len(g_idx)
            if len(p_idx) == 0:
                continue
            p_idx = p_idx[np.argsort(-scores[p_idx], kind='stable')]
            ious = self._iou(pred_items[p_idx], gt_items[g_idx]) if len(g_idx) else np.zeros((len(p_idx), 0))
            taken = np.zeros(len(g_idx), dtype=bool)
            for row, p in enumerate(p_idx):
                candidates = np.where(taken, -1.0, ious[row])
                best = int(candidates.argmax()) if len(g_idx) else -1
                hit = best >= 0 and candidates[best] >= IOU_THRESHOLD
                if hit:
                    taken[best] = True
                self.scores[cls].append(float(scores[p]))
                self.hits[cls].append(bool(hit))
        self.count += 1

    def results(self):
        aps = [average_precision(np.array(self.scores[c]), np.array(self.hits[c]), int(self.num_gt[c]))
               for c in range(self.num_classes)]
        aps = [ap for ap in aps if not np.isnan(ap)]
        if aps:
            value = float(np.mean(aps))
        else:
            value = 0.0 if any(self.scores[c] for c in self.scores) else 1.0
        return [EvalResult(self.task, 'AP50', value)]


class DetectEvaluator(_APEvaluator):
    task = 'detect'
    key = 'boxes'

    def __init__(self, num_classes: int = NUM_CLASSES['detect']):
        super().__init__(num_classes)

    def _iou(self, pred, gt):
        return box_iou(pred, gt)


class InstsegEvaluator(_APEvaluator):
    task = 'instseg'
    key = 'masks'

    def __init__(self, num_classes: int = NUM_CLASSES['instseg']):
        super().__init__(num_classes)

    def _iou(self, pred, gt):
        if pred.shape[1:] != gt.shape[1:]:
            raise ShapeError('instseg_eval', [pred.shape, gt.shape])
        return mask_iou(pred, gt)


class PanopticEvaluator(Evaluator):
    """PQ = sum IoU(TP) / (TP + FP/2 + FN/2) per class, averaged over classes seen"""

    task = 'panoptic'

    def __init__(self, num_classes: int = NUM_CLASSES['panoptic']):
        super().__init__()
        self.num_classes = num_classes
        self.iou_sum = np.zeros(num_classes)
        self.tp = np.zeros(num_classes, dtype=np.int64)
        self.fp = np.zeros(num_classes, dtype=np.int64)
        self.fn = np.zeros(num_classes, dtype=np.int64)

    @staticmethod
    def _segments(segment_map: np.ndarray, classes: np.ndarray) -> List[Tuple[int, np.ndarray]]:
        return [(int(classes[s]), segment_map == s) for s in range(len(classes)) if np.any(segment_map == s)]

    def update(self, prediction, truth):
        pred_map = np.asarray(prediction['segment_map'], dtype=np.int64)
        gt_map = np.asarray(truth['segment_map'], dtype=np.int64)
        _same_shape('panoptic_eval', pred_map, gt_map)
        pred_segments = self._segments(pred_map, np.asarray(prediction['segment_classes'], dtype=np.int64))
        gt_segments = self._segments(gt_map, np.asarray(truth['segment_classes'], dtype=np.int64))
        matched_pred = set()
        for cls, gt_mask in gt_segments:
            hit = None
            for index, (p_cls, p_mask) in enumerate(pred_segments):
                if p_cls != cls or index in matched_pred:
                    continue
                union = np.logical_or(gt_mask, p_mask).sum()
                iou = np.logical_and(gt_mask, p_mask).sum() / union if union else 0.0
                # IoU > 0.5 makes the match unique
                if iou > IOU_THRESHOLD:
                    hit = (index, iou)
                    break
            if hit is None:
                self.fn[cls] += 1
            else:
                matched_pred.add(hit[0])
                self.tp[cls] += 1
                self.iou_sum[cls] += hit[1]
        for index, (p_cls, _) in enumerate(pred_segments):
            if index not in matched_pred:
                self.fp[p_cls] += 1
        self.count += 1

    def results(self):
        denom = self.tp + 0.5 * self.fp + 0.5 * self.fn
        seen = denom > 0
        value = float(np.mean(self.iou_sum[seen] / denom[seen])) if seen.any() else 0.0
        return [EvalResult(self.task, 'PQ', value)]


class DepthEvaluator(Evaluator):
    task = 'depth'

    def __init__(self):
        super().__init__()
        self.squared = 0.0
        self.relative = 0.0
        self.pixels = 0

    def update(self, prediction, truth):
        pred = np.asarray(prediction['depth'], dtype=np.float64)
        gt = np.asarray(truth['depth'], dtype=np.float64)
        _same_shape('depth_eval', pred, gt)
        self.squared += float(np.sum((pred - gt) ** 2))
        self.relative += float(np.sum(np.abs(pred - gt) / gt))
        self.pixels += gt.size
        self.count += 1

    def results(self):
        pixels = max(self.pixels, 1)
        return [EvalResult(self.task, 'RMSE', float(np.sqrt(self.squared / pixels))),
                EvalResult(self.task, 'REL', self.relative / pixels)]


class PoseEvaluator(Evaluator):
    task = 'pose'

    def __init__(self, image_size: int, radius: float = PCK_RADIUS):
        super().__init__()
        self.threshold = radius * image_size
        self.hits = 0
        self.total = 0

    def update(self, prediction, truth):
        pred = np.asarray(prediction['keypoints'], dtype=np.float64)
        gt = np.asarray(truth['keypoints'], dtype=np.float64)
        _same_shape('pose_eval', pred, gt)
        distance = np.linalg.norm(pred - gt, axis=-1)
        self.hits += int(np.sum(distance <= self.threshold))
        self.total += distance.size
        self.count += 1

    def results(self):
        return [EvalResult(self.task, 'PCK@0.1', self.hits / self.total if self.total else 0.0)]


class ReconEvaluator(Evaluator):
    """Mean squared error per value over every masked token seen"""

    task = 'pretrain'

    def __init__(self):
        super().__init__()
        self.squared = 0.0
        self.values = 0

    def update(self, prediction, truth):
        pred = np.asarray(prediction['patches'], dtype=np.float64)
        gt = np.asarray(truth['patches'], dtype=np.float64)
        _same_shape('recon_eval', pred, gt)
        self.squared += float(np.sum((pred - gt) ** 2))
        self.values += gt.size
        self.count += 1

    def results(self):
        return [EvalResult(self.task, 'recon-MSE', self.squared / self.values if self.values else 0.0)]


def make_evaluator(spec: TaskSpec, image_size: int) -> Evaluator:
    task = spec.task
    if task == 'semseg':
        return SemsegEvaluator(spec.num_classes)
    if task == 'detect':
        return DetectEvaluator(spec.num_classes)
    if task == 'instseg':
        return InstsegEvaluator(spec.num_classes)
    if task == 'panoptic':
        return PanopticEvaluator(spec.num_classes)
    if task == 'depth':
        return DepthEvaluator()
    if task == 'pose':
        return PoseEvaluator(image_size)
    if task == 'pretrain':
        return ReconEvaluator()
    raise TaskError(f"No evaluator for task {task}")


def evaluate(spec: TaskSpec, prediction: Dict[str, np.ndarray], truth: Dict[str, np.ndarray],
             image_size: int = 64) -> List[EvalResult]:
    """Single-scene evaluation"""
    evaluator = make_evaluator(spec, image_size)
    evaluator.update(prediction, truth)
    return evaluator.results()
