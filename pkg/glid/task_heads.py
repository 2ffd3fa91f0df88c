"""
Task specs, the swappable linear heads, and the per-task read-out formulas

Every head lives under ``head.<task>.*`` together with that task's query
embeddings, so swapping the task never touches a parameter outside the head
namespace.
"""
from dataclasses import dataclass
from typing import Dict, Optional, Union

import numpy as np

import tensor_core as tc
from exceptions import ShapeError, TaskError
from masking import MaskPlan
from nn_layers import Linear, ParamStore
from tensor_core import Tensor

TASK_IDS = ('pretrain', 'detect', 'semseg', 'instseg', 'panoptic', 'depth', 'pose')
DOWNSTREAM_TASKS = TASK_IDS[1:]
SEGMENTATION_TASKS = ('semseg', 'instseg', 'panoptic')

THING_CLASSES = ('circle', 'square', 'triangle')
NUM_THINGS = len(THING_CLASSES)
NUM_KEYPOINTS = 4

DEFAULT_QUERIES = {'pretrain': 1, 'detect': 16, 'semseg': 16, 'instseg': 16, 'panoptic': 16, 'depth': 16,
                   'pose': NUM_KEYPOINTS}
NUM_CLASSES = {'detect': NUM_THINGS, 'semseg': NUM_THINGS + 1, 'instseg': NUM_THINGS, 'panoptic': NUM_THINGS + 1}


@dataclass(frozen=True)
class TaskSpec:
    """
    One downstream (or pretext) task

    Class ids: detect/instseg use the thing classes 0..2; semseg puts
    background at 0 and shifts things to 1..3; panoptic keeps things at 0..2
    and adds the background stuff class 3. Index ``num_classes`` is no-object.
    """

    task: str
    num_queries: int
    num_classes: Optional[int] = None
    d_min: float = 1.0
    d_max: float = 10.0
    num_keypoints: Optional[int] = None

    def __post_init__(self):
        if self.task not in TASK_IDS:
            raise TaskError(f"Unknown task: {self.task}")
        if self.num_queries < 1:
            raise TaskError(f"{self.task}: query count must be >= 1")
        if not self.d_min < self.d_max:
            raise TaskError(f"{self.task}: d_min must be below d_max")
        if self.task == 'pose' and self.num_keypoints != self.num_queries:
            raise TaskError('pose: one query per keypoint is required')

    @property
    def no_object(self) -> Optional[int]:
        return self.num_classes

    @property
    def prefix(self) -> str:
        return f"head.{self.task}"


def task_spec(task: str, num_queries: Optional[int] = None, d_min: float = 1.0, d_max: float = 10.0) -> TaskSpec:
    if task not in TASK_IDS:
        raise TaskError(f"Unknown task: {task}")
    if task == 'pose':
        num_queries = NUM_KEYPOINTS
    return TaskSpec(task, num_queries or DEFAULT_QUERIES[task], NUM_CLASSES.get(task), d_min, d_max,
                    NUM_KEYPOINTS if task == 'pose' else None)


# ---------------------------------------------------------------------- #
# Head outputs
# ---------------------------------------------------------------------- #
@dataclass
class ReconOutput:
    pixels: Tensor


@dataclass
class DetectOutput:
    boxes: Tensor
    class_logits: Tensor


@dataclass
class SegOutput:
    mask_embed: Tensor
    class_logits: Tensor


@dataclass
class DepthOutput:
    bin_lengths: Tensor
    bin_embed: Tensor


@dataclass
class PoseOutput:
    hm_embed: Tensor


HeadOutput = Union[ReconOutput, DetectOutput, SegOutput, DepthOutput, PoseOutput]


def build_head(store: ParamStore, spec: TaskSpec, dim: int, feature_dim: int, patch_size: int):
    """Create ``head.<task>.*`` parameters (fresh every time a task is attached)"""
    p = spec.prefix
    if spec.task == 'pretrain':
        Linear(store, f"{p}.pixels", dim, patch_size * patch_size * 3)
        return
    store.create(f"{p}.query_embed", (spec.num_queries, dim), 'zeros')
    if spec.task == 'detect':
        Linear(store, f"{p}.box", dim, 4)
        Linear(store, f"{p}.cls", dim, spec.num_classes + 1)
    elif spec.task in SEGMENTATION_TASKS:
        Linear(store, f"{p}.mask_embed", dim, feature_dim)
        Linear(store, f"{p}.cls", dim, spec.num_classes + 1)
    elif spec.task == 'depth':
        Linear(store, f"{p}.bins", dim, 1)
        Linear(store, f"{p}.bin_embed", dim, feature_dim)
    elif spec.task == 'pose':
        Linear(store, f"{p}.hm_embed", dim, feature_dim)


def _linear(store: ParamStore, name: str, x: Tensor) -> Tensor:
    try:
        weight = store[f"{name}.weight"]
        bias = store[f"{name}.bias"]
    except KeyError:
        raise TaskError(f"No head parameters under {name}") from None
    if x.shape[-1] != weight.shape[0]:
        raise ShapeError(name, [x.shape, weight.shape])
    return x @ weight + bias


def head_forward(spec: TaskSpec, hidden: Tensor, store: ParamStore) -> HeadOutput:
    """Topmost linear map(s) plus the fixed activations of each task"""
    p = spec.prefix
    if spec.task == 'pretrain':
        return ReconOutput(_linear(store, f"{p}.pixels", hidden[1:]))
    if spec.task == 'detect':
        return DetectOutput(tc.sigmoid(_linear(store, f"{p}.box", hidden)), _linear(store, f"{p}.cls", hidden))
    if spec.task in SEGMENTATION_TASKS:
        return SegOutput(_linear(store, f"{p}.mask_embed", hidden), _linear(store, f"{p}.cls", hidden))
    if spec.task == 'depth':
        logits = _linear(store, f"{p}.bins", hidden).reshape(hidden.shape[0])
        return DepthOutput(tc.softmax(logits, axis=0), _linear(store, f"{p}.bin_embed", hidden))
    return PoseOutput(_linear(store, f"{p}.hm_embed", hidden))


# ---------------------------------------------------------------------- #
# Reconstruction targets
# ---------------------------------------------------------------------- #
def image_patches(image: np.ndarray, patch_size: int) -> np.ndarray:
    h, w, c = image.shape
    if h % patch_size or w % patch_size:
        raise ShapeError('image_patches', [image.shape], f'sides must be divisible by {patch_size}')
    gh, gw = h // patch_size, w // patch_size
    return (image.reshape(gh, patch_size, gw, patch_size, c).transpose(0, 2, 1, 3, 4)
            .reshape(gh * gw, patch_size * patch_size * c))


def recon_targets(image: np.ndarray, plan: MaskPlan, patch_size: int, normalize: bool = True,
                  eps: float = 1e-6) -> np.ndarray:
    """Pixel patches at the masked cells, optionally normalized per patch"""
    image = np.asarray(image, dtype=np.float32)
    grid = (image.shape[0] // patch_size, image.shape[1] // patch_size)
    if grid != (plan.grid_h, plan.grid_w):
        raise ShapeError('recon_targets', [image.shape, (plan.grid_h * patch_size, plan.grid_w * patch_size, 3)],
                         'mask grid does not match patch grid')
    targets = image_patches(image, patch_size)[list(plan.masked)]
    if normalize:
        mean = targets.mean(axis=1, keepdims=True)
        var = targets.var(axis=1, keepdims=True)
        targets = (targets - mean) / np.sqrt(var + eps)
    return targets.astype(np.float32)


def place_patches(image: np.ndarray, patches: np.ndarray, indices, patch_size: int) -> np.ndarray:
    """Write flattened patches back at their grid cells of a copy of ``image``"""
    out = np.array(image, dtype=np.float32)
    gw = out.shape[1] // patch_size
    c = out.shape[2]
    for row, index in zip(patches, indices):
        r, col = divmod(int(index), gw)
        out[r * patch_size:(r + 1) * patch_size, col * patch_size:(col + 1) * patch_size] = \
            row.reshape(patch_size, patch_size, c)
    return out


# ---------------------------------------------------------------------- #
# Read-out formulas
# ---------------------------------------------------------------------- #
def _check_embed(op: str, embed: Tensor, f_b: Tensor):
    if embed.ndim != 2 or f_b.ndim != 3 or embed.shape[1] != f_b.shape[2]:
        raise ShapeError(op, [embed.shape, f_b.shape])


def seg_mask_logits(mask_embed: Tensor, f_b: Tensor) -> Tensor:
    """<f_b[y, x], f^s_i> as an (h, w, M) map"""
    _check_embed('seg_masks', mask_embed, f_b)
    return f_b @ mask_embed.T


def seg_masks(mask_embed: Tensor, f_b: Tensor) -> Tensor:
    return tc.sigmoid(seg_mask_logits(mask_embed, f_b))


def bin_centers(lengths: Tensor, d_min: float, d_max: float) -> Tensor:
    """c_i = d_min + (d_max - d_min) * (l_i / 2 + sum_{j<i} l_j)"""
    lengths = tc.as_tensor(lengths)
    m = lengths.shape[0]
    before = np.triu(np.ones((m, m), dtype=np.float64), k=1)
    prefix = (lengths.reshape(1, m) @ before).reshape(m)
    return d_min + (d_max - d_min) * (lengths * 0.5 + prefix)


def depth_probabilities(bin_embed: Tensor, f_b: Tensor) -> Tensor:
    _check_embed('depth_map', bin_embed, f_b)
    return tc.softmax(f_b @ bin_embed.T, axis=-1)


def depth_map(bin_embed: Tensor, f_b: Tensor, centers: Tensor) -> Tensor:
    """Per-pixel expectation of the bin centres under the bin distribution"""
    probs = depth_probabilities(bin_embed, f_b)
    h, w, m = probs.shape
    if centers.shape != (m,):
        raise ShapeError('depth_map', [centers.shape, (m,)])
    return (probs @ centers.reshape(m, 1)).reshape(h, w)


def pose_heatmaps(hm_embed: Tensor, f_b: Tensor) -> Tensor:
    _check_embed('pose_heatmaps', hm_embed, f_b)
    return f_b @ hm_embed.T


def decode_keypoints(heatmaps: np.ndarray, stride: int) -> np.ndarray:
    """(x, y) pixel centre of each channel's argmax cell"""
    heatmaps = np.asarray(heatmaps)
    h, w, k = heatmaps.shape
    flat = heatmaps.reshape(h * w, k).argmax(axis=0)
    rows, cols = np.divmod(flat, w)
    return np.stack([(cols + 0.5) * stride, (rows + 0.5) * stride], axis=1)


# ---------------------------------------------------------------------- #
# Post-processing into evaluation predictions
# ---------------------------------------------------------------------- #
def _softmax_np(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def postprocess(spec: TaskSpec, output: HeadOutput, f_b: Tensor, stride: int = 4,
                score_threshold: float = 0.5) -> Dict[str, np.ndarray]:
    """
    Turn head outputs into evaluation predictions

    Returns:
        detect: boxes (M, 4) cxcywh, classes (M,), scores (M,) excluding no-object queries
        semseg: class_map (h, w)
        instseg: masks (M, h, w) bool, classes, scores
        panoptic: segment_map (h, w) with -1 for void, segment_classes
        depth: depth (h, w)
        pose: keypoints (K, 2) in pixels
    """
    if spec.task == 'detect':
        probs = _softmax_np(output.class_logits.data)
        classes = probs[:, :-1].argmax(axis=1)
        scores = probs[np.arange(len(classes)), classes]
        keep = probs.argmax(axis=1) != spec.no_object
        return {'boxes': output.boxes.data[keep], 'classes': classes[keep], 'scores': scores[keep]}
    if spec.task in SEGMENTATION_TASKS:
        probs = _softmax_np(output.class_logits.data)
        masks = seg_masks(output.mask_embed, f_b).data  # (h, w, M)
        if spec.task == 'semseg':
            semantic = masks @ probs[:, :-1]  # (h, w, K)
            return {'class_map': semantic.argmax(axis=-1)}
        classes = probs[:, :-1].argmax(axis=1)
        scores = probs[np.arange(len(classes)), classes]
        if spec.task == 'instseg':
            keep = probs.argmax(axis=1) != spec.no_object
            return {'masks': masks.transpose(2, 0, 1)[keep] > 0.5, 'classes': classes[keep], 'scores': scores[keep]}
        keep = (probs.argmax(axis=1) != spec.no_object) & (scores > score_threshold)
        h, w, _ = masks.shape
        segment_map = np.full((h, w), -1, dtype=np.int64)
        segment_classes = []
        if keep.any():
            weighted = masks[:, :, keep] * scores[keep]
            winner = weighted.argmax(axis=-1)
            covered = masks[:, :, keep].max(axis=-1) > 0.5
            kept_classes = classes[keep]
            for new_id, query in enumerate(np.unique(winner[covered])):
                segment_map[covered & (winner == query)] = new_id
                segment_classes.append(int(kept_classes[query]))
        return {'segment_map': segment_map, 'segment_classes': np.asarray(segment_classes, dtype=np.int64)}
    if spec.task == 'depth':
        centers = bin_centers(output.bin_lengths, spec.d_min, spec.d_max)
        return {'depth': depth_map(output.bin_embed, f_b, centers).data}
    if spec.task == 'pose':
        return {'keypoints': decode_keypoints(pose_heatmaps(output.hm_embed, f_b).data, stride)}
    raise TaskError(f"No post-processing for task {spec.task}")
