"""
Procedural shape scenes and the labels every task derives from them

A scene is a stack of circles, squares and triangles drawn back to front;
later instances sit nearer the camera and occlude earlier ones. Every label
(boxes, semantic / instance / panoptic masks, depth, keypoints) is computed
from the same visible masks, so all tasks see one consistent world.
"""
import colorsys
import hashlib
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from cachetools import LRUCache, cached
from PIL import Image, ImageDraw

from exceptions import ConfigError, TaskError
from task_heads import NUM_KEYPOINTS, THING_CLASSES, TaskSpec

data_logger = logging.getLogger('glid.data')

STRIDE = 4
BACKGROUND_STUFF = len(THING_CLASSES)
CLASS_HUES = (0.0, 0.33, 0.62)
DEFAULT_POOL_SIZE = 2048


@dataclass(frozen=True)
class SceneConfig:
    image_size: int = 64
    max_instances: int = 4
    min_instances: int = 1
    d_min: float = 1.0
    d_max: float = 10.0
    min_extent: int = 12
    max_extent: int = 28

    def __post_init__(self):
        errors = []
        if self.image_size < 16 or self.image_size % 16:
            errors.append('image_size must be a positive multiple of 16')
        if self.max_instances < 1:
            errors.append('max_instances must be >= 1')
        if not 1 <= self.min_instances <= self.max_instances:
            errors.append('min_instances must lie in [1, max_instances]')
        if not 0 < self.d_min < self.d_max:
            errors.append('depth range must satisfy 0 < d_min < d_max')
        if not 4 <= self.min_extent <= self.max_extent <= self.image_size:
            errors.append('extents must satisfy 4 <= min_extent <= max_extent <= image_size')
        if errors:
            raise ConfigError('Invalid scene config', 'data', errors)

    @property
    def label_size(self) -> int:
        return self.image_size // STRIDE


@dataclass(frozen=True)
class ShapeSpec:
    """Drawing instructions for one shape; extent is the diameter / side / circumdiameter in pixels"""

    cls: int
    center: Tuple[float, float]
    extent: float
    depth: float
    rotation: float = 0.0
    hue_jitter: float = 0.0


@dataclass
class Instance:
    cls: int
    bbox: np.ndarray        # cxcywh, normalized to [0, 1]
    mask: np.ndarray        # visible pixels after occlusion, S x S bool
    full_mask: np.ndarray   # drawn pixels before occlusion
    depth: float
    keypoints: np.ndarray   # (k, 2) x, y in pixels

    @property
    def name(self) -> str:
        return THING_CLASSES[self.cls]

    def to_dict(self) -> Dict[str, object]:
        return {
            'class': self.name,
            'class_id': self.cls,
            'bbox': [float(v) for v in self.bbox],
            'depth': float(self.depth),
            'area': int(self.mask.sum()),
            'keypoints': [[float(x), float(y)] for x, y in self.keypoints],
        }


@dataclass
class Scene:
    image: np.ndarray       # S x S x 3 in [0, 1]
    instances: List[Instance]
    depth: np.ndarray       # S x S
    config: SceneConfig
    seed: Optional[int] = None

    @property
    def size(self) -> int:
        return self.image.shape[0]

    def to_dict(self) -> Dict[str, object]:
        return {
            'seed': self.seed,
            'image_size': self.size,
            'd_min': self.config.d_min,
            'd_max': self.config.d_max,
            'instances': [inst.to_dict() for inst in self.instances],
        }


# ---------------------------------------------------------------------- #
# Drawing
# ---------------------------------------------------------------------- #
def _triangle_vertices(spec: ShapeSpec) -> np.ndarray:
    cx, cy = spec.center
    radius = spec.extent / 2.0
    angles = spec.rotation + np.array([0.0, 2.0, 4.0]) * np.pi / 3.0
    return np.stack([cx + radius * np.cos(angles), cy + radius * np.sin(angles)], axis=1)


def shape_keypoints(spec: ShapeSpec) -> np.ndarray:
    """Canonical points: circle centre; square corners; triangle vertices + centroid"""
    cx, cy = spec.center
    if spec.cls == 0:
        return np.array([[cx, cy]], dtype=np.float64)
    if spec.cls == 1:
        half = spec.extent / 2.0
        return np.array([[cx - half, cy - half], [cx + half, cy - half],
                         [cx + half, cy + half], [cx - half, cy + half]], dtype=np.float64)
    vertices = _triangle_vertices(spec)
    return np.concatenate([vertices, vertices.mean(axis=0, keepdims=True)], axis=0)


def draw_shape(spec: ShapeSpec, size: int) -> np.ndarray:
    canvas = Image.new('L', (size, size), 0)
    draw = ImageDraw.Draw(canvas)
    cx, cy = spec.center
    half = spec.extent / 2.0
    if spec.cls == 0:
        draw.ellipse([cx - half, cy - half, cx + half - 1, cy + half - 1], fill=255)
    elif spec.cls == 1:
        draw.rectangle([cx - half, cy - half, cx + half - 1, cy + half - 1], fill=255)
    elif spec.cls == 2:
        draw.polygon([tuple(v) for v in _triangle_vertices(spec)], fill=255)
    else:
        raise ConfigError(f"Unknown shape class {spec.cls}", 'cls')
    return np.asarray(canvas) > 0


def _background(rng: np.random.Generator, size: int) -> np.ndarray:
    angle = rng.uniform(0.0, 2.0 * np.pi)
    base = rng.uniform(0.15, 0.35)
    tint = rng.uniform(-0.04, 0.04, size=3)
    ys, xs = np.mgrid[0:size, 0:size] / float(size)
    ramp = (xs * np.cos(angle) + ys * np.sin(angle))
    ramp = ramp - ramp.mean()
    return np.clip(base + 0.15 * ramp[:, :, None] + tint, 0.0, 1.0)


def shape_colour(spec: ShapeSpec, cfg: SceneConfig) -> np.ndarray:
    """Class hue; brightness encodes depth (nearer is brighter)"""
    nearness = (cfg.d_max - spec.depth) / (cfg.d_max - cfg.d_min)
    hue = (CLASS_HUES[spec.cls] + spec.hue_jitter) % 1.0
    return np.array(colorsys.hsv_to_rgb(hue, 0.85, 0.45 + 0.55 * nearness))


def _bbox_from_mask(mask: np.ndarray) -> np.ndarray:
    size = mask.shape[0]
    ys, xs = np.nonzero(mask)
    x0, x1 = xs.min(), xs.max() + 1
    y0, y1 = ys.min(), ys.max() + 1
    return np.array([(x0 + x1) / 2.0, (y0 + y1) / 2.0, x1 - x0, y1 - y0], dtype=np.float64) / size


def compose_scene(specs: Sequence[ShapeSpec], cfg: SceneConfig, background_seed: int = 0,
                  seed: Optional[int] = None) -> Scene:
    """
    Render shapes back to front (list order) and derive visible masks

    Instances whose visible mask ends up empty are dropped from the labels.
    """
    size = cfg.image_size
    image = _background(np.random.default_rng(background_seed), size)
    depth = np.full((size, size), cfg.d_max, dtype=np.float64)
    drawn = [draw_shape(spec, size) for spec in specs]
    for spec, mask in zip(specs, drawn):
        image[mask] = shape_colour(spec, cfg)
        depth[mask] = spec.depth
    instances = []
    covered_later = np.zeros((size, size), dtype=bool)
    for spec, mask in reversed(list(zip(specs, drawn))):
        visible = mask & ~covered_later
        covered_later |= mask
        if not visible.any():
            data_logger.debug("Dropping fully occluded instance", extra={'class': spec.cls, 'seed': seed})
            continue
        instances.append(Instance(spec.cls, _bbox_from_mask(visible), visible, mask, float(spec.depth),
                                  shape_keypoints(spec)))
    instances.reverse()
    return Scene(image.astype(np.float32), instances, depth, cfg, seed)


def random_specs(rng: np.random.Generator, cfg: SceneConfig, pose: bool = False) -> List[ShapeSpec]:
    size = cfg.image_size
    if pose:
        count = 1
    else:
        count = int(rng.integers(cfg.min_instances, cfg.max_instances + 1))
    depths = np.sort(rng.uniform(cfg.d_min + 0.5, cfg.d_max - 0.5, size=count))[::-1]
    specs = []
    for depth in depths:
        cls = 2 if pose else int(rng.integers(0, len(THING_CLASSES)))
        if pose:
            extent = float(rng.uniform(0.55, 0.8) * size)
        else:
            extent = float(rng.integers(cfg.min_extent, cfg.max_extent + 1))
        margin = extent / 2.0 + 1.0
        center = (float(rng.uniform(margin, size - margin)), float(rng.uniform(margin, size - margin)))
        specs.append(ShapeSpec(cls, center, extent, float(depth),
                               rotation=float(rng.uniform(0.0, 2.0 * np.pi)),
                               hue_jitter=float(rng.uniform(-0.04, 0.04))))
    return specs


def gen_scene(seed: int, cfg: SceneConfig, pose: bool = False) -> Scene:
    """Deterministic scene per (seed, cfg); pose scenes hold exactly one triangle"""
    rng = np.random.default_rng(seed)
    specs = random_specs(rng, cfg, pose)
    return compose_scene(specs, cfg, background_seed=int(rng.integers(0, 2 ** 31)), seed=seed)


def hflip_scene(scene: Scene) -> Scene:
    """Mirror the image and every label left to right"""
    size = scene.size
    instances = []
    for inst in scene.instances:
        bbox = inst.bbox.copy()
        bbox[0] = 1.0 - bbox[0]
        keypoints = inst.keypoints.copy()
        keypoints[:, 0] = size - keypoints[:, 0]
        instances.append(Instance(inst.cls, bbox, inst.mask[:, ::-1].copy(), inst.full_mask[:, ::-1].copy(),
                                  inst.depth, keypoints))
    return Scene(scene.image[:, ::-1].copy(), instances, scene.depth[:, ::-1].copy(), scene.config, scene.seed)


# ---------------------------------------------------------------------- #
# Streams
# ---------------------------------------------------------------------- #
def stream_seed(seed: int, namespace: str, index: int) -> int:
    digest = hashlib.sha256(f"{seed}:{namespace}:{index}".encode('utf-8')).digest()
    return int.from_bytes(digest[:8], 'little') >> 1


@cached(cache=LRUCache(maxsize=1024))
def cached_scene(seed: int, cfg: SceneConfig, pose: bool) -> Scene:
    scene = gen_scene(seed, cfg, pose)
    for array in [scene.image, scene.depth] + [a for inst in scene.instances for a in (inst.mask, inst.full_mask)]:
        array.setflags(write=False)
    return scene


class SceneStream:
    """
    Reproducible scene sequence: item i is gen_scene(hash(seed, namespace, i mod pool))

    ``data_frac`` caps the pool to a fraction of ``pool_size`` scenes, which
    are then cycled; the eval namespace never shares seeds with training.
    """

    def __init__(self, seed: int, cfg: SceneConfig, namespace: str = 'train', pool_size: int = DEFAULT_POOL_SIZE,
                 data_frac: float = 1.0, pose: bool = False):
        if not 0.0 < data_frac <= 1.0:
            raise ConfigError(f"data_frac must lie in (0, 1], got {data_frac}", 'data_frac')
        self.seed = seed
        self.cfg = cfg
        self.namespace = namespace
        self.pool = max(1, int(np.floor(pool_size * data_frac + 1e-9)))
        self.pose = pose

    def scene_seed(self, index: int) -> int:
        return stream_seed(self.seed, self.namespace, index % self.pool)

    def __getitem__(self, index: int) -> Scene:
        return cached_scene(self.scene_seed(index), self.cfg, self.pose)

    def batch(self, step: int, batch_size: int) -> List[Scene]:
        return [self[step * batch_size + i] for i in range(batch_size)]


# ---------------------------------------------------------------------- #
# Labels
# ---------------------------------------------------------------------- #
def quarter_fraction(mask: np.ndarray) -> np.ndarray:
    """Fraction of each 4x4 pixel cell covered by ``mask``"""
    size = mask.shape[0]
    h = size // STRIDE
    return mask.reshape(h, STRIDE, h, STRIDE).mean(axis=(1, 3))


def gaussian_heatmaps(keypoints: np.ndarray, label_size: int, sigma_cells: float = 1.0) -> np.ndarray:
    """(h, w, K) unnormalized Gaussians centred on the keypoints, cell centres at (j + 0.5) * stride"""
    centres = (np.arange(label_size) + 0.5) * STRIDE
    sigma = sigma_cells * STRIDE
    dx = centres[None, :, None] - keypoints[None, None, :, 0]
    dy = centres[:, None, None] - keypoints[None, None, :, 1]
    return np.exp(-(dx * dx + dy * dy) / (2.0 * sigma * sigma))


@dataclass
class TaskLabels:
    """
    Ground truth of one scene for one task

    ``masks``/``classes`` are the training targets of the set losses (soft 1/4-scale
    area fractions); ``eval`` holds the hard partitions and values the metrics use.
    """

    task: str
    classes: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    boxes: Optional[np.ndarray] = None
    masks: Optional[np.ndarray] = None
    depth: Optional[np.ndarray] = None
    keypoints: Optional[np.ndarray] = None
    heatmaps: Optional[np.ndarray] = None
    eval: Dict[str, np.ndarray] = field(default_factory=dict)


def _instance_partition(scene: Scene) -> Tuple[np.ndarray, np.ndarray]:
    """Soft fractions (G+1, h, w) with background first, and the argmax id map (0 = background)"""
    fractions = [quarter_fraction(inst.mask) for inst in scene.instances]
    background = 1.0 - np.sum(fractions, axis=0) if fractions else np.ones((scene.size // STRIDE,) * 2)
    stack = np.stack([background] + fractions, axis=0)
    return stack, stack.argmax(axis=0)


def pixel_class_map(scene: Scene) -> np.ndarray:
    """Full-resolution semantic map: 0 background, thing class + 1 elsewhere"""
    out = np.zeros((scene.size, scene.size), dtype=np.int64)
    for inst in scene.instances:
        out[inst.mask] = inst.cls + 1
    return out


def derive_labels(scene: Scene, spec: TaskSpec) -> TaskLabels:
    task = spec.task
    if task == 'pretrain':
        raise TaskError('pretrain has no derived labels')
    classes = np.array([inst.cls for inst in scene.instances], dtype=np.int64)
    if task == 'detect':
        boxes = np.stack([inst.bbox for inst in scene.instances]) if scene.instances else np.zeros((0, 4))
        return TaskLabels(task, classes=classes, boxes=boxes, eval={'boxes': boxes, 'classes': classes})

    if task == 'depth':
        depth = scene.depth.reshape(scene.size // STRIDE, STRIDE, scene.size // STRIDE, STRIDE).mean(axis=(1, 3))
        return TaskLabels(task, depth=depth, eval={'depth': depth, 'full_depth': scene.depth})

    if task == 'pose':
        triangles = [inst for inst in scene.instances if inst.cls == 2]
        if not triangles:
            raise TaskError('pose labels need a triangle figure in the scene')
        keypoints = triangles[-1].keypoints
        if len(keypoints) != NUM_KEYPOINTS:
            raise TaskError(f'pose figure must carry {NUM_KEYPOINTS} keypoints')
        heatmaps = gaussian_heatmaps(keypoints, scene.size // STRIDE)
        return TaskLabels(task, keypoints=keypoints, heatmaps=heatmaps, eval={'keypoints': keypoints})

    stack, ids = _instance_partition(scene)
    if task == 'semseg':
        semantic = np.zeros((len(THING_CLASSES) + 1,) + stack.shape[1:])
        semantic[0] = stack[0]
        for inst_index, cls in enumerate(classes, start=1):
            semantic[cls + 1] += stack[inst_index]
        present = [c for c in range(semantic.shape[0]) if semantic[c].sum() > 0]
        class_map = semantic.argmax(axis=0)
        return TaskLabels(task, classes=np.array(present, dtype=np.int64), masks=semantic[present],
                          eval={'class_map': class_map, 'pixel_map': pixel_class_map(scene)})
    if task == 'instseg':
        hard = np.stack([ids == i + 1 for i in range(len(classes))]) if len(classes) else np.zeros((0,) + ids.shape, bool)
        return TaskLabels(task, classes=classes, masks=stack[1:],
                          eval={'masks': hard, 'classes': classes})
    if task == 'panoptic':
        pan_classes = np.concatenate([classes, [BACKGROUND_STUFF]]).astype(np.int64)
        masks = np.concatenate([stack[1:], stack[:1]], axis=0)
        # segment ids: things 0..G-1, stuff G
        segment_map = np.where(ids == 0, len(classes), ids - 1)
        return TaskLabels(task, classes=pan_classes, masks=masks,
                          eval={'segment_map': segment_map, 'segment_classes': pan_classes})
    raise TaskError(f"Unknown task: {task}")
