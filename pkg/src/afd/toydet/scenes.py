"""Procedural shape scenes standing in for aerial imagery."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import ConfigError

SHAPES = ("disk", "square", "cross", "triangle", "ring")
# every channel sits well above the background level so foreground is always brighter
COLORS = np.array([
    [0.95, 0.50, 0.50],
    [0.50, 0.95, 0.50],
    [0.50, 0.50, 0.95],
    [0.95, 0.95, 0.50],
    [0.50, 0.95, 0.95],
])
BACKGROUND = 0.2
MAX_OBJECTS = 6


@dataclass(frozen=True)
class SceneConfig:
    num_classes: int = 3
    image_size: int = 64
    noise_sigma: float = 0.08
    min_size: int = 8
    max_size: int = 22
    color_jitter: float = 0.08
    # probabilities of 1..MAX_OBJECTS objects; None means uniform
    count_probs: tuple | None = None

    def __post_init__(self):
        if not 2 <= self.num_classes <= len(SHAPES):
            raise ConfigError(f"num_classes must be in 2..{len(SHAPES)}")
        if not 6 <= self.min_size <= self.max_size <= self.image_size // 2:
            raise ConfigError("object sizes must satisfy 6 <= min <= max <= image/2")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be >= 0")
        if self.count_probs is not None:
            p = np.asarray(self.count_probs, dtype=np.float64)
            if p.shape != (MAX_OBJECTS,) or np.any(p < 0) or not np.isclose(p.sum(), 1.0):
                raise ConfigError(f"count_probs must be {MAX_OBJECTS} probabilities summing to 1")

    def count_distribution(self) -> np.ndarray:
        if self.count_probs is None:
            return np.full(MAX_OBJECTS, 1.0 / MAX_OBJECTS)
        return np.asarray(self.count_probs, dtype=np.float64)


@dataclass
class Scene:
    image: np.ndarray  # [3, S, S] in [0, 1]
    classes: np.ndarray  # [k] ints in 0..K-1
    boxes: np.ndarray  # [k, 4] pixel-edge coordinates
    seed: int = 0
    masks: list = field(default_factory=list, repr=False)


def shape_mask(kind: str, size: int) -> np.ndarray:
    """Boolean ``size x size`` stencil of a shape."""
    c = (size - 1) / 2.0
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    r = size / 2.0
    d2 = (xx - c) ** 2 + (yy - c) ** 2
    if kind == "disk":
        m = d2 <= r * r
    elif kind == "square":
        m = np.ones((size, size), dtype=bool)
    elif kind == "cross":
        arm = max(1.0, size / 6.0)
        m = (np.abs(xx - c) <= arm) | (np.abs(yy - c) <= arm)
    elif kind == "triangle":
        # apex at the top row, base on the bottom row
        half = (yy + 1) / size * r
        m = np.abs(xx - c) <= half
    elif kind == "ring":
        m = (d2 <= r * r) & (d2 >= (0.55 * r) ** 2)
    else:
        raise ValueError(kind)
    return m


def _texture(kind_index: int, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size]
    if kind_index == 1:
        return np.where((xx // 2 + yy // 2) % 2 == 0, 1.0, 0.9)
    if kind_index == 2:
        return np.where(yy % 3 == 0, 0.9, 1.0)
    return np.ones((size, size))


def gen_scene(seed: int, cfg: SceneConfig = SceneConfig()) -> Scene:
    rng = np.random.default_rng(seed)
    s = cfg.image_size
    n_obj = int(rng.choice(np.arange(1, MAX_OBJECTS + 1), p=cfg.count_distribution()))
    image = np.full((3, s, s), BACKGROUND)
    taken = np.zeros((s, s), dtype=bool)
    classes, boxes = [], []
    for _ in range(n_obj):
        cls = int(rng.integers(cfg.num_classes))
        placed = False
        for attempt in range(200):
            size = int(rng.integers(cfg.min_size, cfg.max_size + 1)) if attempt < 150 else cfg.min_size
            x0 = int(rng.integers(0, s - size + 1))
            y0 = int(rng.integers(0, s - size + 1))
            lo_y, hi_y = max(0, y0 - 1), min(s, y0 + size + 1)
            lo_x, hi_x = max(0, x0 - 1), min(s, x0 + size + 1)
            if taken[lo_y:hi_y, lo_x:hi_x].any():
                continue
            placed = True
            break
        if not placed:
            raise RuntimeError(f"could not place object in scene {seed}")
        stencil = shape_mask(SHAPES[cls], size)
        color = np.clip(COLORS[cls] + rng.uniform(-cfg.color_jitter, cfg.color_jitter, 3), 0.45, 1.0)
        tex = _texture(cls, size)
        patch = image[:, y0 : y0 + size, x0 : x0 + size]
        for ch in range(3):
            patch[ch][stencil] = (color[ch] * tex)[stencil]
        taken[y0 : y0 + size, x0 : x0 + size] = True
        ys, xs = np.nonzero(stencil)
        boxes.append([x0 + xs.min(), y0 + ys.min(), x0 + xs.max() + 1, y0 + ys.max() + 1])
        classes.append(cls)
    if cfg.noise_sigma > 0:
        image = image + rng.normal(0.0, cfg.noise_sigma, image.shape)
    image = np.clip(image, 0.0, 1.0)
    return Scene(image, np.asarray(classes, dtype=np.int64), np.asarray(boxes, dtype=np.float64), seed)


def scene_seeds(seed: int, count: int) -> list:
    """Deterministic per-scene seeds derived from one dataset seed."""
    if count == 0:
        return []
    return [int(s) for s in np.random.SeedSequence(seed).generate_state(count, dtype=np.uint32)]


def make_dataset(seed: int, count: int, cfg: SceneConfig = SceneConfig(), workers: int = 1) -> list:
    seeds = scene_seeds(seed, count)
    if workers > 1 and count > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(workers) as ex:
            return list(ex.map(gen_scene, seeds, [cfg] * count, chunksize=16))
    return [gen_scene(s, cfg) for s in seeds]


def scenes_to_arrays(scenes: list, image_size: int = 64) -> dict:
    """Pack scenes into the dataset tensors ``images``, ``boxes``, ``classes``, ``counts``."""
    n = len(scenes)
    images = np.zeros((n, 3, image_size, image_size))
    boxes = np.zeros((n, MAX_OBJECTS, 4))
    classes = np.full((n, MAX_OBJECTS), -1.0)
    counts = np.zeros(n)
    for i, sc in enumerate(scenes):
        k = len(sc.classes)
        images[i] = sc.image
        boxes[i, :k] = sc.boxes
        classes[i, :k] = sc.classes
        counts[i] = k
    return {"images": images, "boxes": boxes, "classes": classes, "counts": counts}


def arrays_to_scenes(arrays: dict) -> list:
    out = []
    for i in range(len(arrays["counts"])):
        k = int(arrays["counts"][i])
        out.append(Scene(arrays["images"][i], arrays["classes"][i, :k].astype(np.int64), arrays["boxes"][i, :k].copy(), i))
    return out
