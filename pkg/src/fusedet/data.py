"""Synthetic one-shot detection benchmark: colored geometric shapes on
cluttered backgrounds, split into base classes (seen in training) and novel
classes (seen only through a single support patch at test time).

A class is a (geometry, texture) pair; color varies per instance so it never
identifies the class. The ring geometry is fully held out for the novel
split, plus the dotted bar, giving a 14/4 base/novel partition. All sampling
is driven by numpy SeedSequences, so every scene, episode, and support patch
is a pure function of integer seeds.
"""

from __future__ import annotations

import colorsys
import os
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .head import BoxXYXY
from .ppm import read_ppm, write_ppm
from .tensor import Tensor

GEOMETRIES = ("circle", "square", "triangle", "cross", "ring", "bar")
TEXTURES = ("solid", "striped", "dotted")

IMAGE_SIZE = 128
SUPPORT_SIZE = 64
SIZE_RANGE = (12.0, 96.0)
MAX_OBJECTS = 5
PLACEMENT_IOU = 0.3
PLACEMENT_RETRIES = 20

# ring with every texture, plus the dotted bar
NOVEL_CLASS_IDS = (12, 13, 14, 17)

_SUPPORT_TAG = 0x5EED


@dataclass(frozen=True)
class ShapeClass:
    class_id: int
    geometry: str
    texture: str
    hue_bucket: int


@dataclass
class Scene:
    image: Tensor  # (3, 128, 128) in [0, 1]
    annotations: List[Tuple[int, BoxXYXY]]
    clutter_seed: int


@dataclass
class Episode:
    query: Scene
    support: Tensor  # (3, 64, 64)
    class_id: int
    gt_boxes: List[BoxXYXY]


def class_table() -> List[ShapeClass]:
    """All 18 classes; class_id = geometry index * 3 + texture index."""
    out = []
    for gi, geom in enumerate(GEOMETRIES):
        for ti, tex in enumerate(TEXTURES):
            cid = gi * 3 + ti
            out.append(ShapeClass(cid, geom, tex, cid % 6))
    return out


def base_classes() -> List[ShapeClass]:
    return [c for c in class_table() if c.class_id not in NOVEL_CLASS_IDS]


def novel_classes() -> List[ShapeClass]:
    return [c for c in class_table() if c.class_id in NOVEL_CLASS_IDS]


# ---------------------------------------------------------------------------
# rendering


def _hsv(h, s, v):
    return np.array(colorsys.hsv_to_rgb(h % 1.0, s, v))


def _shape_mask(geom: str, size: float, cx: float, cy: float,
                rng: np.random.Generator) -> np.ndarray:
    """Boolean (128,128) mask of one shape whose longest extent is ~size."""
    yy, xx = np.mgrid[0:IMAGE_SIZE, 0:IMAGE_SIZE] + 0.5
    dx, dy = xx - cx, yy - cy
    h = size / 2.0
    if geom == "circle":
        return dx * dx + dy * dy <= h * h
    if geom == "square":
        return (np.abs(dx) <= h) & (np.abs(dy) <= h)
    if geom == "triangle":
        width = np.clip((dy + h) / (2 * h), 0.0, 1.0) * h
        return (np.abs(dy) <= h) & (np.abs(dx) <= width)
    if geom == "cross":
        t = h * rng.uniform(0.24, 0.4)
        horiz = (np.abs(dx) <= h) & (np.abs(dy) <= t)
        vert = (np.abs(dy) <= h) & (np.abs(dx) <= t)
        return horiz | vert
    if geom == "ring":
        r2 = dx * dx + dy * dy
        inner = h * rng.uniform(0.5, 0.65)
        return (r2 <= h * h) & (r2 >= inner * inner)
    if geom == "bar":
        t = h * rng.uniform(0.25, 0.45)
        if rng.uniform() < 0.5:
            return (np.abs(dx) <= h) & (np.abs(dy) <= t)
        return (np.abs(dy) <= h) & (np.abs(dx) <= t)
    raise ValueError(f"unknown geometry {geom!r}")


def _texture_field(texture: str) -> np.ndarray:
    """Boolean (128,128) pattern selecting the brighter of two tones."""
    yy, xx = np.mgrid[0:IMAGE_SIZE, 0:IMAGE_SIZE]
    if texture == "solid":
        return np.ones((IMAGE_SIZE, IMAGE_SIZE), dtype=bool)
    if texture == "striped":
        return ((xx + yy) // 4) % 2 == 0
    if texture == "dotted":
        mx, my = xx % 6 - 3, yy % 6 - 3
        return mx * mx + my * my <= 6
    raise ValueError(f"unknown texture {texture!r}")


def _paint_object(img: np.ndarray, mask: np.ndarray, texture: str,
                  hue_bucket: int, rng: np.random.Generator) -> None:
    """Two-tone fill: both tones sit well above the background brightness,
    so every mask pixel stays distinguishable from the backdrop."""
    hue = (hue_bucket + rng.uniform(-0.35, 0.35)) / 6.0
    sat = rng.uniform(0.55, 0.95)
    val = rng.uniform(0.75, 1.0)
    c1 = _hsv(hue, sat, val)
    c2 = c1 * 0.6
    field = _texture_field(texture)
    img[:, mask & field] = c1[:, None]
    img[:, mask & ~field] = c2[:, None]


def _tight_box(mask: np.ndarray) -> BoxXYXY:
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    return BoxXYXY(float(cols[0]), float(rows[0]),
                   float(cols[-1] + 1), float(rows[-1] + 1))


def _box_iou(a: BoxXYXY, b: BoxXYXY) -> float:
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    inter = max(iw, 0.0) * max(ih, 0.0)
    return inter / (a.area + b.area - inter)


def _render_background(rng: np.random.Generator) -> np.ndarray:
    """Dim cluttered backdrop: soft gradient, scattered patches, pixel
    noise. Everything stays below 0.38 brightness, strictly under the
    darkest object tone, so brightness alone separates figure from
    ground and the hard part of the task is telling classes apart."""
    yy, xx = np.mgrid[0:IMAGE_SIZE, 0:IMAGE_SIZE] / (IMAGE_SIZE - 1)
    base = _hsv(rng.uniform(), rng.uniform(0.1, 0.4), rng.uniform(0.08, 0.2))
    img = base[:, None, None] * (0.7 + 0.3 * (xx * rng.uniform()
                                              + yy * rng.uniform()))
    for _ in range(rng.integers(4, 10)):
        w, h = rng.integers(3, 15, size=2)
        x0 = rng.integers(0, IMAGE_SIZE - w)
        y0 = rng.integers(0, IMAGE_SIZE - h)
        tone = _hsv(rng.uniform(), rng.uniform(0.1, 0.5),
                    rng.uniform(0.08, 0.26))
        img[:, y0:y0 + h, x0:x0 + w] = tone[:, None, None]
    img += rng.normal(0.0, 0.012, img.shape)
    return np.clip(img, 0.0, 0.38)


def generate_scene(rng_seed, class_pool: Sequence[ShapeClass],
                   n_objects: Optional[int] = None) -> Scene:
    """Deterministic scene from a seed: cluttered background plus 1 to 5
    non-overlapping shapes (pairwise box IoU <= 0.3) from the pool.

    Placement failures after bounded retries drop the object, never the
    scene. Annotation boxes are computed from the rendered mask, so they
    bound the painted pixels exactly; later objects may slightly occlude
    earlier ones within the IoU budget.
    """
    if not len(class_pool):
        raise ValueError("empty class pool")
    ss = (rng_seed if isinstance(rng_seed, np.random.SeedSequence)
          else np.random.SeedSequence(rng_seed))
    bg_ss, obj_ss = ss.spawn(2)
    bg_rng = np.random.default_rng(bg_ss)
    rng = np.random.default_rng(obj_ss)

    img = _render_background(bg_rng)
    wanted = int(n_objects if n_objects is not None
                 else rng.integers(1, MAX_OBJECTS + 1))
    annotations: List[Tuple[int, BoxXYXY]] = []
    lo, hi = SIZE_RANGE
    for _ in range(wanted):
        for _attempt in range(PLACEMENT_RETRIES):
            cls = class_pool[int(rng.integers(len(class_pool)))]
            size = float(rng.uniform(lo, hi))
            half = size / 2.0
            cx = rng.uniform(half, IMAGE_SIZE - half)
            cy = rng.uniform(half, IMAGE_SIZE - half)
            mask = _shape_mask(cls.geometry, size, cx, cy, rng)
            if not mask.any():
                continue
            box = _tight_box(mask)
            if any(_box_iou(box, b) > PLACEMENT_IOU for _, b in annotations):
                continue
            _paint_object(img, mask, cls.texture, cls.hue_bucket, rng)
            annotations.append((cls.class_id, box))
            break
    return Scene(Tensor(img), annotations,
                 int(bg_ss.generate_state(1)[0]))


# ---------------------------------------------------------------------------
# supports and episodes


def nearest_resize(img: np.ndarray, out_hw: Tuple[int, int]) -> np.ndarray:
    h, w = img.shape[-2:]
    oh, ow = out_hw
    rows = np.minimum((np.arange(oh) + 0.5) * h / oh, h - 1).astype(int)
    cols = np.minimum((np.arange(ow) + 0.5) * w / ow, w - 1).astype(int)
    return img[..., rows[:, None], cols[None, :]]


def _crop_support(scene: Scene, box: BoxXYXY,
                  rng: np.random.Generator) -> Tensor:
    """Cut the box plus a jittered margin and resize to the support size."""
    bw, bh = box.x2 - box.x1, box.y2 - box.y1
    m = rng.uniform(0.05, 0.25, size=4)
    x1 = int(np.clip(box.x1 - m[0] * bw, 0, IMAGE_SIZE - 2))
    y1 = int(np.clip(box.y1 - m[1] * bh, 0, IMAGE_SIZE - 2))
    x2 = int(np.clip(box.x2 + m[2] * bw, x1 + 2, IMAGE_SIZE))
    y2 = int(np.clip(box.y2 + m[3] * bh, y1 + 2, IMAGE_SIZE))
    crop = scene.image.data[:, y1:y2, x1:x2]
    return Tensor(nearest_resize(crop, (SUPPORT_SIZE, SUPPORT_SIZE)))


def _make_support(cls: ShapeClass, rng: np.random.Generator) -> Tensor:
    """One support patch: a fresh single-object scene of the class, cropped
    around its instance."""
    scene_seed = int(rng.integers(np.iinfo(np.int64).max))
    scene = generate_scene(scene_seed, [cls], n_objects=1)
    _, box = scene.annotations[0]
    return _crop_support(scene, box, rng)


def _themed_pool(pool: Sequence[ShapeClass],
                 rng: np.random.Generator) -> List[ShapeClass]:
    """A cluster of look-alike classes around a random anchor: everything
    sharing its geometry or its hue bucket, sometimes plus one outsider.

    Scenes drawn from such a cluster are full of near-misses for any class
    picked as the target, so a detector can only tell which objects count
    by actually consulting the support patch; guessing the scene's dominant
    class stays expensive for the whole of training.
    """
    anchor = pool[int(rng.integers(len(pool)))]
    cluster = [c for c in pool if c.geometry == anchor.geometry
               or c.hue_bucket == anchor.hue_bucket]
    if len(cluster) < 3 or rng.uniform() < 0.5:
        outsiders = [c for c in pool if c not in cluster]
        if outsiders:
            cluster.append(outsiders[int(rng.integers(len(outsiders)))])
    return cluster


def sample_training_episode(rng: np.random.Generator,
                            pool: Optional[Sequence[ShapeClass]] = None,
                            allow_negative: bool = False) -> Episode:
    """Query scene plus a support patch cropped from a different scene.

    Training queries hold 3 to 5 objects drawn from a themed cluster of
    look-alike classes (see _themed_pool). The target class is drawn from
    the classes present in the query, so every episode has at least one
    ground-truth box. With allow_negative the target is any pool class and
    the box list may be empty.
    """
    pool = list(pool) if pool is not None else base_classes()
    by_id = {c.class_id: c for c in pool}
    scene_seed = int(rng.integers(np.iinfo(np.int64).max))
    query = generate_scene(scene_seed, _themed_pool(pool, rng),
                           n_objects=int(rng.integers(3, 6)))
    present = sorted({cid for cid, _ in query.annotations})
    if allow_negative:
        target = int(rng.choice(sorted(by_id)))
    else:
        target = int(rng.choice(present))
    support = _make_support(by_id[target], rng)
    gt = [box for cid, box in query.annotations if cid == target]
    return Episode(query, support, target, gt)


def fixed_seed_supports(classes: Sequence[ShapeClass],
                        seed: int) -> Dict[int, Tensor]:
    """Exactly one deterministic support patch per class; the whole
    evaluation reuses these, which is what makes it one-shot."""
    out: Dict[int, Tensor] = {}
    for cls in sorted(classes, key=lambda c: c.class_id):
        rng = np.random.default_rng(
            np.random.SeedSequence((seed, _SUPPORT_TAG, cls.class_id)))
        out[cls.class_id] = _make_support(cls, rng)
    return out


def build_eval_set(split: str, n_scenes: int, seed: int) -> List[Episode]:
    """One episode per (scene, class present in it); supports come from
    fixed_seed_supports so every episode of a class sees the same patch."""
    if split == "base":
        pool = base_classes()
    elif split == "novel":
        pool = novel_classes()
    else:
        raise ValueError(f"unknown split {split!r}")
    supports = fixed_seed_supports(pool, seed)
    episodes: List[Episode] = []
    for i in range(n_scenes):
        scene = generate_scene(np.random.SeedSequence((seed, i)), pool)
        for cid in sorted({c for c, _ in scene.annotations}):
            gt = [b for c, b in scene.annotations if c == cid]
            episodes.append(Episode(scene, supports[cid], cid, gt))
    return episodes


# ---------------------------------------------------------------------------
# persistence


def save_scene(scene: Scene, stem: str) -> None:
    """stem.ppm holds the pixels, stem.txt one line per object:
    class_id x1 y1 x2 y2."""
    write_ppm(stem + ".ppm", scene.image.data)
    with open(stem + ".txt", "w") as f:
        for cid, b in scene.annotations:
            f.write(f"{cid} {b.x1:g} {b.y1:g} {b.x2:g} {b.y2:g}\n")


def load_scene(stem: str) -> Scene:
    img = read_ppm(stem + ".ppm")
    annotations = []
    with open(stem + ".txt") as f:
        for line in f:
            parts = line.split()
            if not parts:
                continue
            cid = int(parts[0])
            x1, y1, x2, y2 = (float(v) for v in parts[1:5])
            annotations.append((cid, BoxXYXY(x1, y1, x2, y2)))
    return Scene(Tensor(img), annotations, clutter_seed=-1)


def write_eval_manifest(episodes: Sequence[Episode], support_seed: int,
                        out_dir: str) -> str:
    """Persist each distinct scene once plus a manifest of
    (scene file, class id) pairs and the shared support seed."""
    os.makedirs(out_dir, exist_ok=True)
    stems: Dict[int, str] = {}
    lines = [f"support_seed {support_seed}"]
    for ep in episodes:
        key = id(ep.query)
        if key not in stems:
            stem = os.path.join(out_dir, f"scene-{len(stems):04d}")
            save_scene(ep.query, stem)
            stems[key] = os.path.basename(stem)
        lines.append(f"{stems[key]} {ep.class_id}")
    path = os.path.join(out_dir, "manifest.txt")
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")
    return path
