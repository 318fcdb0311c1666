"""Synthetic scenes of three shape classes on cluttered backgrounds.

Used for demos and the end-to-end test: discs, triangles and tall rectangles
at varied scales and aspect ratios, with some scenes planting overlapping
objects of different classes.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import cv2
import numpy as np

from .dataset import AnnotatedSample, write_csv_annotations, write_image
from .detect import BoundingBox, pascal_overlap

SHAPES = ("disc", "triangle", "bar")
# (min, max) width/height ratio per shape
ASPECT = {"disc": (0.8, 1.25), "triangle": (0.9, 1.4), "bar": (0.3, 0.55)}
BASE_COLOR = {"disc": (200, 40, 40), "triangle": (40, 90, 200), "bar": (230, 200, 40)}


@dataclass
class SceneParams:
    width: int = 160
    height: int = 120
    min_height: int = 24
    max_height: int = 48
    max_objects: int = 3
    clutter: int = 12
    overlap_fraction: float = 0.4  # scenes with a planted cross-class overlapping pair
    pair_overlap: tuple[float, float] = (0.1, 0.35)  # box IoU range of a planted pair
    max_occlusion: float = 0.05  # shared pixels / smaller shape area
    noise: float = 6.0


def _background(rng, p: SceneParams) -> np.ndarray:
    c0, c1 = rng.uniform(60, 190, 3), rng.uniform(60, 190, 3)
    t = np.linspace(0, 1, p.width)[None, :, None]
    img = c0 * (1 - t) + c1 * t
    img = np.broadcast_to(img, (p.height, p.width, 3)).copy()
    for _ in range(p.clutter):
        color = tuple(float(v) for v in rng.uniform(0, 255, 3))
        kind = rng.integers(3)
        x, y = int(rng.integers(0, p.width)), int(rng.integers(0, p.height))
        if kind == 0:
            w, h = int(rng.integers(3, 30)), int(rng.integers(3, 30))
            cv2.rectangle(img, (x, y), (x + w, y + h), color, -1)
        elif kind == 1:
            x2, y2 = int(rng.integers(0, p.width)), int(rng.integers(0, p.height))
            cv2.line(img, (x, y), (x2, y2), color, int(rng.integers(1, 4)), cv2.LINE_AA)
        else:
            cv2.circle(img, (x, y), int(rng.integers(2, 6)), color, -1, cv2.LINE_AA)
    return img


def _draw(img, shape: str, box: BoundingBox, rng, fill=None, edge=None) -> None:
    base = np.array(BASE_COLOR[shape], dtype=np.float64)
    if fill is None:
        fill = tuple(float(v) for v in np.clip(base + rng.uniform(-25, 25, 3), 0, 255))
    if edge is None:
        edge = tuple(float(v) for v in np.clip(base * 0.4, 0, 255))
    l, t, r, b = box.as_tuple()
    if shape == "disc":
        center = ((l + r) / 2, (t + b) / 2)
        axes = ((r - l) / 2, (b - t) / 2)
        cv2.ellipse(img, (center, (axes[0] * 2, axes[1] * 2), 0.0), fill, -1, cv2.LINE_AA)
        cv2.ellipse(img, (center, (axes[0] * 2, axes[1] * 2), 0.0), edge, 2, cv2.LINE_AA)
    elif shape == "triangle":
        pts = np.array([[(l + r) / 2, t], [r, b], [l, b]])
        cv2.fillPoly(img, [np.round(pts * 16).astype(np.int32)], fill, cv2.LINE_AA, shift=4)
        cv2.polylines(img, [np.round(pts * 16).astype(np.int32)], True, edge, 2, cv2.LINE_AA, shift=4)
    else:
        p1 = (int(round(l)), int(round(t)))
        p2 = (int(round(r)) - 1, int(round(b)) - 1)
        cv2.rectangle(img, p1, p2, fill, -1)
        cv2.rectangle(img, p1, p2, edge, 2)


def shape_mask(shape: str, box: BoundingBox, size: tuple[int, int]) -> np.ndarray:
    """Boolean pixel mask of a drawn shape on a ``size`` = (height, width) canvas."""
    canvas = np.zeros(size + (3,), np.float64)
    _draw(canvas, shape, box, None, fill=(1.0, 1.0, 1.0), edge=(1.0, 1.0, 1.0))
    return canvas[..., 0] > 0.5


def _random_box(rng, shape: str, p: SceneParams, h: float | None = None) -> BoundingBox:
    h = float(rng.uniform(p.min_height, p.max_height)) if h is None else h
    w = h * float(rng.uniform(*ASPECT[shape]))
    x = float(rng.uniform(0, p.width - w))
    y = float(rng.uniform(0, p.height - h))
    return BoundingBox(round(x), round(y), round(x + w), round(y + h))


def plant_pair(rng, p: SceneParams, tries: int = 200):
    """Two objects of different classes whose boxes overlap while the shapes barely touch."""
    a, b = rng.choice(len(SHAPES), 2, replace=False)
    first = _random_box(rng, SHAPES[a], p)
    m1 = shape_mask(SHAPES[a], first, (p.height, p.width))
    for _ in range(tries):
        second = _random_box(rng, SHAPES[b], p, h=first.height * float(rng.uniform(0.9, 1.1)))
        if not p.pair_overlap[0] <= pascal_overlap(first, second) <= p.pair_overlap[1]:
            continue
        m2 = shape_mask(SHAPES[b], second, (p.height, p.width))
        if (m1 & m2).sum() <= p.max_occlusion * min(m1.sum(), m2.sum()):
            return [(SHAPES[a], first), (SHAPES[b], second)]
    return None


def render_scene(rng: np.random.Generator, p: SceneParams = SceneParams()):
    """One RGB uint8 image and its [(shape, box)] list."""
    img = _background(rng, p)
    objects: list[tuple[str, BoundingBox]] = []
    if rng.random() < p.overlap_fraction:
        pair = plant_pair(rng, p)
        if pair is not None:
            objects += pair
    n = int(rng.integers(1, p.max_objects + 1))
    for _ in range(200):
        if len(objects) >= n:
            break
        shape = SHAPES[int(rng.integers(len(SHAPES)))]
        box = _random_box(rng, shape, p)
        if all(pascal_overlap(box, o) == 0 for _, o in objects):
            objects.append((shape, box))
    for shape, box in objects:
        _draw(img, shape, box, rng)
    img += rng.normal(0, p.noise, img.shape)
    return np.clip(np.round(img), 0, 255).astype(np.uint8), objects


def render_dataset(out_dir, n_images: int, seed: int = 0, params: SceneParams = SceneParams(),
                   prefix: str = "img") -> list[AnnotatedSample]:
    """Write ``n_images`` PNG scenes plus ``annotations.csv`` into ``out_dir``."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    samples = []
    for i in range(n_images):
        img, objects = render_scene(rng, params)
        path = out / "images" / f"{prefix}{i:05d}.png"
        write_image(path, img)
        samples += [AnnotatedSample(str(path), box, shape) for shape, box in objects]
    write_csv_annotations(out / "annotations.csv", samples, root=out / "images")
    return samples


def demo_config(work_dir="work", K: int = 2, schedule=(32, 128, 256)) -> dict:
    """Config document for a dataset written by ``render_dataset``."""
    cls = {"K": K, "space": "aspect", "base_height": 24, "margin": 4, "depth": 2,
           "schedule": list(schedule), "features": "ACF", "nms": 0.3, "eval_overlap": 0.5,
           "jitter": {"translation": 2, "scale": [0.93, 1.07], "rotation": 2, "flip": False, "count": 3},
           "negatives_per_image": 5, "hard_negatives_per_image": 10, "hard_negative_cap": 4000,
           "min_cluster_size": 20}
    return {
        "seed": 0,
        "classes": {s: dict(cls) for s in SHAPES},
        "paths": {"annotations": "annotations.csv", "images": "images", "work_dir": work_dir},
    }
