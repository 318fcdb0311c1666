"""Annotation loading, difficulty filtering, jitter augmentation and negative sampling."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np
from PIL import Image

from .detect import BoundingBox, pascal_overlap

log = logging.getLogger(__name__)

KITTI_TYPES = ("Car", "Van", "Truck", "Pedestrian", "Person_sitting", "Cyclist", "Tram", "Misc", "DontCare")
EASY, MODERATE, HARD = "easy", "moderate", "hard"
NEGATIVE_OVERLAP = 0.1


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class DifficultyRule:
    """KITTI-style thresholds per level: (min height px, max occlusion, max truncation)."""

    levels: tuple = ((EASY, 40, 0, 0.15), (MODERATE, 25, 1, 0.30), (HARD, 25, 2, 0.50))

    def classify(self, height: float, occlusion: int | None, truncation: float | None) -> str | None:
        occ = 0 if occlusion is None else occlusion
        trunc = 0.0 if truncation is None else truncation
        for name, min_h, max_occ, max_trunc in self.levels:
            if height >= min_h and occ <= max_occ and trunc <= max_trunc:
                return name
        return None

    def admits(self, sample_difficulty: str | None, level: str) -> bool:
        """True when a sample of ``sample_difficulty`` counts at evaluation ``level``."""
        order = [lv[0] for lv in self.levels]
        if sample_difficulty is None:
            return False
        return order.index(sample_difficulty) <= order.index(level)


@dataclass(frozen=True)
class AnnotatedSample:
    image: str
    box: BoundingBox
    class_name: str
    orientation: float | None = None
    truncation: float | None = None
    occlusion_index: int | None = None
    difficulty: str | None = None

    @property
    def aspect_ratio(self) -> float:
        return self.box.width / self.box.height


def image_size(path) -> tuple[int, int] | None:
    """(width, height) read from the image header, None when unreadable."""
    try:
        with Image.open(path) as im:
            return im.size
    except (OSError, ValueError):
        return None


def read_image(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"))


def write_image(path, rgb: np.ndarray) -> None:
    Image.fromarray(np.asarray(rgb, dtype=np.uint8)).save(path)


def clip_box(box: BoundingBox, size) -> BoundingBox | None:
    if size is None:
        return box
    w, h = size
    l, t = max(0.0, box.left), max(0.0, box.top)
    r, b = min(float(w), box.right), min(float(h), box.bottom)
    if r <= l or b <= t:
        return None
    return BoundingBox(l, t, r, b)


@dataclass
class LoadReport:
    skipped: list[str] = field(default_factory=list)


def load_kitti_labels(label_dir, image_dir, rule: DifficultyRule = DifficultyRule(), types=KITTI_TYPES,
                      image_ext: str = ".png", report: LoadReport | None = None) -> list[AnnotatedSample]:
    """Parse KITTI object label files (one per image, 15 space-separated fields per line)."""
    report = report if report is not None else LoadReport()
    samples = []
    for label_file in sorted(Path(label_dir).glob("*.txt")):
        image_path = Path(image_dir) / (label_file.stem + image_ext)
        size = image_size(image_path)
        for lineno, line in enumerate(label_file.read_text().splitlines(), 1):
            if not line.strip():
                continue
            f = line.split()
            if len(f) not in (15, 16):
                raise DataError(f"{label_file}:{lineno}: expected 15 fields, got {len(f)}")
            if f[0] not in types:
                report.skipped.append(f"{label_file}:{lineno}: unknown type {f[0]}")
                log.info(report.skipped[-1])
                continue
            try:
                trunc, occ, alpha = float(f[1]), int(f[2]), float(f[3])
                box = BoundingBox(*map(float, f[4:8]))
            except ValueError as exc:
                raise DataError(f"{label_file}:{lineno}: {exc}") from exc
            box = clip_box(box, size)
            if box is None:
                report.skipped.append(f"{label_file}:{lineno}: box outside image")
                continue
            samples.append(AnnotatedSample(
                str(image_path), box, f[0], orientation=alpha, truncation=min(max(trunc, 0.0), 1.0),
                occlusion_index=occ, difficulty=rule.classify(box.height, occ, trunc),
            ))
    return samples


def load_class_map(path) -> dict[str, str]:
    """Sidecar ``id;name`` rows mapping numeric class ids to class names."""
    mapping = {}
    with open(path, newline="") as fh:
        for row in csv.reader(fh, delimiter=";"):
            if row and not row[0].startswith("#"):
                mapping[row[0].strip()] = row[1].strip()
    return mapping


def load_csv_annotations(path, class_map: dict[str, str] | None = None, image_dir=None,
                         header: bool = False) -> list[AnnotatedSample]:
    """Rows ``image;left;top;right;bottom;class`` (GTSDB style)."""
    samples = []
    base = Path(image_dir) if image_dir is not None else Path(path).parent
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh, delimiter=";"), 1):
            if lineno == 1 and header:
                continue
            if not row:
                continue
            if len(row) != 6:
                raise DataError(f"{path}:{lineno}: expected 6 fields, got {len(row)}")
            try:
                l, t, r, b = map(float, row[1:5])
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from exc
            if r <= l or b <= t:
                raise DataError(f"{path}:{lineno}: empty box ({l}, {t}, {r}, {b})")
            cls = row[5].strip()
            if class_map is not None:
                if cls not in class_map:
                    raise DataError(f"{path}:{lineno}: class id {cls} missing from class map")
                cls = class_map[cls]
            samples.append(AnnotatedSample(str(base / row[0]), BoundingBox(l, t, r, b), cls))
    return samples


def write_csv_annotations(path, samples, class_ids: dict[str, str] | None = None, root=None) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter=";", lineterminator="\n")
        for s in samples:
            name = str(Path(s.image).relative_to(root)) if root is not None else Path(s.image).name
            cls = class_ids[s.class_name] if class_ids else s.class_name
            b = s.box
            w.writerow([name, repr(b.left), repr(b.top), repr(b.right), repr(b.bottom), cls])


@dataclass(frozen=True)
class JitterParams:
    """Ranges of the random perturbations; ``count`` jittered copies per sample."""

    translation: float = 0.0  # pixels, symmetric
    scale: tuple[float, float] = (1.0, 1.0)
    rotation: float = 0.0  # degrees, symmetric
    flip: bool = False
    count: int = 1


SIGN_JITTER = JitterParams(translation=2, scale=(0.8, 1.0), rotation=5, flip=True, count=4)
CAR_JITTER = JitterParams(translation=2, rotation=2, flip=True, count=2)
CYCLIST_JITTER = JitterParams(translation=2, rotation=2, flip=False, count=2)
# stronger perturbations standing in for test-time grid misalignment
THRESHOLD_JITTER = JitterParams(translation=3, scale=(0.88, 1.12), rotation=4, flip=False, count=2)


def flip_crop(crop: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(np.asarray(crop)[:, ::-1])


def perturb(crop: np.ndarray, dx: float, dy: float, scale: float, angle: float) -> np.ndarray:
    """Rotate/scale about the crop centre then translate; borders replicate."""
    h, w = crop.shape[:2]
    if dx == 0 and dy == 0 and scale == 1 and angle == 0:
        return np.array(crop, copy=True)
    M = cv2.getRotationMatrix2D(((w - 1) / 2, (h - 1) / 2), angle, scale)
    M[:, 2] += (dx, dy)
    return cv2.warpAffine(np.ascontiguousarray(crop), M, (w, h), flags=cv2.INTER_LINEAR,
                          borderMode=cv2.BORDER_REPLICATE)


def jitter(crop: np.ndarray, params: JitterParams, rng: np.random.Generator) -> list[np.ndarray]:
    """``params.count`` randomly perturbed copies, plus a mirrored copy of each when flips are allowed."""
    out = []
    for _ in range(params.count):
        dx, dy = rng.uniform(-params.translation, params.translation, 2) if params.translation else (0.0, 0.0)
        s = rng.uniform(*params.scale) if params.scale[0] != params.scale[1] else params.scale[0]
        a = rng.uniform(-params.rotation, params.rotation) if params.rotation else 0.0
        out.append(perturb(crop, float(dx), float(dy), float(s), float(a)))
    if params.flip:
        out += [flip_crop(c) for c in out]
    return out


@dataclass
class NegativeSample:
    box: BoundingBox
    crop: np.ndarray


def sample_negatives(image: np.ndarray, annotations, count: int, window: tuple[int, int],
                     rng: np.random.Generator, max_overlap: float = NEGATIVE_OVERLAP,
                     max_tries: int = 50, flags: list | None = None) -> list[NegativeSample]:
    """Uniform random ``window`` = (w, h) crops overlapping no annotation by more than ``max_overlap``."""
    img = np.asarray(image)
    H, W = img.shape[:2]
    ww, wh = window
    boxes = [a.box if hasattr(a, "box") else a for a in annotations]
    out = []
    if ww > W or wh > H:
        if flags is not None:
            flags.append("window larger than image")
        return out
    tries = 0
    while len(out) < count and tries < max_tries * count:
        tries += 1
        x = int(rng.integers(0, W - ww + 1))
        y = int(rng.integers(0, H - wh + 1))
        cand = BoundingBox(x, y, x + ww, y + wh)
        if all(pascal_overlap(cand, b) <= max_overlap for b in boxes):
            out.append(NegativeSample(cand, img[y : y + wh, x : x + ww].copy()))
    if len(out) < count:
        msg = f"only {len(out)} of {count} negative windows found"
        log.info(msg)
        if flags is not None:
            flags.append(msg)
    return out
