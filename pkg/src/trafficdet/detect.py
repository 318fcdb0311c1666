"""Multi-scale sliding-window detection, NMS and cross-class fusion."""
from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import cv2
import numpy as np
from numba import njit

from .boosting import BoostedModel
from .calibrate import calibrate_score
from .channels import ChannelStack
from .features import compute_channels, families_for, window_offsets

log = logging.getLogger(__name__)

SCALES_PER_OCTAVE = 8
DEFAULT_NMS = 0.5
# replicated border (pixels at level resolution) so windows can reach image edges
PYRAMID_PAD = 8


@dataclass(frozen=True)
class BoundingBox:
    left: float
    top: float
    right: float
    bottom: float

    def __post_init__(self):
        if not (self.right > self.left and self.bottom > self.top):
            raise ValueError(f"degenerate box {self}")

    @property
    def width(self) -> float:
        return self.right - self.left

    @property
    def height(self) -> float:
        return self.bottom - self.top

    @property
    def area(self) -> float:
        return self.width * self.height

    def as_tuple(self):
        return (self.left, self.top, self.right, self.bottom)


@dataclass(frozen=True)
class Detection:
    box: BoundingBox
    class_name: str
    subcategory: int
    score: float
    calibrated: float | None = None

    @property
    def rank_score(self) -> float:
        return self.score if self.calibrated is None else self.calibrated


@dataclass
class DetectorBank:
    models: dict[str, list[BoostedModel]]
    nms_thresholds: dict[str, float] = field(default_factory=dict)
    stride: int = 1
    scales_per_octave: int = SCALES_PER_OCTAVE

    def families(self) -> tuple[str, ...]:
        names = [c for ms in self.models.values() for m in ms for c in m.layout.channels]
        return families_for(names)

    def all_models(self):
        for cls in sorted(self.models):
            yield from self.models[cls]


class _Instrument:
    pyramid_builds = 0


instrument = _Instrument()


@dataclass(frozen=True)
class PyramidLevel:
    scale: float
    scale_x: float
    scale_y: float
    stack: ChannelStack
    pad: int = 0


def pyramid_scales(height: int, width: int, window: tuple[int, int], scales_per_octave: int = SCALES_PER_OCTAVE):
    """Scales 2^(-i/spo) down to the smallest one where ``window`` = (w, h) still fits."""
    ww, wh = window
    ratio = min(height / wh, width / ww)
    if ratio < 1:
        return []
    n = int(math.floor(scales_per_octave * math.log2(ratio) + 1e-9)) + 1
    return [2.0 ** (-i / scales_per_octave) for i in range(n)]


def build_pyramid(image, scales_per_octave: int = SCALES_PER_OCTAVE, min_window=(8, 8),
                  families=("acf",), threads: int = 1, pad: int = PYRAMID_PAD) -> list[PyramidLevel]:
    img = np.asarray(image)
    H, W = img.shape[:2]
    scales = pyramid_scales(H, W, min_window, scales_per_octave)
    instrument.pyramid_builds += 1
    if not scales:
        log.warning("image %dx%d smaller than window %s, empty pyramid", W, H, min_window)
        return []

    def level(s):
        w, h = max(1, int(round(W * s))), max(1, int(round(H * s)))
        scaled = img if (w, h) == (W, H) else cv2.resize(img, (w, h), interpolation=cv2.INTER_AREA)
        if pad:
            scaled = cv2.copyMakeBorder(np.ascontiguousarray(scaled), pad, pad, pad, pad, cv2.BORDER_REPLICATE)
        return PyramidLevel(s, w / W, h / H, compute_channels(scaled, families), pad)

    if threads > 1:
        with ThreadPoolExecutor(threads) as ex:
            return list(ex.map(level, scales))
    return [level(s) for s in scales]


@njit(cache=True, nogil=True)
def _cascade_scan(flat, H, W, rows, cols, stride, node_off, thr, votes, coefs, reject):
    T, n_int = node_off.shape
    depth = 0
    while (1 << depth) - 1 < n_int:
        depth += 1
    ny = (H - rows) // stride + 1
    nx = (W - cols) // stride + 1
    out_y = np.empty(ny * nx, np.int64)
    out_x = np.empty(ny * nx, np.int64)
    out_s = np.empty(ny * nx, np.float64)
    n = 0
    for iy in range(ny):
        y = iy * stride
        for ix in range(nx):
            x = ix * stride
            base = y * W + x
            h = 0.0
            alive = True
            for t in range(T):
                node = 0
                for _ in range(depth):
                    if flat[base + node_off[t, node]] >= thr[t, node]:
                        node = 2 * node + 2
                    else:
                        node = 2 * node + 1
                h += coefs[t] * votes[t, node - n_int]
                if h < reject[t]:
                    alive = False
                    break
            if alive:
                out_y[n] = y
                out_x[n] = x
                out_s[n] = h
                n += 1
    return out_y[:n], out_x[:n], out_s[:n]


def scan_stack(model: BoostedModel, stack: ChannelStack, stride: int = 1):
    """(rows, cols, scores) of every window surviving the cascade on one grid."""
    lay = model.layout
    _, H, W = stack.data.shape
    if H < lay.rows or W < lay.cols or not model.trees:
        empty = np.zeros(0, np.int64)
        return empty, empty, np.zeros(0)
    try:
        cidx = [stack.names.index(n) for n in lay.channels]
    except ValueError as exc:
        raise ValueError(f"stack lacks channels required by the model: {exc}") from exc
    offsets = window_offsets(lay, H, W, cidx)
    feats, thrs, votes = model.tree_arrays()
    flat = np.ascontiguousarray(stack.data, dtype=np.float32).reshape(-1)
    return _cascade_scan(flat, H, W, lay.rows, lay.cols, stride, offsets[feats], thrs,
                         votes.astype(np.float64), model.coefficients, model.reject_thresholds)


def window_boxes(model: BoostedModel, level: PyramidLevel, rows, cols, image_shape):
    """Clipped (n, 4) image boxes of window positions and a mask of non-empty ones."""
    g, shrink = model.window, model.layout.shrink
    left = (np.asarray(cols) * shrink + g.margin_x - level.pad) / level.scale_x
    top = (np.asarray(rows) * shrink + g.margin_y - level.pad) / level.scale_y
    right = left + g.width / level.scale_x
    bottom = top + g.height / level.scale_y
    H, W = image_shape[:2]
    boxes = np.stack([np.maximum(left, 0.0), np.maximum(top, 0.0),
                      np.minimum(right, float(W)), np.minimum(bottom, float(H))], axis=-1).reshape(-1, 4)
    valid = (boxes[:, 2] > boxes[:, 0]) & (boxes[:, 3] > boxes[:, 1])
    return boxes, valid


def window_to_box(model: BoostedModel, level: PyramidLevel, row: int, col: int, image_shape) -> BoundingBox | None:
    boxes, valid = window_boxes(model, level, [row], [col], image_shape)
    return BoundingBox(*map(float, boxes[0])) if valid[0] else None


def scan_arrays(model: BoostedModel, pyramid: list[PyramidLevel], image_shape, stride: int = 1):
    """(boxes (n, 4), raw scores) of one model over a pyramid, ordered by (level, row, col)."""
    boxes, scores = [np.zeros((0, 4))], [np.zeros(0)]
    for level in pyramid:
        rows, cols, s = scan_stack(model, level.stack, stride)
        b, valid = window_boxes(model, level, rows, cols, image_shape)
        boxes.append(b[valid])
        scores.append(s[valid])
    return np.concatenate(boxes), np.concatenate(scores)


def scan(model: BoostedModel, pyramid: list[PyramidLevel], image_shape, stride: int = 1) -> list[Detection]:
    """Raw detections of one model over a pyramid, ordered by (level, row, col)."""
    boxes, scores = scan_arrays(model, pyramid, image_shape, stride)
    return [Detection(BoundingBox(*map(float, b)), model.class_name, model.subcategory, float(s))
            for b, s in zip(boxes, scores)]


def calibrate_detections(model: BoostedModel, dets: list[Detection]) -> list[Detection]:
    if model.calibration is None or not dets:
        return dets
    g = calibrate_score(model.calibration, np.array([d.score for d in dets]))
    return [replace(d, calibrated=float(v)) for d, v in zip(dets, np.atleast_1d(g))]


def pascal_overlap(b1: BoundingBox, b2: BoundingBox) -> float:
    """Intersection over union."""
    iw = min(b1.right, b2.right) - max(b1.left, b2.left)
    ih = min(b1.bottom, b2.bottom) - max(b1.top, b2.top)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (b1.area + b2.area - inter)


def overlap_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU of (n, 4) and (m, 4) arrays of (left, top, right, bottom)."""
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(inter > 0, inter / np.where(union > 0, union, 1.0), 0.0)


@njit(cache=True, nogil=True)
def _greedy_nms(boxes, order, threshold):
    n = len(order)
    suppressed = np.zeros(n, np.bool_)
    keep = np.empty(n, np.int64)
    m = 0
    for p in range(n):
        if suppressed[p]:
            continue
        i = order[p]
        keep[m] = i
        m += 1
        area_i = (boxes[i, 2] - boxes[i, 0]) * (boxes[i, 3] - boxes[i, 1])
        for q in range(p + 1, n):
            if suppressed[q]:
                continue
            j = order[q]
            iw = min(boxes[i, 2], boxes[j, 2]) - max(boxes[i, 0], boxes[j, 0])
            ih = min(boxes[i, 3], boxes[j, 3]) - max(boxes[i, 1], boxes[j, 1])
            if iw <= 0 or ih <= 0:
                continue
            inter = iw * ih
            area_j = (boxes[j, 2] - boxes[j, 0]) * (boxes[j, 3] - boxes[j, 1])
            if inter / (area_i + area_j - inter) > threshold:
                suppressed[q] = True
    return keep[:m]


def nms_indices(boxes: np.ndarray, scores: np.ndarray, threshold: float) -> np.ndarray:
    """Greedy NMS; returns kept indices in descending score order (stable on ties)."""
    if not 0 < threshold <= 1:
        raise ValueError("NMS threshold must lie in (0, 1]")
    order = np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")
    boxes = np.ascontiguousarray(boxes, dtype=np.float64).reshape(-1, 4)
    return _greedy_nms(boxes, order, float(threshold))


def nms(dets: list[Detection], threshold: float = DEFAULT_NMS) -> list[Detection]:
    if not dets:
        return []
    boxes = np.array([d.box.as_tuple() for d in dets])
    keep = nms_indices(boxes, np.array([d.rank_score for d in dets]), threshold)
    return [dets[i] for i in keep]


def fuse(per_class: dict[str, list[Detection]], thresholds: dict[str, float] | None = None) -> list[Detection]:
    """NMS inside each class, then plain concatenation across classes."""
    thresholds = thresholds or {}
    out = []
    for cls in sorted(per_class):
        out += nms(per_class[cls], thresholds.get(cls, DEFAULT_NMS))
    return out


def detect_all(image, bank: DetectorBank, threads: int = 1) -> list[Detection]:
    """Build one shared pyramid, scan every model on it, calibrate and fuse.

    Same result as ``fuse`` over ``calibrate_detections(scan(...))`` per model,
    but windows stay in arrays until NMS has picked the survivors.
    """
    models = list(bank.all_models())
    if not models:
        return []
    img = np.asarray(image)
    min_window = (min(m.window.padded_width for m in models), min(m.window.padded_height for m in models))
    pyramid = build_pyramid(img, bank.scales_per_octave, min_window, bank.families(), threads)

    def run(model):
        boxes, raw = scan_arrays(model, pyramid, img.shape, bank.stride)
        cal = None if model.calibration is None else np.atleast_1d(calibrate_score(model.calibration, raw))
        return boxes, raw, cal

    if threads > 1:
        with ThreadPoolExecutor(threads) as ex:
            results = list(ex.map(run, models))
    else:
        results = [run(m) for m in models]
    out, start = [], 0
    for cls in sorted(bank.models):
        parts = list(zip(bank.models[cls], results[start : start + len(bank.models[cls])]))
        start += len(parts)
        if not parts:
            continue
        boxes = np.concatenate([r[0] for _, r in parts])
        raw = np.concatenate([r[1] for _, r in parts])
        cal = [r[2] if r[2] is not None else np.full(len(r[1]), np.nan) for _, r in parts]
        cal = np.concatenate(cal)
        owner = np.concatenate([np.full(len(r[1]), k) for k, (_, r) in enumerate(parts)]).astype(np.int64)
        if not len(raw):
            continue
        rank = np.where(np.isnan(cal), raw, cal)
        for i in nms_indices(boxes, rank, bank.nms_thresholds.get(cls, DEFAULT_NMS)):
            m = parts[owner[i]][0]
            g = None if np.isnan(cal[i]) else float(cal[i])
            out.append(Detection(BoundingBox(*map(float, boxes[i])), m.class_name, m.subcategory,
                                 float(raw[i]), g))
    return out


DETECTION_HEADER = "# image_id class subcat left top right bottom raw_score calibrated_score"


def format_detection(image_id: str, d: Detection) -> str:
    g = d.calibrated if d.calibrated is not None else float("nan")
    b = d.box
    return (f"{image_id} {d.class_name} {d.subcategory} {b.left:.6f} {b.top:.6f} {b.right:.6f} "
            f"{b.bottom:.6f} {d.score:.6f} {g:.6f}")


def sort_detections(rows):
    """Order (image_id, Detection) pairs by image, then descending calibrated score."""
    return sorted(rows, key=lambda r: (r[0], -r[1].rank_score, r[1].class_name, r[1].subcategory,
                                       r[1].box.as_tuple()))


def write_detections(path, rows) -> None:
    with open(path, "w") as fh:
        fh.write(DETECTION_HEADER + "\n")
        for image_id, d in sort_detections(rows):
            fh.write(format_detection(image_id, d) + "\n")


def read_detections(path) -> list[tuple[str, Detection]]:
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 9:
                raise ValueError(f"{path}:{lineno}: expected 9 fields, got {len(parts)}")
            image_id, cls, sub = parts[0], parts[1], int(parts[2])
            l, t, r, b, s, g = map(float, parts[3:])
            rows.append((image_id, Detection(BoundingBox(l, t, r, b), cls, sub, s, None if math.isnan(g) else g)))
    return rows
