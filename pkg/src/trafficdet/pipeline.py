"""End-to-end driver: clustering, bootstrapped training, detection and evaluation."""
from __future__ import annotations

import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from .boosting import (BoostedModel, TrainingReport, WindowGeometry, bootstrap_train, load_model,
                       save_model, score_matrix)
from .calibrate import fit_platt
from .config import ConfigError, PipelineConfig
from .dataset import (NEGATIVE_OVERLAP, AnnotatedSample, DataError, DifficultyRule, jitter, load_class_map, load_csv_annotations,
                      load_kitti_labels, read_image, sample_negatives)
from .detect import (DetectorBank, Detection, PyramidLevel, build_pyramid, detect_all, overlap_matrix,
                     scan_stack, window_boxes, write_detections)
from .evaluation import GroundTruth, auc, average_precision, evaluate_class
from .features import COMBINATIONS, crop_features, crop_window, layout_for, stack_window
from .subcat import (MIN_WINDOW, SubcategoryLayout, geometric_features, subcategorize,
                     visual_features)

log = logging.getLogger(__name__)

PYRAMID_CACHE_BYTES = 1_500_000_000


class MissingLayoutError(FileNotFoundError):
    pass


def load_annotations(cfg: PipelineConfig) -> list[AnnotatedSample]:
    if cfg.paths.annotations is None:
        raise ConfigError("paths.annotations is not set")
    if cfg.annotation_format == "kitti":
        return load_kitti_labels(cfg.resolve(cfg.paths.annotations), cfg.resolve(cfg.paths.images))
    cmap = load_class_map(cfg.resolve(cfg.paths.class_map)) if cfg.paths.class_map else None
    return load_csv_annotations(cfg.resolve(cfg.paths.annotations), cmap, cfg.resolve(cfg.paths.images),
                                header=cfg.csv_header)


def class_samples(cfg: PipelineConfig, cls: str, samples) -> list[AnnotatedSample]:
    cc = cfg.classes[cls]
    rule = DifficultyRule()
    out = [s for s in samples if s.class_name in cc.labels]
    if cc.difficulty is not None:
        out = [s for s in out if s.difficulty is not None and rule.admits(s.difficulty, cc.difficulty)]
    return out


def image_id(path) -> str:
    return Path(path).name


# -- cluster -----------------------------------------------------------------

def _crop_object(image, box, size):
    import cv2

    l, t, r, b = (int(round(v)) for v in box.as_tuple())
    crop = image[max(t, 0):max(b, t + 1), max(l, 0):max(r, l + 1)]
    h, w = size
    return cv2.resize(crop, (int(w), int(h)), interpolation=cv2.INTER_AREA)


def cluster_points(cfg: PipelineConfig, cls: str, samples) -> np.ndarray:
    cc = cfg.classes[cls]
    ar = np.array([s.aspect_ratio for s in samples])
    if cc.space == "aspect":
        return ar[:, None]
    if cc.space == "geometric":
        pts, _ = geometric_features([(s.aspect_ratio, s.orientation, s.truncation, s.occlusion_index)
                                     for s in samples])
        return pts
    h = round(float(np.median([s.box.height for s in samples])))
    w = round(float(np.median([s.box.width for s in samples])))
    size = (max(h, 8), max(w, 8))
    images = {}
    crops = []
    for s in samples:
        if s.image not in images:
            images[s.image] = read_image(s.image)
        crops.append(_crop_object(images[s.image], s.box, size))
    return visual_features(crops, size)


def layout_path(cfg: PipelineConfig, cls: str) -> Path:
    return cfg.work_dir / "layouts" / f"{cls}.json"


def cmd_cluster(cfg: PipelineConfig, cls: str, samples=None) -> dict:
    samples = class_samples(cfg, cls, samples if samples is not None else load_annotations(cfg))
    cc = cfg.classes[cls]
    if not samples:
        raise DataError(f"no training samples for class {cls}")
    k = min(cc.K, len(samples))
    pts = cluster_points(cfg, cls, samples)
    layout = subcategorize(pts, [s.aspect_ratio for s in samples], k, cc.geometry(), seed=cfg.seed,
                           min_size=cc.min_cluster_size)
    doc = layout.as_dict()
    doc["class"] = cls
    doc["samples"] = [[image_id(s.image)] + [round(v, 6) for v in s.box.as_tuple()] for s in samples]
    for c, m in zip(doc["clusters"], layout.medoids):
        c["medoid_sample"] = doc["samples"][m][0]
    path = layout_path(cfg, cls)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    report = {"class": cls, "K": layout.K, "flags": layout.flags,
              "clusters": [{k: c[k] for k in ("size", "window", "padded_window", "medoid", "medoid_sample")}
                           for c in doc["clusters"]]}
    (path.parent / f"{cls}_report.json").write_text(json.dumps(report, indent=1, sort_keys=True) + "\n")
    return report


# -- train -------------------------------------------------------------------

class PyramidCache:
    """Training-image pyramids, kept in memory up to a byte budget.

    Pyramids are built down to the smallest admissible window, so one cache
    serves every class and subcategory trained with the same channel families.
    """

    def __init__(self, scales_per_octave=8, budget=PYRAMID_CACHE_BYTES):
        self.spo = scales_per_octave
        self.budget = budget
        self.used = 0
        self._cache: dict[tuple, tuple[tuple, list[PyramidLevel]]] = {}

    def get(self, path: str, families):
        key = (str(path), tuple(families))
        if key in self._cache:
            return self._cache[key]
        img = read_image(path)
        pyr = build_pyramid(img, self.spo, (MIN_WINDOW, MIN_WINDOW), families)
        entry = (img.shape, pyr)
        size = sum(l.stack.data.nbytes for l in pyr)
        if self.used + size <= self.budget:
            self._cache[key] = entry
            self.used += size
        return entry


_PYRAMIDS: dict[int, PyramidCache] = {}


def training_pyramids(scales_per_octave: int) -> PyramidCache:
    if scales_per_octave not in _PYRAMIDS:
        _PYRAMIDS[scales_per_octave] = PyramidCache(scales_per_octave)
    return _PYRAMIDS[scales_per_octave]


class ImageWindowSource:
    """Bootstrap data source: positives, random negatives, and hard negatives from training images."""

    def __init__(self, positives, negatives, paths, families, cache: PyramidCache, same_class_boxes, *,
                 overlap=NEGATIVE_OVERLAP, per_image=25, stride=1, threads=1):
        self._pos = positives
        self._neg = negatives
        self.paths = list(paths)
        self.families = tuple(families)
        self.cache = cache
        self.boxes = same_class_boxes  # per image, (n, 4) array
        self.overlap = overlap
        self.per_image = per_image
        self.stride = stride
        self.threads = threads
        self.harvested: list[np.ndarray] = []

    def positives(self):
        return self._pos

    def negatives(self):
        return self._neg

    def _harvest_image(self, model: BoostedModel, i: int):
        shape, pyr = self.cache.get(self.paths[i], self.families)
        gts = self.boxes[i]
        cands = []
        for li, level in enumerate(pyr):
            rows, cols, scores = scan_stack(model, level.stack, self.stride)
            if not len(rows):
                continue
            boxes, keep = window_boxes(model, level, rows, cols, shape)
            if len(gts):
                keep &= overlap_matrix(boxes, gts).max(axis=1) <= self.overlap
            for r, c, s in zip(rows[keep], cols[keep], scores[keep]):
                cands.append((-float(s), li, int(r), int(c)))
        cands.sort()
        cands = cands[: self.per_image]
        return [(-neg_s, i, li, r, c, stack_window(pyr[li].stack, model.layout, r, c))
                for neg_s, li, r, c in cands]

    def harvest(self, model: BoostedModel, cap: int):
        idx = range(len(self.paths))
        if self.threads > 1:
            with ThreadPoolExecutor(self.threads) as ex:
                parts = list(ex.map(lambda i: self._harvest_image(model, i), idx))
        else:
            parts = [self._harvest_image(model, i) for i in idx]
        found = [h for p in parts for h in p]
        found.sort(key=lambda h: (-h[0], h[1], h[2], h[3], h[4]))
        found = found[:cap]
        rows = np.zeros((0, model.layout.size), np.float32)
        if found:
            rows = np.stack([h[5] for h in found]).astype(np.float32)
        self.harvested.append(rows)
        return rows


def positive_features(samples, images, geom: WindowGeometry, layout, jit, rng) -> np.ndarray:
    rows = []
    for s in samples:
        crop = crop_window(images(s.image), s.box.as_tuple(), geom)
        for c in jitter(crop, jit, rng):
            rows.append(crop_features(c, layout))
    return np.array(rows, dtype=np.float32)


def negative_features(paths, boxes_per_image, geom: WindowGeometry, layout, per_image, rng, images):
    rows = []
    for p in paths:
        img = images(p)
        H, W = img.shape[:2]
        fit = min(W / geom.padded_width, H / geom.padded_height)
        if fit < 1:
            continue
        s = float(rng.uniform(1.0, min(fit, 4.0)))
        win = (int(geom.padded_width * s), int(geom.padded_height * s))
        for neg in sample_negatives(img, boxes_per_image.get(p, []), per_image, win, rng):
            b = neg.box
            obj = (b.left + geom.margin_x * s, b.top + geom.margin_y * s,
                   b.left + (geom.margin_x + geom.width) * s, b.top + (geom.margin_y + geom.height) * s)
            rows.append(crop_features(crop_window(img, obj, geom), layout))
    return np.array(rows, dtype=np.float32).reshape(-1, layout.size)


class _ImageStore:
    def __init__(self):
        self._imgs = {}

    def __call__(self, path):
        if path not in self._imgs:
            self._imgs[path] = read_image(path)
        return self._imgs[path]


def model_dir(cfg: PipelineConfig, cls: str) -> Path:
    return cfg.work_dir / "models" / cls


def cmd_train(cfg: PipelineConfig, cls: str, samples=None, threads: int = 1) -> dict:
    lp = layout_path(cfg, cls)
    if not lp.exists():
        raise MissingLayoutError(f"no subcategory layout for class {cls}; run the cluster command first")
    doc = json.loads(lp.read_text())
    layout = SubcategoryLayout.from_dict(doc)
    cc = cfg.classes[cls]
    all_samples = samples if samples is not None else load_annotations(cfg)
    mine = class_samples(cfg, cls, all_samples)
    if len(mine) != len(layout.assignments):
        raise DataError(f"layout for {cls} has {len(layout.assignments)} samples, annotations give {len(mine)}; "
                         "re-run the cluster command")
    families = COMBINATIONS[cc.features]
    paths = sorted({s.image for s in all_samples})
    # everything of this class (any difficulty) must not become a negative
    same = [s for s in all_samples if s.class_name in cc.labels]
    boxes_by_image = {p: [] for p in paths}
    for s in same:
        boxes_by_image[s.image].append(s.box)
    all_boxes = {p: [] for p in paths}
    for s in all_samples:
        all_boxes[s.image].append(s.box)
    gts = [np.array([b.as_tuple() for b in boxes_by_image[p]]).reshape(-1, 4) for p in paths]
    images = _ImageStore()
    cache = training_pyramids(cfg.detect.scales_per_octave)
    out_dir = model_dir(cfg, cls)
    out_dir.mkdir(parents=True, exist_ok=True)
    for stale in out_dir.glob("subcat_*.json"):
        stale.unlink()
    reports = {}
    for k, cw in enumerate(layout.windows):
        t0 = time.perf_counter()
        rng = np.random.default_rng([cfg.seed, k])
        geom = WindowGeometry(cw.width, cw.height, cw.padded_width, cw.padded_height)
        feat_layout = layout_for(geom, families)
        members = [s for s, a in zip(mine, layout.assignments) if a == k]
        pos = positive_features(members, images, geom, feat_layout, cc.jitter, rng)
        cal = positive_features(members, images, geom, feat_layout, cc.threshold_jitter, rng)
        neg = negative_features(paths, all_boxes, geom, feat_layout, cc.negatives_per_image, rng, images)
        source = ImageWindowSource(pos, neg, paths, families, cache, gts, overlap=cc.hard_negative_overlap,
                                   per_image=cc.hard_negatives_per_image, stride=cfg.detect.stride,
                                   threads=threads)
        report = TrainingReport()
        model = bootstrap_train(source, cc.schedule, cc.nu, cc.depth, cc.hard_negative_cap, report,
                                window=geom, layout=feat_layout, threshold_positives=cal)
        model.class_name, model.subcategory = cls, k
        # calibration set: training positives and the final negative pool
        pool = np.concatenate([neg, *source.harvested])
        s_pos, s_neg = score_matrix(model, pos), score_matrix(model, pool)
        model.calibration = fit_platt(np.concatenate([s_pos, s_neg]),
                                      np.concatenate([np.ones(len(s_pos)), -np.ones(len(s_neg))]))
        save_model(model, out_dir / f"subcat_{k:02d}.json")
        reports[k] = {
            "n_positives": int(len(pos)), "n_initial_negatives": int(len(neg)),
            "n_weak_learners": len(model), "window": [cw.width, cw.height],
            "padded_window": [cw.padded_width, cw.padded_height],
            "calibration": [model.calibration.A, model.calibration.B],
            "seconds": round(time.perf_counter() - t0, 3), **report.as_dict(),
        }
        log.info("class %s subcategory %d: %d learners, %d positives", cls, k, len(model), len(pos))
    (out_dir / "training_report.json").write_text(json.dumps(reports, indent=1, sort_keys=True) + "\n")
    return reports


# -- detect / eval -------------------------------------------------------------

def load_bank(cfg: PipelineConfig, classes=None) -> DetectorBank:
    models = {}
    for cls in classes or sorted(cfg.classes):
        d = model_dir(cfg, cls)
        files = sorted(d.glob("subcat_*.json"))
        if files:
            models[cls] = [load_model(f) for f in files]
    return DetectorBank(models, {c: cfg.classes[c].nms for c in models}, cfg.detect.stride,
                        cfg.detect.scales_per_octave)


def cmd_detect(cfg: PipelineConfig, image_paths, out_path, bank: DetectorBank | None = None,
               threads: int = 1) -> list[tuple[str, Detection]]:
    bank = bank if bank is not None else load_bank(cfg)
    rows = []
    for p in image_paths:
        dets = detect_all(read_image(p), bank, threads)
        rows += [(image_id(p), d) for d in dets]
    write_detections(out_path, rows)
    return rows


def cmd_eval(cfg: PipelineConfig, detections, samples, out_dir) -> dict:
    """Per-class AP/AUC report plus two-column recall/precision files."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rule = DifficultyRule()
    report = {}
    for cls in sorted(cfg.classes):
        cc = cfg.classes[cls]
        gts: dict[str, list[GroundTruth]] = {}
        for s in samples:
            if s.class_name not in cc.labels:
                continue
            ignore = cc.difficulty is not None and not rule.admits(s.difficulty, cc.difficulty)
            gts.setdefault(image_id(s.image), []).append(GroundTruth(s.box, ignore))
        dets: dict[str, list[Detection]] = {}
        for img, d in detections:
            if d.class_name == cls:
                dets.setdefault(img, []).append(d)
        curve, _, _ = evaluate_class(dets, gts, cc.eval_overlap, cc.protocol, cc.matcher)
        report[cls] = {
            "AP": average_precision(curve), "AUC": auc(curve), "max_recall": curve.max_recall,
            "n_gt": curve.n_gt, "n_detections": int(sum(len(v) for v in dets.values())),
            "overlap": cc.eval_overlap, "protocol": cc.protocol,
            "pr_file": f"{cls}_pr.txt",
        }
        with open(out_dir / f"{cls}_pr.txt", "w") as fh:
            fh.write("# recall precision\n")
            for r, p in zip(curve.recall, curve.precision):
                fh.write(f"{r:.6f} {p:.6f}\n")
    (out_dir / "eval_report.json").write_text(json.dumps(report, indent=1, sort_keys=True) + "\n")
    return report
