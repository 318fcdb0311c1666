"""Decision-tree weak learners, shrinkage AdaBoost and soft-cascade thresholds."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numba import njit

from .calibrate import CalibrationParams

log = logging.getLogger(__name__)

N_BINS = 256
THRESHOLD_SLACK = 1e-6
HARD_NEGATIVE_CAP = 10_000
DEFAULT_SCHEDULE = (64, 256, 1024, 2048)
MODEL_FORMAT = "trafficdet-boosted-model"
MODEL_VERSION = 1

REJECTED = None  # marker returned by cascade_evaluate


class TrainingError(ValueError):
    pass


@dataclass
class DecisionTree:
    """Complete binary tree stored breadth first.

    Internal node i has children 2i+1 (x < threshold) and 2i+2 (x >= threshold).
    Leaves hold votes in {-1, +1}.
    """

    features: np.ndarray  # (2**depth - 1,) int
    thresholds: np.ndarray  # (2**depth - 1,) float
    votes: np.ndarray  # (2**depth,) int8
    degenerate: bool = False

    @property
    def depth(self) -> int:
        return int(round(math.log2(len(self.votes))))

    def predict(self, x: np.ndarray) -> np.ndarray:
        """Votes for a (n, d) matrix or a single (d,) vector."""
        x = np.asarray(x)
        single = x.ndim == 1
        x = np.atleast_2d(x)
        node = np.zeros(len(x), dtype=np.int64)
        n_internal = len(self.features)
        for _ in range(self.depth):
            v = x[np.arange(len(x)), self.features[node]]
            node = 2 * node + 1 + (v >= self.thresholds[node])
        out = self.votes[node - n_internal].astype(np.int64)
        return out[0] if single else out


class Quantizer:
    """Per-feature 256-bin quantization fitted on the training matrix."""

    def __init__(self, X: np.ndarray):
        self.lo = X.min(axis=0).astype(np.float64)
        hi = X.max(axis=0).astype(np.float64)
        self.step = np.where(hi > self.lo, (hi - self.lo) / N_BINS, 1.0)

    def transform(self, X: np.ndarray) -> np.ndarray:
        b = np.floor((X - self.lo) / self.step)
        return np.clip(b, 0, N_BINS - 1).astype(np.uint8)

    def threshold(self, feature: int, b: int) -> float:
        """Raw threshold separating bins <= b from bins > b."""
        return float(self.lo[feature] + (b + 1) * self.step[feature])


@njit(cache=True, nogil=True)
def _split_histograms(bins, sel, labels_pos, w):
    n_feat = bins.shape[1]
    hist = np.zeros((2, n_feat, N_BINS))
    for i in sel:
        lab = 1 if labels_pos[i] else 0
        wi = w[i]
        for f in range(n_feat):
            hist[lab, f, bins[i, f]] += wi
    return hist


@njit(cache=True, nogil=True)
def _scan_splits(hist):
    n_feat = hist.shape[1]
    best_err, best_f, best_b = np.inf, 0, 0
    for f in range(n_feat):
        tneg, tpos = 0.0, 0.0
        for b in range(N_BINS):
            tneg += hist[0, f, b]
            tpos += hist[1, f, b]
        lneg, lpos = 0.0, 0.0
        for b in range(N_BINS):
            lneg += hist[0, f, b]
            lpos += hist[1, f, b]
            err = min(lneg, lpos) + min(tneg - lneg, tpos - lpos)
            if err < best_err:
                best_err, best_f, best_b = err, f, b
    return best_f, best_b


def _best_split(bins, labels_pos, w, mask):
    """Exhaustive (feature, bin) search on samples in ``mask``.

    Returns (feature, bin) minimising the weighted misclassification of the
    split with weighted-majority leaves; the first minimum in (feature, bin)
    order wins ties.
    """
    hist = _split_histograms(bins, np.flatnonzero(mask), labels_pos, w)
    f, b = _scan_splits(hist)
    return int(f), int(b)


def _majority(labels, w, mask) -> int:
    return 1 if w[mask & (labels > 0)].sum() > w[mask & (labels < 0)].sum() else -1


def train_tree(features, labels, weights, depth, *, _quantized=None) -> DecisionTree:
    """Greedy depth-limited tree minimising weighted misclassification per split."""
    X = np.asarray(features)
    y = np.asarray(labels)
    w = np.asarray(weights, dtype=np.float64)
    if not 1 <= depth <= 5:
        raise TrainingError("tree depth must be in 1..5")
    n_internal = 2**depth - 1
    if np.all(y == y[0]):
        log.warning("train_tree: all labels equal, single-leaf tree")
        return DecisionTree(
            np.zeros(n_internal, dtype=np.int64),
            np.full(n_internal, np.inf),
            np.full(n_internal + 1, int(y[0]), dtype=np.int8),
            degenerate=True,
        )
    q, bins = _quantized if _quantized is not None else _quantize(X)
    labels_pos = y > 0
    feats = np.zeros(n_internal, dtype=np.int64)
    thrs = np.full(n_internal, np.inf)
    votes = np.ones(n_internal + 1, dtype=np.int8)
    masks = {0: np.ones(len(y), dtype=bool)}
    for node in range(n_internal):
        mask = masks.pop(node)
        has_both = mask.any() and labels_pos[mask].any() and (~labels_pos[mask]).any()
        if has_both:
            f, b = _best_split(bins, labels_pos, w, mask)
            thr = q.threshold(f, b) if b < N_BINS - 1 else np.inf
            feats[node], thrs[node] = f, thr
            right = X[:, f] >= thr
            children = (mask & ~right, mask & right)
        else:
            children = (mask, np.zeros_like(mask))
        for side, cm in enumerate(children):
            child = 2 * node + 1 + side
            if child < n_internal:
                masks[child] = cm
            else:
                # empty leaves inherit the parent's majority
                m = cm if cm.any() else mask
                votes[child - n_internal] = _majority(y, w, m)
    return DecisionTree(feats, thrs, votes)


def _quantize(X):
    q = Quantizer(X)
    return q, np.ascontiguousarray(q.transform(X))


@dataclass
class WindowGeometry:
    """Model window in pixels at model resolution.

    ``width``/``height`` is the object box; ``padded_width``/``padded_height`` the
    full scanned window (multiples of the grid shrink) with the object centred.
    """

    width: float
    height: float
    padded_width: int
    padded_height: int

    @property
    def margin_x(self) -> float:
        return (self.padded_width - self.width) / 2

    @property
    def margin_y(self) -> float:
        return (self.padded_height - self.height) / 2


@dataclass
class FeatureLayout:
    """Features are channel-major: index = c * rows * cols + r * cols + col."""

    channels: tuple[str, ...]
    rows: int
    cols: int
    shrink: int = 4

    @property
    def size(self) -> int:
        return len(self.channels) * self.rows * self.cols


@dataclass
class BoostedModel:
    trees: list[DecisionTree]
    coefficients: np.ndarray
    nu: float
    reject_thresholds: np.ndarray
    window: WindowGeometry | None = None
    layout: FeatureLayout | None = None
    calibration: CalibrationParams | None = None
    class_name: str = ""
    subcategory: int = 0

    def __post_init__(self):
        self.coefficients = np.asarray(self.coefficients, dtype=np.float64)
        self.reject_thresholds = np.asarray(self.reject_thresholds, dtype=np.float64)
        if not 0 < self.nu <= 1:
            raise TrainingError("shrinkage must lie in (0, 1]")
        if not len(self.trees) == len(self.coefficients) == len(self.reject_thresholds):
            raise TrainingError("trees, coefficients and thresholds must have equal counts")

    def __len__(self):
        return len(self.trees)

    @property
    def depth(self) -> int:
        return self.trees[0].depth if self.trees else 0

    def tree_arrays(self):
        """Stacked (features, thresholds, votes) arrays, one row per tree."""
        if not self.trees:
            return np.zeros((0, 1), np.int64), np.zeros((0, 1)), np.zeros((0, 2), np.int8)
        cached = self.__dict__.get("_arrays")
        if cached is not None and cached[0] is self.trees and cached[1] == len(self.trees):
            return cached[2]
        arrays = (
            np.stack([t.features for t in self.trees]),
            np.stack([t.thresholds for t in self.trees]),
            np.stack([t.votes for t in self.trees]),
        )
        self.__dict__["_arrays"] = (self.trees, len(self.trees), arrays)
        return arrays


@dataclass
class TrainingReport:
    errors: list[float] = field(default_factory=list)
    normalizers: list[float] = field(default_factory=list)
    weight_sums: list[float] = field(default_factory=list)
    flags: list[str] = field(default_factory=list)
    harvested: list[int] = field(default_factory=list)

    def as_dict(self):
        return {
            "errors": self.errors,
            "normalizers": self.normalizers,
            "weight_sums": self.weight_sums,
            "flags": self.flags,
            "harvested": self.harvested,
        }


def _check_xy(features, labels):
    X = np.asarray(features)
    y = np.asarray(labels)
    if X.ndim != 2 or len(X) == 0:
        raise TrainingError("empty training data")
    if len(y) != len(X):
        raise TrainingError("features and labels differ in length")
    if not np.all(np.isfinite(X)):
        raise TrainingError("non-finite feature values")
    if not set(np.unique(y)) <= {-1, 1}:
        raise TrainingError("labels must be -1/+1")
    return X, y.astype(np.int64)


MIN_ERROR = 1e-10


def adaboost_train(features, labels, T: int, nu: float = 0.1, depth: int = 2, report: TrainingReport | None = None) -> BoostedModel:
    """Shrinkage AdaBoost over decision trees.

    Stops early when a weak learner is perfect (kept, with its error clipped to
    MIN_ERROR) or no better than chance (discarded).
    """
    X, y = _check_xy(features, labels)
    if T < 1:
        raise TrainingError("T must be >= 1")
    if not 0 < nu <= 1:
        raise TrainingError("shrinkage must lie in (0, 1]")
    report = report if report is not None else TrainingReport()
    quantized = _quantize(X)
    w = np.full(len(y), 1.0 / len(y))
    trees, coefs = [], []
    for t in range(T):
        tree = train_tree(X, y, w, depth, _quantized=quantized)
        h = tree.predict(X)
        e = float(w[h != y].sum())
        report.errors.append(e)
        if e >= 0.5:
            report.flags.append(f"round {t}: weak learner error {e:.6g} >= 0.5, stopped")
            log.warning(report.flags[-1])
            break
        perfect = e <= 0
        ec = max(e, MIN_ERROR)
        alpha = 0.5 * math.log((1 - ec) / ec)
        a = nu * alpha
        trees.append(tree)
        coefs.append(a)
        w = w * np.exp(-a * y * h)
        z = float(w.sum())
        w /= z
        report.normalizers.append(z)
        report.weight_sums.append(float(w.sum()))
        if perfect:
            report.flags.append(f"round {t}: zero training error, stopped")
            log.info(report.flags[-1])
            break
    return BoostedModel(trees, np.array(coefs), nu, np.full(len(trees), -np.inf))


def boosted_score(model: BoostedModel, x) -> float:
    """Sum of a_t * h_t(x)."""
    x = np.asarray(x)
    if model.layout is not None and x.shape[-1] != model.layout.size:
        raise TrainingError(f"feature vector of length {x.shape[-1]}, model expects {model.layout.size}")
    if not model.trees:
        return 0.0
    return float(sum(a * t.predict(x) for a, t in zip(model.coefficients, model.trees)))


def score_matrix(model: BoostedModel, X) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X))
    s = np.zeros(len(X))
    for a, t in zip(model.coefficients, model.trees):
        s += a * t.predict(X)
    return s


def partial_sums(model: BoostedModel, X) -> np.ndarray:
    """(n, T) running sums H_t for every sample."""
    X = np.atleast_2d(np.asarray(X))
    if not model.trees:
        return np.zeros((len(X), 0))
    contrib = np.stack([a * t.predict(X) for a, t in zip(model.coefficients, model.trees)], axis=1)
    return np.cumsum(contrib, axis=1)


def cascade_evaluate(model: BoostedModel, x):
    """Soft-cascade score, or REJECTED at the first round with H_t < r_t."""
    x = np.asarray(x)
    h = 0.0
    for a, t, r in zip(model.coefficients, model.trees, model.reject_thresholds):
        h += a * t.predict(x)
        if h < r:
            return REJECTED
    return float(h)


def compute_reject_thresholds(model: BoostedModel, positive_traces, slack: float = THRESHOLD_SLACK) -> np.ndarray:
    """r_t = nu * (min over positives of the unshrunk running sum - slack).

    ``positive_traces`` are running sums of the model (already shrunk by nu);
    dividing by nu recovers the base trace, so the stored thresholds are the
    base thresholds scaled by nu.
    """
    traces = np.atleast_2d(np.asarray(positive_traces, dtype=np.float64))
    if traces.size == 0 or len(traces) == 0:
        raise TrainingError("at least one positive trace is required")
    base = traces / model.nu
    return model.nu * (base.min(axis=0) - slack)


def set_reject_thresholds(model: BoostedModel, positives) -> None:
    model.reject_thresholds = compute_reject_thresholds(model, partial_sums(model, positives))


def bootstrap_train(source, schedule=DEFAULT_SCHEDULE, nu: float = 0.1, depth: int = 2,
                    cap: int = HARD_NEGATIVE_CAP, report: TrainingReport | None = None,
                    window: WindowGeometry | None = None, layout: FeatureLayout | None = None,
                    threshold_positives=None) -> BoostedModel:
    """Train with hard-negative bootstrapping.

    ``source`` provides ``positives()``, ``negatives()`` (the initial random
    pool) and ``harvest(model, cap)`` returning feature rows of the model's
    highest-scoring false positives (at most ``cap``). Every round retrains from
    scratch with the next weak-learner count; harvested windows accumulate.
    ``window`` and ``layout`` are attached to every intermediate model so the
    source can scan with it. Reject thresholds come from the training positives
    plus ``threshold_positives`` (extra positives never trained on), if given.
    """
    schedule = list(schedule)
    if not schedule:
        raise TrainingError("empty schedule")
    report = report if report is not None else TrainingReport()
    pos = np.asarray(source.positives())
    neg = np.asarray(source.negatives())
    trace_pos = pos if threshold_positives is None else np.concatenate([pos, np.asarray(threshold_positives)])
    model = None
    for k, T in enumerate(schedule):
        X = np.concatenate([pos, neg])
        y = np.concatenate([np.ones(len(pos), np.int64), -np.ones(len(neg), np.int64)])
        round_report = TrainingReport()
        model = adaboost_train(X, y, T, nu, depth, report=round_report)
        model.window, model.layout = window, layout
        set_reject_thresholds(model, trace_pos)
        report.errors, report.normalizers, report.weight_sums = (
            round_report.errors, round_report.normalizers, round_report.weight_sums)
        report.flags += [f"bootstrap {k}: {f}" for f in round_report.flags]
        if k == len(schedule) - 1:
            break
        hard = np.asarray(source.harvest(model, cap))
        report.harvested.append(int(len(hard)))
        if len(hard) == 0:
            report.flags.append(f"bootstrap {k}: no hard negatives harvested, reusing pool")
            log.warning(report.flags[-1])
            continue
        neg = np.concatenate([neg, hard.reshape(-1, pos.shape[1])])
    return model


# -- serialization ---------------------------------------------------------

def _hex(a):
    return [float(v).hex() for v in np.ravel(a)]


def _unhex(a):
    return np.array([float.fromhex(v) for v in a], dtype=np.float64)


def model_to_dict(model: BoostedModel) -> dict:
    feats, thrs, votes = model.tree_arrays()
    d = {
        "format": MODEL_FORMAT,
        "version": MODEL_VERSION,
        "class": model.class_name,
        "subcategory": model.subcategory,
        "shrinkage": float(model.nu).hex(),
        "depth": model.depth,
        "n_trees": len(model),
        "tree_features": feats.tolist(),
        "tree_thresholds": [_hex(r) for r in thrs],
        "tree_votes": votes.astype(int).tolist(),
        "coefficients": _hex(model.coefficients),
        "reject_thresholds": _hex(model.reject_thresholds),
    }
    if model.window is not None:
        g = model.window
        d["window"] = {
            "width": float(g.width).hex(),
            "height": float(g.height).hex(),
            "padded_width": g.padded_width,
            "padded_height": g.padded_height,
        }
    if model.layout is not None:
        lay = model.layout
        d["layout"] = {"channels": list(lay.channels), "rows": lay.rows, "cols": lay.cols, "shrink": lay.shrink}
    if model.calibration is not None:
        d["calibration"] = {"A": float(model.calibration.A).hex(), "B": float(model.calibration.B).hex()}
    return d


def model_from_dict(d: dict) -> BoostedModel:
    if d.get("format") != MODEL_FORMAT:
        raise ValueError("not a boosted model document")
    if d.get("version") != MODEL_VERSION:
        raise ValueError(f"unsupported model version {d.get('version')}")
    trees = [
        DecisionTree(np.array(f, dtype=np.int64), _unhex(t), np.array(v, dtype=np.int8))
        for f, t, v in zip(d["tree_features"], d["tree_thresholds"], d["tree_votes"])
    ]
    window = layout = calibration = None
    if "window" in d:
        g = d["window"]
        window = WindowGeometry(float.fromhex(g["width"]), float.fromhex(g["height"]),
                                g["padded_width"], g["padded_height"])
    if "layout" in d:
        lay = d["layout"]
        layout = FeatureLayout(tuple(lay["channels"]), lay["rows"], lay["cols"], lay["shrink"])
    if "calibration" in d:
        c = d["calibration"]
        calibration = CalibrationParams(float.fromhex(c["A"]), float.fromhex(c["B"]))
    return BoostedModel(
        trees, _unhex(d["coefficients"]), float.fromhex(d["shrinkage"]), _unhex(d["reject_thresholds"]),
        window, layout, calibration, d.get("class", ""), d.get("subcategory", 0),
    )


def save_model(model: BoostedModel, path) -> None:
    Path(path).write_text(json.dumps(model_to_dict(model), indent=1, sort_keys=True) + "\n")


def load_model(path) -> BoostedModel:
    return model_from_dict(json.loads(Path(path).read_text()))
