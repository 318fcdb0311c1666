"""Object subcategorization by normalized spectral clustering."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import pdist, squareform
from sklearn.cluster import KMeans

from .channels import SHRINK, compute_acf

log = logging.getLogger(__name__)

KMEANS_RESTARTS = 50
MIN_CLUSTER_SIZE = 20
MIN_WINDOW = 8
OCCLUSION_STATES = {0: "none", 1: "partial", 2: "large", 3: "unknown"}


class ClusteringError(RuntimeError):
    pass


@dataclass(frozen=True)
class GeometricFeature:
    aspect_ratio: float
    orientation: float | None = None
    truncation: float | None = None
    occlusion_index: int | None = None

    def __post_init__(self):
        if not self.aspect_ratio > 0:
            raise ValueError("aspect ratio must be positive")
        if self.truncation is not None and not 0 <= self.truncation <= 1:
            raise ValueError("truncation must lie in [0, 1]")
        if self.occlusion_index is not None and self.occlusion_index not in OCCLUSION_STATES:
            raise ValueError("occlusion index must be in 0..3")


GEOMETRIC_COLUMNS = ("sin_orientation", "cos_orientation", "aspect_ratio", "truncation", "occlusion")


def _zscore(M: np.ndarray) -> np.ndarray:
    mu = M.mean(axis=0)
    sd = M.std(axis=0)
    return np.where(sd > 0, (M - mu) / np.where(sd > 0, sd, 1.0), 0.0)


def geometric_features(annotations) -> tuple[np.ndarray, tuple[str, ...]]:
    """Standardized geometric rows and the names of the columns used.

    A column is only used when every annotation carries the field; orientation
    contributes a (sin, cos) pair.
    """
    feats = [a if isinstance(a, GeometricFeature) else GeometricFeature(*a) for a in annotations]
    cols: dict[str, list[float]] = {}
    if all(f.orientation is not None for f in feats):
        cols["sin_orientation"] = [np.sin(f.orientation) for f in feats]
        cols["cos_orientation"] = [np.cos(f.orientation) for f in feats]
    cols["aspect_ratio"] = [f.aspect_ratio for f in feats]
    if all(f.truncation is not None for f in feats):
        cols["truncation"] = [f.truncation for f in feats]
    if all(f.occlusion_index is not None for f in feats):
        cols["occlusion"] = [float(f.occlusion_index) for f in feats]
    missing = [c for c in GEOMETRIC_COLUMNS if c not in cols]
    if missing:
        log.info("geometric_features: restricted feature set, missing %s", ", ".join(missing))
    M = np.array(list(cols.values()), dtype=np.float64).T
    return _zscore(M), tuple(cols)


def median_size(heights, widths=None):
    h = float(np.median(heights))
    if widths is None:
        return h
    return h, float(np.median(widths))


def visual_features(crops, size: tuple[int, int]) -> np.ndarray:
    """Flattened 10-channel ACF of every crop resized to ``size`` = (height, width)."""
    import cv2

    h, w = size
    rows = []
    for crop in crops:
        img = cv2.resize(np.asarray(crop, dtype=np.uint8), (int(w), int(h)), interpolation=cv2.INTER_AREA)
        rows.append(compute_acf(img).data.ravel())
    return np.array(rows, dtype=np.float64)


def affinity_matrix(points, sigma: float | None = None) -> np.ndarray:
    """Gaussian affinity, zero diagonal; sigma defaults to the median pairwise distance."""
    X = np.asarray(points, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    d = pdist(X)
    if sigma is None:
        sigma = float(np.median(d)) if len(d) else 1.0
        if sigma <= 0:
            sigma = 1.0
    W = squareform(np.exp(-(d**2) / (2 * sigma**2)))
    np.fill_diagonal(W, 0.0)
    return W


def normalized_laplacian(W: np.ndarray) -> np.ndarray:
    deg = W.sum(axis=1)
    inv = np.where(deg > 0, 1 / np.sqrt(np.where(deg > 0, deg, 1.0)), 0.0)
    return np.eye(len(W)) - inv[:, None] * W * inv[None, :]


def spectral_embedding(W: np.ndarray, K: int) -> np.ndarray:
    L = normalized_laplacian(W)
    try:
        _, vecs = np.linalg.eigh((L + L.T) / 2)
    except np.linalg.LinAlgError as exc:
        raise ClusteringError(f"eigen-solver failed (condition {np.linalg.cond(L):.3g})") from exc
    U = vecs[:, :K]
    norms = np.linalg.norm(U, axis=1, keepdims=True)
    return U / np.where(norms > 0, norms, 1.0)


def spectral_cluster_affinity(W: np.ndarray, K: int, seed: int = 0) -> np.ndarray:
    n = len(W)
    if not 1 <= K <= n:
        raise ValueError(f"need 1 <= K <= n, got K={K}, n={n}")
    if K == 1:
        return np.zeros(n, dtype=np.int64)
    U = spectral_embedding(W, K)
    km = KMeans(K, init="k-means++", n_init=KMEANS_RESTARTS, random_state=seed)
    return km.fit_predict(U).astype(np.int64)


def spectral_cluster(points, K: int, seed: int = 0, sigma: float | None = None) -> np.ndarray:
    """Ng-Jordan-Weiss normalized spectral clustering, labels in [0, K)."""
    X = np.asarray(points, dtype=np.float64)
    if not 1 <= K <= len(X):
        raise ValueError(f"need 1 <= K <= n, got K={K}, n={len(X)}")
    return spectral_cluster_affinity(affinity_matrix(X, sigma), K, seed)


def canonical_labels(labels) -> np.ndarray:
    """Relabel clusters in order of first appearance."""
    labels = np.asarray(labels)
    mapping: dict[int, int] = {}
    return np.array([mapping.setdefault(int(l), len(mapping)) for l in labels], dtype=np.int64)


def merge_small_clusters(points, labels, min_size: int) -> tuple[np.ndarray, list[str]]:
    """Fold clusters below ``min_size`` into the cluster with the nearest centroid."""
    X = np.asarray(points, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    labels = np.asarray(labels).copy()
    flags = []
    while True:
        ids, counts = np.unique(labels, return_counts=True)
        if len(ids) <= 1 or counts.min() >= min_size:
            break
        small = ids[np.argmin(counts)]
        cents = {i: X[labels == i].mean(axis=0) for i in ids}
        others = [i for i in ids if i != small]
        target = min(others, key=lambda i: (np.linalg.norm(cents[i] - cents[small]), i))
        flags.append(f"cluster {small} ({counts.min()} samples) merged into cluster {target}")
        log.warning("degenerate subcategory: %s", flags[-1])
        labels[labels == small] = target
    # compact to 0..K'-1
    _, labels = np.unique(labels, return_inverse=True)
    return labels.astype(np.int64), flags


def round_to(v: float, m: int) -> int:
    return max(m, int(round(v / m)) * m)


@dataclass
class ClassGeometry:
    """Per-class window defaults: object base height and margin in pixels.

    ``fixed_width`` pins the object width (traffic-sign style square models);
    ``padded`` pins the padded window side instead of deriving it from margins.
    """

    base_height: int
    margin: int = 4
    fixed_width: int | None = None
    padded: int | None = None


@dataclass
class ClusterWindow:
    width: int
    height: int
    padded_width: int
    padded_height: int


@dataclass
class SubcategoryLayout:
    K: int
    assignments: np.ndarray
    windows: list[ClusterWindow]
    medoids: list[int] = field(default_factory=list)
    flags: list[str] = field(default_factory=list)

    def sizes(self) -> list[int]:
        return [int(np.sum(self.assignments == k)) for k in range(self.K)]

    def as_dict(self) -> dict:
        return {
            "K": self.K,
            "assignments": [int(a) for a in self.assignments],
            "clusters": [
                {
                    "size": size,
                    "window": [w.width, w.height],
                    "padded_window": [w.padded_width, w.padded_height],
                    "medoid": m,
                }
                for size, w, m in zip(self.sizes(), self.windows, self.medoids)
            ],
            "flags": list(self.flags),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SubcategoryLayout":
        wins = [ClusterWindow(c["window"][0], c["window"][1], c["padded_window"][0], c["padded_window"][1])
                for c in d["clusters"]]
        return cls(d["K"], np.array(d["assignments"], dtype=np.int64), wins,
                   [c["medoid"] for c in d["clusters"]], list(d.get("flags", [])))


def cluster_window(aspect_ratios, geom: ClassGeometry) -> ClusterWindow:
    h = geom.base_height
    if geom.fixed_width is not None:
        w = geom.fixed_width
    else:
        w = round_to(h * float(np.median(aspect_ratios)), SHRINK)
    w = max(w, MIN_WINDOW)
    if geom.padded is not None:
        pw = ph = geom.padded
    else:
        pw, ph = w + 2 * geom.margin, h + 2 * geom.margin
    # the scanned window must cover whole grid cells
    return ClusterWindow(w, h, round_up(pw, SHRINK), round_up(ph, SHRINK))


def round_up(v: float, m: int) -> int:
    return int(-(-v // m) * m)


def subcategorize(points, aspect_ratios, K: int, geom: ClassGeometry, seed: int = 0,
                  min_size: int = MIN_CLUSTER_SIZE) -> SubcategoryLayout:
    """Cluster a class's samples in a prepared feature space and derive windows.

    ``points`` is the clustering feature matrix (geometric, visual or the
    aspect ratio column); ``aspect_ratios`` sizes the per-cluster windows.
    """
    if K < 1:
        raise ValueError("K must be >= 1")
    X = np.asarray(points, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    ar = np.asarray(aspect_ratios, dtype=np.float64)
    labels = canonical_labels(spectral_cluster(X, K, seed)) if K > 1 else np.zeros(len(X), np.int64)
    flags: list[str] = []
    if K > 1:
        labels, flags = merge_small_clusters(X, labels, min_size)
    k_final = int(labels.max()) + 1
    windows, medoids = [], []
    for k in range(k_final):
        idx = np.flatnonzero(labels == k)
        windows.append(cluster_window(ar[idx], geom))
        c = X[idx]
        if len(idx) <= 3000:
            dist = squareform(pdist(c)).sum(axis=1)
        else:
            dist = np.linalg.norm(c - c.mean(axis=0), axis=1)
        medoids.append(int(idx[int(np.argmin(dist))]))
    return SubcategoryLayout(k_final, labels, windows, medoids, flags)
