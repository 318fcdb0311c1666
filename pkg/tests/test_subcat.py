import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.metrics import adjusted_rand_score

from trafficdet.subcat import (
    ClassGeometry,
    GeometricFeature,
    SubcategoryLayout,
    affinity_matrix,
    canonical_labels,
    cluster_window,
    geometric_features,
    median_size,
    merge_small_clusters,
    normalized_laplacian,
    round_to,
    spectral_cluster,
    spectral_cluster_affinity,
    subcategorize,
)


def blobs(rng, centers, n=30, sd=0.2):
    X = np.concatenate([rng.normal(c, sd, (n, len(c))) for c in centers])
    y = np.repeat(np.arange(len(centers)), n)
    return X, y


class TestSpectral:
    def test_planted_blobs(self, rng):
        X, y = blobs(rng, [(0, 0), (5, 0), (0, 5)])
        labels = spectral_cluster(X, 3)
        assert adjusted_rand_score(y, labels) == 1.0

    def test_disconnected_components(self):
        sizes = [4, 6, 5]
        W = np.zeros((15, 15))
        start = 0
        for s in sizes:
            W[start : start + s, start : start + s] = 1.0
            start += s
        np.fill_diagonal(W, 0)
        truth = np.repeat(np.arange(3), sizes)
        assert adjusted_rand_score(truth, spectral_cluster_affinity(W, 3)) == 1.0

    def test_laplacian_of_regular_graph(self):
        W = np.ones((4, 4)) - np.eye(4)
        L = normalized_laplacian(W)
        np.testing.assert_allclose(L, np.eye(4) - W / 3)
        assert np.linalg.eigvalsh(L).min() == pytest.approx(0.0, abs=1e-12)

    def test_affinity_values(self):
        W = affinity_matrix(np.array([[0.0], [1.0], [3.0]]), sigma=1.0)
        assert W[0, 1] == pytest.approx(math.exp(-0.5))
        assert W[0, 2] == pytest.approx(math.exp(-4.5))
        assert np.all(np.diag(W) == 0) and np.allclose(W, W.T)

    def test_affinity_default_sigma_is_median_distance(self):
        X = np.array([[0.0], [1.0], [3.0]])  # distances 1, 3, 2 -> median 2
        np.testing.assert_allclose(affinity_matrix(X), affinity_matrix(X, sigma=2.0))

    def test_k_one_and_bounds(self, rng):
        X = rng.normal(size=(5, 2))
        assert np.all(spectral_cluster(X, 1) == 0)
        with pytest.raises(ValueError):
            spectral_cluster(X, 6)

    def test_seeded_determinism(self, rng):
        X, _ = blobs(rng, [(0, 0), (1, 1)], sd=0.8)
        np.testing.assert_array_equal(spectral_cluster(X, 2, seed=3), spectral_cluster(X, 2, seed=3))

    @settings(max_examples=10, deadline=None)
    @given(seed=st.integers(0, 2**31), perm_seed=st.integers(0, 2**31))
    def test_permutation_equivariance_on_separated_data(self, seed, perm_seed):
        X, y = blobs(np.random.default_rng(seed), [(0, 0), (8, 8)], n=15)
        perm = np.random.default_rng(perm_seed).permutation(len(X))
        a = spectral_cluster(X, 2)
        b = spectral_cluster(X[perm], 2)
        assert adjusted_rand_score(a[perm], b) == 1.0


class TestGeometric:
    def test_orientation_wraps(self):
        angles = [math.pi - 1e-3, -math.pi + 1e-3, 0.0, math.pi / 2, -math.pi / 2]
        rows, names = geometric_features([(1.0, a) for a in angles])
        assert names[:2] == ("sin_orientation", "cos_orientation")
        assert np.linalg.norm(rows[0] - rows[1]) < 0.01
        assert np.linalg.norm(rows[0] - rows[2]) > 1.0

    def test_restricted_columns(self):
        rows, names = geometric_features([GeometricFeature(1.0), GeometricFeature(2.0)])
        assert names == ("aspect_ratio",)
        np.testing.assert_allclose(rows[:, 0], [-1, 1])

    def test_full_columns(self):
        rows, names = geometric_features([(1.0, 0.1, 0.0, 0), (1.5, 0.2, 0.3, 2)])
        assert names == ("sin_orientation", "cos_orientation", "aspect_ratio", "truncation", "occlusion")
        np.testing.assert_allclose(rows.mean(axis=0), 0, atol=1e-12)

    @pytest.mark.parametrize("args", [(0.0,), (1.0, None, 1.5), (1.0, None, None, 4)])
    def test_validation(self, args):
        with pytest.raises(ValueError):
            GeometricFeature(*args)


class TestWindows:
    def test_median(self):
        assert median_size([20, 30, 100]) == 30
        assert median_size([20, 30, 100], [10, 20, 40]) == (30, 20)

    def test_round_to(self):
        assert round_to(9.9, 4) == 8 and round_to(10.1, 4) == 12 and round_to(1.0, 4) == 4

    def test_cluster_window_from_margins(self):
        w = cluster_window([0.4, 0.5, 0.6], ClassGeometry(24, margin=4))
        assert (w.width, w.height, w.padded_width, w.padded_height) == (12, 24, 20, 32)

    def test_fixed_sign_window(self):
        w = cluster_window([1.0], ClassGeometry(20, fixed_width=20, padded=30))
        assert (w.width, w.height, w.padded_width, w.padded_height) == (20, 20, 32, 32)

    def test_narrow_clamped(self):
        assert cluster_window([0.1], ClassGeometry(24)).width == 8


class TestMerge:
    def test_small_cluster_folded_into_nearest(self):
        X = np.array([0.0] * 10 + [10.0] * 10 + [1.0] * 2)
        labels = np.array([0] * 10 + [1] * 10 + [2] * 2)
        out, flags = merge_small_clusters(X, labels, 5)
        assert list(out[-2:]) == [0, 0] and len(flags) == 1
        assert set(out) == {0, 1}

    def test_canonical_labels(self):
        np.testing.assert_array_equal(canonical_labels([2, 2, 0, 1, 0]), [0, 0, 1, 2, 1])

    def test_subcategorize_aspect_space(self, rng):
        ar = np.concatenate([rng.uniform(0.3, 0.4, 30), rng.uniform(1.0, 1.2, 30)])
        lay = subcategorize(ar, ar, 2, ClassGeometry(24), min_size=5)
        assert lay.K == 2 and sorted(lay.sizes()) == [30, 30]
        widths = sorted(w.width for w in lay.windows)
        assert widths == [8, 28]
        for k, m in enumerate(lay.medoids):
            assert lay.assignments[m] == k
        back = SubcategoryLayout.from_dict(lay.as_dict())
        assert back.as_dict() == lay.as_dict()

    def test_subcategorize_merges_tiny_clusters(self, rng):
        ar = np.concatenate([rng.uniform(0.5, 0.6, 40), [3.0, 3.1]])
        lay = subcategorize(ar, ar, 2, ClassGeometry(24), min_size=5)
        assert lay.K == 1 and lay.flags
