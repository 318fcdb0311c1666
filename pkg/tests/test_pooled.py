import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from trafficdet.channels import InvalidInputError
from trafficdet.features import COMBINATIONS, compute_channels
from trafficdet.pooled import (
    COV_PAIRS,
    N_LBP_BINS,
    UNIFORM_CODES,
    covariance_descriptor,
    dense_covariance,
    descriptor_to_matrix,
    is_uniform,
    lbp_code_map,
    lbp_histogram,
    max_pool,
    sp_cov,
    sp_lbp,
    variate_image,
)


def two_pass_cov(z):
    """Textbook two-pass sample covariance of rows of z (n_vars, n_obs)."""
    n = z.shape[1]
    means = [sum(row) / n for row in z]
    out = np.zeros((len(z), len(z)))
    for i in range(len(z)):
        for j in range(len(z)):
            out[i, j] = sum((z[i, k] - means[i]) * (z[j, k] - means[j]) for k in range(n)) / (n - 1)
    return out


def plane(a, b, h=7, w=7):
    ys, xs = np.mgrid[0:h, 0:w].astype(float)
    return a * xs + b * ys


class TestVariates:
    def test_order_and_coordinates(self, rng):
        v = variate_image(rng.random((5, 6)))
        assert v.shape == (9, 5, 6)
        assert v[0, 2, 4] == 4 and v[1, 2, 4] == 2

    @pytest.mark.parametrize("a,b,o2", [(-1, -1, math.pi / 4), (0, 1, math.pi / 2), (1, 1, math.pi / 4),
                                        (1, -1, 3 * math.pi / 4), (-1, 0, math.pi),
                                        (1, 0, math.pi)])
    def test_o2_unsigned_orientation(self, a, b, o2):
        v = variate_image(plane(a, b))
        assert v[8, 3, 3] == pytest.approx(o2)

    def test_o1_and_magnitude(self):
        v = variate_image(plane(3, 4))
        assert v[6, 3, 3] == pytest.approx(5.0)
        assert v[7, 3, 3] == pytest.approx(math.atan(3 / 4))

    def test_second_derivatives_of_quadratic(self):
        ys, xs = np.mgrid[0:7, 0:7].astype(float)
        v = variate_image(2 * xs**2 - 3 * ys**2)
        assert v[4, 3, 3] == pytest.approx(4.0)
        assert v[5, 3, 3] == pytest.approx(6.0)

    def test_flat_raster_zero_orientation(self):
        v = variate_image(np.full((4, 4), 0.5))
        assert np.all(v[2:] == 0)

    def test_too_small(self):
        with pytest.raises(InvalidInputError):
            variate_image(np.zeros((2, 5)))


class TestCovarianceDescriptor:
    def test_matches_two_pass_oracle(self, rng):
        v = variate_image(rng.random((10, 12)))
        region = (2, 3, 8, 9)
        desc = covariance_descriptor(v, region)
        z = v[:, 3:9, 2:8].reshape(9, -1)
        full = two_pass_cov(z)
        assert desc.shape == (42,)
        np.testing.assert_allclose(desc, [full[i, j] for i, j in COV_PAIRS], atol=1e-10)

    def test_pairs_exclude_location_block(self):
        assert len(COV_PAIRS) == 42
        assert (0, 0) not in COV_PAIRS and (1, 1) not in COV_PAIRS and (0, 1) not in COV_PAIRS
        assert (0, 2) in COV_PAIRS and (8, 8) in COV_PAIRS

    def test_rebuilt_matrix_psd_after_adding_location_block(self, rng):
        v = variate_image(rng.random((9, 9)))
        desc = covariance_descriptor(v, (0, 0, 8, 8))
        m = descriptor_to_matrix(desc)
        z = v[:, :8, :8].reshape(9, -1)
        full = two_pass_cov(z)
        m[0, 0], m[1, 1], m[0, 1], m[1, 0] = full[0, 0], full[1, 1], full[0, 1], full[1, 0]
        assert np.linalg.eigvalsh(m).min() > -1e-9

    def test_constant_offset_invariance(self, rng):
        lum = rng.random((12, 12))
        a = covariance_descriptor(variate_image(lum), (1, 1, 9, 9))
        b = covariance_descriptor(variate_image(lum + 7.0), (1, 1, 9, 9))
        np.testing.assert_allclose(a, b, atol=1e-10)

    def test_region_checks(self, rng):
        v = variate_image(rng.random((6, 6)))
        with pytest.raises(IndexError):
            covariance_descriptor(v, (0, 0, 7, 4))
        with pytest.raises(InvalidInputError):
            covariance_descriptor(v, (0, 0, 1, 4))

    def test_dense_matches_direct(self, rng):
        lum = rng.random((24, 24))
        dense = dense_covariance(lum, 8, (6, 6))
        # position (r, c) is the 8x8 patch with top-left (r - 2, c - 2) of the edge-padded raster
        padded = np.pad(lum, 2, mode="edge")
        v = variate_image(padded[: dense.shape[1] + 7, : dense.shape[2] + 7])
        for r, c in [(2, 2), (5, 9), (10, 3)]:
            np.testing.assert_allclose(dense[:, r, c], covariance_descriptor(v, (c, r, c + 8, r + 8)), atol=1e-9)


def lbp_oracle(lum, i, j):
    order = [(-1, -1), (-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1), (0, -1)]
    bits = "".join("1" if lum[i + dy, j + dx] >= lum[i, j] else "0" for dy, dx in order)
    return int(bits, 2)


class TestLbp:
    def test_hand_code(self):
        lum = np.array([[9, 1, 9], [1, 5, 1], [9, 1, 9]], float)
        assert lbp_code_map(lum)[0, 0] == 0b10101010

    def test_flat_is_all_ones(self):
        assert lbp_code_map(np.ones((3, 3)))[0, 0] == 255

    def test_matches_oracle(self, rng):
        lum = rng.integers(0, 4, (8, 9)).astype(float)
        codes = lbp_code_map(lum)
        for i in range(1, 7):
            for j in range(1, 8):
                assert codes[i - 1, j - 1] == lbp_oracle(lum, i, j)

    def test_58_uniform_codes(self):
        # brute force over string transitions
        def transitions(c):
            s = f"{c:08b}"
            return sum(s[k] != s[(k + 1) % 8] for k in range(8))
        assert UNIFORM_CODES == tuple(c for c in range(256) if transitions(c) <= 2)
        assert N_LBP_BINS == 58
        assert is_uniform(0) and is_uniform(0b00111000) and not is_uniform(0b01010000)

    def test_histogram_drops_non_uniform(self):
        h = lbp_histogram(np.array([0, 0, 255, 0b01010101]))
        assert h.sum() == 3 and h.shape == (58,)

    def test_monotone_invariance(self, rng):
        lum = rng.random((10, 10))
        np.testing.assert_array_equal(lbp_code_map(lum), lbp_code_map(3 * lum**3 + 1))


class TestMaxPool:
    def test_matches_brute_force(self, rng):
        dense = rng.normal(size=(3, 20, 24))
        out = max_pool(dense, 8, 4, (4, 5))
        for c in range(3):
            for i in range(4):
                for j in range(5):
                    assert out[c, i, j] == dense[c, 4 * i : 4 * i + 8, 4 * j : 4 * j + 8].max()


class TestStacks:
    @pytest.mark.parametrize("h,w", [(32, 32), (30, 45)])
    def test_channel_counts(self, rng, h, w):
        lum = rng.random((h, w))
        assert sp_cov(lum).data.shape == (126, -(-h // 4), -(-w // 4))
        assert sp_lbp(lum).data.shape == (116, -(-h // 4), -(-w // 4))

    def test_small_raster_flagged(self, rng):
        s = sp_cov(rng.random((6, 6)))
        assert any("16px" in f for f in s.flags)

    def test_lbp_block_histograms_count_pixels(self, rng):
        s = sp_lbp(rng.random((16, 16)))
        blocks = s.data[58:]
        assert np.all(blocks.sum(axis=0) <= 16)
        assert np.all(s.data[:58] >= blocks)

    def test_combinations(self, rng):
        img = rng.integers(0, 256, (32, 32, 3), dtype=np.uint8)
        counts = {name: compute_channels(img, fams).data.shape[0] for name, fams in COMBINATIONS.items()}
        assert counts == {"ACF": 10, "ACF+spLBP": 126, "ACF+spCov": 136, "all": 252}

    @settings(max_examples=10, deadline=None)
    @given(seed=st.integers(0, 2**31), offset=st.floats(-50, 50))
    def test_pooled_cov_offset_invariant(self, seed, offset):
        lum = np.random.default_rng(seed).random((20, 20))
        np.testing.assert_allclose(sp_cov(lum).data, sp_cov(lum + offset).data, atol=1e-4)
