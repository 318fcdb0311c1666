"""Spatially pooled covariance (sp-Cov) and LBP (sp-LBP) channel maps."""
from __future__ import annotations

import numpy as np

from .channels import SHRINK, ChannelStack, InvalidInputError, centered_diff

VARIATES = ("x", "y", "|Ix|", "|Iy|", "|Ixx|", "|Iyy|", "M", "O1", "O2")
COV_PATCHES = (4, 8, 16)
COV_POOL = 4
LBP_PATCH = 4
LBP_POOL = 8
POOL_STRIDE = 4

# upper-triangle (i <= j) pairs of the 9x9 covariance minus var(x), var(y), cov(x, y)
_EXCLUDED = {(0, 0), (1, 1), (0, 1)}
COV_PAIRS = tuple(
    (i, j) for i in range(9) for j in range(i, 9) if (i, j) not in _EXCLUDED
)
assert len(COV_PAIRS) == 42


def variate_image(luminance: np.ndarray) -> np.ndarray:
    """The 9 covariance variates per pixel, shape (9, H, W)."""
    lum = np.asarray(luminance, dtype=np.float64)
    if lum.ndim != 2 or lum.shape[0] < 3 or lum.shape[1] < 3:
        raise InvalidInputError("variate_image needs a raster of at least 3x3")
    h, w = lum.shape
    ix, iy = centered_diff(lum)
    p = np.pad(lum, 1, mode="edge")
    ixx = p[1:-1, 2:] - 2 * lum + p[1:-1, :-2]
    iyy = p[2:, 1:-1] - 2 * lum + p[:-2, 1:-1]
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    o1 = np.arctan2(np.abs(ix), np.abs(iy))  # arctan(|Ix|/|Iy|), 0/0 -> 0
    a = np.arctan2(iy, ix)
    o2 = np.where(a > 0, a, a + np.pi)
    o2 = np.where((ix == 0) & (iy == 0), 0.0, o2)
    return np.stack(
        [xs, ys, np.abs(ix), np.abs(iy), np.abs(ixx), np.abs(iyy), np.hypot(ix, iy), o1, o2]
    )


def _descriptor_from_cov(cov: np.ndarray) -> np.ndarray:
    return np.array([cov[i, j] for i, j in COV_PAIRS])


def descriptor_to_matrix(desc: np.ndarray) -> np.ndarray:
    """Rebuild the symmetric 9x9 matrix; the excluded location entries are zero."""
    m = np.zeros((9, 9))
    for v, (i, j) in zip(desc, COV_PAIRS):
        m[i, j] = m[j, i] = v
    return m


def covariance_descriptor(variates: np.ndarray, region: tuple[int, int, int, int]) -> np.ndarray:
    """42-value covariance descriptor of ``region`` = (left, top, right, bottom), exclusive end."""
    left, top, right, bottom = region
    _, h, w = variates.shape
    if left < 0 or top < 0 or right > w or bottom > h:
        raise IndexError(f"region {region} outside raster {w}x{h}")
    if right - left < 2 or bottom - top < 2:
        raise InvalidInputError("region must be at least 2x2")
    z = variates[:, top:bottom, left:right].reshape(9, -1)
    z = z - z.mean(axis=1, keepdims=True)
    cov = z @ z.T / (z.shape[1] - 1)
    return _descriptor_from_cov(cov)


def _box_sums(a: np.ndarray, size: int) -> np.ndarray:
    """Sums over every size x size window (top-left anchored), valid positions only."""
    s = np.zeros((a.shape[0], a.shape[1] + 1, a.shape[2] + 1), dtype=a.dtype)
    np.cumsum(np.cumsum(a, axis=1), axis=2, out=s[:, 1:, 1:])
    return s[:, size:, size:] - s[:, :-size, size:] - s[:, size:, :-size] + s[:, :-size, :-size]


def max_pool(dense: np.ndarray, pool: int, stride: int, out_shape: tuple[int, int]) -> np.ndarray:
    """Max over dense[:, stride*i : stride*i + pool, stride*j : stride*j + pool].

    ``dense`` must cover every pooling region of the output grid.
    """
    oh, ow = out_shape
    out = np.full((dense.shape[0], oh, ow), -np.inf, dtype=dense.dtype)
    for dy in range(pool):
        for dx in range(pool):
            sl = dense[:, dy : dy + stride * oh : stride, dx : dx + stride * ow : stride]
            np.maximum(out, sl, out=out)
    return out


def _grid_shape(h: int, w: int) -> tuple[int, int]:
    return -(-h // SHRINK), -(-w // SHRINK)


def dense_covariance(luminance: np.ndarray, patch: int, out_shape: tuple[int, int], pool: int = COV_POOL):
    """Descriptors of patch x patch regions at step 1, shape (42, rows, cols).

    Position (r, c) is the patch whose top-left corner sits at pixel
    (r - off, c - off), off = (patch - SHRINK) // 2, so patches are centred on
    the grid cells they are pooled into. The raster is padded by replication.
    """
    lum = np.asarray(luminance, dtype=np.float64)
    oh, ow = out_shape
    off = (patch - SHRINK) // 2
    rows = POOL_STRIDE * (oh - 1) + pool
    cols = POOL_STRIDE * (ow - 1) + pool
    need_h, need_w = rows + patch - 1, cols + patch - 1
    padded = np.pad(
        lum, ((off, max(0, need_h - off - lum.shape[0])), (off, max(0, need_w - off - lum.shape[1]))), mode="edge"
    )[:need_h, :need_w]
    v = variate_image(padded)
    n = patch * patch
    first = _box_sums(v, patch)
    out = np.empty((42, rows, cols))
    prods = {}
    for k, (i, j) in enumerate(COV_PAIRS):
        if (i, j) not in prods:
            prods[(i, j)] = _box_sums((v[i] * v[j])[None], patch)[0]
        out[k] = (prods[(i, j)] - first[i] * first[j] / n) / (n - 1)
    return out


def sp_cov(luminance: np.ndarray) -> ChannelStack:
    """126 channels: max-pooled covariance descriptors for 4, 8 and 16 px patches."""
    lum = np.asarray(luminance, dtype=np.float64)
    h, w = lum.shape
    grid = _grid_shape(h, w)
    maps, names, flags = [], [], []
    for patch in COV_PATCHES:
        names += [f"cov{patch}_{k}" for k in range(42)]
        if h < patch or w < patch:
            maps.append(np.zeros((42,) + grid))
            flags.append(f"sp_cov: raster {w}x{h} smaller than {patch}px patch")
            continue
        dense = dense_covariance(lum, patch, grid)
        maps.append(max_pool(dense, COV_POOL, POOL_STRIDE, grid))
    data = np.concatenate(maps).astype(np.float32)
    return ChannelStack(data, tuple(names), SHRINK, tuple(flags))


# clockwise from top-left: (dy, dx)
LBP_NEIGHBOURS = ((-1, -1), (-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1), (0, -1))


def lbp_code_map(luminance: np.ndarray) -> np.ndarray:
    """8-bit LBP codes of interior pixels, shape (H-2, W-2).

    Bit k (k=0 is the most significant) is set when neighbour k in clockwise
    order from the top-left is >= the centre.
    """
    lum = np.asarray(luminance, dtype=np.float64)
    if lum.ndim != 2 or lum.shape[0] < 3 or lum.shape[1] < 3:
        raise InvalidInputError("lbp_code_map needs a raster of at least 3x3")
    h, w = lum.shape
    centre = lum[1:-1, 1:-1]
    code = np.zeros(centre.shape, dtype=np.int64)
    for k, (dy, dx) in enumerate(LBP_NEIGHBOURS):
        nb = lum[1 + dy : h - 1 + dy, 1 + dx : w - 1 + dx]
        code |= (nb >= centre).astype(np.int64) << (7 - k)
    return code


def is_uniform(code: int) -> bool:
    """At most two 0/1 transitions in the circular 8-bit string."""
    rotated = ((code << 1) | (code >> 7)) & 0xFF
    return bin(code ^ rotated).count("1") <= 2


UNIFORM_CODES = tuple(c for c in range(256) if is_uniform(c))
N_LBP_BINS = len(UNIFORM_CODES)
# code -> bin index, -1 for non-uniform codes (dropped)
UNIFORM_INDEX = np.full(256, -1, dtype=np.int64)
UNIFORM_INDEX[list(UNIFORM_CODES)] = np.arange(N_LBP_BINS)


def lbp_histogram(codes: np.ndarray) -> np.ndarray:
    idx = UNIFORM_INDEX[np.asarray(codes).ravel()]
    return np.bincount(idx[idx >= 0], minlength=N_LBP_BINS).astype(np.float64)


def dense_lbp(luminance: np.ndarray, out_shape: tuple[int, int], pool: int = LBP_POOL):
    """Uniform-LBP histograms of 4x4 patches at step 1, shape (58, rows, cols).

    Position (r, c) is the patch with top-left pixel (r - off, c - off),
    off = (pool - SHRINK) // 2 so pooling regions are centred on their cell.
    """
    lum = np.asarray(luminance, dtype=np.float64)
    oh, ow = out_shape
    off = (pool - SHRINK) // 2
    rows = POOL_STRIDE * (oh - 1) + pool
    cols = POOL_STRIDE * (ow - 1) + pool
    need_h, need_w = rows + LBP_PATCH - 1, cols + LBP_PATCH - 1
    padded = np.pad(
        lum,
        ((off + 1, max(0, need_h - off - lum.shape[0]) + 1), (off + 1, max(0, need_w - off - lum.shape[1]) + 1)),
        mode="edge",
    )[: need_h + 2, : need_w + 2]
    idx = UNIFORM_INDEX[lbp_code_map(padded)]
    onehot = np.zeros((N_LBP_BINS,) + idx.shape, dtype=np.int32)
    rr, cc = np.nonzero(idx >= 0)
    onehot[idx[rr, cc], rr, cc] = 1
    return _box_sums(onehot, LBP_PATCH).astype(np.float64)


def sp_lbp(luminance: np.ndarray) -> ChannelStack:
    """58 max-pooled LBP histogram channels followed by the 58 unpooled ones.

    The unpooled map is the histogram of each 4x4 block of the grid.
    """
    lum = np.asarray(luminance, dtype=np.float64)
    h, w = lum.shape
    grid = _grid_shape(h, w)
    dense = dense_lbp(lum, grid)
    pooled = max_pool(dense, LBP_POOL, POOL_STRIDE, grid)
    # block histograms: patch positions aligned on the grid, i.e. dense offset `off`
    off = (LBP_POOL - SHRINK) // 2
    blocks = dense[:, off : off + POOL_STRIDE * grid[0] : POOL_STRIDE, off : off + POOL_STRIDE * grid[1] : POOL_STRIDE]
    names = tuple(f"splbp_{k}" for k in range(N_LBP_BINS)) + tuple(f"lbp_{k}" for k in range(N_LBP_BINS))
    data = np.concatenate([pooled, blocks]).astype(np.float32)
    return ChannelStack(data, names, SHRINK)
