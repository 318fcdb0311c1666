"""Aggregated channel features (LUV, normalized gradient magnitude, 6 oriented gradient bins).

All transforms are local and translation invariant so they can be evaluated
once per image and shared by every detector scanning it.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import math

import numpy as np
from numba import njit
from scipy import ndimage

ACF_CHANNELS = ("L", "U", "V", "M", "O0", "O1", "O2", "O3", "O4", "O5")
N_ORIENTATIONS = 6
SHRINK = 4
# M <- M / (box mean over NORM_RADIUS neighbourhood + NORM_CONST)
NORM_SIZE = 11
NORM_CONST = 0.005

# D65 reference white
_XN, _YN, _ZN = 0.950456, 1.0, 1.088754
_UN = 4 * _XN / (_XN + 15 * _YN + 3 * _ZN)
_VN = 9 * _YN / (_XN + 15 * _YN + 3 * _ZN)
_RGB2XYZ = np.array(
    [
        [0.412453, 0.357580, 0.180423],
        [0.212671, 0.715160, 0.072169],
        [0.019334, 0.119193, 0.950227],
    ]
)
# rescaling ranges for L, u, v into [0, 1]
L_RANGE = (0.0, 100.0)
U_RANGE = (-134.0, 220.0)
V_RANGE = (-140.0, 122.0)


class InvalidInputError(ValueError):
    pass


@dataclass(frozen=True)
class ChannelStack:
    """Named single-channel rasters sharing one grid.

    ``data`` has shape (n_channels, height, width). ``shrink`` is the factor
    between source pixels and grid cells.
    """

    data: np.ndarray
    names: tuple[str, ...]
    shrink: int = 1
    flags: tuple[str, ...] = field(default=())

    def __post_init__(self):
        if self.data.ndim != 3:
            raise InvalidInputError("channel data must be (channels, height, width)")
        if len(self.names) != self.data.shape[0]:
            raise InvalidInputError("one name per channel required")
        self.data.setflags(write=False)

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    def __len__(self):
        return self.data.shape[0]

    def channel(self, name: str) -> np.ndarray:
        return self.data[self.names.index(name)]

    def concat(self, other: "ChannelStack") -> "ChannelStack":
        if other.data.shape[1:] != self.data.shape[1:] or other.shrink != self.shrink:
            raise InvalidInputError("stacks live on different grids")
        return ChannelStack(
            np.concatenate([self.data, other.data]),
            self.names + other.names,
            self.shrink,
            self.flags + other.flags,
        )


@dataclass(frozen=True)
class GradientField:
    magnitude: np.ndarray
    orientation_bin: np.ndarray


def _as_rgb(image) -> np.ndarray:
    img = np.asarray(image)
    if img.ndim != 3 or img.shape[2] != 3:
        raise InvalidInputError(f"expected an RGB raster, got shape {img.shape}")
    if img.shape[0] < 1 or img.shape[1] < 1:
        raise InvalidInputError("zero-sized image")
    return img.astype(np.float64)


@njit(cache=True, nogil=True)
def _luv_kernel(rgb, m, xn, yn, zn, un, vn, ranges):
    H, W = rgb.shape[0], rgb.shape[1]
    out = np.empty((3, H, W))
    eps = (6.0 / 29.0) ** 3
    kappa = (29.0 / 3.0) ** 3
    for i in range(H):
        for j in range(W):
            lin = np.empty(3)
            for k in range(3):
                c = rgb[i, j, k] / 255.0
                lin[k] = ((c + 0.055) / 1.055) ** 2.4 if c > 0.04045 else c / 12.92
            x = m[0, 0] * lin[0] + m[0, 1] * lin[1] + m[0, 2] * lin[2]
            y = m[1, 0] * lin[0] + m[1, 1] * lin[1] + m[1, 2] * lin[2]
            z = m[2, 0] * lin[0] + m[2, 1] * lin[1] + m[2, 2] * lin[2]
            yr = y / yn
            L = 116.0 * np.cbrt(yr) - 16.0 if yr > eps else kappa * yr
            d = x + 15.0 * y + 3.0 * z
            if d > 0:
                up, vp = 4.0 * x / d, 9.0 * y / d
            else:
                up, vp = un, vn
            u = 13.0 * L * (up - un)
            v = 13.0 * L * (vp - vn)
            out[0, i, j] = (L - ranges[0, 0]) / (ranges[0, 1] - ranges[0, 0])
            out[1, i, j] = (u - ranges[1, 0]) / (ranges[1, 1] - ranges[1, 0])
            out[2, i, j] = (v - ranges[2, 0]) / (ranges[2, 1] - ranges[2, 0])
    return out


_RANGES = np.array([L_RANGE, U_RANGE, V_RANGE])


def rgb_to_luv(image) -> ChannelStack:
    """CIE-LUV (D65) of an sRGB raster with values in [0, 255], rescaled to [0, 1]."""
    rgb = np.ascontiguousarray(_as_rgb(image))
    return ChannelStack(_luv_kernel(rgb, _RGB2XYZ, _XN, _YN, _ZN, _UN, _VN, _RANGES), ("L", "U", "V"))


_BINOMIAL = np.array([0.25, 0.5, 0.25])


def smooth(channel: np.ndarray, radius: int = 1) -> np.ndarray:
    """Separable [1, 2, 1]/4 filter with edge replication."""
    return smooth_axes(channel, (0, 1), radius)


def smooth_axes(data: np.ndarray, axes=(-2, -1), radius: int = 1) -> np.ndarray:
    """``smooth`` applied along ``axes`` of a stacked array."""
    if radius != 1:
        raise InvalidInputError("only radius 1 is supported")
    out = np.asarray(data, dtype=np.float64)
    for ax in axes:
        out = ndimage.correlate1d(out, _BINOMIAL, axis=ax, mode="nearest")
    return out


def centered_diff(raster: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(I_x, I_y) by [-1, 0, 1]/2 with replicated borders."""
    p = np.pad(raster, 1, mode="edge")
    ix = (p[1:-1, 2:] - p[1:-1, :-2]) * 0.5
    iy = (p[2:, 1:-1] - p[:-2, 1:-1]) * 0.5
    return ix, iy


@njit(cache=True, nogil=True)
def _gradient_kernel(luv, n_bins):
    C, H, W = luv.shape
    mag = np.empty((H, W))
    bins = np.empty((H, W), np.int64)
    width = math.pi / n_bins
    for i in range(H):
        up, dn = max(i - 1, 0), min(i + 1, H - 1)
        for j in range(W):
            lf, rt = max(j - 1, 0), min(j + 1, W - 1)
            best, bx, by = -1.0, 0.0, 0.0
            for c in range(C):
                gx = (luv[c, i, rt] - luv[c, i, lf]) * 0.5
                gy = (luv[c, dn, j] - luv[c, up, j]) * 0.5
                m2 = gx * gx + gy * gy
                if m2 > best:  # lowest channel index wins ties
                    best, bx, by = m2, gx, gy
            mag[i, j] = math.hypot(bx, by)
            theta = math.atan2(by, bx)
            if theta < 0:
                theta += math.pi
            if theta >= math.pi:
                theta -= math.pi
            b = int(math.floor(theta / width))
            bins[i, j] = min(max(b, 0), n_bins - 1)
    return mag, bins


def gradient_field(luv: ChannelStack) -> GradientField:
    """Per pixel, the gradient of the channel with the largest magnitude; orientation mod pi."""
    if len(luv) != 3:
        raise InvalidInputError("gradient_field needs exactly 3 channels")
    m, bins = _gradient_kernel(np.ascontiguousarray(luv.data, dtype=np.float64), N_ORIENTATIONS)
    return GradientField(m, bins)


def normalize_magnitude(g: GradientField) -> GradientField:
    local = ndimage.uniform_filter(smooth(g.magnitude), NORM_SIZE, mode="nearest")
    return GradientField(g.magnitude / (local + NORM_CONST), g.orientation_bin)


def orientation_histogram(g: GradientField) -> ChannelStack:
    bins = np.arange(N_ORIENTATIONS)[:, None, None]
    hist = np.where(g.orientation_bin[None] == bins, g.magnitude[None], 0.0)
    return ChannelStack(hist, tuple(f"O{i}" for i in range(N_ORIENTATIONS)))


def aggregate(stack: ChannelStack, block: int = SHRINK) -> ChannelStack:
    """Block means; dims are padded by replication up to a multiple of ``block``."""
    c, h, w = stack.data.shape
    hp, wp = -(-h // block) * block, -(-w // block) * block
    data = np.pad(stack.data, ((0, 0), (0, hp - h), (0, wp - w)), mode="edge")
    data = data.reshape(c, hp // block, block, wp // block, block).mean(axis=(2, 4))
    return ChannelStack(data, stack.names, stack.shrink * block, stack.flags)


def full_res_acf(image) -> ChannelStack:
    """Unaggregated 10-channel stack of a pre-smoothed image."""
    rgb = smooth_axes(_as_rgb(image), (0, 1))
    luv = rgb_to_luv(rgb)
    g = normalize_magnitude(gradient_field(luv))
    hist = orientation_histogram(g)
    data = np.concatenate([luv.data, g.magnitude[None], hist.data])
    return ChannelStack(data, ACF_CHANNELS)


def compute_acf(image) -> ChannelStack:
    agg = aggregate(full_res_acf(image), SHRINK)
    data = smooth_axes(agg.data, (1, 2)).astype(np.float32)
    return ChannelStack(data, ACF_CHANNELS, SHRINK)
