"""Channel families, per-image channel computation and window feature extraction."""
from __future__ import annotations

import cv2
import numpy as np

from .boosting import FeatureLayout, WindowGeometry
from .channels import SHRINK, ChannelStack, compute_acf, rgb_to_luv, smooth_axes
from .pooled import sp_cov, sp_lbp

FAMILIES = ("acf", "splbp", "spcov")
COMBINATIONS = {
    "ACF": ("acf",),
    "ACF+spLBP": ("acf", "splbp"),
    "ACF+spCov": ("acf", "spcov"),
    "all": ("acf", "splbp", "spcov"),
}
# context border (pixels at model resolution) computed around a training crop
CONTEXT = 16


def luminance(image) -> np.ndarray:
    return rgb_to_luv(smooth_axes(np.asarray(image, dtype=np.float64), (0, 1))).data[0]


def compute_channels(image, families=("acf",)) -> ChannelStack:
    """Concatenate the requested channel families for one image, on the shrink-4 grid."""
    unknown = set(families) - set(FAMILIES)
    if unknown:
        raise ValueError(f"unknown channel families {sorted(unknown)}")
    stack = None
    lum = None
    for fam in FAMILIES:
        if fam not in families:
            continue
        if fam == "acf":
            part = compute_acf(image)
        else:
            if lum is None:
                lum = luminance(image)
            part = sp_lbp(lum) if fam == "splbp" else sp_cov(lum)
        stack = part if stack is None else stack.concat(part)
    return stack


def families_for(channels) -> tuple[str, ...]:
    fams = set()
    for name in channels:
        if name.startswith("cov"):
            fams.add("spcov")
        elif "lbp" in name:
            fams.add("splbp")
        else:
            fams.add("acf")
    return tuple(f for f in FAMILIES if f in fams)


def channel_names(families) -> tuple[str, ...]:
    probe = compute_channels(np.zeros((16, 16, 3), np.uint8), families)
    return probe.names


def layout_for(window: WindowGeometry, families) -> FeatureLayout:
    return FeatureLayout(channel_names(families), window.padded_height // SHRINK, window.padded_width // SHRINK, SHRINK)


def window_box(obj_box, window: WindowGeometry):
    """Padded window (left, top, right, bottom) in image pixels around an object box.

    The box is first adjusted to the model aspect ratio keeping its height and
    centre, matching how the detector maps windows back to boxes.
    """
    left, top, right, bottom = obj_box
    h = bottom - top
    cx = (left + right) / 2
    scale = h / window.height
    pw, ph = window.padded_width * scale, window.padded_height * scale
    cy = (top + bottom) / 2
    return cx - pw / 2, cy - ph / 2, cx + pw / 2, cy + ph / 2


def crop_window(image, obj_box, window: WindowGeometry, context: int = CONTEXT) -> np.ndarray:
    """RGB crop of the padded window plus ``context`` pixels, at model resolution.

    Pixels outside the image are filled by replication.
    """
    img = np.asarray(image)
    l, t, r, b = window_box(obj_box, window)
    scale = (r - l) / window.padded_width
    ctx = context * scale
    l, t, r, b = l - ctx, t - ctx, r + ctx, b + ctx
    li, ti = int(np.floor(l)), int(np.floor(t))
    ri, bi = max(li + 1, int(np.ceil(r))), max(ti + 1, int(np.ceil(b)))
    H, W = img.shape[:2]
    ys = np.clip(np.arange(ti, bi), 0, H - 1)
    xs = np.clip(np.arange(li, ri), 0, W - 1)
    region = img[ys[:, None], xs[None, :]]
    out_w = window.padded_width + 2 * context
    out_h = window.padded_height + 2 * context
    interp = cv2.INTER_AREA if region.shape[1] >= out_w else cv2.INTER_LINEAR
    return cv2.resize(np.ascontiguousarray(region), (out_w, out_h), interpolation=interp)


def crop_features(crop: np.ndarray, layout: FeatureLayout, context: int = CONTEXT) -> np.ndarray:
    """Feature vector of a model-resolution crop produced by ``crop_window``."""
    stack = compute_channels(crop, families_for(layout.channels))
    c0 = context // SHRINK
    idx = [stack.names.index(n) for n in layout.channels]
    block = stack.data[idx, c0 : c0 + layout.rows, c0 : c0 + layout.cols]
    return block.reshape(-1).astype(np.float32)


def window_offsets(layout: FeatureLayout, stack_height: int, stack_width: int, channel_index) -> np.ndarray:
    """Flat offset of every feature relative to the window's top-left cell."""
    c = np.asarray(channel_index, dtype=np.int64)[:, None, None]
    r = np.arange(layout.rows)[None, :, None]
    k = np.arange(layout.cols)[None, None, :]
    return (c * stack_height * stack_width + r * stack_width + k).reshape(-1)


def stack_window(stack: ChannelStack, layout: FeatureLayout, row: int, col: int) -> np.ndarray:
    idx = [stack.names.index(n) for n in layout.channels]
    return stack.data[idx, row : row + layout.rows, col : col + layout.cols].reshape(-1)
