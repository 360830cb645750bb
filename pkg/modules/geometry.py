#!/usr/bin/env python3
"""
Pre-alignment of target to source - warp application, valid regions,
largest interior rectangle, consistent cropping and pair filtering.

Images are (c, h, w) arrays, label/confidence/mask maps are (h, w).
A warp field is (h, w, 2) holding absolute (x, y) sample positions in the
image being warped, one per output pixel; the exact pair (0, 0) marks an
invalid pixel.
"""

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Rect:
    top: int
    left: int
    height: int
    width: int

    def __post_init__(self):
        if self.height < 1 or self.width < 1:
            raise ValueError(f"rectangle needs positive extent, got {self}")
        if self.top < 0 or self.left < 0:
            raise ValueError(f"rectangle origin must be non-negative, got {self}")

    @property
    def area(self):
        return self.height * self.width

    def fits(self, shape):
        h, w = shape
        return self.top + self.height <= h and self.left + self.width <= w

    def slices(self):
        return slice(self.top, self.top + self.height), slice(self.left, self.left + self.width)


@dataclass
class AlignedPair:
    """Source and target in a common frame, with source labels and warp confidence"""
    source: np.ndarray
    target: np.ndarray
    labels: np.ndarray
    confidence: np.ndarray

    @property
    def shape(self):
        return self.labels.shape


def invalid_sentinel(warp):
    return (warp[..., 0] == 0) & (warp[..., 1] == 0)


def apply_warp(image, warp):
    """Bilinear sampling of ``image`` at the warp positions.

    Returns the warped image (float64) and a 0/1 uint8 validity mask; invalid
    pixels are 0.
    """
    image = np.asarray(image)
    warp = np.asarray(warp)
    if image.ndim == 2:
        warped, valid = apply_warp(image[None], warp)
        return warped[0], valid
    c, h, w = image.shape
    if warp.shape != (h, w, 2):
        raise ValueError(f"warp shape {warp.shape} does not match image {image.shape}")

    x = warp[..., 0].astype(np.float64)
    y = warp[..., 1].astype(np.float64)
    valid = ~invalid_sentinel(warp) & (x >= 0) & (x <= w - 1) & (y >= 0) & (y <= h - 1)

    # clamp so that every gather stays in range; invalid pixels are zeroed below
    x = np.where(valid, x, 0.0)
    y = np.where(valid, y, 0.0)
    x0 = np.floor(x).astype(np.int64)
    y0 = np.floor(y).astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    ax = x - x0
    ay = y - y0

    src = image.astype(np.float64)
    top = src[:, y0, x0] * (1.0 - ax) + src[:, y0, x1] * ax
    bottom = src[:, y1, x0] * (1.0 - ax) + src[:, y1, x1] * ax
    # integer positions give the far neighbours weight 0, so grid samples are exact
    out = top * (1.0 - ay) + bottom * ay
    out = np.where(valid, out, 0.0)
    return out, valid.astype(np.uint8)


def _histogram_candidates(heights, row):
    """Maximal rectangles whose bottom edge lies on ``row`` (monotonic stack)"""
    stack = []
    n = len(heights)
    for j in range(n + 1):
        current = heights[j] if j < n else 0
        start = j
        while stack and stack[-1][1] >= current:
            left, height = stack.pop()
            if height > 0:
                yield row - height + 1, left, height, j - left
            start = left
        stack.append((start, current))


def largest_interior_rectangle(valid):
    """Largest all-valid axis-aligned rectangle.

    Ties are broken by smallest top, then smallest left, then largest width.
    """
    valid = np.asarray(valid).astype(bool)
    if valid.ndim != 2:
        raise ValueError(f"mask must be 2-D, got shape {valid.shape}")
    if not valid.any():
        raise ValueError("mask has no valid pixel")

    heights = np.zeros(valid.shape[1], dtype=np.int64)
    best_key = None
    best = None
    for row in range(valid.shape[0]):
        heights = np.where(valid[row], heights + 1, 0)
        for top, left, height, width in _histogram_candidates(heights.tolist(), row):
            key = (-height * width, top, left, -width)
            if best_key is None or key < best_key:
                best_key = key
                best = Rect(top, left, height, width)
    return best


def crop_triple(source, warped_target, labels, confidence, rect):
    """Crop source, warped target, labels and confidence to the same window"""
    shapes = {
        "source": source.shape[-2:],
        "target": warped_target.shape[-2:],
        "labels": labels.shape[-2:],
        "confidence": confidence.shape[-2:],
    }
    for name, shape in shapes.items():
        if not rect.fits(shape):
            raise ValueError(f"{rect} exceeds the {name} bounds {tuple(shape)}")
    rows, cols = rect.slices()
    return AlignedPair(
        source=source[..., rows, cols].copy(),
        target=warped_target[..., rows, cols].copy(),
        labels=labels[..., rows, cols].copy(),
        confidence=confidence[..., rows, cols].copy(),
    )


def filter_pair(valid, min_valid_fraction=0.3, min_rect_side=32):
    """Keep a pair if enough of it is valid and its LIR is big enough"""
    valid = np.asarray(valid).astype(bool)
    if valid.size == 0 or not valid.any():
        return False
    if valid.mean() < min_valid_fraction:
        return False
    rect = largest_interior_rectangle(valid)
    return rect.height >= min_rect_side and rect.width >= min_rect_side


def prealign(source, target, labels, confidence, warp, use_warp=True, use_crop=True):
    """Warp the target into the source frame and optionally crop to the LIR.

    Returns the aligned pair and the validity mask of the warp (all ones
    when warping is off).
    """
    confidence = np.asarray(confidence, dtype=np.float64)
    if use_warp:
        warped, valid = apply_warp(np.asarray(target, dtype=np.float64), warp)
        confidence = confidence * valid
    else:
        warped = np.asarray(target, dtype=np.float64)
        valid = np.ones(labels.shape, dtype=np.uint8)
    pair = AlignedPair(np.asarray(source, dtype=np.float64), warped, np.asarray(labels), confidence)
    if use_warp and use_crop:
        pair = crop_triple(pair.source, pair.target, pair.labels, pair.confidence,
                           largest_interior_rectangle(valid))
    return pair, valid
