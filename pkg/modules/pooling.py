#!/usr/bin/env python3
"""
Pooling operator F - reduces (b, d, m, n) feature maps to (b, d) vectors.

Four variants: plain average, moving-object masked average, confidence
weighted average and the combined mask * confidence weighting. Weighted
variants compute sum(Y * W) / (sum(W) + eps) per sample and channel.
"""

import torch

MODES = ("avg", "segm", "conf", "segconf")
DEFAULT_EPSILON = 1e-6


def _check_features(y):
    if y.dim() != 4:
        raise ValueError(f"feature map must be (b, d, m, n), got shape {tuple(y.shape)}")
    if y.shape[2] < 1 or y.shape[3] < 1:
        raise ValueError("feature map needs a non-empty spatial grid")
    if not torch.isfinite(y).all():
        raise ValueError("feature map contains non-finite values")


def _check_weights(y, w, name):
    if w.dim() != 3 or w.shape[0] != y.shape[0] or tuple(w.shape[1:]) != tuple(y.shape[2:]):
        raise ValueError(f"{name} shape {tuple(w.shape)} does not match features {tuple(y.shape)}")


def _weighted_pool(y, w, epsilon):
    w = w.to(y.dtype)
    numerator = (y * w.unsqueeze(1)).sum(dim=(2, 3))
    denominator = w.sum(dim=(1, 2)).unsqueeze(1) + epsilon
    return numerator / denominator


def average_pool(y):
    _check_features(y)
    return y.mean(dim=(2, 3))


def masked_average_pool(y, b_mask, epsilon=DEFAULT_EPSILON):
    """Average pooling that skips positions where the mask is 0"""
    _check_features(y)
    _check_weights(y, b_mask, "mask")
    if not ((b_mask == 0) | (b_mask == 1)).all():
        raise ValueError("mask entries must be exactly 0 or 1")
    return _weighted_pool(y, b_mask, epsilon)


def confidence_average_pool(y, p, epsilon=DEFAULT_EPSILON):
    _check_features(y)
    _check_weights(y, p, "confidence")
    if not ((p >= 0) & (p <= 1)).all():
        raise ValueError("confidence entries must lie in [0, 1]")
    return _weighted_pool(y, p, epsilon)


def segconf_average_pool(y, b_mask, p, epsilon=DEFAULT_EPSILON):
    _check_features(y)
    _check_weights(y, b_mask, "mask")
    _check_weights(y, p, "confidence")
    if not ((b_mask == 0) | (b_mask == 1)).all():
        raise ValueError("mask entries must be exactly 0 or 1")
    if not ((p >= 0) & (p <= 1)).all():
        raise ValueError("confidence entries must lie in [0, 1]")
    return _weighted_pool(y, b_mask.to(y.dtype) * p.to(y.dtype), epsilon)


def pool_features(y, mode, mask=None, confidence=None, epsilon=DEFAULT_EPSILON):
    """Dispatch to one of the four pooling variants"""
    if mode == "avg":
        return average_pool(y)
    if mode == "segm":
        return masked_average_pool(y, mask, epsilon)
    if mode == "conf":
        return confidence_average_pool(y, confidence, epsilon)
    if mode == "segconf":
        return segconf_average_pool(y, mask, confidence, epsilon)
    raise ValueError(f"unknown pooling mode '{mode}', expected one of {MODES}")


def _block_index(size, cells, device):
    # row/column -> cell index; equal blocks when cells divides size
    return torch.arange(size, device=device) * cells // size


def _block_ids(shape, grid, device):
    h, w = shape
    m, n = grid
    if not (1 <= m <= h and 1 <= n <= w):
        raise ValueError(f"target grid {grid} must be within the source resolution {shape}")
    rows = _block_index(h, m, device)
    cols = _block_index(w, n, device)
    return (rows.unsqueeze(1) * n + cols.unsqueeze(0)).reshape(-1)


def downsample_labels(s, target_grid, num_classes, ignore_index=None):
    """Block majority vote; ties go to the smallest class id, ignore pixels do not vote"""
    if s.dim() != 3:
        raise ValueError(f"segmentation must be (b, h, w), got shape {tuple(s.shape)}")
    b, h, w = s.shape
    m, n = target_grid
    if (h, w) == (m, n):
        return s.clone()
    ids = _block_ids((h, w), (m, n), s.device)
    flat = s.reshape(b, -1).long()
    votes = torch.zeros(b, num_classes, m * n, dtype=torch.long, device=s.device)
    valid = (flat >= 0) & (flat < num_classes)
    if ignore_index is not None:
        valid &= flat != ignore_index
    one_hot = torch.zeros(b, num_classes, h * w, dtype=torch.long, device=s.device)
    one_hot.scatter_(1, flat.clamp(0, num_classes - 1).unsqueeze(1), valid.long().unsqueeze(1))
    votes.index_add_(2, ids, one_hot)
    return votes.argmax(dim=1).reshape(b, m, n)


def downsample_confidence(p, target_grid):
    """Block mean of a (b, h, w) confidence map"""
    if p.dim() != 3:
        raise ValueError(f"confidence must be (b, h, w), got shape {tuple(p.shape)}")
    b, h, w = p.shape
    m, n = target_grid
    if (h, w) == (m, n):
        return p.clone()
    ids = _block_ids((h, w), (m, n), p.device)
    sums = torch.zeros(b, m * n, dtype=p.dtype, device=p.device)
    sums.index_add_(1, ids, p.reshape(b, -1))
    counts = torch.bincount(ids, minlength=m * n).to(p.dtype)
    return (sums / counts).reshape(b, m, n)


def mask_from_segmentation(s, mobile_classes, target_grid, num_classes, ignore_index=None):
    """0 where the (downsampled) label is a moving-object class, 1 elsewhere"""
    mobile = sorted(set(int(c) for c in mobile_classes))
    unknown = [c for c in mobile if not 0 <= c < num_classes]
    if unknown:
        raise ValueError(f"unknown class ids in mobile_classes: {unknown}")
    labels = downsample_labels(s, target_grid, num_classes, ignore_index)
    is_mobile = torch.zeros_like(labels, dtype=torch.bool)
    for c in mobile:
        is_mobile |= labels == c
    return (~is_mobile).to(torch.float64)
