"""Clip scheduling for long videos and the J / F segmentation metrics."""

import numpy as np

from . import _accel
from .errors import ContractError, DimensionError, ParameterError


def schedule_clips(video_length, clip_length=8, overlap=3):
    """Start indices of the clips that cover a video.

    Starts advance by ``clip_length - overlap``; the last start is clamped to
    ``video_length - clip_length`` so no clip runs past the end.
    """
    if not 0 <= overlap < clip_length:
        raise ParameterError(f"overlap must lie in [0, {clip_length - 1}], got {overlap}")
    if video_length < clip_length:
        raise ContractError(
            f"video of {video_length} frames is shorter than a clip ({clip_length}); pad it first")
    step = clip_length - overlap
    starts, s = [], 0
    while s + clip_length < video_length:
        starts.append(s)
        s += step
    starts.append(video_length - clip_length)
    return starts


def _binary_pair(pred, gt):
    pred, gt = np.asarray(pred).astype(bool), np.asarray(gt).astype(bool)
    if pred.shape != gt.shape:
        raise DimensionError(f"prediction shape {pred.shape} != ground truth shape {gt.shape}")
    return pred, gt


def region_similarity_J(pred, gt):
    """Intersection over union; 1 when both masks are empty."""
    pred, gt = _binary_pair(pred, gt)
    union = np.count_nonzero(pred | gt)
    if union == 0:
        return 1.0
    return np.count_nonzero(pred & gt) / union


def boundary(mask):
    """Foreground pixels with a 4-neighbour in the background (outside counts as background)."""
    m = np.pad(np.asarray(mask).astype(bool), 1, constant_values=False)
    inner = m[1:-1, 1:-1]
    interior = m[:-2, 1:-1] & m[2:, 1:-1] & m[1:-1, :-2] & m[1:-1, 2:]
    return inner & ~interior


def contour_accuracy_F(pred, gt, tolerance_px=1.0):
    """F-measure of boundary pixels matched within ``tolerance_px`` (Euclidean)."""
    pred, gt = _binary_pair(pred, gt)
    if pred.ndim != 2:
        raise DimensionError("contour accuracy takes single 2-D masks")
    bp, bg = boundary(pred), boundary(gt)
    n_p, n_g = np.count_nonzero(bp), np.count_nonzero(bg)
    if n_p == 0 and n_g == 0:
        return 1.0
    if n_p == 0 or n_g == 0:
        return 0.0
    precision = _accel.matched_count(bp, bg, tolerance_px) / n_p
    recall = _accel.matched_count(bg, bp, tolerance_px) / n_g
    if precision + recall == 0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)
