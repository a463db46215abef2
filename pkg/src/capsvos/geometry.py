"""Zoom boxes and the resampling between frame and crop coordinates.

Continuous coordinates: pixel ``r`` covers ``[r, r + 1)``. A box centred on
integer pixel ``c`` with odd extent ``b`` covers pixels ``c - (b-1)/2`` to
``c + (b-1)/2``. All resampling is separable, so a crop, a paste-back or a
re-alignment of feature maps between two boxes is ``Ry @ x @ Rx.T`` with one
interpolation matrix per axis.
"""

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ContractError


@dataclass(frozen=True)
class BoundingBox:
    center_row: float
    center_col: float
    height: float
    width: float

    @property
    def top(self):
        return self.center_row + 0.5 - self.height / 2.0

    @property
    def left(self):
        return self.center_col + 0.5 - self.width / 2.0

    @classmethod
    def full_frame(cls, h, w):
        return cls(h / 2.0 - 0.5, w / 2.0 - 0.5, float(h), float(w))

    def clamped(self, h, w, min_h=1.0, min_w=1.0):
        """Limit extents to ``[min, frame]`` then shift the box inside the frame."""
        bh = float(np.clip(self.height, min(min_h, h), h))
        bw = float(np.clip(self.width, min(min_w, w), w))
        top = float(np.clip(self.center_row + 0.5 - bh / 2.0, 0.0, h - bh))
        left = float(np.clip(self.center_col + 0.5 - bw / 2.0, 0.0, w - bw))
        return BoundingBox(top + bh / 2.0 - 0.5, left + bw / 2.0 - 0.5, bh, bw)

    def scaled(self, factor):
        return BoundingBox(self.center_row, self.center_col, self.height * factor, self.width * factor)

    def contains(self, other):
        tol = 1e-9
        return (self.top <= other.top + tol and self.left <= other.left + tol
                and self.top + self.height >= other.top + other.height - tol
                and self.left + self.width >= other.left + other.width - tol)


def mask_centroid(mask):
    """Rounded (row, col) centroid of a binary mask, or None if empty."""
    rows, cols = np.nonzero(mask)
    if rows.size == 0:
        return None
    return float(np.rint(rows.mean())), float(np.rint(cols.mean()))


def ground_truth_bbox(masks):
    """Smallest box centred on the first-frame object covering it in every frame.

    ``masks`` is (T, H, W). Extents are odd before clamping to the frame size.
    """
    masks = np.asarray(masks).astype(bool)
    c = mask_centroid(masks[0])
    if c is None:
        raise ContractError("first-frame mask is empty; no reference object")
    _, rows, cols = np.nonzero(masks)
    h, w = masks.shape[1:]
    bh = 2.0 * np.max(np.abs(rows - c[0])) + 1.0
    bw = 2.0 * np.max(np.abs(cols - c[1])) + 1.0
    return BoundingBox(c[0], c[1], min(bh, float(h)), min(bw, float(w)))


def union_box(masks):
    """Tight axis-aligned box around every foreground pixel (None if empty)."""
    _, rows, cols = np.nonzero(np.asarray(masks).astype(bool))
    if rows.size == 0:
        return None
    r0, r1, c0, c1 = rows.min(), rows.max(), cols.min(), cols.max()
    return BoundingBox((r0 + r1) / 2.0, (c0 + c1) / 2.0, float(r1 - r0 + 1), float(c1 - c0 + 1))


def interp_matrix(n_out, out_start, out_extent, n_src, src_start, src_extent, outside_zero=False):
    """Bilinear weights mapping a source grid onto an output grid along one axis.

    Output cell ``i`` sits at ``out_start + (i + 0.5) * out_extent / n_out``;
    that point is located on the source grid spanning ``[src_start,
    src_start + src_extent)`` with ``n_src`` cells. Points outside the source
    span give zero rows when ``outside_zero``; otherwise they clamp to the edge.
    """
    pos = out_start + (np.arange(n_out) + 0.5) * (out_extent / n_out)
    s = (pos - src_start) * (n_src / src_extent) - 0.5
    inside = (pos >= src_start) & (pos < src_start + src_extent)
    s = np.clip(s, 0.0, n_src - 1)
    i0 = np.floor(s).astype(int)
    i1 = np.minimum(i0 + 1, n_src - 1)
    frac = s - i0
    m = np.zeros((n_out, n_src))
    rows = np.arange(n_out)
    np.add.at(m, (rows, i0), 1.0 - frac)
    np.add.at(m, (rows, i1), frac)
    if outside_zero:
        m[~inside] = 0.0
    return m


def nearest_index(n_out, out_start, out_extent, n_src):
    pos = out_start + (np.arange(n_out) + 0.5) * (out_extent / n_out)
    return np.clip(np.floor(pos).astype(int), 0, n_src - 1)


def _min_extent(box, h, w):
    if box.height < 2 or box.width < 2:
        box = BoundingBox(box.center_row, box.center_col, max(box.height, 2.0), max(box.width, 2.0))
    return box.clamped(h, w, 2.0, 2.0)


def crop_matrices(box, frame_hw, out_hw):
    h, w = frame_hw
    box = _min_extent(box, h, w)
    ry = interp_matrix(out_hw[0], box.top, box.height, h, 0.0, float(h))
    rx = interp_matrix(out_hw[1], box.left, box.width, w, 0.0, float(w))
    return ry, rx


def _apply(x, ry, rx):
    # x: (..., H, W, C) numpy
    y = np.einsum("ah,...hwc->...awc", ry, x)
    return np.einsum("bw,...awc->...abc", rx, y)


def crop_and_resize(clip, box, out_hw, mask=None):
    """Crop ``clip`` (..., H, W, C) to ``box`` and bilinearly resize to ``out_hw``.

    If ``mask`` (..., H, W) is given it is cropped with nearest-neighbour
    sampling and returned as a second value.
    """
    clip = np.asarray(clip, dtype=np.float64)
    h, w = clip.shape[-3], clip.shape[-2]
    ry, rx = crop_matrices(box, (h, w), out_hw)
    out = _apply(clip, ry, rx)
    if mask is None:
        return out
    b = _min_extent(box, h, w)
    iy = nearest_index(out_hw[0], b.top, b.height, h)
    ix = nearest_index(out_hw[1], b.left, b.width, w)
    m = np.asarray(mask)[..., iy, :][..., :, ix]
    return out, m


def crop_mask(mask, box, out_hw):
    mask = np.asarray(mask)
    h, w = mask.shape[-2:]
    b = _min_extent(box, h, w)
    iy = nearest_index(out_hw[0], b.top, b.height, h)
    ix = nearest_index(out_hw[1], b.left, b.width, w)
    return mask[..., iy, :][..., :, ix]


def paste_matrices(box, frame_hw, low_hw):
    h, w = frame_hw
    box = _min_extent(box, h, w)
    ry = interp_matrix(h, 0.0, float(h), low_hw[0], box.top, box.height, outside_zero=True)
    rx = interp_matrix(w, 0.0, float(w), low_hw[1], box.left, box.width, outside_zero=True)
    return ry, rx


def paste_back(pred, box, frame_hw):
    """Map low-res crop predictions (..., h, w) into the full frame; zeros outside the box."""
    pred = np.asarray(pred, dtype=np.float64)
    ry, rx = paste_matrices(box, frame_hw, pred.shape[-2:])
    return np.einsum("bw,...aw->...ab", rx, np.einsum("ah,...hw->...aw", ry, pred))


def realign_matrices(src_box, dst_box, grid_hw):
    """Matrices moving a feature grid expressed over ``src_box`` onto ``dst_box``."""
    ry = interp_matrix(grid_hw[0], dst_box.top, dst_box.height, grid_hw[0], src_box.top, src_box.height,
                       outside_zero=True)
    rx = interp_matrix(grid_hw[1], dst_box.left, dst_box.width, grid_hw[1], src_box.left, src_box.width,
                       outside_zero=True)
    return ry, rx


def resample(x, ry, rx):
    """Differentiable ``Ry @ x @ Rx.T`` for x (N, H, W, C); ry (N, Ho, H), rx (N, Wo, W)."""
    xt = T.transpose(x, (0, 3, 1, 2))  # (N, C, H, W)
    y = T.matmul(T.matmul(T.Tensor(ry[:, None]), xt), T.Tensor(np.swapaxes(rx, -1, -2)[:, None]))
    return T.transpose(y, (0, 2, 3, 1))
