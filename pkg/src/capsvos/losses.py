"""Segmentation and box-regression losses and their sum."""

from dataclasses import dataclass

from . import tensor as T
from .errors import ConfigurationError, DimensionError


@dataclass(frozen=True)
class LossConfig:
    epsilon: float = 1e-7
    clamp: float = 1e-7

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ConfigurationError("dice epsilon must be positive")
        if not 0 < self.clamp < 0.5:
            raise ConfigurationError("probability clamp must lie in (0, 0.5)")


DEFAULT = LossConfig()


def _pair(pred, target):
    pred, target = T.as_tensor(pred), T.as_tensor(target)
    if pred.shape != target.shape:
        raise DimensionError(f"prediction shape {pred.shape} != target shape {target.shape}")
    return pred, target


def bce_loss(pred, target, cfg=DEFAULT):
    """Mean binary cross-entropy over every pixel of the clip.

    Predictions are clamped to ``[clamp, 1 - clamp]`` before the logarithms.
    """
    pred, target = _pair(pred, target)
    p = T.clamp(pred, cfg.clamp, 1.0 - cfg.clamp)
    ll = target * T.log(p) + (1.0 - target) * T.log(1.0 - p)
    return -T.mean(ll)


def dice_loss(pred, target, cfg=DEFAULT):
    pred, target = _pair(pred, target)
    eps = cfg.epsilon
    fg = (T.tsum(pred * target) + eps) / (T.tsum(pred + target) + eps)
    bg = (T.tsum((1.0 - pred) * (1.0 - target)) + eps) / (T.tsum(2.0 - pred - target) + eps)
    return 1.0 - fg - bg


def bbox_loss(gt, pred):
    """Squared error between ground-truth and predicted (height, width)."""
    gt, pred = T.as_tensor(gt), T.as_tensor(pred)
    if gt.shape != pred.shape or gt.shape[-1:] != (2,):
        raise DimensionError(f"box extents must be (..., 2), got {gt.shape} and {pred.shape}")
    per_box = T.tsum(T.square(gt - pred), -1)
    return per_box if per_box.ndim == 0 else T.mean(per_box)


def total_loss(seg_bce, seg_dice, box):
    return seg_bce + seg_dice + box

