"""Model configuration and the two scale presets.

The desk preset is derived from the paper preset: spatial sizes divided by 4,
channel widths by 8, capsule type counts halved (rounded up).
"""

import math
from dataclasses import asdict, dataclass, replace
from typing import Tuple

from .errors import ConfigurationError

ZOOM_MODES = ("learned", "none", "handcrafted")
ROUTING_MODES = ("attention", "concat", "conv")


@dataclass(frozen=True)
class ModelConfig:
    preset: str
    clip_length: int
    low_res: Tuple[int, int]
    high_res: Tuple[int, int]
    video_widths: Tuple[int, ...]
    video_strides: Tuple[int, ...]
    frame_widths: Tuple[int, ...]
    frame_strides: Tuple[int, ...]
    memory_channels: int
    video_types: int
    frame_types: int
    cond_types: int
    conv_types: int
    decoder_widths: Tuple[int, ...]
    zoom_widths: Tuple[int, ...]
    zoom_hidden: int
    min_box: Tuple[int, int]
    zoom_context: float = 1.3
    handcrafted_margin: float = 1.5
    routing_iterations: int = 3
    memory: bool = True
    zoom: str = "learned"
    routing: str = "attention"

    def __post_init__(self):
        if self.zoom not in ZOOM_MODES:
            raise ConfigurationError(f"zoom mode must be one of {ZOOM_MODES}")
        if self.routing not in ROUTING_MODES:
            raise ConfigurationError(f"routing mode must be one of {ROUTING_MODES}")
        if len(self.video_widths) != 6 or len(self.video_strides) != 6:
            raise ConfigurationError("video branch has exactly 6 (2+1)D convolutions")
        if len(self.frame_widths) != 4 or len(self.frame_strides) != 4:
            raise ConfigurationError("frame branch has exactly 4 convolutions")
        fh, fw = self.feature_hw
        gh, gw = self.capsule_hw
        if math.prod(self.video_strides) != math.prod(self.frame_strides):
            raise ConfigurationError("video and frame branches must reach the same resolution")
        if gh * 2 ** len(self.decoder_widths) != self.low_res[0] or gw * 2 ** len(self.decoder_widths) != self.low_res[1]:
            raise ConfigurationError("decoder upsampling must return to the low-resolution input size")
        if fh * math.prod(self.video_strides) != self.low_res[0]:
            raise ConfigurationError("low_res must be divisible by the branch strides")

    @property
    def feature_hw(self):
        s = math.prod(self.video_strides)
        return self.low_res[0] // s, self.low_res[1] // s

    @property
    def capsule_hw(self):
        fh, fw = self.feature_hw
        return (fh + 1) // 2, (fw + 1) // 2

    @property
    def video_capsule_grid(self):
        return (self.clip_length,) + self.capsule_hw

    @property
    def memory_shape(self):
        return self.feature_hw + (self.memory_channels,)

    def with_ablation(self, name):
        """Return the configuration for a named ablation (None or "full" for the full model)."""
        if name in (None, "", "full"):
            return self
        changes = {
            "no_memory": {"memory": False},
            "no_zoom": {"zoom": "none"},
            "hc_zoom": {"zoom": "handcrafted"},
            "concat_routing": {"routing": "concat"},
            "fully_conv": {"routing": "conv"},
        }
        if name not in changes:
            raise ConfigurationError(f"unknown ablation {name!r}")
        return replace(self, **changes[name])

    def to_dict(self):
        return asdict(self)


def paper_preset():
    return ModelConfig(
        preset="paper",
        clip_length=8,
        low_res=(128, 224),
        high_res=(512, 896),
        video_widths=(64, 128, 256, 256, 512, 512),
        video_strides=(2, 1, 2, 1, 1, 1),
        frame_widths=(32, 64, 128, 128),
        frame_strides=(2, 1, 2, 1),
        memory_channels=128,
        video_types=12,
        frame_types=8,
        cond_types=16,
        conv_types=16,
        decoder_widths=(256, 128, 64),
        zoom_widths=(64, 128, 128, 256),
        zoom_hidden=256,
        min_box=(64, 112),
    )


def _scale(cfg, spatial, channels, types):
    def ch(v):
        return max(1, v // channels)

    def ty(v):
        return -(-v // types)

    return replace(
        cfg,
        low_res=tuple(v // spatial for v in cfg.low_res),
        high_res=tuple(v // spatial for v in cfg.high_res),
        video_widths=tuple(ch(v) for v in cfg.video_widths),
        frame_widths=tuple(ch(v) for v in cfg.frame_widths),
        memory_channels=ch(cfg.memory_channels),
        video_types=ty(cfg.video_types),
        frame_types=ty(cfg.frame_types),
        cond_types=ty(cfg.cond_types),
        conv_types=ty(cfg.conv_types),
        decoder_widths=tuple(ch(v) for v in cfg.decoder_widths),
        zoom_widths=tuple(ch(v) for v in cfg.zoom_widths),
        zoom_hidden=ch(cfg.zoom_hidden),
        min_box=tuple(v // spatial for v in cfg.min_box),
    )


def desk_preset():
    return replace(_scale(paper_preset(), 4, 8, 2), preset="desk")


def preset(name):
    if name == "paper":
        return paper_preset()
    if name == "desk":
        return desk_preset()
    raise ConfigurationError(f"unknown preset {name!r}")
