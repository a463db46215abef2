"""CapsuleVOS: video branch, frame branch with memory, capsule conditioning,
convolutional capsule layer, decoder, and the zooming module.

All tensors are channels-last. A clip at low resolution is (N, T, h, w, 3);
capsule grids are indexed (N, T, gh, gw, types).
"""

from dataclasses import dataclass
from typing import List, Optional

import numpy as np

from . import geometry as G
from . import routing as R
from . import tensor as T
from .config import ModelConfig
from .errors import ConfigurationError, DimensionError
from .tensor import MemoryState, Tensor

CAPS_WIDTH = 17  # 16 pose entries + 1 activation logit


def _uniform(rng, shape, fan_in):
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def grid_from_features(z, types):
    """Split a (..., types * 17) feature map into a CapsuleGrid."""
    z = z.reshape(z.shape[:-1] + (types, CAPS_WIDTH))
    poses = z[..., :16].reshape(z.shape[:-1] + (4, 4))
    return R.CapsuleGrid(poses, T.sigmoid(z[..., 16]))


def flatten_grid(grid):
    """Inverse layout of :func:`grid_from_features` with activations (not logits)."""
    p = grid.poses.reshape(grid.poses.shape[:-2] + (16,))
    z = T.concat([p, T.expand_dims(grid.activations, -1)], axis=-1)
    return z.reshape(z.shape[:-2] + (grid.types * CAPS_WIDTH,))


def pool_grid(grid, ksize):
    """Capsule pooling of a grid over a same-padded receptive field of ``ksize``."""
    flat = flatten_grid(grid)
    lead = flat.shape[:-1]
    fields, valid = T.patches(flat, ksize, 1, tuple(k // 2 for k in ksize))
    pooled = R.capsule_pool(fields, -2, valid[..., None])
    z = pooled.reshape(lead + (grid.types, CAPS_WIDTH))
    poses = z[..., :16].reshape(z.shape[:-1] + (4, 4))
    acts = T.clamp(z[..., 16], 0.0, 1.0)
    return R.CapsuleGrid(poses, acts)


@dataclass
class ClipOutput:
    masks: np.ndarray  # (N, T, H, W) probabilities in the full frame
    boxes: List[G.BoundingBox]
    memory: Optional[MemoryState]
    zoom_state: Optional[MemoryState]
    low_res: Optional[np.ndarray] = None


class CapsuleVOS:
    def __init__(self, cfg: ModelConfig, seed=0):
        self.cfg = cfg
        self.params = {}
        rng = np.random.default_rng(seed)
        self._build(rng)

    # ------------------------------------------------------------------
    # parameters
    # ------------------------------------------------------------------

    def _add(self, name, value):
        t = T.parameter(value, name=name)
        self.params[name] = t
        return t

    def _conv_param(self, rng, name, ksize, cin, cout, bias=True):
        fan_in = int(np.prod(ksize)) * cin
        self._add(name + ".w", _uniform(rng, tuple(ksize) + (cin, cout), fan_in))
        if bias:
            self._add(name + ".b", np.zeros(cout))

    def _build(self, rng):
        c = self.cfg
        cin = 3
        for i, (w, s) in enumerate(zip(c.video_widths, c.video_strides)):
            self._conv_param(rng, f"video.{i}.spatial", (1, 3, 3), cin, w)
            self._conv_param(rng, f"video.{i}.temporal", (3, 1, 1), w, w)
            cin = w
        self._conv_param(rng, "video.caps", (3, 3, 3), cin, c.video_types * CAPS_WIDTH)

        cin = 4
        for i, w in enumerate(c.frame_widths):
            self._conv_param(rng, f"frame.{i}", (3, 3), cin, w)
            cin = w
        ch = c.memory_channels
        if c.memory:
            for g in T.GATES:
                self._conv_param(rng, f"frame.lstm.{g}", (3, 3), cin + ch, ch)
            self.params["frame.lstm.forget.b"].data[:] = 1.0
        else:
            self._conv_param(rng, "frame.stateless", (3, 3), cin, ch)
        self._conv_param(rng, "frame.caps", (3, 3), ch, c.frame_types * CAPS_WIDTH)

        I, K, J, J2 = c.video_types, c.frame_types, c.cond_types, c.conv_types
        if c.routing == "attention":
            for role, n_in in (("key", I), ("value", I), ("query", K)):
                self._add(f"cond.W_{role}", _identity_noise(rng, n_in, J))
            for tag in ("query", "cond"):
                self._add(f"cond.{tag}.beta_a", np.zeros(J))
                self._add(f"cond.{tag}.beta_u", np.zeros(J))
        elif c.routing == "concat":
            self._add("cond.W_plain", _identity_noise(rng, I, J))
            self._add("cond.W_frame_plain", _identity_noise(rng, K, J))
            self._add("cond.beta_a", np.zeros(J))
            self._add("cond.beta_u", np.zeros(J))
        else:
            self._conv_param(rng, "fconv.cond", (3, 3, 3), (I + K) * CAPS_WIDTH, J * CAPS_WIDTH)
            self._conv_param(rng, "fconv.convcaps", (3, 3, 3), J * CAPS_WIDTH, J2 * CAPS_WIDTH)
        if c.routing != "conv":
            self._add("convcaps.W", _identity_noise(rng, J, J2))
            self._add("convcaps.beta_a", np.zeros(J2))
            self._add("convcaps.beta_u", np.zeros(J2))

        cin = (I + J + J2) * CAPS_WIDTH
        for i, w in enumerate(c.decoder_widths):
            self._add(f"decoder.{i}.w", _uniform(rng, (3, 3, 3, w, cin), 27 * cin))
            self._add(f"decoder.{i}.b", np.zeros(w))
            cin = w
        self._conv_param(rng, "decoder.out", (1, 3, 3), cin, 1)

        cin = 4
        for i, w in enumerate(c.zoom_widths):
            self._conv_param(rng, f"zoom.{i}", (3, 3), cin, w)
            cin = w
        hd = c.zoom_hidden
        for g in T.GATES:
            self._conv_param(rng, f"zoom.lstm.{g}", (1,), cin + hd, hd)
        self.params["zoom.lstm.forget.b"].data[:] = 1.0
        self._conv_param(rng, "zoom.fc", (1,), hd, 2)

    def p(self, name):
        return self.params[name]

    def parameter_groups(self):
        """Parameter names grouped by stage prefix."""
        groups = {}
        for name in self.params:
            parts = name.split(".")
            key = ".".join(parts[:2]) if parts[0] in ("video", "frame", "decoder", "zoom") else parts[0]
            groups.setdefault(key, []).append(name)
        return groups

    def state_dict(self):
        out = {f"param/{k}": v.data for k, v in self.params.items()}
        out["meta/preset"] = np.array(0.0 if self.cfg.preset == "desk" else 1.0)
        return out

    def load_state_dict(self, tensors, strict=True):
        preset = tensors.get("meta/preset")
        if preset is not None and (float(preset) == 0.0) != (self.cfg.preset == "desk"):
            raise ConfigurationError("checkpoint preset does not match model configuration")
        for name, t in self.params.items():
            key = f"param/{name}"
            if key not in tensors:
                if strict:
                    raise ConfigurationError(f"checkpoint lacks parameter {name}")
                continue
            if tensors[key].shape != t.shape:
                raise ConfigurationError(
                    f"parameter {name} has shape {tensors[key].shape} in checkpoint, model expects {t.shape}")
            t.data = np.array(tensors[key], dtype=t.data.dtype)

    # ------------------------------------------------------------------
    # building blocks
    # ------------------------------------------------------------------

    def _conv(self, x, name, stride=1, padding=None, act=T.relu):
        w = self.p(name + ".w")
        if padding is None:
            padding = tuple(k // 2 for k in w.shape[:-2])
        y = T.convolve(x, w, stride, padding) + self.p(name + ".b")
        return act(y) if act is not None else y

    def new_memory(self, n):
        if not self.cfg.memory:
            return None
        return MemoryState.zeros((n,) + self.cfg.memory_shape)

    def new_zoom_state(self, n):
        return MemoryState.zeros((n, 1, self.cfg.zoom_hidden))

    # ------------------------------------------------------------------
    # branches
    # ------------------------------------------------------------------

    def video_features(self, clip):
        c = self.cfg
        clip = T.as_tensor(clip)
        if clip.shape[1:] != (c.clip_length,) + tuple(c.low_res) + (3,):
            raise DimensionError(
                f"clip shape {clip.shape[1:]} != {(c.clip_length,) + tuple(c.low_res) + (3,)}")
        x = clip
        for i, s in enumerate(c.video_strides):
            x = self._conv(x, f"video.{i}.spatial", (1, s, s), (0, 1, 1))
            x = self._conv(x, f"video.{i}.temporal", 1, (1, 0, 0))
        return self._conv(x, "video.caps", (1, 2, 2), 1, act=None)

    def video_branch_forward(self, clip):
        """Low-res clip (N, T, h, w, 3) -> video capsules over (N, T, gh, gw)."""
        return grid_from_features(self.video_features(clip), self.cfg.video_types)

    def frame_features(self, frame, mask, memory):
        c = self.cfg
        frame, mask = T.as_tensor(frame), T.as_tensor(mask)
        if frame.shape[1:] != tuple(c.low_res) + (3,) or mask.shape[1:] != tuple(c.low_res):
            raise DimensionError(f"frame {frame.shape} / mask {mask.shape} do not match low_res {c.low_res}")
        x = T.concat([frame, T.expand_dims(mask, -1)], axis=-1)
        for i, s in enumerate(c.frame_strides):
            x = self._conv(x, f"frame.{i}", s)
        if c.memory:
            if memory is None:
                memory = self.new_memory(x.shape[0])
            kernels = {g: self.p(f"frame.lstm.{g}.w") for g in T.GATES}
            biases = {g: self.p(f"frame.lstm.{g}.b") for g in T.GATES}
            h, memory = T.recurrent_cell_step(x, memory, kernels, biases)
        else:
            h = self._conv(x, "frame.stateless", act=T.tanh)
        z = self._conv(h, "frame.caps", 2, 1, act=None)
        return z, memory

    def frame_branch_forward(self, frame, mask, memory=None):
        """Reference frame + mask -> frame capsules tiled along time, updated memory."""
        z, memory = self.frame_features(frame, mask, memory)
        tiled = T.tile(T.expand_dims(z, 1), (1, self.cfg.clip_length, 1, 1, 1))
        return grid_from_features(tiled, self.cfg.frame_types), memory

    def advance_memory(self, frame, mask, memory):
        """Frame-branch recurrence only (no capsules); used to roll memory forward."""
        _, memory = self.frame_features(frame, mask, memory)
        return memory

    # ------------------------------------------------------------------
    # conditioning + decoding
    # ------------------------------------------------------------------

    def _routing_cfg(self, prefix):
        base = R.RoutingConfig(iterations=self.cfg.routing_iterations,
                               lambdas=_lambdas(self.cfg.routing_iterations))
        return base.with_betas(self.p(prefix + ".beta_a"), self.p(prefix + ".beta_u"))

    def condition(self, video, frame):
        """Conditioned capsules from pooled video and frame capsules."""
        c = self.cfg
        if c.routing == "conv":
            raise ConfigurationError("fully convolutional ablation has no capsule conditioning")
        pv = pool_grid(video, (3, 3, 3))
        pf = pool_grid(frame, (3, 3, 3))
        if c.routing == "attention":
            w = R.TransformationWeights({r: self.p(f"cond.W_{r}") for r in ("key", "value", "query")})
            return R.attention_routing(pv, pf, w, self._routing_cfg("cond.cond"), self._routing_cfg("cond.query"))
        w = R.TransformationWeights({"plain": self.p("cond.W_plain"), "frame_plain": self.p("cond.W_frame_plain")})
        return R.concat_routing(pv, pf, w, self._routing_cfg("cond"))

    def conv_capsules(self, cond):
        pooled = pool_grid(cond, (3, 3, 3))
        votes = R.compute_votes(pooled, self.p("convcaps.W"), "plain")
        return R.em_routing(pooled.activations, votes, self._routing_cfg("convcaps"))

    def decode(self, feats):
        x = feats
        for i in range(len(self.cfg.decoder_widths)):
            x = T.relu(T.transpose_convolve(x, self.p(f"decoder.{i}.w"), (1, 2, 2)) + self.p(f"decoder.{i}.b"))
        y = self._conv(x, "decoder.out", 1, (0, 1, 1), act=T.sigmoid)
        return y.reshape(y.shape[:-1])

    def condition_and_decode(self, video, frame):
        """Capsule grids from both branches -> (N, T, h, w) foreground probabilities."""
        if video.index_shape != frame.index_shape:
            raise DimensionError(f"video grid {video.index_shape} != frame grid {frame.index_shape}")
        cond = self.condition(video, frame)
        caps = self.conv_capsules(cond)
        feats = T.concat([flatten_grid(caps), flatten_grid(cond), flatten_grid(video)], axis=-1)
        return self.decode(feats)

    def segment(self, clip_lr, ref_frame_lr, ref_mask_lr, memory=None):
        """Differentiable core on cropped inputs; returns (predictions, new memory)."""
        c = self.cfg
        if c.routing == "conv":
            zv = self.video_features(clip_lr)
            zf, memory = self.frame_features(ref_frame_lr, ref_mask_lr, memory)
            zf = T.tile(T.expand_dims(zf, 1), (1, c.clip_length, 1, 1, 1))
            h1 = self._conv(T.concat([zv, zf], -1), "fconv.cond", 1, 1)
            h2 = self._conv(h1, "fconv.convcaps", 1, 1)
            return self.decode(T.concat([h2, h1, zv], -1)), memory
        video = self.video_branch_forward(clip_lr)
        frame, memory = self.frame_branch_forward(ref_frame_lr, ref_mask_lr, memory)
        return self.condition_and_decode(video, frame), memory

    # ------------------------------------------------------------------
    # zooming
    # ------------------------------------------------------------------

    def zoom_extents(self, frame_hr, mask_hr, zoom_state=None):
        """Predicted (height, width) as fractions of the frame, plus new LSTM state."""
        frame_hr, mask_hr = T.as_tensor(frame_hr), T.as_tensor(mask_hr)
        x = T.concat([frame_hr, T.expand_dims(mask_hr, -1)], axis=-1)
        for i in range(len(self.cfg.zoom_widths)):
            x = self._conv(x, f"zoom.{i}", 2, 1)
        x = T.mean(x, (1, 2))  # (N, C)
        x = T.expand_dims(x, 1)
        if zoom_state is None:
            zoom_state = self.new_zoom_state(x.shape[0])
        kernels = {g: self.p(f"zoom.lstm.{g}.w") for g in T.GATES}
        biases = {g: self.p(f"zoom.lstm.{g}.b") for g in T.GATES}
        h, zoom_state = T.recurrent_cell_step(x, zoom_state, kernels, biases)
        z = self._conv(h, "zoom.fc", act=T.sigmoid)
        return z.reshape((z.shape[0], 2)), zoom_state

    def zoom_predict(self, frame_hr, mask_hr, zoom_state=None):
        """Boxes for a batch of (N, H, W, 3) frames and (N, H, W) masks.

        The box is centred on the mask centroid, scaled by ``zoom_context``
        and clamped to the frame and the minimum size. Empty masks fall back
        to the full frame.
        """
        c = self.cfg
        H, W = c.high_res
        mask_hr = np.asarray(getattr(mask_hr, "data", mask_hr))
        ext, zoom_state = self.zoom_extents(frame_hr, mask_hr, zoom_state)
        boxes = []
        for n in range(mask_hr.shape[0]):
            boxes.append(self._box_from_extents(mask_hr[n], ext.data[n]))
        return boxes, ext, zoom_state

    def _box_from_extents(self, mask, ext):
        c = self.cfg
        H, W = c.high_res
        centre = G.mask_centroid(mask > 0.5)
        if centre is None:
            return G.BoundingBox.full_frame(H, W)
        box = G.BoundingBox(centre[0], centre[1], ext[0] * H * c.zoom_context, ext[1] * W * c.zoom_context)
        return box.clamped(H, W, *c.min_box)

    def handcrafted_box(self, mask):
        c = self.cfg
        H, W = c.high_res
        mask = np.asarray(mask) > 0.5
        if not mask.any():
            return G.BoundingBox.full_frame(H, W)
        return G.ground_truth_bbox(mask[None]).scaled(c.handcrafted_margin).clamped(H, W, *c.min_box)

    def crop_box(self, gt_box):
        """Training-time crop for a ground-truth box (same context as inference)."""
        c = self.cfg
        H, W = c.high_res
        if gt_box is None or c.zoom == "none":
            return G.BoundingBox.full_frame(H, W)
        return gt_box.scaled(c.zoom_context).clamped(H, W, *c.min_box)

    # ------------------------------------------------------------------
    # full pipeline on high-resolution clips
    # ------------------------------------------------------------------

    def realign_memory(self, memory, boxes):
        """Move memory maps from the boxes they were computed in onto ``boxes``."""
        if memory is None:
            return None
        old = memory.box
        if old is None:
            return MemoryState(memory.hidden, memory.cell, list(boxes))
        gh, gw = self.cfg.feature_hw
        mats = [G.realign_matrices(o, b, (gh, gw)) for o, b in zip(old, boxes)]
        ry = np.stack([m[0] for m in mats])
        rx = np.stack([m[1] for m in mats])
        return MemoryState(G.resample(memory.hidden, ry, rx), G.resample(memory.cell, ry, rx), list(boxes))

    def prepare(self, clip_hr, boxes, ref_mask_hr):
        """Crop a batch of high-res clips and reference masks to their boxes."""
        c = self.cfg
        clips, masks = [], []
        for n, box in enumerate(boxes):
            clips.append(G.crop_and_resize(clip_hr[n], box, c.low_res))
            masks.append(G.crop_mask(ref_mask_hr[n], box, c.low_res).astype(np.float64))
        return np.stack(clips), np.stack(masks)

    def choose_boxes(self, frame_hr, ref_mask_hr, zoom_state):
        c = self.cfg
        H, W = c.high_res
        n = ref_mask_hr.shape[0]
        boxes, _, zoom_state = self.zoom_predict(frame_hr, ref_mask_hr, zoom_state)
        if c.zoom == "none":
            boxes = [G.BoundingBox.full_frame(H, W)] * n
        elif c.zoom == "handcrafted":
            boxes = [self.handcrafted_box(ref_mask_hr[i]) for i in range(n)]
        return boxes, zoom_state

    def forward(self, clip_hr, ref_mask_hr, memory=None, zoom_state=None):
        """Segment a batch of high-res clips (N, T, H, W, 3) given reference masks (N, H, W)."""
        c = self.cfg
        clip_hr = np.asarray(clip_hr, dtype=np.float64)
        ref_mask_hr = np.asarray(ref_mask_hr, dtype=np.float64)
        if clip_hr.ndim != 5 or clip_hr.shape[1:] != (c.clip_length,) + tuple(c.high_res) + (3,):
            raise DimensionError(f"clip shape {clip_hr.shape} does not match config")
        n = clip_hr.shape[0]
        boxes, zoom_state = self.choose_boxes(clip_hr[:, 0], ref_mask_hr, zoom_state)
        clip_lr, mask_lr = self.prepare(clip_hr, boxes, ref_mask_hr)
        memory = self.realign_memory(memory if memory is not None else self.new_memory(n), boxes)
        pred, memory = self.segment(clip_lr, clip_lr[:, 0], mask_lr, memory)
        if memory is not None:
            memory = MemoryState(memory.hidden, memory.cell, list(boxes))
        full = np.stack([G.paste_back(pred.data[i], boxes[i], c.high_res) for i in range(n)])
        return ClipOutput(np.clip(full, 0.0, 1.0), boxes, memory, zoom_state, pred.data)


def _identity_noise(rng, n_in, n_out, noise=0.01):
    return np.tile(np.eye(4), (n_in, n_out, 1, 1)) + noise * rng.standard_normal((n_in, n_out, 4, 4))


def _lambdas(n):
    if n == 3:
        return (0.5, 1.0, 2.0)
    return tuple(float(v) for v in np.geomspace(0.5, 2.0, n)) if n > 1 else (1.0,)
