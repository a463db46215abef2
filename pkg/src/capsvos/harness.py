"""Experiment harness: run configuration, training, chained inference and evaluation."""

import json
import os
import time
import typing
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Callable, Dict, List, Optional

import numpy as np

from . import geometry as G
from . import losses as L
from . import synth
from . import tensor as T
from .checkpoint import load_checkpoint, save_checkpoint
from .config import preset as model_preset
from .errors import ConfigurationError, ContractError, NonFiniteLossError
from .metrics import contour_accuracy_F, region_similarity_J, schedule_clips
from .model import CapsuleVOS
from .optim import Adam
from .tensor import MemoryState, Tensor

ABLATIONS = ("no_memory", "no_zoom", "hc_zoom", "concat_routing", "fully_conv")


@dataclass
class RunConfig:
    preset: str = "desk"
    train_data: str = ""
    val_data: str = ""
    epochs: int = 1
    batch_size: int = 2
    lr: float = 1e-4
    overlap: int = 3
    ablation: Optional[str] = None
    seed: int = 0
    out_dir: str = "run"
    max_steps: int = 0
    max_minutes: float = 0.0
    jitter: float = 0.1
    val_limit: int = 0

    def __post_init__(self):
        if self.preset not in ("desk", "paper"):
            raise ConfigurationError(f"unknown preset {self.preset!r}")
        if self.ablation in ("", "none", "full"):
            self.ablation = None
        if self.ablation is not None and self.ablation not in ABLATIONS:
            raise ConfigurationError(f"ablation must be one of {ABLATIONS}, got {self.ablation!r}")
        clip = model_preset(self.preset).clip_length
        if not 0 <= self.overlap <= clip - 1:
            raise ConfigurationError(f"overlap must lie in [0, {clip - 1}]")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigurationError("epochs and batch_size must be positive")
        if self.lr <= 0:
            raise ConfigurationError("learning rate must be positive")

    def model_config(self):
        return model_preset(self.preset).with_ablation(self.ablation)

    @classmethod
    def from_text(cls, text, **overrides):
        """Parse ``key = value`` lines (``#`` starts a comment); keyword overrides win."""
        hints = typing.get_type_hints(cls)
        values = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigurationError(f"config line {lineno}: expected 'key = value'")
            key, val = (s.strip() for s in line.split("=", 1))
            if key not in hints:
                raise ConfigurationError(f"config line {lineno}: unknown key {key!r}")
            values[key] = _cast(hints[key], val, key)
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**values)

    @classmethod
    def from_file(cls, path, **overrides):
        try:
            with open(path, encoding="utf-8") as f:
                text = f.read()
        except OSError as e:
            raise OSError(f"cannot read config {path}: {e}") from e
        return cls.from_text(text, **overrides)

    def to_text(self):
        return "".join(f"{f.name} = {'none' if getattr(self, f.name) is None else getattr(self, f.name)}\n"
                       for f in fields(self))


def _cast(tp, val, key):
    try:
        if tp in (int, float):
            return tp(val)
        if val.lower() == "none":
            return None
        return val
    except ValueError:
        raise ConfigurationError(f"config key {key!r}: cannot parse {val!r}") from None


# ----------------------------------------------------------------------
# data
# ----------------------------------------------------------------------

@dataclass
class Video:
    clip_id: str
    scenario: str
    frames: np.ndarray  # (L, H, W) uint8
    masks: np.ndarray  # (L, H, W) uint8

    @property
    def length(self):
        return len(self.frames)


def load_split(root, split):
    manifest = synth.load_manifest(root)
    vids = [Video(e["clip_id"], e["scenario"], *synth.load_video(root, e))
            for e in manifest["clips"] if e["split"] == split]
    if not vids:
        raise ContractError(f"dataset {root} has no {split!r} videos")
    return vids


def post_occlusion_frames(masks):
    """Frames after the first mid-video empty window where the target is visible again."""
    for start, stop in synth.empty_windows(masks):
        if start > 0 and stop < len(masks):
            vis = np.asarray(masks[stop:]).reshape(len(masks) - stop, -1).any(axis=1)
            return stop + np.nonzero(vis)[0]
    return np.zeros(0, dtype=int)


# ----------------------------------------------------------------------
# chained inference and evaluation
# ----------------------------------------------------------------------

@dataclass
class ClipRecord:
    start: int
    reference: np.ndarray
    box: G.BoundingBox


@dataclass
class ChainResult:
    probs: np.ndarray  # (L, H, W)
    starts: List[int]
    clips: List[ClipRecord]

    @property
    def masks(self):
        return self.probs > 0.5


def chain_inference(model, frames, first_mask, overlap=3):
    """Segment a whole video clip by clip.

    Each clip after the first takes as reference the binarized prediction of
    the previous clip at its start frame (the latest predicted frame if the
    clips do not overlap). Overlapped frames keep the later clip's output.
    Memory and zoom states run through the whole video. Videos shorter than
    a clip are padded by repeating the last frame.
    """
    frames = np.asarray(frames)
    if frames.ndim == 3:
        frames = synth.to_rgb(frames)
    n = len(frames)
    C = model.cfg.clip_length
    if n < C:
        frames = np.concatenate([frames, np.repeat(frames[-1:], C - n, axis=0)])
    starts = schedule_clips(len(frames), C, overlap)
    probs = np.zeros(frames.shape[:3])
    ref = np.asarray(first_mask).astype(bool)
    memory = zoom = None
    records = []
    for i, s in enumerate(starts):
        if i > 0:
            prev = starts[i - 1]
            ref = probs[min(s, prev + C - 1)] > 0.5
        out = model.forward(frames[None, s:s + C], ref[None].astype(np.float64), memory, zoom)
        probs[s:s + C] = out.masks[0]
        memory, zoom = out.memory, out.zoom_state
        records.append(ClipRecord(s, ref.copy(), out.boxes[0]))
    return ChainResult(probs[:n], starts, records)


@dataclass
class EvalReport:
    per_clip: List[Dict]
    J_mean: float
    J_recall: float
    F_mean: float
    F_recall: float
    frames: int
    seconds: float
    fps: float

    def to_json(self):
        return json.dumps(asdict(self), indent=1, sort_keys=True)


def score_frames(pred, gt, idx, tolerance=1.0):
    js = np.array([region_similarity_J(pred[t], gt[t]) for t in idx])
    fs = np.array([contour_accuracy_F(pred[t], gt[t], tolerance) for t in idx])
    return js, fs


def summarize(per_clip, js_all, fs_all, seconds, frames):
    if not per_clip:
        raise ContractError("no frames to score")
    return EvalReport(per_clip,
                      float(np.mean([c["J"] for c in per_clip])), float(np.mean(js_all > 0.5)),
                      float(np.mean([c["F"] for c in per_clip])), float(np.mean(fs_all > 0.5)),
                      int(frames), float(seconds), float(frames / seconds) if seconds > 0 else 0.0)


def evaluate_videos(model, videos, overlap=3, frame_selector=None, tolerance=1.0, predictions=None):
    """Chain inference on each video and J / F over its scored frames.

    Frame 0 carries the given mask and is never scored. ``frame_selector``
    maps a Video to the frame indices to score. ``predictions`` (clip_id to
    binary masks) bypasses the model.
    """
    per_clip, js_all, fs_all = [], [], []
    seconds, frames = 0.0, 0
    for v in videos:
        idx = np.arange(1, v.length) if frame_selector is None else np.asarray(frame_selector(v), dtype=int)
        idx = idx[idx > 0]
        if predictions is not None:
            pred = np.asarray(predictions[v.clip_id]).astype(bool)
        else:
            t = time.perf_counter()
            pred = chain_inference(model, v.frames, v.masks[0], overlap).masks
            seconds += time.perf_counter() - t
            frames += v.length
        if idx.size == 0:
            continue
        js, fs = score_frames(pred, v.masks, idx, tolerance)
        js_all.append(js)
        fs_all.append(fs)
        per_clip.append({"clip_id": v.clip_id, "scenario": v.scenario, "J": float(js.mean()),
                         "F": float(fs.mean()), "frames": int(idx.size)})
    js_all = np.concatenate(js_all) if js_all else np.zeros(0)
    fs_all = np.concatenate(fs_all) if fs_all else np.zeros(0)
    return summarize(per_clip, js_all, fs_all, seconds, frames)


def build_model(cfg, checkpoint=None):
    model = CapsuleVOS(cfg.model_config(), seed=cfg.seed)
    if checkpoint is not None:
        model.load_state_dict(load_checkpoint(checkpoint))
    return model


def _check_canvas(model, videos):
    hw = tuple(model.cfg.high_res)
    for v in videos:
        if v.frames.shape[1:] != hw:
            raise ConfigurationError(
                f"video {v.clip_id} has frames {v.frames.shape[1:]}, preset {model.cfg.preset} expects {hw}")


def evaluate(cfg, checkpoint, split="val", frame_selector=None):
    model = build_model(cfg, checkpoint)
    videos = load_split(cfg.val_data or cfg.train_data, split)
    _check_canvas(model, videos)
    return evaluate_videos(model, videos, cfg.overlap, frame_selector)


# ----------------------------------------------------------------------
# training
# ----------------------------------------------------------------------

@dataclass
class ChainStep:
    boxes: list
    frame_lr: np.ndarray
    mask_lr: np.ndarray
    frame_hr: np.ndarray
    mask_hr: np.ndarray


@dataclass
class Batch:
    boxes: list
    clip_lr: np.ndarray  # (N, T, h, w, 3)
    target: np.ndarray  # (N, T, h, w)
    frame_hr: np.ndarray  # (N, H, W, 3)
    mask_hr: np.ndarray  # (N, H, W)
    gt_ext: np.ndarray  # (N, 2) box extents as frame fractions
    has_box: np.ndarray  # (N,)
    chain: List[ChainStep] = field(default_factory=list)


def _jitter(box, rng, amount, cfg):
    H, W = cfg.high_res
    s = np.exp(rng.uniform(-amount, amount))
    dr, dc = rng.uniform(-amount / 2, amount / 2, 2)
    b = G.BoundingBox(box.center_row + dr * box.height, box.center_col + dc * box.width,
                      box.height * s, box.width * s)
    return b.clamped(H, W, *cfg.min_box)


def _training_box(model, masks, rng, jitter):
    c = model.cfg
    gt = synth.clip_box(masks)
    if c.zoom == "handcrafted":
        return model.handcrafted_box(masks[0]), gt
    box = model.crop_box(gt)
    if gt is not None and c.zoom == "learned" and jitter > 0:
        box = _jitter(box, rng, jitter, c)
    return box, gt


def make_batch(model, videos, k, starts, rng, jitter=0.0):
    """Teacher-forced inputs for clip ``k`` of each video plus the reference chain before it."""
    c = model.cfg
    C, H, W = c.clip_length, *c.high_res
    chain = []
    for j in range(k if c.memory or c.zoom == "learned" else 0):
        s = starts[j]
        boxes, f_lr, m_lr = [], [], []
        for v in videos:
            box, _ = _training_box(model, v.masks[s:s + C], rng, jitter)
            boxes.append(box)
            f_lr.append(G.crop_and_resize(synth.to_rgb(v.frames[s]), box, c.low_res))
            m_lr.append(G.crop_mask(v.masks[s], box, c.low_res))
        chain.append(ChainStep(boxes, np.stack(f_lr), np.stack(m_lr).astype(np.float64),
                               np.stack([synth.to_rgb(v.frames[s]) for v in videos]),
                               np.stack([v.masks[s] for v in videos]).astype(np.float64)))
    s = starts[k]
    boxes, clips, tgts, ext, has = [], [], [], [], []
    for v in videos:
        m = v.masks[s:s + C]
        box, gt = _training_box(model, m, rng, jitter)
        boxes.append(box)
        clips.append(G.crop_and_resize(synth.to_rgb(v.frames[s:s + C]), box, c.low_res))
        tgts.append(G.crop_mask(m, box, c.low_res))
        has.append(gt is not None)
        ext.append((gt.height / H, gt.width / W) if gt is not None else (0.0, 0.0))
    return Batch(boxes, np.stack(clips), np.stack(tgts).astype(np.float64),
                 np.stack([synth.to_rgb(v.frames[s]) for v in videos]),
                 np.stack([v.masks[s] for v in videos]).astype(np.float64),
                 np.array(ext), np.array(has), chain)


def batch_loss(model, batch, loss_cfg=L.DEFAULT):
    """Total loss and its parts (``L_s`` BCE, ``L_D`` dice, ``L_r`` box) for a batch."""
    c = model.cfg
    n = len(batch.boxes)
    learned = c.zoom == "learned"
    memory, zs = model.new_memory(n), None
    for step in batch.chain:
        if learned:
            _, zs = model.zoom_extents(step.frame_hr, step.mask_hr, zs)
        if memory is not None:
            memory = model.realign_memory(memory, step.boxes)
            memory = model.advance_memory(step.frame_lr, step.mask_lr, memory)
            memory = MemoryState(memory.hidden, memory.cell, list(step.boxes))
    memory = model.realign_memory(memory, batch.boxes)
    pred, _ = model.segment(batch.clip_lr, batch.clip_lr[:, 0], batch.target[:, 0], memory)
    target = Tensor(batch.target)
    l_s = L.bce_loss(pred, target, loss_cfg)
    l_d = T.mean(T.stack([L.dice_loss(pred[i], target[i], loss_cfg) for i in range(n)]))
    if learned and batch.has_box.any():
        ext, _ = model.zoom_extents(batch.frame_hr, batch.mask_hr, zs)
        idx = np.nonzero(batch.has_box)[0]
        l_r = L.bbox_loss(batch.gt_ext[idx], ext[idx])
    else:
        l_r = Tensor(0.0)
    return L.total_loss(l_s, l_d, l_r), {"L_s": l_s, "L_D": l_d, "L_r": l_r}


def _stage_of(name):
    return name.split(".")[0]


@dataclass
class TrainResult:
    model: CapsuleVOS
    checkpoint: str
    history: List[Dict]
    best_val_J: float
    steps: int
    seconds: float


def _fmt(kind, rec):
    return "\t".join([kind] + [f"{k}={v!r}" if isinstance(v, float) else f"{k}={v}" for k, v in rec.items()])


def train(cfg, echo: Optional[Callable[[str], None]] = None, train_videos=None, val_videos=None):
    """Train from scratch; keeps the best-validation-J checkpoint in ``cfg.out_dir``.

    Log lines are tab-separated ``key=value`` fields after a record tag
    (``step`` or ``epoch``) and go to ``train.log``.
    """
    rng = np.random.default_rng(cfg.seed)
    model = build_model(cfg)
    c = model.cfg
    train_videos = train_videos if train_videos is not None else load_split(cfg.train_data, "train")
    val_videos = val_videos if val_videos is not None else load_split(cfg.val_data or cfg.train_data, "val")
    _check_canvas(model, train_videos)
    _check_canvas(model, val_videos)
    lengths = {v.length for v in train_videos}
    if len(lengths) != 1:
        raise ContractError(f"training videos must share one length, got {sorted(lengths)}")
    starts = schedule_clips(lengths.pop(), c.clip_length, cfg.overlap)
    if cfg.val_limit:
        val_videos = val_videos[:cfg.val_limit]
    os.makedirs(cfg.out_dir, exist_ok=True)
    log_path = os.path.join(cfg.out_dir, "train.log")
    best_path = os.path.join(cfg.out_dir, "best.ckpt")
    names = list(model.params)
    params = [model.params[k] for k in names]
    opt = Adam(model.params, cfg.lr)
    history, best, step, stop = [], -1.0, 0, False
    t0 = time.process_time()
    with open(log_path, "w", encoding="utf-8") as log:
        def emit(kind, rec):
            line = _fmt(kind, rec)
            log.write(line + "\n")
            log.flush()
            history.append(dict(rec, kind=kind))
            if echo is not None:
                echo(line)

        for epoch in range(cfg.epochs):
            order = rng.permutation(len(train_videos))
            sums = np.zeros(4)
            count = 0
            for b in range(0, len(order), cfg.batch_size):
                vids = [train_videos[i] for i in order[b:b + cfg.batch_size]]
                k = int(rng.integers(len(starts)))
                batch = make_batch(model, vids, k, starts, rng, cfg.jitter)
                with T.Tape() as tape:
                    loss, parts = batch_loss(model, batch)
                vals = {name: float(t.item()) for name, t in parts.items()}
                vals["L"] = float(loss.item())
                for name, v in vals.items():
                    if not np.isfinite(v):
                        raise NonFiniteLossError(name, step, vals)
                grads = tape.gradient(loss, params)
                for name, g in zip(names, grads):
                    if not np.all(np.isfinite(g)):
                        raise NonFiniteLossError(f"gradient of {_stage_of(name)} ({name})", step, vals)
                opt.step(dict(zip(names, grads)))
                emit("step", {"epoch": epoch, "step": step, **vals})
                sums += [vals["L_s"], vals["L_D"], vals["L_r"], vals["L"]]
                count += 1
                step += 1
                if (cfg.max_steps and step >= cfg.max_steps) or (
                        cfg.max_minutes and time.process_time() - t0 > 60.0 * cfg.max_minutes):
                    stop = True
                    break
            report = evaluate_videos(model, val_videos, cfg.overlap)
            mean = sums / max(count, 1)
            emit("epoch", {"epoch": epoch, "L_s": float(mean[0]), "L_D": float(mean[1]), "L_r": float(mean[2]),
                           "L": float(mean[3]), "val_J": report.J_mean})
            if report.J_mean > best:
                best = report.J_mean
                save_checkpoint(best_path, model.state_dict())
            if stop:
                break
    save_checkpoint(os.path.join(cfg.out_dir, "last.ckpt"), model.state_dict())
    if best_path:
        model.load_state_dict(load_checkpoint(best_path))
    return TrainResult(model, best_path, history, best, step, time.process_time() - t0)


# ----------------------------------------------------------------------
# ablations
# ----------------------------------------------------------------------

def scenario_reports(model, videos, overlap=3):
    """Per-scenario reports; occlusion-type scenarios are scored on post-occlusion frames."""
    out = {}
    for scen in sorted({v.scenario for v in videos}):
        vids = [v for v in videos if v.scenario == scen]
        sel = (lambda v: post_occlusion_frames(v.masks)) if scen in ("occlusion", "exit_reenter") else None
        out[scen] = evaluate_videos(model, vids, overlap, sel)
    return out


def ablate(cfg, variants=("full", "no_zoom", "no_memory"), seeds=(0, 1, 2), echo=None):
    """Train and evaluate each variant for each seed; returns {variant: {seed: {scenario: J}}}."""
    train_videos = load_split(cfg.train_data, "train")
    val_videos = load_split(cfg.val_data or cfg.train_data, "val")
    table = {}
    for variant in variants:
        table[variant] = {}
        for seed in seeds:
            run = replace(cfg, ablation=None if variant == "full" else variant, seed=int(seed),
                          out_dir=os.path.join(cfg.out_dir, f"{variant}_seed{seed}"))
            res = train(run, echo, train_videos, val_videos)
            reps = scenario_reports(res.model, val_videos, cfg.overlap)
            table[variant][int(seed)] = {s: r.J_mean for s, r in reps.items()}
    os.makedirs(cfg.out_dir, exist_ok=True)
    with open(os.path.join(cfg.out_dir, "ablation.json"), "w", encoding="utf-8") as f:
        json.dump(table, f, indent=1, sort_keys=True)
    return table
