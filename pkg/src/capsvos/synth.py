"""Deterministic synthetic videos of textured moving shapes with exact masks.

Every episode has one labeled target, at least one unlabeled distractor of the
same shape class, optional static occluders drawn above all objects, and a
static textured background. In the occlusion and exit scenarios one
distractor is a decoy that disappears and reappears together with the target. Rendering is plain rasterization (no
anti-aliasing), so the target mask is exactly the visible target silhouette.

Frames are 8-bit grayscale; as model input they are replicated to 3 channels.
"""

import json
import math
import os
from dataclasses import asdict, dataclass, field, replace
from typing import List, Optional, Tuple

import numpy as np
from PIL import Image

from .errors import ConfigurationError, ContractError, ParameterError
from .geometry import BoundingBox, ground_truth_bbox

SCENARIOS = ("plain", "small_object", "occlusion", "exit_reenter")
SHAPES = ("disk", "rectangle", "l_shape")
MOTIONS = ("linear", "sinusoidal", "straight", "return")
SMALL_AREA_FRACTION = 0.003
EPISODE_LENGTH = 24


@dataclass(frozen=True)
class ObjectSpec:
    shape: str
    half_size: Tuple[float, float]  # half-height, half-width in pixels
    intensity: float
    stripe_amp: float
    stripe_period: float
    stripe_angle: float
    start: Tuple[float, float]
    velocity: Tuple[float, float]
    motion: str = "linear"
    amplitude: float = 0.0
    period: float = 12.0
    turn_time: float = 0.0

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise ParameterError(f"unknown shape {self.shape!r}")
        if self.motion not in MOTIONS:
            raise ParameterError(f"unknown motion {self.motion!r}")
        if min(self.half_size) < 1.0:
            raise ParameterError("object half-size must be at least 1 px")


@dataclass(frozen=True)
class Occluder:
    top: int
    left: int
    height: int
    width: int
    intensity: float


@dataclass(frozen=True)
class SceneSpec:
    canvas: Tuple[int, int]
    target: ObjectSpec
    distractors: Tuple[ObjectSpec, ...]
    occluders: Tuple[Occluder, ...] = ()
    scenario: str = "plain"
    seed: int = 0
    episode_length: int = EPISODE_LENGTH
    background: Tuple[float, float, float, float] = (110.0, 0.0, 0.0, 6.0)

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise ParameterError(f"unknown scenario {self.scenario!r}")
        if not self.distractors:
            raise ParameterError("a scene needs at least one distractor")
        if any(d.shape != self.target.shape for d in self.distractors):
            raise ParameterError("distractors must share the target's shape class")


@dataclass
class ClipSample:
    frames: np.ndarray  # (T, H, W, 3) float64 in [0, 1]
    masks: np.ndarray  # (T, H, W) uint8 in {0, 1}
    gt_box: Optional[BoundingBox]
    scenario: str = "plain"
    seed: int = 0
    t0: int = 0

    @property
    def ref_mask(self):
        return self.masks[0]


def _fold(p, lo, hi):
    """Reflect ``p`` into ``[lo, hi]`` (a triangle wave)."""
    span = hi - lo
    if span <= 0:
        return np.full_like(np.asarray(p, dtype=np.float64), (lo + hi) / 2.0)
    q = np.mod(np.asarray(p, dtype=np.float64) - lo, 2.0 * span)
    return lo + np.where(q > span, 2.0 * span - q, q)


def object_position(obj, t, canvas=None):
    """Centre (row, col) at time ``t``. ``canvas`` folds positions back inside."""
    t = float(t)
    s = np.asarray(obj.start, dtype=np.float64)
    v = np.asarray(obj.velocity, dtype=np.float64)
    if obj.motion == "return":
        p = s + v * (obj.turn_time - abs(t - obj.turn_time))
    else:
        p = s + v * t
        if obj.motion == "sinusoidal":
            n = np.hypot(*v)
            perp = np.array([-v[1], v[0]]) / n if n > 0 else np.array([1.0, 0.0])
            p = p + obj.amplitude * math.sin(2.0 * math.pi * t / obj.period) * perp
    if canvas is not None and obj.motion in ("linear", "sinusoidal"):
        a, b = obj.half_size
        p = np.array([_fold(p[0], a, canvas[0] - 1 - a), _fold(p[1], b, canvas[1] - 1 - b)])
    return float(p[0]), float(p[1])


def rasterize(shape, center, half_size, canvas):
    """Boolean silhouette of a shape on integer pixel positions."""
    h, w = canvas
    a, b = half_size
    rr = np.arange(h, dtype=np.float64)[:, None] - center[0]
    cc = np.arange(w, dtype=np.float64)[None, :] - center[1]
    if shape == "disk":
        return (rr / a) ** 2 + (cc / b) ** 2 <= 1.0
    box = (np.abs(rr) <= a) & (np.abs(cc) <= b)
    if shape == "rectangle":
        return box
    th = max(1.0, 0.8 * min(a, b))
    return box & ((cc + b <= th) | (a - rr <= th))


def _texture(obj, center, canvas):
    h, w = canvas
    rr = np.arange(h, dtype=np.float64)[:, None] - center[0]
    cc = np.arange(w, dtype=np.float64)[None, :] - center[1]
    proj = rr * math.cos(obj.stripe_angle) + cc * math.sin(obj.stripe_angle)
    return obj.intensity + obj.stripe_amp * np.sin(2.0 * math.pi * proj / obj.stripe_period)


def _background(spec):
    h, w = spec.canvas
    base, gy, gx, sigma = spec.background
    rng = np.random.default_rng([spec.seed, 1])
    ramp = base + gy * np.linspace(-1, 1, h)[:, None] + gx * np.linspace(-1, 1, w)[None, :]
    return ramp + sigma * rng.standard_normal((h, w))


def render_frame(spec, t, background=None):
    """Render frame ``t``; returns (uint8 image (H, W), target mask bool (H, W))."""
    canvas = spec.canvas
    img = _background(spec) if background is None else background.copy()
    for d in spec.distractors:
        c = object_position(d, t, canvas)
        sil = rasterize(d.shape, c, d.half_size, canvas)
        img[sil] = _texture(d, c, canvas)[sil]
    tc = object_position(spec.target, t, canvas)
    mask = rasterize(spec.target.shape, tc, spec.target.half_size, canvas)
    img[mask] = _texture(spec.target, tc, canvas)[mask]
    for o in spec.occluders:
        sl = (slice(max(o.top, 0), max(o.top + o.height, 0)), slice(max(o.left, 0), max(o.left + o.width, 0)))
        img[sl] = o.intensity
        mask[sl] = False
    return np.clip(np.rint(img), 0, 255).astype(np.uint8), mask


def render_episode(spec, t0=0, length=None):
    """Grayscale frames (L, H, W) uint8 and masks (L, H, W) uint8 for frames t0 .. t0+L-1."""
    length = spec.episode_length - t0 if length is None else length
    if t0 < 0 or length < 1 or t0 + length > spec.episode_length:
        raise ParameterError(f"frames {t0}..{t0 + length - 1} exceed episode length {spec.episode_length}")
    bg = _background(spec)
    frames, masks = [], []
    for t in range(t0, t0 + length):
        f, m = render_frame(spec, t, bg)
        frames.append(f)
        masks.append(m.astype(np.uint8))
    return np.stack(frames), np.stack(masks)


def to_rgb(gray):
    """uint8 grayscale (..., H, W) -> float64 (..., H, W, 3) in [0, 1]."""
    g = np.asarray(gray, dtype=np.float64) / 255.0
    return np.repeat(g[..., None], 3, axis=-1)


def clip_box(masks):
    """Ground-truth zoom box of a clip, or None if its first frame has no target."""
    try:
        return ground_truth_bbox(masks)
    except ContractError:
        return None


def generate_clip(spec, t0, clip_length=8):
    """Render ``clip_length`` frames from ``t0`` with masks and zoom target."""
    gray, masks = render_episode(spec, t0, clip_length)
    return ClipSample(to_rgb(gray), masks, clip_box(masks), spec.scenario, spec.seed, t0)


# ----------------------------------------------------------------------
# scene sampling
# ----------------------------------------------------------------------

def _appearance(rng, avoid=None):
    for _ in range(64):
        inten = float(rng.uniform(30, 225))
        if avoid is None or all(abs(inten - v) >= 50 for v in avoid):
            break
    return dict(intensity=inten, stripe_amp=float(rng.uniform(0, 25)),
                stripe_period=float(rng.uniform(4, 12)), stripe_angle=float(rng.uniform(0, math.pi)))


def _half_size(rng, shape, lo, hi):
    a = float(rng.uniform(lo, hi))
    b = a if shape == "disk" else float(np.clip(a * rng.uniform(0.6, 1.6), lo, hi * 1.3))
    return (max(a, 1.0), max(b, 1.0))


def _wandering(rng, shape, half, canvas, speed, app):
    h, w = canvas
    start = (float(rng.uniform(half[0], h - 1 - half[0])), float(rng.uniform(half[1], w - 1 - half[1])))
    ang = rng.uniform(0, 2 * math.pi)
    vel = (speed * math.sin(ang), speed * math.cos(ang))
    motion = "sinusoidal" if rng.random() < 0.4 else "linear"
    return ObjectSpec(shape, half, start=start, velocity=vel, motion=motion,
                      amplitude=float(rng.uniform(1, 4)), period=float(rng.uniform(8, 16)), **app)


def _distractors(rng, shape, half, canvas, speed, target_app, n):
    out, avoid = [], [target_app["intensity"]]
    for _ in range(n):
        app = _appearance(rng, avoid)
        avoid.append(app["intensity"])
        dh = tuple(max(1.0, v * rng.uniform(0.85, 1.15)) for v in half)
        if shape == "disk":
            dh = (dh[0], dh[0])
        out.append(_wandering(rng, shape, dh, canvas, speed, app))
    return tuple(out)


def make_scene(scenario, seed, canvas=(128, 224), episode_length=EPISODE_LENGTH):
    """Sample a scene of the given scenario; a pure function of its arguments."""
    if scenario not in SCENARIOS:
        raise ParameterError(f"unknown scenario {scenario!r}")
    if episode_length < 20 and scenario in ("occlusion", "exit_reenter"):
        raise ParameterError("occlusion scenarios need episodes of at least 20 frames")
    h, w = canvas
    rng = np.random.default_rng([seed, SCENARIOS.index(scenario)])
    shape = SHAPES[int(rng.integers(len(SHAPES)))]
    background = (float(rng.uniform(70, 180)), float(rng.uniform(-25, 25)), float(rng.uniform(-25, 25)),
                  float(rng.uniform(2, 8)))
    app = _appearance(rng, [background[0]])
    occluders = ()
    n_dis = int(rng.integers(1, 3))
    speed = float(rng.uniform(0.5, 2.5)) * h / 128.0

    decoy = None
    if scenario == "small_object":
        limit = SMALL_AREA_FRACTION * h * w
        lo, hi = 0.012 * math.sqrt(h * w), 0.02 * math.sqrt(h * w)
        half = _half_size(rng, shape, lo, hi)
        while (2 * half[0] + 1) * (2 * half[1] + 1) > limit:
            if half == (1.0, 1.0):
                raise ParameterError(f"canvas {canvas} too small for the small_object scenario")
            half = (max(1.0, half[0] * 0.9), max(1.0, half[1] * 0.9))
        target = _wandering(rng, shape, half, canvas, speed * 0.6, app)
    else:
        half = _half_size(rng, shape, 0.06 * h, 0.12 * h)
        if scenario == "plain":
            target = _wandering(rng, shape, half, canvas, speed, app)
        elif scenario == "occlusion":
            target, occluders, decoy = _occluded_target(rng, shape, half, canvas, app, episode_length)
        else:
            target, decoy = _exiting_target(rng, shape, half, canvas, app)
    dis = _distractors(rng, shape, half, canvas, speed, app, n_dis)
    if decoy is not None:
        dis = (decoy,) + dis
    return SceneSpec(canvas, target, dis, occluders, scenario, seed, episode_length, background)


def _occluded_target(rng, shape, half, canvas, app, episode_length):
    """Target on a straight horizontal path that passes fully behind a vertical bar.

    The hidden window is 6 or 7 frames starting at frame 7 to 9, so it always
    spans frame 10 and ends well before the episode does. A decoy of the same
    shape and size but different appearance travels a parallel lane and hides
    at about the same time, so after the target reappears only memory of its
    lane and appearance tells the two apart.
    """
    h, w = canvas
    a, b = half
    ts = int(rng.integers(7, 10))
    te = ts + int(rng.integers(6, 8))
    speed = float(rng.uniform(0.013, 0.02)) * w
    sign = 1.0 if rng.random() < 0.5 else -1.0
    travel = speed * (episode_length - 1)
    x0 = float(rng.uniform(b, w - 1 - b - travel))
    if sign < 0:
        x0 = w - 1 - x0
    row = float(rng.uniform(a, h - 1 - a))
    xs, xe = x0 + sign * speed * ts, x0 + sign * speed * (te - 1)
    lo, hi = min(xs, xe) - b - 1.0, max(xs, xe) + b + 1.0
    bar = Occluder(0, int(math.floor(lo)), h, int(math.ceil(hi)) - int(math.floor(lo)) + 1,
                   float(rng.uniform(20, 235)))
    target = ObjectSpec(shape, half, start=(row, x0), velocity=(0.0, sign * speed), motion="straight", **app)
    decoy = None
    lane = _other_lane(rng, row, a, h)
    if lane is not None:
        dx = float(rng.uniform(-0.5, 0.5)) * b
        decoy = replace(target, start=(lane, x0 + dx), **_appearance(rng, [app["intensity"]]))
    return target, (bar,), decoy


def _exiting_target(rng, shape, half, canvas, app):
    """Target that leaves through a frame edge, turns outside, and comes back.

    It is fully outside for 7 frames centred on a turn at frame 10 to 12. A
    same-shape decoy on a parallel lane leaves and returns within a frame of it.
    """
    h, w = canvas
    a, b = half
    turn = float(rng.integers(10, 13))
    k = 3
    horizontal = rng.random() < 0.7
    along, across, ext, ext_x = (w, h, b, a) if horizontal else (h, w, a, b)
    speed = float(rng.uniform(0.02, 0.03)) * along
    peak = along + ext + k * speed + 0.5
    pos_across = float(rng.uniform(ext_x, across - 1 - ext_x))
    start_along = peak - speed * turn
    vel = speed
    if rng.random() < 0.5:
        start_along, vel = along - 1 - start_along, -speed
    if horizontal:
        start, velocity = (pos_across, start_along), (0.0, vel)
    else:
        start, velocity = (start_along, pos_across), (vel, 0.0)
    target = ObjectSpec(shape, half, start=start, velocity=velocity, motion="return", turn_time=turn, **app)
    decoy = None
    lane = _other_lane(rng, pos_across, ext_x, across)
    if lane is not None:
        d_turn = turn + float(rng.integers(-1, 2))
        d_along = start_along + (vel * (d_turn - turn))
        d_start = (lane, d_along) if horizontal else (d_along, lane)
        decoy = replace(target, start=d_start, turn_time=d_turn, **_appearance(rng, [app["intensity"]]))
    return target, decoy


def _other_lane(rng, pos, ext, size):
    """A coordinate for a same-size object whose lane does not touch the one at ``pos``."""
    gap = 2.0 * ext + 2.0
    lo, hi = ext, size - 1 - ext
    spans = [(lo, pos - gap), (pos + gap, hi)]
    spans = [(u, v) for u, v in spans if v > u]
    if not spans:
        return None
    u, v = spans[int(rng.integers(len(spans)))]
    return float(rng.uniform(u, v))


def empty_windows(masks):
    """Maximal runs of frames with an empty mask, as (start, stop) pairs."""
    empty = ~np.asarray(masks).reshape(len(masks), -1).any(axis=1)
    runs, start = [], None
    for i, e in enumerate(empty):
        if e and start is None:
            start = i
        if not e and start is not None:
            runs.append((start, i))
            start = None
    if start is not None:
        runs.append((start, len(empty)))
    return runs


# ----------------------------------------------------------------------
# dataset files
# ----------------------------------------------------------------------

def write_pgm(path, image):
    img = np.asarray(image)
    if img.dtype != np.uint8 or img.ndim != 2:
        raise ParameterError("PGM images must be 2-D uint8")
    try:
        Image.fromarray(img, mode="L").save(path, format="PPM")
    except OSError as e:
        raise OSError(f"cannot write {path}: {e}") from e


def read_pgm(path):
    with Image.open(path) as im:
        if im.mode != "L":
            raise ConfigurationError(f"{path} is not an 8-bit grayscale PGM")
        return np.array(im)


def scenario_counts(n, mix):
    """Largest-remainder split of ``n`` items by the fractions in ``mix``."""
    names = [s for s in mix if mix[s] > 0]
    if not names or any(s not in SCENARIOS for s in mix):
        raise ParameterError(f"scenario mix must name scenarios from {SCENARIOS}")
    total = float(sum(mix[s] for s in names))
    raw = {s: n * mix[s] / total for s in names}
    counts = {s: int(math.floor(raw[s])) for s in names}
    rest = n - sum(counts.values())
    for s in sorted(names, key=lambda s: raw[s] - counts[s], reverse=True)[:rest]:
        counts[s] += 1
    return counts


def split_seeds(seed, n_train, n_val):
    """Distinct scene seeds for the two splits."""
    rng = np.random.default_rng(seed)
    seen, out = set(), []
    while len(out) < n_train + n_val:
        s = int(rng.integers(0, 2 ** 31 - 1))
        if s not in seen:
            seen.add(s)
            out.append(s)
    return out[:n_train], out[n_train:]


def _box_json(box):
    return None if box is None else asdict(box)


def generate_dataset(out_dir, n_train, n_val, mix=None, seed=0, canvas=(128, 224), video_length=8,
                     clip_length=8, episode_length=EPISODE_LENGTH):
    """Write videos as PGM frames and masks plus ``manifest.json``; returns the manifest dict.

    Each entry is a video of ``video_length`` frames starting at ``t0`` of its
    episode. Shorter videos start at a random frame with the target visible.
    """
    if n_train <= 0 or n_val <= 0:
        raise ParameterError("split sizes must be positive")
    if not clip_length <= video_length <= episode_length:
        raise ParameterError("need clip_length <= video_length <= episode_length")
    mix = mix or {"plain": 1.0}
    train_seeds, val_seeds = split_seeds(seed, n_train, n_val)
    rng = np.random.default_rng([seed, 7])
    entries = []
    for split, seeds in (("train", train_seeds), ("val", val_seeds)):
        counts = scenario_counts(len(seeds), mix)
        tags = [s for s in counts for _ in range(counts[s])]
        tags = [tags[i] for i in rng.permutation(len(tags))]
        for i, (scen, s) in enumerate(zip(tags, seeds)):
            spec = make_scene(scen, s, canvas, episode_length)
            t0 = _pick_start(spec, video_length, rng)
            gray, masks = render_episode(spec, t0, video_length)
            cid = f"{split}_{i:05d}"
            rel = os.path.join(split, cid)
            os.makedirs(os.path.join(out_dir, rel), exist_ok=True)
            paths = {"frames": [], "masks": []}
            for t in range(video_length):
                fp, mp = os.path.join(rel, f"frame_{t:03d}.pgm"), os.path.join(rel, f"mask_{t:03d}.pgm")
                write_pgm(os.path.join(out_dir, fp), gray[t])
                write_pgm(os.path.join(out_dir, mp), masks[t] * 255)
                paths["frames"].append(fp)
                paths["masks"].append(mp)
            entries.append({"clip_id": cid, "split": split, "scenario": scen, "seed": s, "t0": t0,
                            "length": video_length, "paths": paths,
                            "gt_box": _box_json(clip_box(masks[:clip_length]))})
    manifest = {"canvas": list(canvas), "episode_length": episode_length, "clip_length": clip_length,
                "seed": seed, "mix": mix, "clips": entries}
    path = os.path.join(out_dir, "manifest.json")
    try:
        with open(path, "w", encoding="utf-8") as f:
            json.dump(manifest, f, indent=1, sort_keys=True)
    except OSError as e:
        raise OSError(f"cannot write {path}: {e}") from e
    return manifest


def _pick_start(spec, video_length, rng):
    if video_length == spec.episode_length:
        return 0
    for _ in range(100):
        t0 = int(rng.integers(0, spec.episode_length - video_length + 1))
        _, m = render_frame(spec, t0)
        if m.any():
            return t0
    return 0


def load_manifest(root):
    path = os.path.join(root, "manifest.json")
    try:
        with open(path, encoding="utf-8") as f:
            return json.load(f)
    except OSError as e:
        raise OSError(f"cannot read dataset manifest {path}: {e}") from e


def load_video(root, entry):
    """(frames uint8 (L, H, W), masks uint8 (L, H, W) in {0, 1}) for a manifest entry."""
    frames = np.stack([read_pgm(os.path.join(root, p)) for p in entry["paths"]["frames"]])
    masks = np.stack([read_pgm(os.path.join(root, p)) for p in entry["paths"]["masks"]])
    return frames, (masks > 127).astype(np.uint8)


def regenerate(entry, canvas, episode_length=EPISODE_LENGTH):
    """Re-render a manifest entry from its seed (for reproducibility checks)."""
    spec = make_scene(entry["scenario"], entry["seed"], tuple(canvas), episode_length)
    return render_episode(spec, entry["t0"], entry["length"])
