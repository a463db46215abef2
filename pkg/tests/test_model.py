import numpy as np
import pytest

from capsvos import geometry as G
from capsvos import synth
from capsvos import tensor as T
from capsvos.checkpoint import load_checkpoint, save_checkpoint
from capsvos.config import desk_preset, paper_preset
from capsvos.errors import ConfigurationError, DimensionError
from capsvos.gradcheck import model_batch
from capsvos.harness import batch_loss
from capsvos.model import CapsuleVOS

CFG = desk_preset()


@pytest.fixture(scope="module")
def model():
    return CapsuleVOS(CFG, seed=0)


@pytest.fixture(scope="module")
def clip():
    spec = synth.make_scene("plain", 4, tuple(CFG.high_res))
    return synth.generate_clip(spec, 0)


def _low(rng, n=1):
    c = CFG
    return rng.random((n, c.clip_length) + tuple(c.low_res) + (3,))


def test_desk_preset_scaling():
    p, d = paper_preset(), CFG
    assert d.low_res == (32, 56) and d.high_res == (128, 224) and d.min_box == (16, 28)
    assert d.video_capsule_grid == (8, 4, 7)
    assert p.video_capsule_grid == (8, 16, 28)
    assert d.video_types == 6 and d.cond_types == 8


def test_video_branch_shape_range_determinism(model, rng):
    x = _low(rng)
    g1, g2 = model.video_branch_forward(x), model.video_branch_forward(x.copy())
    assert g1.index_shape == (1,) + CFG.video_capsule_grid
    assert g1.types == CFG.video_types
    a = g1.activations.data
    assert np.all((a >= 0) & (a <= 1))
    assert np.array_equal(g1.poses.data, g2.poses.data) and np.array_equal(a, g2.activations.data)
    with pytest.raises(DimensionError):
        model.video_branch_forward(x[:, :, :16])


def test_frame_branch_tiling_and_memory(model, rng):
    x = _low(rng)
    grid, mem = model.frame_branch_forward(x[:, 0], (rng.random((1,) + CFG.low_res) > 0.5) * 1.0)
    p = grid.poses.data
    for t in range(1, CFG.clip_length):
        assert np.array_equal(p[:, t], p[:, 0])
    assert mem.hidden.shape == (1,) + CFG.memory_shape
    assert np.all(np.abs(mem.hidden.data) < 1)
    with pytest.raises(DimensionError):
        model.frame_branch_forward(x[:, 0], np.zeros((1, 5, 5)))


def test_recurrent_zero_fixed_point_in_frame_branch():
    m = CapsuleVOS(CFG, seed=1)
    for k, p in m.params.items():
        p.data = np.zeros_like(p.data)
    zero = np.zeros((1,) + CFG.low_res + (3,))
    _, mem = m.frame_branch_forward(zero, np.zeros((1,) + CFG.low_res), m.new_memory(1))
    assert not mem.hidden.data.any()


def test_condition_and_decode_range_and_shape(model, rng):
    x = _low(rng, 2)
    pred, _ = model.segment(x, x[:, 0], np.ones((2,) + CFG.low_res))
    assert pred.shape == (2, CFG.clip_length) + CFG.low_res
    assert np.all((pred.data >= 0) & (pred.data <= 1))


def test_forward_contract(model, clip):
    hr = clip.frames[None]
    out1 = model.forward(hr, clip.ref_mask[None])
    out2 = CapsuleVOS(CFG, seed=0).forward(hr, clip.ref_mask[None])
    assert out1.masks.shape == (1, CFG.clip_length) + CFG.high_res
    assert np.all((out1.masks >= 0) & (out1.masks <= 1))
    assert np.array_equal(out1.masks, out2.masks)
    b = out1.boxes[0]
    assert 0 < b.height <= CFG.high_res[0] and 0 < b.width <= CFG.high_res[1]
    assert G.BoundingBox.full_frame(*CFG.high_res).contains(b)
    outside = ~G.paste_back(np.ones(CFG.low_res), b, CFG.high_res).astype(bool)
    assert not out1.masks[0][:, outside].any()
    with pytest.raises(DimensionError):
        model.forward(hr[:, :4], clip.ref_mask[None])


def test_empty_reference_mask_falls_back_to_full_frame(model, clip):
    out = model.forward(clip.frames[None], np.zeros((1,) + CFG.high_res))
    assert out.boxes[0] == G.BoundingBox.full_frame(*CFG.high_res)
    assert out.masks.shape == (1, CFG.clip_length) + CFG.high_res


def test_zoom_boxes_clamped(model, rng):
    mask = np.zeros((3,) + CFG.high_res)
    mask[0, 0, 0] = 1
    mask[1, 60:70, 100:130] = 1
    frames = rng.random((3,) + CFG.high_res + (3,))
    boxes, ext, _ = model.zoom_predict(frames, mask)
    H, W = CFG.high_res
    for b in boxes[:2]:
        assert CFG.min_box[0] <= b.height <= H and CFG.min_box[1] <= b.width <= W
        assert G.BoundingBox.full_frame(H, W).contains(b)
    assert boxes[2] == G.BoundingBox.full_frame(H, W)
    assert np.all((ext.data > 0) & (ext.data < 1))


def test_gradient_reaches_every_stage():
    m = CapsuleVOS(CFG, seed=2)
    batch = model_batch(m, seed=2)
    names = list(m.params)
    with T.Tape() as tape:
        loss, _ = batch_loss(m, batch)
    grads = dict(zip(names, tape.gradient(loss, [m.params[n] for n in names])))
    for group, members in m.parameter_groups().items():
        assert any(np.abs(grads[n]).max() > 0 for n in members), group


@pytest.mark.parametrize("name, stages", [
    ("no_memory", {"frame.lstm", "frame.stateless"}),
    ("no_zoom", set()),
    ("hc_zoom", set()),
    ("concat_routing", {"cond"}),
    ("fully_conv", {"cond", "convcaps", "fconv"}),
])
def test_ablation_changes_only_its_stage(name, stages):
    full = CapsuleVOS(CFG, seed=0).params
    abl = CapsuleVOS(CFG.with_ablation(name), seed=0).params
    changed = {k for k in set(full) ^ set(abl)}
    changed |= {k for k in set(full) & set(abl) if full[k].shape != abl[k].shape}
    prefixes = {".".join(k.split(".")[:2]) if k.startswith("frame.") else k.split(".")[0] for k in changed}
    assert prefixes == stages


def test_unknown_ablation():
    with pytest.raises(ConfigurationError):
        CFG.with_ablation("no_capsules")


def _two_histories(m, seed):
    spec = synth.make_scene("occlusion", seed, tuple(CFG.high_res))
    gray, masks = synth.render_episode(spec)
    frames = synth.to_rgb(gray)
    k = frames[None, 10:18]
    ref = masks[None, 10].astype(float)
    outs = []
    for prev in (frames[None, 0:8], frames[None, 2:10][:, ::-1]):
        mem = m.forward(prev, masks[None, 0].astype(float)).memory
        outs.append(m.forward(k, ref, mem).masks)
    return outs


def test_memory_dependence():
    a, b = _two_histories(CapsuleVOS(CFG, seed=0), 5)
    assert np.max(np.abs(a - b)) > 1e-6
    a, b = _two_histories(CapsuleVOS(CFG.with_ablation("no_memory"), seed=0), 5)
    assert np.array_equal(a, b)


def test_state_dict_round_trip(tmp_path, model, rng):
    path = tmp_path / "m.ckpt"
    sd = model.state_dict()
    mem = model.new_memory(1)
    mem.hidden.data[:] = rng.uniform(-1, 1, mem.hidden.shape)
    sd["memory/hidden"] = mem.hidden.data
    save_checkpoint(path, sd)
    loaded = load_checkpoint(path)
    assert np.array_equal(loaded["memory/hidden"], mem.hidden.data)
    other = CapsuleVOS(CFG, seed=9)
    other.load_state_dict(loaded)
    for k in model.params:
        assert np.array_equal(model.params[k].data, other.params[k].data)
    wrong = CapsuleVOS(CFG.with_ablation("no_memory"), seed=0)
    with pytest.raises(ConfigurationError):
        wrong.load_state_dict(loaded)
    bad = dict(loaded)
    bad["meta/preset"] = np.array(1.0)
    with pytest.raises(ConfigurationError):
        CapsuleVOS(CFG, seed=0).load_state_dict(bad)
