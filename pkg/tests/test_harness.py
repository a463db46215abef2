import json
import os

import numpy as np
import pytest

import oracles
from capsvos import harness as H
from capsvos import synth
from capsvos.cli import cli_main
from capsvos.config import desk_preset
from capsvos.errors import ConfigurationError, ContractError, NonFiniteLossError, ParameterError
from capsvos.metrics import contour_accuracy_F, region_similarity_J, schedule_clips
from capsvos.model import CapsuleVOS

CFG = desk_preset()


@pytest.fixture(scope="module")
def plain_data(tmp_path_factory):
    root = tmp_path_factory.mktemp("plain")
    synth.generate_dataset(root, 8, 3, {"plain": 1.0}, seed=1, video_length=8)
    return str(root)


def test_schedule_examples():
    assert schedule_clips(8, 8, 3) == [0]
    assert schedule_clips(13, 8, 3) == [0, 5]
    assert schedule_clips(22, 8, 3) == [0, 5, 10, 14]
    assert schedule_clips(16, 8, 0) == [0, 8]
    assert schedule_clips(24, 8, 3) == [0, 5, 10, 15, 16]
    with pytest.raises(ContractError):
        schedule_clips(5, 8, 3)
    with pytest.raises(ParameterError):
        schedule_clips(20, 8, 8)


def test_schedule_coverage_small_grid():
    for n in range(8, 30):
        for ov in range(8):
            s = schedule_clips(n, 8, ov)
            assert oracles.covered_frames(s, 8) == set(range(n))
            assert all(b > a and b - a <= 8 - ov for a, b in zip(s, s[1:]))


def test_j_examples():
    gt = np.zeros((6, 6), bool)
    gt[1:3, 1:3] = True
    assert region_similarity_J(gt, gt) == 1.0
    other = np.zeros_like(gt)
    other[4:, 4:] = True
    assert region_similarity_J(other, gt) == 0.0
    half = np.zeros_like(gt)
    half[1:3, 1] = True
    assert region_similarity_J(half, gt) == 0.5
    assert region_similarity_J(half, gt) == region_similarity_J(gt, half)
    assert region_similarity_J(np.zeros_like(gt), np.zeros_like(gt)) == 1.0


def test_f_examples_and_shifted_square():
    gt = np.zeros((12, 12), bool)
    gt[3:8, 3:8] = True
    assert contour_accuracy_F(gt, gt) == 1.0
    assert contour_accuracy_F(np.zeros_like(gt), gt) == 0.0
    assert contour_accuracy_F(np.zeros_like(gt), np.zeros_like(gt)) == 1.0
    shifted = np.roll(gt, 1, axis=1)
    assert abs(contour_accuracy_F(shifted, gt, 1.0) - oracles.contour_f(shifted, gt, 1.0)) <= 1e-12
    diag = np.roll(shifted, 1, axis=0)
    assert abs(contour_accuracy_F(diag, gt, 1.0) - oracles.contour_f(diag, gt, 1.0)) <= 1e-12
    assert contour_accuracy_F(diag, gt, 1.0) < 1.0


def test_f_precision_recall_asymmetry():
    gt = np.zeros((10, 10), bool)
    gt[2:8, 2:8] = True
    pred = np.zeros_like(gt)
    pred[2:8, 2:4] = True
    f1, f2 = contour_accuracy_F(pred, gt), contour_accuracy_F(gt, pred)
    assert abs(f1 - oracles.contour_f(pred, gt)) <= 1e-12
    assert abs(f2 - oracles.contour_f(gt, pred)) <= 1e-12


def test_post_occlusion_frames():
    m = np.ones((10, 3, 3), np.uint8)
    m[3:6] = 0
    m[7] = 0
    assert list(H.post_occlusion_frames(m)) == [6, 8, 9]
    assert H.post_occlusion_frames(np.ones((5, 2, 2))).size == 0


def _video(scenario, seed, length):
    spec = synth.make_scene(scenario, seed, tuple(CFG.high_res))
    gray, masks = synth.render_episode(spec, 0, length)
    return H.Video(f"{scenario}{seed}", scenario, gray, masks)


def test_single_clip_chain_equals_forward():
    m = CapsuleVOS(CFG, seed=0)
    v = _video("plain", 2, 8)
    res = H.chain_inference(m, v.frames, v.masks[0], 3)
    out = m.forward(synth.to_rgb(v.frames)[None], v.masks[None, 0].astype(float))
    assert res.starts == [0]
    assert np.array_equal(res.probs, out.masks[0])


def test_chain_instrumented_replay_22_frames():
    m = CapsuleVOS(CFG, seed=0)
    v = _video("plain", 3, 22)
    calls = []
    orig = m.forward

    def spy(clip, ref, memory=None, zoom=None):
        out = orig(clip, ref, memory, zoom)
        calls.append((ref[0].copy(), out.masks[0].copy()))
        return out

    m.forward = spy
    res = H.chain_inference(m, v.frames, v.masks[0], 3)
    assert res.starts == [0, 5, 10, 14]
    assert np.array_equal(calls[0][0], v.masks[0].astype(float))
    assert np.array_equal(calls[1][0], (calls[0][1][5] > 0.5).astype(float))
    assert np.array_equal(calls[2][0], (calls[1][1][5] > 0.5).astype(float))
    assert np.array_equal(calls[3][0], (calls[2][1][4] > 0.5).astype(float))
    want = np.zeros_like(res.probs)
    for (ref, out), s in zip(calls, res.starts):
        want[s:s + 8] = out
    assert np.array_equal(res.probs, want)
    assert res.probs.shape == (22,) + CFG.high_res


def test_chain_no_overlap_and_padding():
    m = CapsuleVOS(CFG, seed=0)
    v = _video("plain", 4, 16)
    res = H.chain_inference(m, v.frames, v.masks[0], 0)
    assert res.starts == [0, 8]
    short = H.chain_inference(m, v.frames[:5], v.masks[0], 3)
    assert short.probs.shape == (5,) + CFG.high_res and short.starts == [0]


def test_eval_with_oracle_predictions():
    vids = [_video("plain", s, 8) for s in range(3)]
    perfect = H.evaluate_videos(None, vids, predictions={v.clip_id: v.masks for v in vids})
    assert perfect.J_mean == perfect.F_mean == perfect.J_recall == perfect.F_recall == 1.0
    empty = H.evaluate_videos(None, vids, predictions={v.clip_id: np.zeros_like(v.masks) for v in vids})
    assert empty.J_mean == 0.0 and empty.F_mean == 0.0
    rng = np.random.default_rng(0)
    noisy = H.evaluate_videos(None, vids, predictions={v.clip_id: rng.random(v.masks.shape) > 0.5 for v in vids})
    for k in ("J_mean", "J_recall", "F_mean", "F_recall"):
        assert 0.0 <= getattr(noisy, k) <= 1.0
    assert json.loads(noisy.to_json())["J_mean"] == noisy.J_mean


def test_eval_deterministic_and_preset_mismatch(plain_data, tmp_path):
    cfg = H.RunConfig(train_data=plain_data, out_dir=str(tmp_path))
    m = H.build_model(cfg)
    ck = tmp_path / "m.ckpt"
    from capsvos.checkpoint import save_checkpoint
    save_checkpoint(ck, m.state_dict())
    a = H.evaluate(cfg, str(ck))
    b = H.evaluate(cfg, str(ck))
    assert a.per_clip == b.per_clip and a.J_mean == b.J_mean and a.F_mean == b.F_mean
    with pytest.raises(ConfigurationError):
        H.evaluate(H.RunConfig(train_data=plain_data, ablation="no_memory"), str(ck))
    with pytest.raises(ConfigurationError):
        H.evaluate(H.RunConfig(train_data=plain_data, preset="paper"), None)


def test_run_config_parsing(tmp_path):
    text = "# comment\npreset = desk\nepochs = 3\nlr = 0.001  # fast\nablation = no_zoom\noverlap = 0\n"
    cfg = H.RunConfig.from_text(text, seed=4)
    assert (cfg.epochs, cfg.lr, cfg.ablation, cfg.overlap, cfg.seed) == (3, 0.001, "no_zoom", 0, 4)
    assert H.RunConfig.from_text(cfg.to_text()) == cfg
    for bad in ("bogus = 1", "epochs = many", "overlap = 8", "ablation = no_brain", "epochs"):
        with pytest.raises(ConfigurationError):
            H.RunConfig.from_text(bad)
    with pytest.raises(OSError):
        H.RunConfig.from_file(tmp_path / "missing.cfg")


def test_training_deterministic_and_logged(plain_data, tmp_path):
    runs = []
    for tag in ("a", "b"):
        cfg = H.RunConfig(train_data=plain_data, batch_size=2, lr=1e-3, max_steps=3, out_dir=str(tmp_path / tag))
        runs.append(H.train(cfg))
    la = [r["L"] for r in runs[0].history if r["kind"] == "step"]
    lb = [r["L"] for r in runs[1].history if r["kind"] == "step"]
    assert la == lb and len(la) == 3 and all(np.isfinite(la))
    lines = open(tmp_path / "a" / "train.log", encoding="utf-8").read().splitlines()
    assert lines[0].startswith("step\t") and lines[-1].startswith("epoch\t")
    fields = dict(f.split("=", 1) for f in lines[-1].split("\t")[1:])
    assert set(fields) == {"epoch", "L_s", "L_D", "L_r", "L", "val_J"}
    assert os.path.exists(tmp_path / "a" / "best.ckpt")


def test_nan_guard_names_stage(plain_data, tmp_path, monkeypatch):
    orig = H.batch_loss

    def poisoned(model, batch):
        total, parts = orig(model, batch)
        parts["L_D"] = parts["L_D"] * float("nan")
        return total + parts["L_D"], parts

    monkeypatch.setattr(H, "batch_loss", poisoned)
    cfg = H.RunConfig(train_data=plain_data, max_steps=2, out_dir=str(tmp_path))
    with pytest.raises(NonFiniteLossError) as e:
        H.train(cfg)
    assert e.value.stage == "L_D" and e.value.step == 0


def test_training_on_unreadable_data(tmp_path):
    with pytest.raises(OSError):
        H.train(H.RunConfig(train_data=str(tmp_path / "none"), out_dir=str(tmp_path)))


def test_loss_halves_within_200_steps(tmp_path):
    root = tmp_path / "data"
    synth.generate_dataset(root, 64, 2, {"plain": 1.0}, seed=5, video_length=8)
    cfg = H.RunConfig(train_data=str(root), epochs=20, batch_size=2, lr=1e-3, max_steps=200,
                      out_dir=str(tmp_path / "run"))
    res = H.train(cfg)
    L = np.array([r["L"] for r in res.history if r["kind"] == "step"])
    assert len(L) == 200 and np.all(np.isfinite(L))
    initial = L[:5].mean()
    smoothed = np.convolve(L, np.ones(10) / 10, mode="valid")
    assert smoothed.min() <= 0.5 * initial


# ----------------------------------------------------------------------
# command line
# ----------------------------------------------------------------------

def _tree(root):
    out = {}
    for d, _, files in os.walk(root):
        for f in files:
            p = os.path.join(d, f)
            out[os.path.relpath(p, root)] = open(p, "rb").read()
    return out


def test_cli_gen_data_deterministic(tmp_path):
    for tag in ("a", "b"):
        assert cli_main(["gen-data", "--seed", "7", "--n-train", "2", "--n-val", "1",
                         "--out", str(tmp_path / tag)]) == 0
    a, b = _tree(tmp_path / "a"), _tree(tmp_path / "b")
    assert a == b and "manifest.json" in a


def test_cli_usage_errors(tmp_path, capsys):
    assert cli_main(["train", "--bogus"]) == 1
    assert cli_main([]) == 1
    assert cli_main(["eval"]) == 1
    assert cli_main(["gen-data", "--mix", "plain=x"]) == 1
    assert cli_main(["check-grads", "--suites", "nope"]) == 1
    assert cli_main(["--help"]) == 0


def test_cli_runtime_errors(tmp_path):
    assert cli_main(["eval", "--data", str(tmp_path), "--checkpoint", str(tmp_path / "x.ckpt")]) == 2
    assert cli_main(["gen-data", "--overlap", "9", "--out", str(tmp_path / "d")]) == 2
    assert cli_main(["infer", "--video", str(tmp_path)]) == 2


def test_cli_infer_no_overlap(tmp_path, capsys):
    spec = synth.make_scene("plain", 9, tuple(CFG.high_res))
    gray, masks = synth.render_episode(spec, 0, 16)
    vd = tmp_path / "video"
    vd.mkdir()
    for t in range(16):
        synth.write_pgm(vd / f"frame_{t:03d}.pgm", gray[t])
    synth.write_pgm(vd / "mask_000.pgm", masks[0] * 255)
    out = tmp_path / "pred"
    assert cli_main(["infer", "--video", str(vd), "--overlap", "0", "--out", str(out)]) == 0
    summary = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert summary["schedule"] == [0, 8]
    assert json.load(open(out / "schedule.json"))["schedule"] == [0, 8]
    assert len([f for f in os.listdir(out) if f.startswith("pred_")]) == 16


def test_cli_train_eval(plain_data, tmp_path, capsys):
    run = tmp_path / "run"
    assert cli_main(["train", "--data", plain_data, "--max-steps", "2", "--out", str(run)]) == 0
    assert cli_main(["eval", "--data", plain_data, "--checkpoint", str(run / "best.ckpt"),
                     "--out", str(run)]) == 0
    rep = json.load(open(run / "report.json"))
    assert 0 <= rep["J_mean"] <= 1 and rep["frames"] == 3 * 8


def test_cli_check_grads_exit_code(monkeypatch):
    from capsvos import gradcheck
    assert cli_main(["check-grads", "--suites", "pointwise,losses"]) == 0
    monkeypatch.setitem(gradcheck.SUITES, "broken", lambda: {"wrong": 1.0})
    assert cli_main(["check-grads", "--suites", "broken"]) == 2
