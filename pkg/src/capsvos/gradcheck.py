"""Finite-difference suites for every differentiable operation and the model loss."""

import time

import numpy as np

from . import geometry as G
from . import losses as L
from . import routing as R
from . import synth
from . import tensor as T
from .config import desk_preset
from .metrics import schedule_clips
from .tensor import Tensor, finite_difference_check

TOLERANCE = 1e-4


def _rng(seed):
    return np.random.default_rng(seed)


def _away(x, points, gap=1e-3):
    """Nudge entries of ``x`` away from kinks at ``points``."""
    x = np.array(x)
    for p in points:
        close = np.abs(x - p) < gap
        x[close] = p + gap * np.where(x[close] >= p, 2.0, -2.0)
    return x


def _weights(shape, seed):
    return _rng(seed).standard_normal(shape)


def _scalar(y, w):
    """Contract ``y`` with fixed weights so every output entry matters."""
    return T.tsum(y * w)


def pointwise_suite():
    rng = _rng(1)
    a, b = rng.standard_normal((3, 4)), rng.standard_normal((3, 4))
    pos = rng.uniform(0.2, 2.0, (3, 4))
    w = _weights((3, 4), 2)
    cases = {
        "add": (lambda x, y: _scalar(x + y, w), [a, b[0]]),
        "sub": (lambda x, y: _scalar(x - y, w), [a, b]),
        "mul": (lambda x, y: _scalar(x * y, w), [a, b]),
        "div": (lambda x, y: _scalar(x / y, w), [a, pos]),
        "neg": (lambda x: _scalar(-x, w), [a]),
        "power": (lambda x: _scalar(T.power(x, 3.0), w), [a]),
        "square": (lambda x: _scalar(T.square(x), w), [a]),
        "exp": (lambda x: _scalar(T.exp(x), w), [a]),
        "log": (lambda x: _scalar(T.log(x), w), [pos]),
        "sigmoid": (lambda x: _scalar(T.sigmoid(x), w), [a]),
        "tanh": (lambda x: _scalar(T.tanh(x), w), [a]),
        "relu": (lambda x: _scalar(T.relu(x), w), [_away(a, [0.0])]),
        "clamp": (lambda x: _scalar(T.clamp(x, -0.5, 0.5), w), [_away(a, [-0.5, 0.5])]),
        "where": (lambda x, y: _scalar(T.where(a > 0, x, y), w), [a, b]),
    }
    return {k: finite_difference_check(f, xs) for k, (f, xs) in cases.items()}


def reduction_suite():
    rng = _rng(3)
    a = rng.standard_normal((3, 4, 5))
    return {
        "tsum": finite_difference_check(lambda x: _scalar(T.tsum(x, 1), _weights((3, 5), 4)), a),
        "mean": finite_difference_check(lambda x: _scalar(T.mean(x, (0, 2)), _weights((4,), 5)), a),
        "tmax": finite_difference_check(lambda x: _scalar(T.tmax(x, -1), _weights((3, 4), 6)), a),
        "softmax": finite_difference_check(lambda x: _scalar(T.softmax(x, 1), _weights((3, 4, 5), 7)), a),
    }


def shape_suite():
    rng = _rng(8)
    a = rng.standard_normal((2, 3, 4))
    b = rng.standard_normal((2, 3, 4))
    return {
        "reshape": finite_difference_check(lambda x: _scalar(x.reshape((6, 4)), _weights((6, 4), 1)), a),
        "transpose": finite_difference_check(lambda x: _scalar(T.transpose(x, (2, 0, 1)), _weights((4, 2, 3), 2)), a),
        "swapaxes": finite_difference_check(lambda x: _scalar(T.swapaxes(x, 0, 2), _weights((4, 3, 2), 3)), a),
        "getitem": finite_difference_check(lambda x: _scalar(x[:, [0, 2, 0], 1:3], _weights((2, 3, 2), 4)), a),
        "concat": finite_difference_check(
            lambda x, y: _scalar(T.concat([x, y], 1), _weights((2, 6, 4), 5)), [a, b]),
        "stack": finite_difference_check(
            lambda x, y: _scalar(T.stack([x, y], 0), _weights((2, 2, 3, 4), 6)), [a, b]),
        "tile": finite_difference_check(lambda x: _scalar(T.tile(x, (1, 2, 1)), _weights((2, 6, 4), 7)), a),
        "pad": finite_difference_check(
            lambda x: _scalar(T.pad(x, ((0, 0), (1, 2), (0, 1))), _weights((2, 6, 5), 8)), a),
        "broadcast_to": finite_difference_check(
            lambda x: _scalar(T.broadcast_to(x[:, :1], (2, 5, 4)), _weights((2, 5, 4), 9)), a),
        "expand_dims": finite_difference_check(
            lambda x: _scalar(T.expand_dims(x, 1), _weights((2, 1, 3, 4), 10)), a),
    }


def matmul_suite():
    rng = _rng(11)
    a, b = rng.standard_normal((2, 1, 3, 4)), rng.standard_normal((5, 4, 2))
    return {"matmul": finite_difference_check(lambda x, y: _scalar(T.matmul(x, y), _weights((2, 5, 3, 2), 12)),
                                              [a, b])}


def conv_suite():
    rng = _rng(13)
    out = {}
    for d, spatial, stride, pad in ((1, (7,), 2, 1), (2, (5, 6), (1, 2), 1), (3, (3, 4, 5), (1, 2, 2), (1, 0, 1))):
        x = rng.standard_normal((2,) + spatial + (2,))
        k = rng.standard_normal((3,) * d + (2, 3)) * 0.5
        probe = T.convolve(Tensor(x), Tensor(k), stride, pad)
        w = _weights(probe.shape, d)
        out[f"convolve_{d}d"] = finite_difference_check(
            lambda a, b: _scalar(T.convolve(a, b, stride, pad), w), [x, k])
    for d, spatial, stride in ((2, (3, 4), (2, 2)), (3, (2, 3, 3), (1, 2, 2))):
        x = rng.standard_normal((1,) + spatial + (3,))
        k = rng.standard_normal((3,) * d + (2, 3)) * 0.5
        probe = T.transpose_convolve(Tensor(x), Tensor(k), stride)
        w = _weights(probe.shape, 10 + d)
        out[f"transpose_convolve_{d}d"] = finite_difference_check(
            lambda a, b: _scalar(T.transpose_convolve(a, b, stride), w), [x, k])
    x = rng.standard_normal((1, 3, 4, 5, 2))
    probe, _ = T.patches(Tensor(x), (3, 3, 3), 1, 1)
    w = _weights(probe.shape, 20)
    out["patches"] = finite_difference_check(lambda a: _scalar(T.patches(a, (3, 3, 3), 1, 1)[0], w), x)
    return out


def recurrent_suite():
    rng = _rng(21)
    x = rng.standard_normal((1, 3, 4, 2))
    h0, c0 = rng.uniform(-0.5, 0.5, (2, 1, 3, 4, 3))
    ks = [rng.standard_normal((3, 3, 5, 3)) * 0.3 for _ in T.GATES]
    bs = [rng.standard_normal(3) * 0.1 for _ in T.GATES]
    wh, wc = _weights((1, 3, 4, 3), 22), _weights((1, 3, 4, 3), 23)

    def f(x, h, c, *kb):
        kern = dict(zip(T.GATES, kb[:4]))
        bias = dict(zip(T.GATES, kb[4:]))
        hid, st = T.recurrent_cell_step(x, T.MemoryState(h, c), kern, bias)
        return _scalar(hid, wh) + _scalar(st.cell, wc)

    return {"recurrent_cell_step": finite_difference_check(f, [x, h0, c0] + ks + bs)}


def geometry_suite():
    rng = _rng(24)
    x = rng.standard_normal((2, 5, 6, 3))
    src = G.BoundingBox(4.0, 5.0, 6.0, 8.0)
    dst = G.BoundingBox(5.0, 4.0, 9.0, 7.0)
    ry, rx = G.realign_matrices(src, dst, (5, 6))
    ry, rx = np.stack([ry, ry]), np.stack([rx, rx])
    w = _weights((2, 5, 6, 3), 25)
    return {"resample": finite_difference_check(lambda a: _scalar(G.resample(a, ry, rx), w), x)}


def loss_suite():
    rng = _rng(26)
    p = rng.uniform(0.05, 0.95, (2, 3, 4, 5))
    y = (rng.random((2, 3, 4, 5)) > 0.5).astype(float)
    g, q = rng.uniform(0, 1, (4, 2)), rng.uniform(0, 1, (4, 2))
    return {
        "bce_loss": finite_difference_check(lambda a: L.bce_loss(a, y), p),
        "dice_loss": finite_difference_check(lambda a: L.dice_loss(a, y), p),
        "bbox_loss": finite_difference_check(lambda a, b: L.bbox_loss(a, b), [g, q]),
        "total_loss": finite_difference_check(
            lambda a, b: L.total_loss(L.bce_loss(a, y), L.dice_loss(a, y), L.bbox_loss(g, b)), [p, q]),
    }


def routing_suite():
    rng = _rng(27)
    lead, I, J = (2,), 5, 3
    poses = rng.standard_normal(lead + (I, 4, 4)) * 0.5
    acts = rng.uniform(0.1, 0.9, lead + (I,))
    W = np.tile(np.eye(4), (I, J, 1, 1)) + 0.3 * rng.standard_normal((I, J, 4, 4))
    votes = rng.standard_normal(lead + (I, J, 16))
    Rm = rng.dirichlet(np.ones(J), lead + (I,))
    ba, bu = rng.standard_normal(J) * 0.1, rng.standard_normal(J) * 0.1
    cfg = R.RoutingConfig()
    out = {}

    def votes_f(p, w):
        v = R.compute_votes(R.CapsuleGrid(p, Tensor(acts)), w, "plain")
        return _scalar(v.votes, _weights(lead + (I, J, 4, 4), 28))

    out["compute_votes"] = finite_difference_check(votes_f, [poses, W])

    def mstep_f(r, a, v, b1, b2):
        mu, var, act = R.m_step(r, a, v, cfg.with_betas(b1, b2))
        return _scalar(mu, _weights(lead + (J, 16), 29)) + _scalar(T.log(var), _weights(lead + (J, 16), 30)) \
            + _scalar(act, _weights(lead + (J,), 31))

    out["m_step"] = finite_difference_check(mstep_f, [Rm, acts, votes, ba, bu])

    mu = rng.standard_normal(lead + (J, 16))
    var = rng.uniform(0.5, 2.0, lead + (J, 16))
    aout = rng.uniform(0.2, 0.8, lead + (J,))
    out["e_step"] = finite_difference_check(
        lambda m, s, a, v: _scalar(R.e_step(m, s, a, v), _weights(lead + (I, J), 32)), [mu, var, aout, votes])

    def em_f(a, v, b1, b2):
        g = R.em_routing(a, v, cfg.with_betas(b1, b2))
        return _scalar(g.poses, _weights(lead + (J, 4, 4), 33)) + _scalar(g.activations, _weights(lead + (J,), 34))

    out["em_routing"] = finite_difference_check(em_f, [acts, votes, ba, bu])

    q = rng.standard_normal(lead + (J, 4, 4))
    out["vote_distance"] = finite_difference_check(
        lambda a, v: _scalar(R.vote_distance(a, v), _weights(lead + (I, J), 35)) * 0.01, [q, votes])
    out["assignment_from_distance"] = finite_difference_check(
        lambda a, v: _scalar(R.assignment_from_distance(a, 0.2 * v), _weights(lead + (I, J), 36)), [q, votes])

    x = rng.standard_normal((2, 4, 9, 3))
    valid = rng.random((4, 9)) > 0.3
    valid[:, 0] = True
    out["capsule_pool"] = finite_difference_check(
        lambda a: _scalar(R.capsule_pool(a, -2, valid[..., None]), _weights((2, 4, 3), 37)), x)

    K = 4
    fposes = rng.standard_normal(lead + (K, 4, 4)) * 0.5
    facts = rng.uniform(0.1, 0.9, lead + (K,))
    Wk = np.tile(np.eye(4), (I, J, 1, 1)) + 0.2 * rng.standard_normal((I, J, 4, 4))
    Wv = np.tile(np.eye(4), (I, J, 1, 1)) + 0.2 * rng.standard_normal((I, J, 4, 4))
    Wq = np.tile(np.eye(4), (K, J, 1, 1)) + 0.2 * rng.standard_normal((K, J, 4, 4))

    def attn_f(vp, va, fp, fa, wk, wv, wq, b1, b2):
        w = R.TransformationWeights({"key": wk, "value": wv, "query": wq})
        g = R.attention_routing(R.CapsuleGrid(vp, va), R.CapsuleGrid(fp, fa), w, cfg.with_betas(b1, b2))
        return _scalar(g.poses, _weights(lead + (J, 4, 4), 38)) + _scalar(g.activations, _weights(lead + (J,), 39))

    out["attention_routing"] = finite_difference_check(
        attn_f, [poses, acts, fposes, facts, Wk, Wv, Wq, ba, bu])

    def concat_f(vp, fp, wp, wf):
        w = R.TransformationWeights({"plain": wp, "frame_plain": wf})
        g = R.concat_routing(R.CapsuleGrid(vp, Tensor(acts)), R.CapsuleGrid(fp, Tensor(facts)), w, cfg)
        return _scalar(g.poses, _weights(lead + (J, 4, 4), 40)) + _scalar(g.activations, _weights(lead + (J,), 41))

    out["concat_routing"] = finite_difference_check(concat_f, [poses, fposes, Wk, Wq])
    return out


def model_batch(model, seed=0, k=1):
    """A one-video teacher-forced batch from an occlusion episode (memory chain of length ``k``)."""
    from .harness import Video, make_batch

    c = model.cfg
    spec = synth.make_scene("occlusion", seed, tuple(c.high_res))
    frames, masks = synth.render_episode(spec)
    video = Video("gradcheck", "occlusion", frames, masks)
    starts = schedule_clips(len(frames), c.clip_length, 3)
    return make_batch(model, [video], k, starts, _rng(seed), jitter=0.0)


def model_suite(per_group=2, seed=0, h=1e-5, ablation=None):
    """Sampled central differences of the full training loss for every parameter group."""
    from .harness import batch_loss
    from .model import CapsuleVOS

    cfg = desk_preset().with_ablation(ablation)
    model = CapsuleVOS(cfg, seed=seed)
    batch = model_batch(model, seed)
    names = list(model.params)
    params = [model.params[n] for n in names]
    with T.Tape() as tape:
        loss, _ = batch_loss(model, batch)
    grads = dict(zip(names, tape.gradient(loss, params)))

    def value():
        return batch_loss(model, batch)[0].item()

    rng = _rng(seed + 100)
    out = {}
    for group, members in model.parameter_groups().items():
        err = 0.0
        for _ in range(per_group):
            name = members[int(rng.integers(len(members)))]
            p = model.params[name]
            flat = int(rng.integers(p.size))
            idx = np.unravel_index(flat, p.shape)
            old = p.data[idx]
            p.data[idx] = old + h
            fp = value()
            p.data[idx] = old - h
            fm = value()
            p.data[idx] = old
            num = (fp - fm) / (2.0 * h)
            a = grads[name][idx]
            err = max(err, abs(a - num) / max(1.0, abs(a)))
        out[f"model/{group}"] = float(err)
    return out


SUITES = {
    "pointwise": pointwise_suite,
    "reduction": reduction_suite,
    "shape": shape_suite,
    "matmul": matmul_suite,
    "convolution": conv_suite,
    "recurrent": recurrent_suite,
    "geometry": geometry_suite,
    "losses": loss_suite,
    "routing": routing_suite,
    "model": model_suite,
}


def run_all(echo=None, suites=None, tolerance=TOLERANCE):
    """Run the selected suites; returns ``(all_passed, {check: error}, seconds)``."""
    t = time.perf_counter()
    errors = {}
    for name in suites or SUITES:
        res = SUITES[name]()
        for check, err in res.items():
            errors[check] = err
            if echo is not None:
                echo(f"{'PASS' if err <= tolerance else 'FAIL'}\t{name}\t{check}\t{err:.3e}")
    return all(e <= tolerance for e in errors.values()), errors, time.perf_counter() - t
