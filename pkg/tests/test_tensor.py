import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from capsvos import _accel
from capsvos import tensor as T
from capsvos.checkpoint import load_checkpoint, save_checkpoint
from capsvos.errors import ConfigurationError, ContractError, DimensionError, DomainError, ParameterError
from capsvos.tensor import Tensor


def naive_convolve(x, k, stride, pad):
    """Direct loop cross-correlation over any spatial rank."""
    d = k.ndim - 2
    xp = np.pad(x, [(0, 0)] + [(p, p) for p in pad] + [(0, 0)])
    out_sz = [(xp.shape[1 + i] - k.shape[i]) // stride[i] + 1 for i in range(d)]
    out = np.zeros((x.shape[0],) + tuple(out_sz) + (k.shape[-1],))
    for n in range(x.shape[0]):
        for o in itertools.product(*map(range, out_sz)):
            sl = tuple(slice(o[i] * stride[i], o[i] * stride[i] + k.shape[i]) for i in range(d))
            patch = xp[(n,) + sl]
            out[(n,) + o] = np.tensordot(patch, k, axes=d + 1)
    return out


@pytest.mark.parametrize("d,spatial,stride,pad", [
    (1, (9,), (2,), (1,)),
    (2, (5, 7), (1, 2), (1, 0)),
    (3, (4, 5, 6), (1, 2, 2), (1, 1, 1)),
])
def test_convolve_matches_loop_oracle(rng, d, spatial, stride, pad):
    x = rng.standard_normal((2,) + spatial + (3,))
    k = rng.standard_normal((3,) * d + (3, 4))
    got = T.convolve(x, k, stride, pad).data
    assert np.allclose(got, naive_convolve(x, k, stride, pad), atol=1e-12)


@pytest.mark.parametrize("backend", ["numba", "numpy"])
def test_transpose_convolve_is_adjoint(rng, backend):
    prev = _accel.backend()
    _accel.set_backend(backend)
    try:
        x = rng.standard_normal((2, 4, 6, 8, 3))
        k = rng.standard_normal((3, 3, 3, 3, 5))
        y = rng.standard_normal((2, 4, 3, 4, 5))
        fwd = T.convolve(x, k, (1, 2, 2), 1).data
        back = T.transpose_convolve(y, k, (1, 2, 2)).data
        assert back.shape == x.shape
        assert abs(np.sum(fwd * y) - np.sum(x * back)) < 1e-9
    finally:
        _accel.set_backend(prev)


def test_backends_agree(rng):
    x = rng.standard_normal((2, 3, 5, 6, 4))
    k = rng.standard_normal((3, 3, 3, 4, 2))
    outs, grads = [], []
    prev = _accel.backend()
    for b in ("numba", "numpy"):
        _accel.set_backend(b)
        xt = Tensor(x, requires_grad=True)
        with T.Tape() as tape:
            y = T.convolve(xt, k, (1, 2, 1), 1)
            loss = T.tsum(y * y)
        outs.append(y.data)
        grads.append(tape.gradient(loss, [xt])[0])
    _accel.set_backend(prev)
    assert np.array_equal(outs[0], outs[1])
    assert np.allclose(grads[0], grads[1], atol=1e-12)


def test_matched_count_backends_agree(rng):
    prev = _accel.backend()
    for _ in range(20):
        a, b = rng.random((9, 11)) > 0.7, rng.random((9, 11)) > 0.7
        tol = float(rng.choice([0.5, 1.0, 1.5, 2.0]))
        _accel.set_backend("numba")
        n1 = _accel.matched_count(a, b, tol)
        _accel.set_backend("numpy")
        n2 = _accel.matched_count(a, b, tol)
        assert n1 == n2
    _accel.set_backend(prev)


def test_gradient_of_unused_parameter_is_zero():
    a = Tensor(np.ones(3), requires_grad=True)
    b = Tensor(np.ones(2), requires_grad=True)
    with T.Tape() as tape:
        loss = T.tsum(a * 2.0)
    ga, gb = tape.gradient(loss, [a, b])
    assert np.array_equal(ga, np.full(3, 2.0))
    assert np.array_equal(gb, np.zeros(2))


def test_non_scalar_loss_rejected():
    a = Tensor(np.ones(3), requires_grad=True)
    with T.Tape() as tape:
        y = a * 2.0
    with pytest.raises(ContractError):
        tape.gradient(y, [a])


def test_no_recording_without_tape_or_grad():
    a = Tensor(np.ones(3), requires_grad=True)
    with T.Tape() as tape:
        T.exp(Tensor(np.ones(3)))
    assert len(tape) == 0
    T.exp(a)  # no active tape: nothing to record, nothing fails


def test_errors():
    with pytest.raises(DomainError):
        T.log(Tensor(np.array([1.0, 0.0])))
    with pytest.raises(DimensionError) as e:
        T.matmul(np.ones((2, 3)), np.ones((4, 2)))
    assert "(2, 3)" in str(e.value) and "(4, 2)" in str(e.value)
    with pytest.raises(ParameterError):
        T.reduce("sum", Tensor(np.ones((2, 3))), ())
    with pytest.raises(DimensionError):
        T.convolve(np.ones((1, 5, 5, 2)), np.ones((3, 3, 3, 1)))


def test_softmax_rows_sum_to_one_for_large_logits():
    x = np.array([[1000.0, 999.0, -1000.0], [0.0, 0.0, 0.0]])
    s = T.softmax(Tensor(x), -1).data
    assert np.allclose(s.sum(-1), 1.0, atol=1e-15)
    assert np.all(np.isfinite(s))


def test_clamp_gradient_only_inside_range():
    x = Tensor(np.array([-2.0, 0.1, 2.0]), requires_grad=True)
    with T.Tape() as tape:
        loss = T.tsum(T.clamp(x, -1.0, 1.0))
    assert np.array_equal(tape.gradient(loss, [x])[0], [0.0, 1.0, 0.0])


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 3), st.integers(2, 4), st.integers(0, 1000))
def test_broadcast_add_gradient_sums_over_broadcast_axes(n, m, seed):
    r = np.random.default_rng(seed)
    a = Tensor(r.standard_normal((n, m)), requires_grad=True)
    b = Tensor(r.standard_normal((m,)), requires_grad=True)
    w = r.standard_normal((n, m))
    with T.Tape() as tape:
        loss = T.tsum((a + b) * w)
    ga, gb = tape.gradient(loss, [a, b])
    assert np.allclose(ga, w)
    assert np.allclose(gb, w.sum(0))


def test_finite_difference_check_detects_wrong_gradient():
    # a deliberately wrong backward rule must be caught
    def bad_square(x):
        return T._make(x.data ** 2, (x,), lambda g: (g * x.data,), "bad_square")

    err = T.finite_difference_check(lambda x: T.tsum(bad_square(x)), np.array([1.0, 2.0, 3.0]))
    assert err > 0.1
    ok = T.finite_difference_check(lambda x: T.tsum(T.square(x)), np.array([1.0, 2.0, 3.0]))
    assert ok < 1e-8


def test_recurrent_zero_fixed_point():
    x = np.zeros((1, 3, 4, 2))
    state = T.MemoryState.zeros((1, 3, 4, 5))
    kern = {g: np.zeros((3, 3, 7, 5)) for g in T.GATES}
    h, new = T.recurrent_cell_step(x, state, kern)
    assert np.array_equal(h.data, np.zeros((1, 3, 4, 5)))
    assert np.array_equal(new.cell.data, np.zeros((1, 3, 4, 5)))


def test_recurrent_hidden_bounded(rng):
    x = rng.standard_normal((2, 3, 4, 2)) * 10
    state = T.MemoryState(Tensor(rng.uniform(-1, 1, (2, 3, 4, 3))), Tensor(rng.standard_normal((2, 3, 4, 3))))
    kern = {g: rng.standard_normal((3, 3, 5, 3)) for g in T.GATES}
    h, _ = T.recurrent_cell_step(x, state, kern)
    assert np.all(np.abs(h.data) < 1.0)


def test_checkpoint_round_trip(tmp_path, rng):
    tensors = {"a": rng.standard_normal((2, 3)), "b.c": np.array(1.5), "empty": np.zeros((0, 4))}
    path = tmp_path / "x.ckpt"
    save_checkpoint(path, tensors)
    back = load_checkpoint(path)
    assert list(back) == list(tensors)
    for k in tensors:
        assert back[k].shape == tensors[k].shape
        assert np.array_equal(back[k], tensors[k])


def test_checkpoint_rejects_bad_files(tmp_path):
    p = tmp_path / "bad.ckpt"
    p.write_bytes(b"NOPE" + b"\0" * 8)
    with pytest.raises(ConfigurationError):
        load_checkpoint(p)
    save_checkpoint(tmp_path / "ok.ckpt", {"a": np.ones(10)})
    data = (tmp_path / "ok.ckpt").read_bytes()
    (tmp_path / "short.ckpt").write_bytes(data[:-8])
    with pytest.raises(ConfigurationError):
        load_checkpoint(tmp_path / "short.ckpt")


def test_float32_mode_runs():
    T.set_default_dtype(np.float32)
    try:
        y = T.convolve(np.ones((1, 4, 4, 1)), np.ones((3, 3, 1, 2)), 1, 1)
        assert y.data.dtype == np.float32
    finally:
        T.set_default_dtype(np.float64)
