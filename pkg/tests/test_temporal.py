import numpy as np
import pytest

from stagg.errors import EmptyInput, InvalidLength
from stagg.optim import grad_check
from stagg.temporal import RnnParams, initial_state, rnn_backward, rnn_forward, rnn_step


def params_1d(w_in, w_rec, b):
    return RnnParams(np.array([[w_in]]), np.array([[w_rec]]), np.array([b]))


def test_zero_weights_give_zero_output(rng):
    p = RnnParams(np.zeros((3, 5)), np.zeros((3, 3)), np.zeros(3))
    out, _ = rnn_step(rng.standard_normal(5), np.zeros(3), p)
    assert np.all(out == 0)


def test_scalar_step_is_tanh():
    out, state = rnn_step(np.array([0.5]), np.zeros(1), params_1d(1.0, 0.0, 0.0))
    assert out[0] == pytest.approx(0.46212, abs=1e-5)
    assert np.array_equal(out, state)


def test_bias_only_cell_ignores_input(rng):
    b = rng.standard_normal(4)
    p = RnnParams(np.zeros((4, 3)), np.zeros((4, 4)), b)
    for _ in range(3):
        out, _ = rnn_step(rng.standard_normal(3), np.zeros(4), p)
        np.testing.assert_array_equal(out, np.tanh(b))


def test_single_grid_is_one_step(rng):
    p = RnnParams.init(6, 4, seed=3)
    y = rng.standard_normal(6)
    out, _ = rnn_forward(y[None], p)
    np.testing.assert_array_equal(out, rnn_step(y, initial_state(p), p)[0])


@pytest.mark.parametrize("cell", ["vanilla", "lstm"])
def test_origin_is_a_fixed_point(cell):
    p = RnnParams.init(6, 4, seed=0, cell=cell)
    for k in (1, 4, 9):
        out, _ = rnn_forward(np.zeros((k, 6)), p)
        assert np.all(out == 0)


@pytest.mark.parametrize("cell", ["vanilla", "lstm"])
def test_grid_order_matters(rng, cell):
    p = RnnParams.init(6, 4, seed=1, cell=cell)
    p.b[:] = 0.1 * rng.standard_normal(p.b.shape)
    y = rng.standard_normal((5, 6))
    assert np.linalg.norm(rnn_forward(y, p)[0] - rnn_forward(y[::-1], p)[0]) > 1e-6


def test_outputs_stay_inside_tanh_range(rng):
    # pre-activations up to ~15; beyond ~19 tanh rounds to exactly 1.0 in float64
    p = RnnParams(rng.standard_normal((8, 3)), rng.standard_normal((8, 8)), rng.standard_normal(8))
    _, tape = rnn_forward(rng.standard_normal((20, 3)), p)
    assert all(np.all(np.abs(c) < 1) for c in tape["states"][1:])


def test_forward_is_deterministic(rng):
    p = RnnParams.init(6, 5, seed=9)
    y = rng.standard_normal((3, 7, 6))
    a, _ = rnn_forward(y, p)
    b, _ = rnn_forward(y.copy(), p)
    assert a.tobytes() == b.tobytes()


def test_batched_forward_matches_rows(rng):
    p = RnnParams.init(4, 3, seed=2)
    y = rng.standard_normal((2, 3, 5, 4))
    out, _ = rnn_forward(y, p)
    for i in range(2):
        for j in range(3):
            np.testing.assert_allclose(out[i, j], rnn_forward(y[i, j], p)[0], rtol=0, atol=1e-15)


def test_init_scale(rng):
    p = RnnParams.init(64, 16, seed=0)
    assert np.max(np.abs(p.w_in)) <= 1 / 8 and np.max(np.abs(p.w_rec)) <= 1 / 4
    assert np.all(p.b == 0)
    assert RnnParams.init(5, 3, cell="lstm").w_in.shape == (12, 5)


def test_errors():
    p = RnnParams.init(4, 3)
    with pytest.raises(EmptyInput):
        rnn_forward(np.zeros((0, 4)), p)
    with pytest.raises(InvalidLength):
        rnn_forward(np.zeros((2, 5)), p)
    with pytest.raises(InvalidLength):
        rnn_step(np.zeros(4), np.zeros(2), p)
    _, tape = rnn_forward(np.zeros((2, 4)), p)
    with pytest.raises(InvalidLength):
        rnn_backward(tape, np.zeros(5), p)


def test_zero_cotangent_gives_zero_gradients(rng):
    p = RnnParams.init(4, 3, seed=0)
    _, tape = rnn_forward(rng.standard_normal((4, 4)), p)
    grads, gy = rnn_backward(tape, np.zeros(3), p)
    assert all(np.all(v == 0) for v in grads.values()) and np.all(gy == 0)


def test_recurrent_weights_unused_for_one_grid(rng):
    p = RnnParams.init(4, 3, seed=0)
    _, tape = rnn_forward(rng.standard_normal((1, 4)), p)
    grads, _ = rnn_backward(tape, rng.standard_normal(3), p)
    assert np.all(grads["w_rec"] == 0)


def bptt_case(seed, cell, hidden=None, dim=None, steps=None, batch=()):
    r = np.random.default_rng(seed)
    hidden = hidden or int(r.integers(1, 9))
    dim = dim or int(r.integers(1, 9))
    steps = steps or int(r.integers(1, 9))
    p = RnnParams.init(dim, hidden, seed=seed, cell=cell)
    p.b[:] = 0.2 * r.standard_normal(p.b.shape)
    y = r.standard_normal(tuple(batch) + (steps, dim))
    g = r.standard_normal(tuple(batch) + (hidden,))
    return p, y, g


def check_bptt(p, y, g, wrt):
    def build(v):
        d = {**p.as_dict()}
        inputs = y
        if wrt == "inputs":
            inputs = v
        else:
            d[wrt] = v
        return RnnParams(d["w_in"], d["w_rec"], d["b"], p.cell), inputs

    def f(v):
        q, inputs = build(v)
        return float(np.sum(g * rnn_forward(inputs, q)[0]))

    def grad(v):
        q, inputs = build(v)
        _, tape = rnn_forward(inputs, q)
        grads, gy = rnn_backward(tape, g, q)
        return gy if wrt == "inputs" else grads[wrt]

    start = y if wrt == "inputs" else p.as_dict()[wrt]
    return grad_check(f, grad, start)


@pytest.mark.parametrize("wrt", ["w_in", "w_rec", "b", "inputs"])
def test_bptt_reference_instance(wrt):
    p, y, g = bptt_case(0, "vanilla", hidden=4, dim=6, steps=5)
    assert check_bptt(p, y, g, wrt) < 1e-4


@pytest.mark.parametrize("trial", range(20))
@pytest.mark.parametrize("cell", ["vanilla", "lstm"])
def test_bptt_matches_finite_differences(trial, cell):
    p, y, g = bptt_case(1000 + trial, cell, batch=(2,) if trial % 3 == 0 else ())
    for wrt in ("w_in", "w_rec", "b", "inputs"):
        assert check_bptt(p, y, g, wrt) < 1e-4, wrt
