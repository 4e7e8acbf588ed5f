import numpy as np
import pytest

from stagg.errors import DegenerateLabels, InvalidLength, NumericalError
from stagg.optim import (
    AdamState,
    TrainOptions,
    TrainRecord,
    adam_step,
    encoder_loss,
    grad_check,
    interval_loss,
    lr_schedule,
    numeric_gradient,
    records_to_csv,
    train_aggregator,
)
from stagg.pipeline import EMOTIONS, LocalFeatureSequence, PipelineConfig, build_aggregator
from stagg.pooling import pca_fit
from stagg.temporal import RnnParams


# Adam -----------------------------------------------------------------------

def test_zero_gradient_leaves_params():
    params = {"w": np.array([1.0, -2.0])}
    out, state = adam_step(params, {"w": np.zeros(2)}, AdamState())
    np.testing.assert_array_equal(out["w"], params["w"])
    assert state.t == 1


def test_first_step_by_hand():
    state = AdamState()
    out, state = adam_step({"x": np.array(0.0)}, {"x": np.array(1.0)}, state)
    assert state.m["x"] == pytest.approx(0.3)
    assert state.v["x"] == pytest.approx(0.001)
    assert out["x"] == pytest.approx(-0.001 / (1 + 1e-8), rel=1e-12)


def test_constant_gradient_step_size():
    state = AdamState()
    params = {"x": np.array(0.0)}
    prev = 0.0
    for _ in range(2):
        params, state = adam_step(params, {"x": np.array(1.0)}, state)
        step = prev - float(params["x"])
        assert 0.9 * 0.001 <= step <= 0.001
        prev = float(params["x"])


def test_zero_betas_give_sign_descent(rng):
    g = rng.standard_normal((3, 4))
    theta = rng.standard_normal((3, 4))
    out, _ = adam_step({"p": theta}, {"p": g}, AdamState(lr=0.01, beta1=0.0, beta2=0.0))
    np.testing.assert_allclose(out["p"], theta - 0.01 * g / (np.abs(g) + 1e-8), rtol=0, atol=1e-15)


def test_adam_shape_mismatch():
    with pytest.raises(InvalidLength):
        adam_step({"p": np.zeros(3)}, {"p": np.zeros(4)}, AdamState())
    with pytest.raises(InvalidLength):
        adam_step({"p": np.zeros(3)}, {"q": np.zeros(3)}, AdamState())


def test_schedule_staircase():
    assert lr_schedule(0) == 0.001
    assert lr_schedule(39999) == 0.001
    assert lr_schedule(40000) == pytest.approx(0.0001)
    values = [lr_schedule(t) for t in range(0, 200001, 5000)]
    assert all(a >= b for a, b in zip(values, values[1:]))


# gradient checking ------------------------------------------------------------

def test_grad_check_linear(rng):
    c = rng.standard_normal(7)
    assert grad_check(lambda x: float(c @ x), lambda x: c, rng.standard_normal(7)) < 1e-9


def test_grad_check_quadratic(rng):
    assert grad_check(lambda x: float(np.sum(x * x)), lambda x: 2 * x, rng.standard_normal((3, 3))) < 1e-7


def test_grad_check_flags_wrong_gradient(rng):
    assert grad_check(lambda x: float(x @ x), lambda x: 3 * x, rng.standard_normal(4)) > 0.1


def test_non_finite_function_raises():
    with pytest.raises(NumericalError), np.errstate(invalid="ignore"):
        numeric_gradient(lambda x: float(np.log(x[0])), np.array([1e-6]))


def encoder_case(seed, config, dim=6, positions=2, batch=3):
    r = np.random.default_rng(seed)
    pca = pca_fit(r.standard_normal((50, dim)), config.pca_dim) if config.use_pca else None
    agg = build_aggregator(config, dim, pca=pca)
    agg.rnn.b[:] = 0.2 * r.standard_normal(agg.rnn.b.shape)
    x = r.standard_normal((batch, config.interval_frames, positions, dim))
    y = r.integers(0, 2, size=batch).astype(float)
    head_w = r.standard_normal(config.hidden_dim)
    return agg, x, y, head_w, float(r.standard_normal())


def check_encoder(agg, x, y, head_w, head_b):
    def loss(v):
        return encoder_loss(v, y, agg, head_w, head_b)[0]

    return grad_check(loss, lambda v: encoder_loss(v, y, agg, head_w, head_b)[2], x)


def test_composed_loss_reference_instance():
    cfg = PipelineConfig(grid_dim=16, hidden_dim=4, interval_grids=3)
    assert check_encoder(*encoder_case(0, cfg)) < 1e-4


@pytest.mark.parametrize("trial", range(20))
def test_composed_loss_gradients(trial):
    r = np.random.default_rng(trial)
    cfg = PipelineConfig(grid_dim=int(2 ** r.integers(3, 6)), hidden_dim=int(r.integers(2, 6)),
                         interval_grids=int(r.integers(1, 4)), grid_frames=int(r.integers(1, 3)),
                         use_pca=trial % 4 == 1, pca_dim=3)
    if trial % 5 == 2:
        cfg = cfg.replace(grid_pooler="none", grid_frames=1)
    assert check_encoder(*encoder_case(100 + trial, cfg, dim=int(r.integers(3, 7)))) < 1e-4


@pytest.mark.parametrize("wrt", ["w_in", "w_rec", "b", "head_w", "head_b"])
def test_interval_loss_parameter_gradients(rng, wrt):
    rnn = RnnParams.init(5, 4, seed=1)
    rnn.b[:] = 0.3 * rng.standard_normal(4)
    x = rng.standard_normal((6, 3, 5))
    y = rng.integers(0, 2, 6).astype(float)
    head = {"head_w": rng.standard_normal(4), "head_b": np.array([0.2])}

    def unpack(v):
        p = {**rnn.as_dict(), **head, wrt: v}
        return RnnParams(p["w_in"], p["w_rec"], p["b"]), p["head_w"], p["head_b"][0]

    def f(v):
        r, w, b = unpack(v)
        return interval_loss(x, y, r, w, b)[0]

    def grad(v):
        r, w, b = unpack(v)
        return interval_loss(x, y, r, w, b)[1][wrt]

    assert grad_check(f, grad, {**rnn.as_dict(), **head}[wrt]) < 1e-4


# training -------------------------------------------------------------------

def separable_videos(seed, n_per_class=6, emotion="anger"):
    """Real videos sit near one mean, fake near another; any pooling sees it."""
    r = np.random.default_rng(seed)
    mu = {"real": np.array([1.0, 0.0, 0.5, 0.0]), "fake": np.array([0.0, 1.0, 0.0, -0.5])}
    out = []
    for label in ("real", "fake"):
        for k in range(n_per_class):
            x = mu[label] + 0.2 * r.standard_normal((20, 2, 4))
            out.append(LocalFeatureSequence(f"{label}{k}", "s", emotion, label, 100.0, x))
    return out


SEPARABLE = PipelineConfig(grid_dim=32, hidden_dim=8, subject_norm="none")


def test_separable_task_trains_below_threshold():
    train, val = separable_videos(0), separable_videos(1, 2)
    _, records = train_aggregator(train, val, SEPARABLE,
                                  TrainOptions(max_iters=2000, eval_every=100, patience=50, seed=0))
    assert records[-1].iteration <= 2000
    assert min(r.train_loss for r in records) < 0.1
    iters = [r.iteration for r in records]
    assert iters == sorted(set(iters))


def test_training_is_deterministic():
    train, val = separable_videos(0), separable_videos(1, 2)
    opts = TrainOptions(max_iters=60, eval_every=20, seed=5)
    a, ra = train_aggregator(train, val, SEPARABLE, opts)
    b, rb = train_aggregator(train, val, SEPARABLE, opts)
    for k in ("w_in", "w_rec", "b"):
        assert a.rnn.as_dict()[k].tobytes() == b.rnn.as_dict()[k].tobytes()
    assert records_to_csv(ra) == records_to_csv(rb)


def test_emotions_train_independently():
    data = [s for i, e in enumerate(EMOTIONS[:2]) for s in separable_videos(i, 3, e)]
    opts = TrainOptions(max_iters=20, eval_every=10, seed=0)
    models = [train_aggregator(data, [], SEPARABLE, opts, emotion=e)[0] for e in EMOTIONS[:2]]
    assert models[0].rnn.w_in.tobytes() != models[1].rnn.w_in.tobytes()
    assert [m.extra["emotion"] for m in models] == list(EMOTIONS[:2])


def test_single_class_training_data():
    only_real = [s for s in separable_videos(0) if s.label == "real"]
    with pytest.raises(DegenerateLabels):
        train_aggregator(only_real, [], SEPARABLE, TrainOptions(max_iters=5))


def test_pooling_only_config_runs_no_optimizer():
    agg, records = train_aggregator(separable_videos(0), [], PipelineConfig(use_rnn=False, grid_dim=32),
                                    TrainOptions(max_iters=5))
    assert records == [] and agg.rnn is None


def test_records_csv_header():
    text = records_to_csv([TrainRecord(500, 0.5, 0.6, 0.001)])
    assert text.splitlines() == ["iter,train_loss,val_loss,lr", "500,0.5,0.6,0.001"]
