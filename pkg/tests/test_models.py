import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rpdro.autodiff import ParamSet, Tape, backward, finite_diff_check
from rpdro.models import (
    ModelSpec,
    OptimizerState,
    Schedule,
    forward_logits,
    init_params,
    load_checkpoint,
    lr_at_step,
    nll_per_example,
    nll_values,
    optimizer_step,
    predict_logits,
    save_checkpoint,
    zero_one_per_example,
)

from oracles import reference_nll


def test_linear_shapes_and_determinism():
    spec = ModelSpec.named("linear", 2, 2)
    p = init_params(spec, 7)
    assert p["W0"].shape == (2, 2) and p["b0"].shape == (2,)
    q = init_params(spec, 7)
    assert p.digest() == q.digest()
    assert init_params(spec, 8).digest() != p.digest()


def test_mlp_shapes():
    p = init_params(ModelSpec("mlp", 2, 2, (4,)), 0)
    assert p["W0"].shape == (2, 4) and p["W1"].shape == (4, 2)
    assert np.all(p["b0"] == 0) and np.all(p["b1"] == 0)


def test_glorot_bound():
    p = init_params(ModelSpec.named("linear", 30, 10), 3)
    assert np.abs(p["W0"]).max() <= math.sqrt(6 / 40)


@pytest.mark.parametrize("kwargs", [
    dict(architecture="conv", input_dim=2, output_dim=2),
    dict(architecture="linear", input_dim=0, output_dim=2),
    dict(architecture="linear", input_dim=2, output_dim=1),
    dict(architecture="mlp", input_dim=2, output_dim=2, hidden_sizes=(0,)),
    dict(architecture="mlp", input_dim=2, output_dim=2, hidden_sizes=(3,), activation="gelu"),
])
def test_invalid_specs(kwargs):
    with pytest.raises(ValueError):
        ModelSpec(**kwargs)


def test_named_specs():
    assert ModelSpec.named("mlp-16x8", 3, 2).hidden_sizes == (16, 8)
    assert ModelSpec.from_dict(ModelSpec.named("mlp-4", 3, 2).to_dict()) == ModelSpec.named("mlp-4", 3, 2)


def test_identity_linear_selects_weight_row():
    spec = ModelSpec.named("linear", 2, 2)
    params = ParamSet(W0=np.array([[1.0, 2.0], [3.0, 4.0]]), b0=np.zeros(2))
    np.testing.assert_array_equal(predict_logits(params, spec, np.array([[1.0, 0.0]])), [[1.0, 2.0]])


def test_zero_weights_give_zero_logits():
    spec = ModelSpec.named("mlp-4", 3, 2)
    params = ParamSet({k: np.zeros_like(v) for k, v in init_params(spec, 0).items()})
    X = np.random.default_rng(0).normal(size=(5, 3))
    np.testing.assert_array_equal(predict_logits(params, spec, X), np.zeros((5, 2)))


def test_dimension_mismatch():
    spec = ModelSpec.named("linear", 3, 2)
    with pytest.raises(ValueError):
        predict_logits(init_params(spec, 0), spec, np.ones((2, 4)))
    t = Tape()
    with pytest.raises(ValueError):
        forward_logits(t, spec, init_params(spec, 0).bind(t), t.constant(np.ones((2, 4))))


@pytest.mark.parametrize("name,act", [("mlp-2", "tanh"), ("mlp-4", "relu"), ("mlp-16x8", "tanh")])
def test_tape_and_numpy_forward_agree_and_gradients_check(name, act):
    rng = np.random.default_rng(5)
    spec = ModelSpec.named(name, 3, 2, act)
    params = init_params(spec, 1)
    X = rng.normal(size=(6, 3))
    y = rng.integers(0, 2, 6)
    t = Tape()
    logits = forward_logits(t, spec, params.bind(t), t.constant(X))
    np.testing.assert_allclose(t.value(logits), predict_logits(params, spec, X), rtol=0, atol=1e-14)
    fn = lambda tp, nodes: tp.mean(nll_per_example(tp, forward_logits(tp, spec, nodes, tp.constant(X)), y))
    assert finite_diff_check(fn, params) < 1e-5


def test_nll_hand_values():
    t = Tape()
    assert float(t.value(nll_per_example(t, t.constant(np.array([[0.0, 0.0]])), [1]))[0]) == pytest.approx(math.log(2))
    np.testing.assert_allclose(nll_values(np.array([[10.0, -10.0]]), [0]), [2.0611536e-9], rtol=1e-6)
    np.testing.assert_allclose(nll_values(np.array([[10.0, -10.0]]), [1]), [20.0], rtol=1e-9)


def test_label_range_checked():
    with pytest.raises(ValueError):
        nll_values(np.zeros((1, 2)), [2])
    with pytest.raises(ValueError):
        zero_one_per_example(np.zeros((1, 2)), [-1])


def test_zero_one_hand_values():
    np.testing.assert_array_equal(zero_one_per_example(np.array([[2.0, 1.0], [1.0, 2.0], [1.0, 1.0]]), [0, 0, 0]),
                                  [0.0, 1.0, 0.0])


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_nll_is_nonnegative_and_matches_reference(seed):
    rng = np.random.default_rng(seed)
    n, c = rng.integers(1, 6), rng.integers(2, 5)
    logits = rng.uniform(-20, 20, size=(n, c))
    y = rng.integers(0, c, size=n)
    t = Tape()
    taped = t.value(nll_per_example(t, t.constant(logits), y))
    assert np.all(taped >= 0)
    np.testing.assert_allclose(taped, reference_nll(logits, y), rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(nll_values(logits, y), taped, rtol=1e-12, atol=1e-14)


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 6), st.floats(-50, 50))
def test_nll_equal_logits_is_log_classes(c, v):
    assert nll_values(np.full((1, c), v), [0])[0] == pytest.approx(math.log(c), abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_zero_one_invariant_under_increasing_transform(seed):
    rng = np.random.default_rng(seed)
    logits = rng.normal(size=(5, 3))
    y = rng.integers(0, 3, size=5)
    base = zero_one_per_example(logits, y)
    np.testing.assert_array_equal(base, zero_one_per_example(np.exp(logits) * 3 + 1, y))
    np.testing.assert_array_equal(base, zero_one_per_example(np.tanh(logits), y))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_small_sgd_step_decreases_mean_nll(seed):
    rng = np.random.default_rng(seed)
    spec = ModelSpec.named("mlp-4", 3, 2)
    params = init_params(spec, int(rng.integers(100)))
    X = rng.normal(size=(8, 3))
    y = rng.integers(0, 2, 8)
    t = Tape()
    nodes = params.bind(t)
    loss = t.mean(nll_per_example(t, forward_logits(t, spec, nodes, t.constant(X)), y))
    g = backward(t, loss)
    grads = {k: g[v] for k, v in nodes.items()}
    if sum(float(np.sum(v * v)) for v in grads.values()) < 1e-12:
        return
    new, _ = optimizer_step(params, grads, OptimizerState("sgd", 1e-3), "descend")
    assert nll_values(predict_logits(new, spec, X), y).mean() < float(t.value(loss))


def test_sgd_hand_values():
    p = ParamSet(w=np.array(1.0))
    g = {"w": np.array(0.5)}
    down, _ = optimizer_step(p, g, OptimizerState("sgd", 0.1), "descend")
    up, _ = optimizer_step(p, g, OptimizerState("sgd", 0.1), "ascend")
    assert float(down["w"]) == pytest.approx(0.95) and float(up["w"]) == pytest.approx(1.05)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_sgd_descend_then_ascend_is_exact(seed):
    rng = np.random.default_rng(seed)
    p = ParamSet(w=rng.integers(-1000, 1000, size=4) / 8.0)
    g = {"w": rng.integers(-1000, 1000, size=4) / 8.0}
    state = OptimizerState("sgd", 0.125)
    down, state = optimizer_step(p, g, state, "descend")
    back, state = optimizer_step(down, g, state, "ascend")
    np.testing.assert_array_equal(back["w"], p["w"])
    assert state.step == 2


def test_adam_first_step_magnitude_is_lr():
    p = ParamSet(w=np.array([1.0]))
    state = OptimizerState("adam", 0.1)
    new, state = optimizer_step(p, {"w": np.array([0.5])}, state, "descend")
    assert float(1.0 - new["w"][0]) == pytest.approx(0.1, rel=1e-6)
    assert state.first["w"].shape == (1,) and state.step == 1


def test_optimizer_errors():
    p = ParamSet(w=np.ones(2))
    with pytest.raises(ValueError, match="shape"):
        optimizer_step(p, {"w": np.ones(3)}, OptimizerState(), "descend")
    with pytest.raises(ValueError, match="non-finite"):
        optimizer_step(p, {"w": np.array([np.inf, 0.0])}, OptimizerState(), "descend")
    with pytest.raises(ValueError):
        optimizer_step(p, {"w": np.ones(2)}, OptimizerState(), "sideways")
    with pytest.raises(ValueError):
        OptimizerState("rmsprop")


def test_schedules():
    lin = Schedule("linear", 100)
    assert lr_at_step(lin, 0.1, 0) == 0.1
    assert lr_at_step(lin, 0.1, 50) == pytest.approx(0.05)
    assert lr_at_step(lin, 0.1, 100) == 0.0
    assert lr_at_step(lin, 0.1, 101) == 0.0
    assert lr_at_step(Schedule("constant", 10), 0.3, 7) == 0.3
    assert Schedule("linear-decay-to-zero", 5).kind == "linear"
    with pytest.raises(ValueError):
        Schedule("cosine", 5)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 500), st.integers(0, 600), st.floats(0, 1))
def test_lr_never_negative(total, step, base):
    assert lr_at_step(Schedule("linear", total), base, step) >= 0


def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    spec = ModelSpec.named("mlp-4", 3, 2)
    params = init_params(spec, 11)
    params["W0"] = params["W0"] * (1 / 3.0) + 1e-300
    adv = init_params(ModelSpec.named("linear", 3, 2), 12)
    path = tmp_path / "ck.json"
    save_checkpoint(path, spec, params, step=40, seed=3, strategy={"kind": "erm"},
                    adversary_spec=ModelSpec.named("linear", 3, 2), adversary=adv)
    back = load_checkpoint(path)
    assert back["spec"] == spec and back["step"] == 40 and back["seed"] == 3
    for k in params:
        assert np.array_equal(back["params"][k], params[k])
    for k in adv:
        assert np.array_equal(back["adversary"][k], adv[k])
