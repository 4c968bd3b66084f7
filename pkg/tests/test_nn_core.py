import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import oracles
from scalweight.nn_core import (
    Capacity,
    DivergenceError,
    Model,
    ModelSpec,
    Optimizer,
    OptimizerConfig,
    TapeError,
    TaskSpec,
    backward,
    forward,
    forward_heads,
    loss_and_grad,
    lr_at,
    metric,
    optimizer_step,
    param_count,
)


def linear_spec(d_in, d_out, loss="l1"):
    return ModelSpec(d_in, (TaskSpec("t", loss, d_out),), Capacity(trunk_depth=0, head_depth=0))


def layers_of(model):
    return [(model.weights[k].tolist(), model.biases[k].tolist(), s.relu) for k, s in enumerate(model.slots)]


# ----------------------------------------------------------------- forward


def test_identity_linear_model_returns_input():
    m = Model(linear_spec(3, 3))
    m.weights[0][...] = np.eye(3)
    x = np.array([[1.0, -2.0, 0.5], [0.0, 3.0, -1.0]])
    out, _ = forward(m, x)
    np.testing.assert_array_equal(out, x)


def test_zero_weights_give_zero_output():
    spec = ModelSpec(4, (TaskSpec("t", "l1", 2),), Capacity(trunk_depth=2, base_width=5, head_depth=1))
    m = Model(spec, theta=np.zeros(param_count(spec)))
    out, _ = forward(m, np.random.default_rng(0).normal(size=(7, 4)))
    assert np.all(out == 0)


def test_two_layer_relu_matches_straight_line_oracle():
    spec = ModelSpec(3, (TaskSpec("t", "cross_entropy", 4),), Capacity(trunk_depth=1, base_width=5, head_depth=0))
    m = Model(spec, seed=0)
    x = np.array([[0.3, -1.2, 2.0], [1.0, 0.0, -0.5], [-0.7, 0.9, 0.1]])
    out, _ = forward(m, x)
    np.testing.assert_allclose(out, oracles.dense_forward(layers_of(m), x.tolist()), rtol=0, atol=1e-13)


def test_forward_rejects_bad_shapes_and_task_ids():
    m = Model(linear_spec(3, 2))
    with pytest.raises(ValueError):
        forward(m, np.zeros((2, 4)))
    with pytest.raises(IndexError):
        forward(m, np.zeros((2, 3)), task_id=1)


def test_multi_head_forward_runs_trunk_once_per_head_set():
    spec = ModelSpec(3, (TaskSpec("a", "l1", 1), TaskSpec("b", "bce", 2)), Capacity(trunk_depth=1, base_width=4, head_depth=1))
    m = Model(spec, seed=3)
    x = np.random.default_rng(1).normal(size=(5, 3))
    outs, _ = forward_heads(m, x)
    for h in (0, 1):
        single, _ = forward(m, x, h)
        np.testing.assert_array_equal(outs[h], single)
    assert outs[1].shape == (5, 2)


# ---------------------------------------------------------------- backward


def test_linear_squared_loss_at_zero_is_stationary():
    m = Model(linear_spec(2, 1), theta=np.zeros(3))
    x = np.array([[1.0, 2.0]])
    out, tape = forward(m, x)
    # d/dy of (y - 0)^2 at y = 0
    assert np.all(backward(tape, 2 * out) == 0)


def test_one_dimensional_chain_rule():
    # y = w x, L = (y - t)^2, w=1, x=2, t=0 -> dL/dw = 2 y x = 8
    m = Model(linear_spec(1, 1), theta=np.array([1.0, 0.0]))
    out, tape = forward(m, np.array([[2.0]]))
    g = backward(tape, 2 * (out - 0.0))
    assert g[0] == 8.0 and g[1] == 4.0


def _fd_case(loss, seed):
    rng = np.random.default_rng(seed)
    out_dim = {"cross_entropy": 3, "l1": 2, "bce": 3}[loss]
    spec = ModelSpec(4, (TaskSpec("t", loss, out_dim),), Capacity(trunk_depth=2, base_width=5, head_depth=0))
    m = Model(spec, seed=seed)
    m.biases[0][...] = rng.normal(scale=0.1, size=m.biases[0].shape)
    x = rng.normal(size=(6, 4))
    if loss == "cross_entropy":
        y = rng.integers(out_dim, size=6)
    elif loss == "l1":
        y = rng.normal(size=(6, out_dim))
    else:
        y = rng.integers(0, 2, size=(6, out_dim)).astype(float)
    return m, x, y


@pytest.mark.parametrize("loss", ["cross_entropy", "l1", "bce"])
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_backward_matches_central_differences(loss, seed):
    m, x, y = _fd_case(loss, seed)
    out, tape = forward(m, x)
    _, d = loss_and_grad(loss, out, y)
    g = backward(tape, d)

    def f(theta):
        return loss_and_grad(loss, forward(Model(m.spec, theta), x)[0], y)[0]

    fd = oracles.central_difference(f, m.theta)
    assert np.max(oracles.relative_error(g, fd)) < 1e-4


def test_losses_match_scalar_oracles(rng):
    z = rng.normal(size=(5, 3))
    y_int = rng.integers(3, size=5)
    y_real = rng.normal(size=(5, 3))
    y_bin = rng.integers(0, 2, size=(5, 3)).astype(float)
    assert loss_and_grad("cross_entropy", z, y_int)[0] == pytest.approx(oracles.ce_loss(z.tolist(), y_int.tolist()), abs=1e-14)
    assert loss_and_grad("l1", z, y_real)[0] == pytest.approx(oracles.l1_loss(z, y_real), abs=1e-14)
    assert loss_and_grad("bce", z, y_bin)[0] == pytest.approx(oracles.bce_loss(z, y_bin), abs=1e-14)


def test_backward_is_linear_in_loss_gradient(rng):
    spec = ModelSpec(3, (TaskSpec("t", "l1", 2),), Capacity(trunk_depth=2, base_width=4, head_depth=1))
    m = Model(spec, seed=4)
    out, tape = forward(m, rng.normal(size=(5, 3)))
    d1, d2 = rng.normal(size=out.shape), rng.normal(size=out.shape)
    a, b = 0.3, -1.7
    np.testing.assert_allclose(backward(tape, a * d1 + b * d2), a * backward(tape, d1) + b * backward(tape, d2), atol=1e-10)


def test_stale_tape_is_rejected():
    m = Model(linear_spec(2, 1), seed=0)
    out, tape = forward(m, np.ones((1, 2)))
    Optimizer(OptimizerConfig(kind="sgd", learning_rate=0.1, momentum=0.0), m.n_params).step(m, np.ones(m.n_params))
    with pytest.raises(TapeError):
        backward(tape, np.ones_like(out))


def test_backward_rejects_wrong_loss_grad_shape():
    m = Model(linear_spec(2, 1), seed=0)
    _, tape = forward(m, np.ones((3, 2)))
    with pytest.raises(ValueError):
        backward(tape, np.ones((2, 1)))


def test_canonical_order_weights_before_biases():
    spec = ModelSpec(2, (TaskSpec("t", "l1", 1),), Capacity(trunk_depth=1, base_width=3, head_depth=0))
    m = Model(spec, seed=0)
    # trunk W (3x2) then b (3), head W (1x3) then b (1)
    assert np.shares_memory(m.weights[0], m.theta[0:6])
    assert np.shares_memory(m.biases[0], m.theta[6:9])
    assert np.shares_memory(m.weights[1], m.theta[9:12])
    assert np.shares_memory(m.biases[1], m.theta[12:13])
    assert m.weights[0].flags.c_contiguous


# --------------------------------------------------------------- capacity


@given(
    depth=st.integers(0, 3),
    width=st.sampled_from([0.5, 1.0, 2.0]),
    head_depth=st.integers(0, 3),
    T=st.integers(1, 4),
)
def test_param_count_monotone_in_depth_and_width(depth, width, head_depth, T):
    tasks = tuple(TaskSpec(f"t{i}", "l1", 2) for i in range(T))

    def count(**kw):
        base = dict(trunk_depth=depth, base_width=8, width_multiplier=width, head_depth=head_depth)
        base.update(kw)
        return param_count(ModelSpec(5, tasks, Capacity(**base)))

    assert count(trunk_depth=depth + 1) > count()
    if depth + head_depth > 0:
        assert count(width_multiplier=width * 2) > count()
    else:  # no hidden layer, width is unused
        assert count(width_multiplier=width * 2) == count()


@given(head_depth=st.integers(1, 4), T=st.integers(2, 4))
def test_sharing_head_layers_reduces_parameters(head_depth, T):
    tasks = tuple(TaskSpec(f"t{i}", "l1", 1) for i in range(T))
    counts = [
        param_count(ModelSpec(5, tasks, Capacity(trunk_depth=1, base_width=6, head_depth=head_depth, shared_head_layers=s)))
        for s in range(head_depth + 1)
    ]
    assert all(a > b for a, b in zip(counts, counts[1:]))


def test_invalid_capacity_and_task_specs():
    with pytest.raises(ValueError):
        Capacity(head_depth=1, shared_head_layers=2)
    with pytest.raises(ValueError):
        TaskSpec("t", "cross_entropy", 1)
    with pytest.raises(ValueError):
        TaskSpec("t", "hinge", 2)


def test_metrics():
    out = np.array([[2.0, 1.0], [0.0, 3.0], [1.0, 0.0]])
    assert metric("cross_entropy", out, np.array([0, 1, 1])) == pytest.approx(2 / 3)
    assert metric("l1", out, np.zeros((3, 2))) == pytest.approx(7 / 6)
    assert metric("bce", out, np.array([[1, 0], [0, 1], [1, 1]])) == pytest.approx(4 / 6)


# -------------------------------------------------------------- optimizers


def test_sgd_single_step_arithmetic():
    m = Model(linear_spec(2, 1), theta=np.zeros(3))
    cfg = OptimizerConfig(kind="sgd", learning_rate=0.1, momentum=0.0)
    optimizer_step(m, np.ones(3), cfg, 0)
    np.testing.assert_array_equal(m.theta, np.full(3, -0.1))


@pytest.mark.parametrize("kind", ["sgd", "adamw"])
def test_zero_gradient_leaves_parameters_bit_identical(kind):
    m = Model(linear_spec(3, 2), seed=1)
    before = m.theta.copy()
    opt = Optimizer(OptimizerConfig(kind=kind), m.n_params)
    for _ in range(3):
        opt.step(m, np.zeros(m.n_params))
    assert np.array_equal(m.theta, before)


def test_adamw_first_step_closed_form():
    cfg = OptimizerConfig(kind="adamw", learning_rate=0.01, weight_decay=0.1)
    m = Model(linear_spec(1, 1), theta=np.array([0.7, -0.2]))
    g = np.array([0.3, -2.0])
    Optimizer(cfg, 2).step(m, g)
    for k in range(2):
        expected = oracles.adamw_first_step([0.7, -0.2][k], g[k], 0.01, wd=0.1)
        assert m.theta[k] == pytest.approx(expected, abs=1e-15)


def test_non_finite_gradient_is_rejected_without_update():
    m = Model(linear_spec(2, 1), seed=0)
    before = m.theta.copy()
    g = np.zeros(3)
    g[1] = np.nan
    with pytest.raises(DivergenceError):
        Optimizer(OptimizerConfig(), 3).step(m, g)
    assert np.array_equal(m.theta, before)


def test_optimizer_state_round_trip():
    m = Model(linear_spec(2, 2), seed=0)
    opt = Optimizer(OptimizerConfig(), m.n_params)
    opt.step(m, np.arange(m.n_params, dtype=float))
    other = opt.copy()
    assert other.t == opt.t and np.array_equal(other.state_vector(), opt.state_vector())


def test_training_is_deterministic():
    spec = ModelSpec(3, (TaskSpec("t", "l1", 1),), Capacity(trunk_depth=1, base_width=4, head_depth=0))
    x = np.random.default_rng(0).normal(size=(8, 3))
    y = x[:, :1]

    def run():
        m = Model(spec, seed=5)
        opt = Optimizer(OptimizerConfig(), m.n_params)
        for _ in range(5):
            out, tape = forward(m, x)
            opt.step(m, backward(tape, loss_and_grad("l1", out, y)[1]))
        return m.theta

    assert np.array_equal(run(), run())


# --------------------------------------------------------------- schedules


def test_warmup_reaches_base_rate_at_warmup_end():
    cfg = OptimizerConfig(learning_rate=0.1, warmup_epochs=5, total_epochs=10)
    assert lr_at(cfg, 0, 10) == pytest.approx(0.1 / 50)
    assert lr_at(cfg, 49, 10) == pytest.approx(0.1)
    assert lr_at(cfg, 50, 10) == 0.1


def test_constant_schedule():
    cfg = OptimizerConfig(learning_rate=0.3, total_epochs=4)
    assert {lr_at(cfg, s, 7) for s in range(40)} == {0.3}


def test_cosine_midpoint_and_end():
    cfg = OptimizerConfig(learning_rate=0.2, schedule="cosine", warmup_epochs=2, total_epochs=10)
    spe = 10
    warm = 20
    assert lr_at(cfg, warm + 40, spe) == pytest.approx(0.1, abs=1e-15)
    assert lr_at(cfg, 100, spe) == 0.0
    assert lr_at(cfg, warm, spe) == pytest.approx(0.2)
    assert math.isclose(lr_at(cfg, warm + 20, spe), 0.1 * (1 + math.cos(math.pi / 4)))


def test_lr_rejects_negative_step():
    with pytest.raises(ValueError):
        lr_at(OptimizerConfig(), -1, 10)
