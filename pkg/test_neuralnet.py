import json

import numpy as np
import pytest

from neuralnet import (
    TABLE_ARCHS,
    MlpArch,
    MlpParams,
    NonFiniteError,
    ShapeError,
    adam,
    arch_for_network,
    batch_loss,
    forward,
    init_params,
    load_checkpoint,
    loss_and_grad,
    save_checkpoint,
    scale_targets,
    sgd,
    step,
    target_bounds,
    unscale_outputs,
)


def test_case14_architecture(case14):
    arch = arch_for_network(case14)
    assert arch.input_dim == 22
    assert arch.hidden_dims == (64, 32, 16)
    assert arch.output_dim == 9
    assert arch.n_params == 4233
    assert init_params(arch, 0).values.shape == (4233,)


def test_table_widths_and_override(case118):
    assert arch_for_network(case118).hidden_dims == (256, 128, 64)
    assert arch_for_network(case118, [8, 4]).hidden_dims == (8, 4)


def test_layout_covers_vector():
    arch = MlpArch(3, (4, 2), 5)
    slots = arch.layout()
    assert slots[0].w_offset == 0
    assert slots[-1].end == arch.n_params
    for a, b in zip(slots, slots[1:]):
        assert a.end == b.w_offset


def test_zero_params_give_midpoints(case14):
    arch = arch_for_network(case14, (8,))
    params = MlpParams(np.zeros(arch.n_params), arch)
    out = forward(params, np.ones(arch.input_dim))
    np.testing.assert_allclose(out, 0.5)
    p_gen, v_gen = unscale_outputs(case14, out)
    lo, hi = target_bounds(case14)
    np.testing.assert_allclose(np.concatenate([p_gen, v_gen]), 0.5 * (lo + hi))


def test_single_linear_layer_closed_form():
    arch = MlpArch(1, (), 1)
    params = MlpParams(np.array([1.0, 0.0]), arch)
    assert forward(params, np.array([2.0]))[0] == pytest.approx(0.8807970779778823, abs=1e-12)


def test_outputs_strictly_inside_unit_interval():
    arch = MlpArch(6, (16, 8), 4)
    params = init_params(arch, 1)
    x = np.random.default_rng(2).uniform(-3, 3, (50, 6))
    out = forward(params, x)
    assert out.shape == (50, 4)
    assert np.all(out > 0.0) and np.all(out < 1.0)


def test_shape_errors():
    params = init_params(MlpArch(3, (4,), 2), 0)
    with pytest.raises(ShapeError):
        forward(params, np.ones(4))
    with pytest.raises(ShapeError):
        batch_loss(params, np.ones((2, 3)), np.ones((3, 2)))
    with pytest.raises(ShapeError):
        MlpParams(np.zeros(5), params.arch)


def test_params_are_immutable():
    params = init_params(MlpArch(2, (3,), 1), 0)
    with pytest.raises(ValueError):
        params.values[0] = 1.0


def test_loss_zero_at_exact_targets():
    params = init_params(MlpArch(3, (5,), 2), 4)
    x = np.random.default_rng(0).uniform(0, 1, (7, 3))
    loss, grad = loss_and_grad(params, x, forward(params, x))
    assert loss == 0.0
    np.testing.assert_array_equal(grad, 0.0)


def test_one_layer_hand_derivative():
    arch = MlpArch(2, (), 1)
    w = np.array([0.3, -0.7, 0.1])
    params = MlpParams(w, arch)
    x = np.array([[0.5, 2.0]])
    y = np.array([[0.25]])
    z = 0.3 * 0.5 - 0.7 * 2.0 + 0.1
    s = 1.0 / (1.0 + np.exp(-z))
    d = 2.0 * (s - 0.25) * s * (1.0 - s)
    loss, grad = loss_and_grad(params, x, y)
    assert loss == pytest.approx((s - 0.25) ** 2, rel=1e-14)
    np.testing.assert_allclose(grad, [d * 0.5, d * 2.0, d], rtol=1e-13)


def test_gradient_matches_finite_differences():
    arch = MlpArch(4, (6, 5), 3)
    rng = np.random.default_rng(9)
    params = init_params(arch, 9)
    x = rng.uniform(0, 1, (10, 4))
    y = rng.uniform(0, 1, (10, 3))
    _, grad = loss_and_grad(params, x, y)
    h = 1e-5
    fd = np.zeros(arch.n_params)
    for i in range(arch.n_params):
        e = np.zeros(arch.n_params)
        e[i] = h
        fd[i] = (batch_loss(params.with_values(params.values + e), x, y)
                 - batch_loss(params.with_values(params.values - e), x, y)) / (2 * h)
    scale = np.maximum(np.abs(grad), 1e-3)
    assert np.max(np.abs(grad - fd) / scale) <= 1e-5


def test_gradient_directional_check_case14(case14):
    arch = arch_for_network(case14)
    rng = np.random.default_rng(1)
    params = init_params(arch, 1)
    x = rng.uniform(0, 1, (20, arch.input_dim))
    y = rng.uniform(0, 1, (20, arch.output_dim))
    _, grad = loss_and_grad(params, x, y)
    for _ in range(5):
        u = rng.standard_normal(arch.n_params)
        u /= np.linalg.norm(u)
        h = 1e-6
        fd = (batch_loss(params.with_values(params.values + h * u), x, y)
              - batch_loss(params.with_values(params.values - h * u), x, y)) / (2 * h)
        assert fd == pytest.approx(grad @ u, rel=1e-4, abs=1e-8)


def test_sgd_step_exact():
    params = MlpParams(np.array([1.0, -2.0]), MlpArch(1, (), 1))
    g = np.array([0.5, 0.25])
    new, state = step(sgd(0.1, 0.0), params, g)
    np.testing.assert_allclose(new.values, [1.0 - 0.05, -2.0 - 0.025])
    assert state.t == 1


def test_sgd_weight_decay_shrinks():
    params = MlpParams(np.array([1.0, -2.0]), MlpArch(1, (), 1))
    state = sgd(0.1, 0.001)
    for _ in range(3):
        params, state = step(state, params, np.zeros(2))
    np.testing.assert_allclose(params.values, np.array([1.0, -2.0]) * (1 - 0.1 * 0.001) ** 3)


def test_adam_scalar_trace():
    arch = MlpArch(1, (), 1)
    params = MlpParams(np.array([0.0, 0.0]), arch)
    state = adam(0.1, 0.0)
    grads = [1.0, -0.5, 2.0]
    m = v = 0.0
    w = 0.0
    for t, g in enumerate(grads, start=1):
        params, state = step(state, params, np.array([g, g]))
        m = 0.9 * m + (1.0 - 0.9) * g
        v = 0.999 * v + (1.0 - 0.999) * g * g
        w -= 0.1 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
        assert params.values[0] == pytest.approx(w, abs=1e-12)
    # first step moves by lr against the gradient sign
    first, _ = step(adam(0.1, 0.0), MlpParams(np.zeros(2), arch), np.array([3.0, -4.0]))
    np.testing.assert_allclose(first.values, [-0.1, 0.1], rtol=1e-7)


def test_non_finite_update_raises():
    params = MlpParams(np.array([1.0, 1.0]), MlpArch(1, (), 1))
    with pytest.raises(NonFiniteError):
        step(sgd(0.1, 0.0), params, np.array([np.inf, 0.0]))


def test_scaling_inverse(case14):
    lo, hi = target_bounds(case14)
    raw = lo + 0.3 * (hi - lo)
    n_p = case14.n_gen - 1
    y = scale_targets(case14, raw[:n_p], raw[n_p:])
    np.testing.assert_allclose(y, 0.3)
    p_gen, v_gen = unscale_outputs(case14, y)
    np.testing.assert_allclose(np.concatenate([p_gen, v_gen]), raw)


def test_scaling_affine_map(case14):
    # generator at bus 2: P_min 0, P_max 1.4 pu
    lo, hi = target_bounds(case14)
    assert (lo[0], hi[0]) == pytest.approx((0.0, 1.4))
    y = np.zeros(9)
    y[0] = 0.37
    p_gen, _ = unscale_outputs(case14, y)
    assert p_gen[0] == pytest.approx(0.37 * 1.4)
    p_gen, v_gen = unscale_outputs(case14, np.zeros(9))
    np.testing.assert_allclose(p_gen, lo[:4])
    p_gen, v_gen = unscale_outputs(case14, np.ones(9))
    np.testing.assert_allclose(v_gen, hi[4:])


def test_checkpoint_preserves_values(tmp_path):
    params = init_params(MlpArch(3, (4,), 2), 5)
    path = tmp_path / "nested" / "model.json"
    save_checkpoint(path, params, {"method": "mtl", "seed": 5})
    loaded, header = load_checkpoint(path)
    np.testing.assert_array_equal(loaded.values, params.values)
    assert loaded.arch == params.arch
    assert header["method"] == "mtl"
    doc = json.loads(path.read_text())
    assert doc["n_params"] == params.arch.n_params


def test_checkpoint_missing(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_checkpoint(tmp_path / "none.json")


def test_batch_order_and_mean_loss():
    arch = MlpArch(3, (5,), 2)
    params = init_params(arch, 6)
    rng = np.random.default_rng(6)
    x = rng.uniform(0, 1, (9, 3))
    y = rng.uniform(0, 1, (9, 2))
    order = rng.permutation(9)
    np.testing.assert_allclose(forward(params, x)[order], forward(params, x[order]), rtol=1e-14)
    per_sample = [batch_loss(params, x[i:i + 1], y[i:i + 1]) for i in range(9)]
    assert batch_loss(params, x, y) == pytest.approx(np.mean(per_sample), rel=1e-12)


@pytest.mark.parametrize("case_fixture", ["case14", "case30", "case118"])
def test_table_architecture_gradients(case_fixture, request):
    net = request.getfixturevalue(case_fixture)
    arch = arch_for_network(net)
    assert arch.hidden_dims == TABLE_ARCHS[net.n_bus]
    h = 1e-6
    for point in range(5):
        rng = np.random.default_rng([net.n_bus, point])
        params = init_params(arch, [net.n_bus, point])
        x = rng.uniform(0, 1, (10, arch.input_dim))
        y = rng.uniform(0, 1, (10, arch.output_dim))
        _, grad = loss_and_grad(params, x, y)
        coords = rng.choice(arch.n_params, size=40, replace=False)
        for i in coords:
            e = np.zeros(arch.n_params)
            e[i] = h
            fd = (batch_loss(params.with_values(params.values + e), x, y)
                  - batch_loss(params.with_values(params.values - e), x, y)) / (2 * h)
            assert abs(grad[i] - fd) / max(abs(grad[i]), 1e-3) <= 1e-5, (point, i)


@pytest.mark.parametrize("case_fixture", ["case14", "case30", "case118"])
def test_unscaled_outputs_inside_generator_box(case_fixture, request):
    net = request.getfixturevalue(case_fixture)
    arch = arch_for_network(net)
    params = init_params(arch, 3)
    x = np.random.default_rng(3).uniform(0, 2, (10_000, arch.input_dim))
    out = forward(params, x)
    assert np.all(out > 0.0) and np.all(out < 1.0)
    p_gen, v_gen = unscale_outputs(net, out)
    lo, hi = target_bounds(net)
    n_p = net.n_gen - 1
    assert p_gen.shape == (10_000, n_p)
    assert np.all(p_gen >= lo[:n_p] - 1e-12) and np.all(p_gen <= hi[:n_p] + 1e-12)
    assert np.all(v_gen >= lo[n_p:] - 1e-12) and np.all(v_gen <= hi[n_p:] + 1e-12)
