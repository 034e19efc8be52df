import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from barrier_bsde import kernels
from barrier_bsde.checks import LAYER_TOL, batchnorm_gradient_check, layer_gradient_check
from barrier_bsde.model_core import generator
from barrier_bsde.nn import (
    BN_EPS,
    BN_MODES,
    Network,
    NetworkSpec,
    adam_init,
    adam_step,
    backward,
    batchnorm_backward,
    batchnorm_forward,
    elu,
    elu_grad,
    forward,
    forward_steps,
    init_network,
    load_checkpoint,
    save_checkpoint,
    update_running_stats,
)

FUSED = [False] + ([True] if kernels.mlp1_forward is not None else [])


def zero_net(spec):
    net = init_network(spec, generator(0, 1))
    for k in net.params:
        if k.startswith(("W", "b")) and not k.startswith("beta"):
            net.params[k][...] = 0.0
    return net


def inputs(rng, steps, batch):
    return np.stack([rng.uniform(5, 40, (steps, batch)), rng.uniform(0, 2, (steps, batch))], axis=-1)


def test_spec_validation_and_layers():
    with pytest.raises(ValueError):
        NetworkSpec(activation="relu")
    with pytest.raises(ValueError):
        NetworkSpec(bn_mode="all")
    with pytest.raises(ValueError):
        NetworkSpec(hidden_width=0)
    assert NetworkSpec().hidden_width == 21
    assert NetworkSpec(bn_mode="none").bn_layers == []
    assert NetworkSpec(bn_mode="input-only").bn_layers == [0]
    assert NetworkSpec(bn_mode="every-layer", hidden_layers=2).bn_layers == [0, 1, 2]
    assert NetworkSpec().layer_dims() == [(2, 21), (21, 1)]


def test_init_shapes_and_ranges():
    spec = NetworkSpec(bn_mode="every-layer", n_time_steps=7)
    rng = generator(3, 1)
    net = init_network(spec, rng, y0_high=4.0)
    assert net.params["W0"].shape == (2, 21) and net.params["W1"].shape == (21, 1)
    assert net.params["gamma0"].shape == (7, 2) and net.params["beta1"].shape == (7, 21)
    assert np.all(net.params["gamma1"] == 1.0) and np.all(net.params["beta0"] == 0.0)
    assert np.all(np.abs(net.params["W0"]) <= math.sqrt(6 / 23))
    assert 0.0 <= float(net.params["y0"]) <= 4.0
    assert -0.1 <= float(net.params["z0"]) <= 0.1
    assert np.all(net.running["var0"] == 1.0)


def test_parameter_count_excess():
    for steps in (1, 79, 115):
        base = dict(hidden_width=21, n_time_steps=steps)
        rng = generator(0, 0)
        n_in = init_network(NetworkSpec(bn_mode="input-only", **base), rng).n_trainable()
        n_all = init_network(NetworkSpec(bn_mode="every-layer", **base), rng).n_trainable()
        n_none = init_network(NetworkSpec(bn_mode="none", **base), rng).n_trainable()
        assert n_all - n_in == steps * 2 * 21
        assert n_in - n_none == steps * 2 * 2


def test_elu_values():
    assert elu(np.array(-1.0)) == pytest.approx(math.exp(-1) - 1)
    assert elu(np.array(-1.0)) == pytest.approx(-0.63212, abs=1e-5)
    assert elu(np.array(2.5)) == 2.5


def test_elu_continuity_at_zero():
    eps = 1e-12
    assert abs(elu(np.array(eps)) - elu(np.array(-eps))) < 1e-11
    assert elu_grad(np.array(0.0)) == pytest.approx(1.0)
    assert elu_grad(np.array(-eps)) == pytest.approx(1.0, abs=1e-11)
    assert elu_grad(np.array(eps)) == 1.0


@pytest.mark.parametrize("fused", FUSED)
def test_zero_weights_output_zero(fused):
    spec = NetworkSpec(n_time_steps=3)
    net = zero_net(spec)
    z, _ = forward_steps(net, spec, [0, 1, 2], inputs(np.random.default_rng(0), 3, 5), fused=fused)
    assert np.all(z == 0.0)


def test_identity_like_single_unit():
    spec = NetworkSpec(hidden_width=1)
    net = Network({"W0": np.array([[1.0], [0.0]]), "b0": np.zeros(1), "W1": np.ones((1, 1)), "b1": np.zeros(1),
                   "y0": np.array(0.0), "z0": np.array(0.0)})
    x = np.array([[0.0, 1.0], [3.5, 0.2], [10.0, 2.0]])
    z, _ = forward(net, spec, 0, x)
    assert np.array_equal(z, x[:, 0])


@pytest.mark.parametrize("mode", BN_MODES)
@pytest.mark.parametrize("fused", FUSED)
def test_zero_upstream_gives_zero_gradients(mode, fused):
    spec = NetworkSpec(bn_mode=mode, n_time_steps=2)
    net = init_network(spec, generator(1, 1))
    _, cache = forward_steps(net, spec, [0, 1], inputs(np.random.default_rng(1), 2, 6), fused=fused)
    grads, dx = backward(net, spec, cache, np.zeros((2, 6)))
    assert all(np.all(g == 0) for g in grads.values())
    assert np.all(dx == 0)


def test_linear_unit_gradient():
    # with zero first-layer weights the output layer sees elu(b0) only
    spec = NetworkSpec(hidden_width=1)
    net = Network({"W0": np.zeros((2, 1)), "b0": np.array([0.7]), "W1": np.array([[2.0]]), "b1": np.zeros(1)})
    x = np.ones((4, 2))
    _, cache = forward(net, spec, 0, x)
    up = np.array([1.0, -2.0, 0.5, 3.0])
    grads, _ = backward(net, spec, cache, up)
    assert grads["W1"][0, 0] == pytest.approx(np.sum(up) * 0.7)
    assert grads["b1"][0] == pytest.approx(np.sum(up))


@pytest.mark.parametrize("mode", BN_MODES)
@pytest.mark.parametrize("seed", range(5))
@pytest.mark.parametrize("fused", FUSED)
def test_layer_gradients_match_finite_differences(mode, seed, fused):
    errs = layer_gradient_check(mode, seed, fused=fused)
    assert max(errs.values()) <= LAYER_TOL, errs


@pytest.mark.parametrize("seed", range(5))
def test_batchnorm_gradients_match_finite_differences(seed):
    errs = batchnorm_gradient_check(seed)
    assert max(errs.values()) <= LAYER_TOL, errs


@pytest.mark.skipif(kernels.mlp1_forward is None, reason="compiled kernels not built")
@pytest.mark.parametrize("mode", BN_MODES)
@pytest.mark.parametrize("training", [True, False])
def test_fused_kernel_matches_generic(mode, training):
    spec = NetworkSpec(bn_mode=mode, n_time_steps=5)
    rng = generator(2, 1)
    net = init_network(spec, rng)
    for k in net.running:
        net.running[k] = net.running[k] + rng.uniform(0.1, 1.0, net.running[k].shape)
    x = inputs(np.random.default_rng(2), 5, 33)
    steps = np.array([4, 0, 2, 1, 3])
    za, ca = forward_steps(net, spec, steps, x, training=training, fused=False)
    zb, cb = forward_steps(net, spec, steps, x, training=training, fused=True)
    assert np.allclose(za, zb, rtol=1e-12, atol=1e-13)
    dz = np.random.default_rng(3).standard_normal(za.shape)
    ga, dxa = backward(net, spec, ca, dz)
    gb, dxb = backward(net, spec, cb, dz)
    assert set(ga) == set(gb)
    for k in ga:
        assert np.allclose(ga[k], gb[k], rtol=1e-10, atol=1e-12), k
    assert np.allclose(dxa, dxb, rtol=1e-10, atol=1e-12)
    if training and spec.bn_layers:
        ra = update_running_stats(net, spec, ca).running
        rb = update_running_stats(net, spec, cb).running
        for k in ra:
            assert np.allclose(ra[k], rb[k], rtol=1e-12)


def test_fused_request_without_kernel_errors(monkeypatch):
    monkeypatch.setattr(kernels, "mlp1_forward", None)
    spec = NetworkSpec()
    net = init_network(spec, generator(0, 1))
    with pytest.raises(RuntimeError):
        forward_steps(net, spec, [0], inputs(np.random.default_rng(0), 1, 4), fused=True)


def test_step_index_out_of_range():
    spec = NetworkSpec(bn_mode="input-only", n_time_steps=3)
    net = init_network(spec, generator(0, 1))
    with pytest.raises(IndexError):
        forward(net, spec, 3, np.ones((4, 2)))


@pytest.mark.parametrize("mode", ["input-only", "every-layer"])
def test_batch_of_one_rejected_in_training(mode):
    spec = NetworkSpec(bn_mode=mode, n_time_steps=2)
    net = init_network(spec, generator(0, 1))
    with pytest.raises(ValueError):
        forward(net, spec, 0, np.ones((1, 2)), training=True)
    z, _ = forward(net, spec, 0, np.ones((1, 2)), training=False)
    assert z.shape == (1,)


def test_batchnorm_standardizes():
    x = np.random.default_rng(5).standard_normal((64, 3)) * 4 + 2
    out, _ = batchnorm_forward(x, np.ones(3), np.zeros(3))
    assert np.allclose(out.mean(axis=0), 0.0, atol=1e-12)
    var = x.var(axis=0)
    assert np.allclose(out.var(axis=0), var / (var + BN_EPS), rtol=1e-12)


def test_batchnorm_constant_batch_returns_beta():
    beta = np.array([0.3, -1.0])
    out, _ = batchnorm_forward(np.full((8, 2), 5.0), np.array([2.0, 3.0]), beta)
    assert np.allclose(out, beta)


def test_batchnorm_modes():
    x = np.random.default_rng(6).standard_normal((8, 4))
    with pytest.raises(ValueError):
        batchnorm_forward(x[:1], np.ones(4), np.zeros(4))
    with pytest.raises(ValueError):
        batchnorm_forward(x, np.ones(4), np.zeros(4), mode="infer")
    with pytest.raises(ValueError):
        batchnorm_forward(x, np.ones(4), np.zeros(4), mode="eval")
    mean, var = np.full(4, 1.0), np.full(4, 4.0)
    out, cache = batchnorm_forward(x, np.ones(4), np.zeros(4), "infer", mean, var)
    assert np.allclose(out, (x - 1.0) / np.sqrt(4.0 + BN_EPS))
    dx, _, _ = batchnorm_backward(np.ones_like(x), cache)
    assert np.allclose(dx, 1.0 / np.sqrt(4.0 + BN_EPS))


def test_running_stats_momentum():
    spec = NetworkSpec(bn_mode="input-only", n_time_steps=2)
    net = init_network(spec, generator(0, 1))
    x = inputs(np.random.default_rng(7), 1, 50)
    _, cache = forward_steps(net, spec, [1], x, training=True)
    new = update_running_stats(net, spec, cache, momentum=0.99)
    assert np.allclose(new.running["mean0"][1], 0.01 * x[0].mean(axis=0))
    assert np.allclose(new.running["var0"][1], 0.99 + 0.01 * x[0].var(axis=0))
    assert np.array_equal(new.running["mean0"][0], net.running["mean0"][0])
    assert np.all(net.running["mean0"] == 0.0)  # original untouched
    assert np.all(new.running["var0"] >= 0)


def test_adam_zero_gradient_keeps_params():
    p = {"w": np.array([1.0, -2.0]), "s": np.array(3.0)}
    state = adam_init(p, 0.01)
    new, state2 = adam_step(state, p, {k: np.zeros_like(v) for k, v in p.items()})
    assert all(np.array_equal(new[k], p[k]) for k in p)
    assert state2.step == 1 and state.step == 0


def test_adam_first_step():
    p = {"s": np.array(0.5)}
    new, _ = adam_step(adam_init(p, 0.01), p, {"s": np.array(1.0)})
    assert float(new["s"]) - 0.5 == pytest.approx(-0.01, rel=1e-6)


@settings(max_examples=20, deadline=None)
@given(st.floats(-100, 100).filter(lambda c: abs(c) > 1e-3))
def test_adam_constant_gradient_step_tends_to_lr(c):
    p = {"s": np.array(0.0)}
    state = adam_init(p, 0.01)
    for _ in range(3000):
        prev = float(p["s"])
        p, state = adam_step(state, p, {"s": np.array(c)})
    step = float(p["s"]) - prev
    assert step == pytest.approx(-math.copysign(0.01, c), rel=1e-4)


def test_adam_is_pure():
    p = {"w": np.array([1.0, 2.0])}
    g = {"w": np.array([0.1, -0.2])}
    s = adam_init(p, 0.05)
    a1, s1 = adam_step(s, p, g)
    a2, s2 = adam_step(s, p, g)
    assert np.array_equal(a1["w"], a2["w"]) and np.array_equal(p["w"], [1.0, 2.0])
    assert np.all(s.m["w"] == 0)


@pytest.mark.parametrize("mode", BN_MODES)
def test_checkpoint_round_trip(tmp_path, mode):
    spec = NetworkSpec(bn_mode=mode, n_time_steps=4, hidden_width=5)
    net = init_network(spec, generator(4, 1))
    path = tmp_path / "net.json"
    save_checkpoint(path, net, spec)
    net2, spec2 = load_checkpoint(path)
    assert spec2 == spec
    assert set(net2.params) == set(net.params) and set(net2.running) == set(net.running)
    for k in net.params:
        assert np.array_equal(net.params[k], net2.params[k]) and net.params[k].shape == net2.params[k].shape
    x = inputs(np.random.default_rng(0), 4, 6)
    za, _ = forward_steps(net, spec, np.arange(4), x, training=False)
    zb, _ = forward_steps(net2, spec2, np.arange(4), x, training=False)
    assert np.array_equal(za, zb)


def test_checkpoint_rejects_other_versions(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text('{"format": "barrier-bsde-network", "version": 99}')
    with pytest.raises(ValueError):
        load_checkpoint(p)
    p.write_text('{"format": "other"}')
    with pytest.raises(ValueError):
        load_checkpoint(p)


def test_forward_is_pure():
    spec = NetworkSpec(bn_mode="every-layer", n_time_steps=2)
    net = init_network(spec, generator(0, 1))
    before = net.copy()
    x = inputs(np.random.default_rng(0), 2, 8)
    z1, c = forward_steps(net, spec, [0, 1], x)
    backward(net, spec, c, np.ones((2, 8)))
    z2, _ = forward_steps(net, spec, [0, 1], x)
    assert np.array_equal(z1, z2)
    for k in net.params:
        assert np.array_equal(net.params[k], before.params[k])
