"""MLP forward/backward, Adam, and finite-difference checks."""

import math

import numpy as np
import pytest

from fairdiff import nncore
from fairdiff.errors import TrainingError
from fairdiff.nncore import Layer, Mlp, named_stream


def test_named_stream_deterministic_and_split():
    a = named_stream(7, "x").standard_normal(5)
    b = named_stream(7, "x").standard_normal(5)
    c = named_stream(7, "y").standard_normal(5)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)


def test_identity_layer_is_identity():
    m = Mlp([Layer(np.eye(3), np.zeros(3), "identity")])
    x = np.array([0.3, -1.2, 2.0])
    y, _ = nncore.mlp_forward(m, x)
    assert np.array_equal(y, x)


def test_zero_weights_bias_only():
    c = np.array([1.5, -0.5])
    m = Mlp([Layer(np.zeros((4, 2)), c, "identity")])
    for x in (np.zeros(4), np.ones(4), np.arange(4.0)):
        y, _ = nncore.mlp_forward(m, x)
        assert np.array_equal(y, c)


def test_small_tanh_network_matches_hand_evaluation():
    w1 = np.array([[0.1, -0.2], [0.3, 0.05]])
    b1 = np.array([0.01, -0.02])
    w2 = np.array([[0.5], [-0.4]])
    b2 = np.array([0.1])
    m = Mlp([Layer(w1, b1, "tanh"), Layer(w2, b2, "tanh")])
    x = np.array([0.7, -0.3])
    h = np.tanh(x @ w1 + b1)
    expected = np.tanh(h @ w2 + b2)
    y, _ = nncore.mlp_forward(m, x)
    assert np.allclose(y, expected, atol=1e-15)


def test_forward_dimension_mismatch():
    m = Mlp([Layer(np.eye(3), np.zeros(3), "identity")])
    with pytest.raises(ValueError):
        nncore.mlp_forward(m, np.zeros(4))


def test_backward_zero_d_output_gives_zero_grads():
    rng = named_stream(0, "bz")
    m = nncore.build_mlp([4, 3, 2], ["tanh", "identity"], rng)
    _, cache = nncore.mlp_forward(m, rng.standard_normal(4))
    g = nncore.mlp_backward(m, cache, np.zeros(2))
    for dw, db in g.layers:
        assert not dw.any()
        assert not db.any()
    assert not g.d_input.any()


def test_backward_linear_least_squares_closed_form():
    # loss = 0.5 |x W + b - y|^2 has gradient dW = x^T (pred - y), db = pred - y
    rng = named_stream(1, "ls")
    W = rng.standard_normal((3, 2))
    b = rng.standard_normal(2)
    m = Mlp([Layer(W, b, "identity")])
    X = rng.standard_normal((5, 3))
    Y = rng.standard_normal((5, 2))
    pred, cache = nncore.mlp_forward(m, X)
    g = nncore.mlp_backward(m, cache, pred - Y)
    assert np.allclose(g.layers[0][0], X.T @ (pred - Y), atol=1e-12)
    assert np.allclose(g.layers[0][1], (pred - Y).sum(axis=0), atol=1e-12)


def test_backward_matches_finite_differences():
    rng = named_stream(2, "fd")
    m = nncore.build_mlp([5, 4, 3, 2], ["tanh", "relu", "identity"], rng)
    X = rng.standard_normal((3, 5))
    target = rng.standard_normal((3, 2))

    def loss_fn(params):
        pred, cache = nncore.mlp_forward(m, X)
        resid = pred - target
        loss = 0.5 * float((resid * resid).sum())
        grads = nncore.mlp_backward(m, cache, resid)
        return loss, nncore.grads_as_list(grads)

    err = nncore.grad_check(loss_fn, nncore.mlp_params(m), h=1e-5)
    assert err < 1e-6


def test_backward_rejects_mismatched_cache():
    rng = named_stream(3, "mm")
    m1 = nncore.build_mlp([3, 2], ["identity"], rng)
    m2 = nncore.build_mlp([3, 4, 2], ["tanh", "identity"], rng)
    _, cache = nncore.mlp_forward(m1, np.zeros(3))
    with pytest.raises(ValueError):
        nncore.mlp_backward(m2, cache, np.zeros(2))


def test_adam_zero_grad_keeps_params():
    params = [np.array([1.0, -2.0]), np.array([[0.5]])]
    before = [p.copy() for p in params]
    state = nncore.init_adam(params, lr=0.1)
    nncore.adam_update(params, [np.zeros(2), np.zeros((1, 1))], state)
    for p, q in zip(params, before):
        assert np.array_equal(p, q)
    assert state.t == 1


def test_adam_first_step_direction_and_magnitude():
    # at t = 1 the bias-corrected update is lr * g / (|g| + eps-scale), so
    # each coordinate moves by almost exactly lr against the gradient sign
    g = np.array([0.3, -2.0, 1e-3])
    params = [np.zeros(3)]
    state = nncore.init_adam(params, lr=0.05)
    nncore.adam_update(params, [g.copy()], state)
    expected = -0.05 * g / (np.abs(g) + 1e-8 * np.sqrt(1e-3))
    assert np.allclose(params[0], expected, atol=1e-12)
    assert np.all(np.sign(params[0]) == -np.sign(g))
    assert np.allclose(np.abs(params[0]), 0.05, rtol=1e-4)


def test_adam_deterministic():
    def run():
        params = [named_stream(4, "adam").standard_normal(6)]
        state = nncore.init_adam(params, lr=0.01)
        for step in range(5):
            g = [params[0] * 0.3 + step]
            nncore.adam_update(params, g, state)
        return params[0]

    assert np.array_equal(run(), run())


def test_adam_rejects_non_finite_gradient():
    params = [np.zeros(2)]
    state = nncore.init_adam(params, lr=0.1)
    with pytest.raises(TrainingError):
        nncore.adam_update(params, [np.array([1.0, np.nan])], state)


def test_grad_check_quadratic_is_tiny():
    params = [named_stream(5, "quad").standard_normal(7)]

    def loss_fn(ps):
        return float((ps[0] ** 2).sum()), [2.0 * ps[0]]

    assert nncore.grad_check(loss_fn, params) < 1e-8


def test_grad_check_samples_large_parameter_sets():
    # 1600 coordinates exercises the sampled path; the loss magnitude of
    # ~1.6e3 leaves more cancellation noise than the small quadratic case
    rng = named_stream(6, "big")
    params = [rng.standard_normal((40, 40))]

    def loss_fn(ps):
        return float((ps[0] ** 2).sum()), [2.0 * ps[0]]

    assert nncore.grad_check(loss_fn, params) < 1e-6


def test_build_mlp_deterministic_given_seed():
    a = nncore.build_mlp([6, 5, 4], ["tanh", "identity"], named_stream(9, "init"))
    b = nncore.build_mlp([6, 5, 4], ["tanh", "identity"], named_stream(9, "init"))
    for la, lb in zip(a.layers, b.layers):
        assert np.array_equal(la.weight, lb.weight)
        assert np.array_equal(la.bias, lb.bias)


def test_mlp_serialization_roundtrip_bitwise():
    rng = named_stream(10, "ser")
    m = nncore.build_mlp([4, 3, 2], ["relu", "identity"], rng)
    clone = nncore.mlp_from_dict(nncore.mlp_to_dict(m))
    x = rng.standard_normal((5, 4))
    ya, _ = nncore.mlp_forward(m, x)
    yb, _ = nncore.mlp_forward(clone, x)
    assert np.array_equal(ya, yb)
