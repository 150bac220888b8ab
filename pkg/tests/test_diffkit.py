from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lmokit import diffkit as dk


def naive_matmul(a, b):
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            s = 0.0
            for t in range(k):
                s += a[i, t] * b[t, j]
            out[i, j] = s
    return out


def test_matmul_identity_and_projector():
    x = np.array([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(dk.matmul(np.eye(2), x).data, x)
    out = dk.matmul(np.array([[1.0, 0.0], [0.0, 0.0]]), np.array([[5.0], [7.0]]))
    assert np.array_equal(out.data, np.array([[5.0], [0.0]]))


def test_matmul_matches_triple_loop():
    rng = np.random.default_rng(3)
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
    assert np.max(np.abs(dk.matmul(a, b).data - naive_matmul(a, b))) < 1e-12


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(dk.ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        dk.matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_elementwise_values():
    assert dk.tanh(np.array([0.0])).data[0] == 0.0
    r = dk.relu(np.array([-3.0, 3.0])).data
    assert r[0] == 0.0 and r[1] == 3.0
    assert abs(dk.exp(np.array([1.0])).data[0] - math.e) < 1e-12
    assert dk.elementwise("square", np.array([3.0])).data[0] == 9.0
    assert dk.elementwise("add", np.array([1.0, 2.0]), 1.0).data.tolist() == [2.0, 3.0]


def test_elementwise_rejects_non_scalar_broadcast():
    with pytest.raises(dk.ShapeError):
        dk.add(np.ones((2, 3)), np.ones(3))
    with pytest.raises(ValueError):
        dk.elementwise("softmax", np.ones(2))


def test_non_finite_output_is_reported():
    with pytest.raises(dk.NonFiniteError):
        dk.exp(np.array([1000.0]))


def test_mse_values():
    rng = np.random.default_rng(0)
    t = rng.normal(size=(4, 5))
    assert dk.mse(t, t).item() == 0.0
    assert dk.mse(t + 1.0, t).item() == pytest.approx(1.0, abs=1e-15)
    p = rng.normal(size=(4, 5))
    hand = sum((p[i, j] - t[i, j]) ** 2 for i in range(4) for j in range(5)) / 20
    assert abs(dk.mse(p, t).item() - hand) < 1e-12
    with pytest.raises(dk.ShapeError):
        dk.mse(np.ones(3), np.ones(4))


def test_backward_sum_gives_ones():
    w = dk.Param(np.arange(6.0).reshape(2, 3))
    with dk.Tape() as tape:
        loss = dk.total(w)
    dk.backward(tape, loss)
    assert np.array_equal(w.grad, np.ones((2, 3)))
    assert tape.nodes == []


def test_backward_hand_derivative_1x1():
    w = dk.Param(np.array([[0.7]]))
    x, y = np.array([[1.3]]), np.array([[0.2]])
    with dk.Tape() as tape:
        loss = dk.mse(dk.matmul(x, w), y)
    dk.backward(tape, loss)
    assert abs(w.grad[0, 0] - 2 * (0.7 * 1.3 - 0.2) * 1.3) < 1e-12


def test_backward_rejects_non_scalar():
    w = dk.Param(np.ones(3))
    with dk.Tape() as tape:
        out = dk.tanh(w)
    with pytest.raises(dk.ShapeError):
        dk.backward(tape, out)


def test_zero_grad_resets():
    w = dk.Param(np.ones(3))
    w.grad = np.full(3, 5.0)
    dk.zero_grad([w])
    assert np.array_equal(w.grad, np.zeros(3))


def test_adam_zero_gradient_is_noop():
    w = dk.Param(np.array([1.0, -2.0]))
    dk.adam_step([w])
    assert np.array_equal(w.data, np.array([1.0, -2.0]))


def test_adam_first_step_closed_form():
    g = np.array([0.3, -4.0, 1e-3])
    w = dk.Param(np.zeros(3))
    w.grad = g.copy()
    lr, b1, b2, eps = 0.01, 0.9, 0.999, 1e-8
    dk.adam_step([w], lr, b1, b2, eps)
    m_hat = (1 - b1) * g / (1 - b1)
    v_hat = (1 - b2) * g * g / (1 - b2)
    assert np.allclose(w.data, -lr * m_hat / (np.sqrt(v_hat) + eps), rtol=0, atol=1e-15)


def test_adam_descends_quadratic():
    rng = np.random.default_rng(1)
    target = rng.normal(size=5)
    w = dk.Param(np.zeros(5))
    losses = []
    for _ in range(300):
        dk.zero_grad([w])
        with dk.Tape() as tape:
            loss = dk.mse(w, target)
        losses.append(loss.item())
        dk.backward(tape, loss)
        dk.adam_step([w], lr=0.01)
    windows = [np.mean(losses[i : i + 100]) for i in (0, 100, 200)]
    assert windows[0] > windows[1] > windows[2]


def _small_net(seed):
    rng = np.random.default_rng(seed)
    net = dk.MLP([4, 8, 3], rng, name="n")
    x = rng.normal(size=(5, 4))
    y = rng.normal(size=(5, 3))
    return net, x, y


def test_finite_diff_linear_is_exact():
    rng = np.random.default_rng(0)
    w = dk.Param(rng.normal(size=(3, 2)))
    x = rng.normal(size=(4, 3))
    err = dk.finite_diff_check(lambda: dk.total(dk.matmul(x, w)), [w])
    assert err < 1e-8


def test_finite_diff_two_layer_net():
    rng = np.random.default_rng(7)
    net = dk.MLP([10, 16, 2], rng)
    assert sum(p.size for p in net.params()) <= 500
    x, y = rng.normal(size=(6, 10)), rng.normal(size=(6, 2))
    assert dk.finite_diff_check(lambda: dk.mse(net(x), y), net.params()) < 1e-5


def test_finite_diff_detects_corrupted_gradient():
    net, x, y = _small_net(2)
    fn = lambda: dk.mse(net(x), y)  # noqa: E731
    grads = dk.analytic_grads(fn, net.params())
    bad = [g.copy() for g in grads]
    flat = np.abs(bad[0]).ravel()
    i = int(np.argmax(flat))
    bad[0].ravel()[i] *= 2.0
    assert dk.finite_diff_check(fn, net.params(), analytic=bad) > 0.1


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10**6))
def test_every_op_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    a = dk.Param(rng.normal(size=(3, 4)))
    b = dk.Param(rng.normal(size=(4, 2)))
    v = dk.Param(rng.normal(size=2))
    c = dk.Param(rng.uniform(-0.9, 0.9, size=(3, 2)))
    idx = rng.integers(0, 3, size=4)

    def fn():
        h = dk.matmul(a, b)
        h = dk.add_rowvec(h, v)
        h = dk.mul_rowvec(dk.tanh(h), v)
        h = dk.add(h, dk.mul(c, dk.exp(dk.mul(c, 0.5))))
        h = dk.sub(h, dk.square(c))
        h = dk.concat([h, dk.take_rows(c, idx[:3])], axis=1)
        h = dk.reshape(h, (2, 6))
        return dk.mean(dk.square(h)) + dk.total(dk.row_sum(h)) * 0.1

    assert dk.finite_diff_check(fn, [a, b, v, c]) < 1e-5


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10**6))
def test_relu_minimum_clip_gradients_away_from_kinks(seed):
    rng = np.random.default_rng(seed)
    x = dk.Param(rng.uniform(0.1, 1.0, size=6) * rng.choice([-1, 1], size=6))
    y = dk.Param(x.data + rng.uniform(0.1, 0.5, size=6) * rng.choice([-1, 1], size=6))

    def fn():
        return dk.total(dk.minimum(dk.relu(x), y)) + dk.total(dk.clip(y, -0.3, 0.3) * 2.0)

    # keep probes away from the kinks at 0, +/-0.3 and x == y
    if np.any(np.abs(np.abs(y.data) - 0.3) < 1e-3) or np.any(np.abs(np.maximum(x.data, 0) - y.data) < 1e-3):
        return
    assert dk.finite_diff_check(fn, [x, y]) < 1e-5


def test_straight_through_copies_gradient():
    z = dk.Param(np.array([[0.2, -0.4]]))
    q = np.array([[1.0, 1.0]])
    with dk.Tape() as tape:
        out = dk.straight_through(z, q)
        loss = dk.total(dk.mul(out, np.array([[3.0, 5.0]])))
    assert np.array_equal(out.data, q)
    dk.backward(tape, loss)
    assert np.array_equal(z.grad, np.array([[3.0, 5.0]]))


def test_stop_gradient_blocks():
    w = dk.Param(np.array([2.0]))
    with dk.Tape() as tape:
        loss = dk.total(dk.mul(dk.stop_gradient(w), w))
    dk.backward(tape, loss)
    assert w.grad[0] == 2.0


def test_backward_deterministic():
    net, x, y = _small_net(4)
    fn = lambda: dk.mse(net(x), y)  # noqa: E731
    g1 = dk.analytic_grads(fn, net.params())
    g2 = dk.analytic_grads(fn, net.params())
    assert all(np.array_equal(a, b) for a, b in zip(g1, g2))


def test_composition_matches_fused():
    rng = np.random.default_rng(5)
    w = dk.Param(rng.normal(size=(3, 3)))
    x = rng.normal(size=(2, 3))
    g_inner = lambda: dk.tanh(dk.matmul(x, w))  # noqa: E731
    composed = dk.analytic_grads(lambda: dk.total(dk.square(g_inner())), [w])[0]
    # hand-fused chain rule: d/dw sum(tanh(xw)^2) = x^T (2 t (1 - t^2))
    t = np.tanh(x @ w.data)
    assert np.allclose(composed, x.T @ (2 * t * (1 - t * t)), atol=1e-13)


def test_mlp_state_roundtrip():
    rng = np.random.default_rng(0)
    a = dk.MLP([3, 4, 2], rng)
    b = dk.MLP([3, 4, 2], np.random.default_rng(1))
    b.load_state_dict(a.state_dict())
    x = rng.normal(size=(2, 3))
    assert np.array_equal(a.forward_np(x), b.forward_np(x))
    assert np.allclose(a(x).data, a.forward_np(x), atol=1e-15)
    with pytest.raises(dk.ShapeError):
        dk.MLP([3, 5, 2], rng).load_state_dict(a.state_dict())
