import math

import numpy as np
import pytest

from gzsl_moe.numerics import (AdamState, DivergenceError, GradTape, Linear, adam_update,
                               check_finite, cross_entropy, gelu, gelu_grad, grad_check,
                               iter_minibatches, softmax, softmax_cross_entropy)


def _gelu_ref(x):
    return 0.5 * x * (1.0 + math.tanh(math.sqrt(2.0 / math.pi) * (x + 0.044715 * x ** 3)))


def test_gelu_points(backend):
    assert gelu(0.0) == 0.0
    assert gelu(1.0) == pytest.approx(0.84119, abs=5e-6)
    assert -1e-4 < gelu(-10.0) <= 0.0
    xs = np.linspace(-8, 8, 41)
    assert np.allclose(gelu(xs), [_gelu_ref(v) for v in xs], rtol=0, atol=1e-15)
    assert gelu(np.array([[0.0, -10.0]]))[0, 1] <= 0.0


def test_gelu_grad_matches_difference_quotient(backend):
    x = np.linspace(-5, 5, 23)
    h = 1e-6
    num = np.array([(_gelu_ref(v + h) - _gelu_ref(v - h)) / (2 * h) for v in x])
    assert np.allclose(gelu_grad(x), num, atol=1e-8)


def test_softmax_examples():
    assert np.allclose(softmax([1.0, 2.0, 3.0]), [0.0900, 0.2447, 0.6652], atol=5e-5)
    assert softmax([7.0] * 4).tolist() == [0.25] * 4
    p = softmax([0.0, -np.inf])
    assert p[0] == 1.0 and p[1] == 0.0
    assert np.allclose(softmax([1000.0, 1000.0]), [0.5, 0.5])


def test_softmax_empty_support():
    with pytest.raises(ValueError, match="empty support"):
        softmax([-np.inf, -np.inf])


def test_cross_entropy_examples():
    assert cross_entropy(np.full(5, 0.2), 3) == pytest.approx(math.log(5), abs=1e-12)
    assert cross_entropy([0.0, 1.0], 1) == 0.0
    assert cross_entropy([1.0, 0.0], 1) == pytest.approx(27.631, abs=5e-4)
    with pytest.raises(IndexError):
        cross_entropy([0.5, 0.5], 2)


def test_softmax_cross_entropy_batch():
    z = np.array([[0.0, 0.0, 0.0], [2.0, 0.0, 0.0]])
    loss, d, p = softmax_cross_entropy(z, np.array([0, 0]))
    expected = (math.log(3) - math.log(math.exp(2) / (math.exp(2) + 2))) / 2
    assert loss == pytest.approx(expected, abs=1e-12)
    assert np.allclose(d.sum(axis=1), 0.0)
    with pytest.raises(IndexError):
        softmax_cross_entropy(z, np.array([0, 3]))


def test_adam_first_step_is_sign(backend):
    p = {"w": np.array([[1.0, -2.0, 3.0]])}
    g = {"w": np.array([[0.3, -7.0, 1e-3]])}
    st = AdamState(lr=0.01, weight_decay=0.0)
    adam_update(st, p, g)
    step = np.array([[1.0, -2.0, 3.0]]) - p["w"]
    assert np.allclose(step, 0.01 * np.sign(g["w"]), atol=1e-7)


def test_adam_zero_grad_no_decay(backend):
    p = {"w": np.array([[1.5, 2.5]])}
    st = AdamState(weight_decay=0.0)
    adam_update(st, p, {"w": np.zeros((1, 2))})
    assert p["w"].tolist() == [[1.5, 2.5]]
    assert st.step == 1
    assert not st.m["w"].any() and not st.v["w"].any()


def test_adam_unrolled_reference(backend):
    # constant unit gradient: m_hat = v_hat = 1 every step, so each step is
    # p <- p * (1 - lr*wd) - lr / (1 + eps)
    lr, b1, b2, wd, eps = 0.0005, 0.92, 0.98, 0.0001, 1e-8
    p0 = np.array([[0.5, -1.0], [2.0, 0.0]])
    p = {"w": p0.copy()}
    st = AdamState(lr, b1, b2, wd, eps)
    ref = p0.copy()
    m = np.zeros((2, 2))
    v = np.zeros((2, 2))
    for t in range(1, 6):
        adam_update(st, p, {"w": np.ones((2, 2))})
        m = b1 * m + (1 - b1) * 1.0
        v = b2 * v + (1 - b2) * 1.0
        mhat = m / (1 - b1 ** t)
        vhat = v / (1 - b2 ** t)
        ref = ref * (1 - lr * wd) - lr * mhat / (np.sqrt(vhat) + eps)
        assert np.allclose(p["w"], ref, rtol=0, atol=1e-12)
        assert np.allclose(p["w"], p0 * (1 - lr * wd) ** t
                           - lr / (1 + eps) * sum((1 - lr * wd) ** j for j in range(t)),
                           rtol=0, atol=1e-12)


def test_adam_rejects_bad_settings():
    with pytest.raises(ValueError):
        AdamState(lr=0.0)
    with pytest.raises(ValueError):
        AdamState(beta1=1.0)
    st = AdamState()
    with pytest.raises(KeyError):
        adam_update(st, {"a": np.zeros((1, 1))}, {"b": np.zeros((1, 1))})
    with pytest.raises(ValueError):
        adam_update(st, {"a": np.zeros((1, 1))}, {"a": np.zeros((1, 2))})


def test_grad_check_quadratic():
    def fn(v):
        x = v["x"]
        return float(np.sum(x * x)), {"x": 2 * x}
    rep = grad_check(fn, {"x": np.array([[1.0, 2.0, 3.0]])})
    assert rep.passed and rep.max_rel_error < 1e-7 and rep.n_coords == 3


def test_grad_check_gelu_layer(backend, rng):
    lin = Linear.init(rng, 4, 3)
    x = rng.normal(size=(1, 4))

    def fn(v):
        lin.W[...] = v["W"]
        pre = lin.forward(x)
        _, g = lin.backward(x, gelu_grad(pre))
        return float(gelu(pre).sum()), {"W": g["W"]}
    rep = grad_check(fn, {"W": lin.W.copy()})
    assert rep.max_rel_error < 1e-6


def test_grad_check_reports_wrong_gradient():
    def fn(v):
        return float(np.sum(v["x"] ** 2)), {"x": 3 * v["x"]}
    rep = grad_check(fn, {"x": np.ones((2, 2))})
    assert not rep.passed
    assert "FAIL" in str(rep)


def test_linear_shapes(rng):
    lin = Linear.init(rng, 3, 2)
    assert lin.b.shape == (1, 2)
    with pytest.raises(ValueError):
        lin.forward(np.zeros((1, 4)))


def test_grad_tape_rejects_duplicates():
    t = GradTape()
    t.add("a", np.zeros(1))
    with pytest.raises(KeyError):
        t.add("a", np.zeros(1))


def test_check_finite_names_array():
    with pytest.raises(DivergenceError, match="divergence.*w"):
        check_finite([("w", np.array([np.nan]))], "epoch 3")


def test_minibatches_cover_everything():
    idx = list(iter_minibatches(10, 4, np.random.default_rng(0)))
    assert [len(b) for b in idx] == [4, 4, 2]
    assert sorted(np.concatenate(idx).tolist()) == list(range(10))
