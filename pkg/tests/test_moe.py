import math

import numpy as np
import pytest

from gzsl_moe.moe import (ExpertParams, MoeLayerParams, expert_forward, expert_load_stats, gate,
                          moe_backward, moe_forward, moe_stack_backward, moe_stack_forward)
from gzsl_moe.numerics import Linear, gelu, grad_check
from gzsl_moe.verify import (check_gate_invariants, check_moe_dense_equivalence,
                             check_unselected_zero_grad, dense_moe_oracle)


def _gate_row(logits, k):
    return gate(np.array([1.0]), np.asarray(logits, dtype=float)[None, :], k)


def test_gate_examples(backend):
    d = _gate_row([1, 2, 3, 4], 2)
    assert d.selected.tolist() == [2, 3]
    e = math.e
    assert np.allclose(d.weights, [0, 0, 1 / (1 + e), e / (1 + e)], atol=1e-12)
    assert np.allclose(_gate_row([0, 0, 0], 3).weights, [1 / 3] * 3, atol=1e-15)
    d = _gate_row([5, 5, 5], 2)
    assert d.selected.tolist() == [0, 1]
    assert d.weights.tolist() == [0.5, 0.5, 0.0]


def test_gate_rejects_bad_k():
    with pytest.raises(ValueError):
        _gate_row([1, 2], 3)
    with pytest.raises(ValueError):
        _gate_row([1, 2], 0)


def test_expert_zero_and_identity():
    z = ExpertParams(np.zeros((2, 3)), np.zeros((1, 3)), np.zeros((3, 2)), np.zeros((1, 2)))
    assert expert_forward(z, np.array([1.0, -4.0])).tolist() == [0.0, 0.0]
    eye = ExpertParams(np.eye(2), np.zeros((1, 2)), np.eye(2), np.zeros((1, 2)))
    assert np.allclose(expert_forward(eye, np.array([1.0, -1.0])), [0.84119, -0.15881], atol=5e-6)


def test_expert_matches_straight_line_oracle(rng):
    e = ExpertParams.init(rng, 3, 5, 2)
    e.b1[...] = rng.normal(size=(1, 5))
    e.b2[...] = rng.normal(size=(1, 2))
    x = rng.normal(size=3)
    h = [sum(x[i] * e.W1[i, j] for i in range(3)) + e.b1[0, j] for j in range(5)]
    h = [0.5 * v * (1 + math.tanh(math.sqrt(2 / math.pi) * (v + 0.044715 * v ** 3))) for v in h]
    y = [sum(h[j] * e.W2[j, o] for j in range(5)) + e.b2[0, o] for o in range(2)]
    assert np.allclose(expert_forward(e, x), y, rtol=0, atol=1e-12)


def test_moe_single_expert_selected(rng):
    layer = MoeLayerParams.init(rng, 3, 2, 2, 1)
    layer.Wg[...] = [[50.0, -50.0]] * 3
    x = np.ones(3)
    out, d = moe_forward(layer, x)
    assert d.selected.tolist() == [0]
    assert np.array_equal(out, expert_forward(layer.experts[0], x))


def test_moe_uniform_gate(rng):
    layer = MoeLayerParams.init(rng, 3, 2, 2, 2)
    layer.Wg[...] = 0.0
    x = rng.normal(size=3)
    out, _ = moe_forward(layer, x)
    ref = 0.5 * expert_forward(layer.experts[0], x) + 0.5 * expert_forward(layer.experts[1], x)
    assert np.allclose(out, ref, atol=1e-15)


def test_moe_matches_dense_oracle(backend, rng):
    for _ in range(20):
        layer = MoeLayerParams.init(rng, 5, 3, 8, 2)
        X = rng.normal(size=(4, 5))
        out, _ = moe_forward(layer, X)
        assert np.max(np.abs(out - dense_moe_oracle(layer, X))) < 1e-9


def test_moe_width_mismatch(rng):
    layer = MoeLayerParams.init(rng, 3, 2, 4, 2)
    with pytest.raises(ValueError):
        moe_forward(layer, np.zeros(4))


def test_moe_backward_zero_upstream(rng):
    layer = MoeLayerParams.init(rng, 3, 2, 4, 2)
    x = rng.normal(size=3)
    _, d = moe_forward(layer, x)
    tape, dx = moe_backward(layer, x, np.zeros(2), d)
    assert not np.any(dx)
    assert all(not np.any(g) for _, g in tape.items())


def test_moe_backward_finite_differences(backend):
    rng = np.random.default_rng(5)
    while True:
        layer = MoeLayerParams.init(rng, 4, 3, 4, 2)
        x = rng.normal(size=(2, 4))
        _, d = moe_forward(layer, x)
        if d.margin() > 1e-2:
            break
    w = rng.normal(size=(2, 3))
    names = dict(layer.named_arrays("m"))

    def fn(v):
        for k, a in v.items():
            names[k][...] = a
        out, dec = moe_forward(layer, x)
        tape, _ = moe_backward(layer, x, w, dec)
        return float(np.sum(out * w)), {f"m.{k}": g for k, g in tape.items()}
    rep = grad_check(fn, {k: a.copy() for k, a in names.items()})
    assert rep.max_rel_error < 1e-4, str(rep)


def test_unselected_experts_zero_gradient():
    assert check_unselected_zero_grad(n_instances=20).passed


def test_stack_identity_and_single_layer(rng):
    x = rng.normal(size=(3, 4))
    out, dec = moe_stack_forward([], x)
    assert np.array_equal(out, x) and dec == []
    layer = MoeLayerParams.init(rng, 4, 2, 4, 2)
    a, _ = moe_stack_forward([layer], x)
    b, _ = moe_forward(layer, x)
    assert np.array_equal(a, b)


def test_two_layer_stack_matches_dense_composition(rng):
    l1 = MoeLayerParams.init(rng, 4, 5, 8, 2)
    l2 = MoeLayerParams.init(rng, 5, 3, 8, 3)
    x = rng.normal(size=(6, 4))
    out, dec = moe_stack_forward([l1, "gelu", l2], x)
    ref = dense_moe_oracle(l2, gelu(dense_moe_oracle(l1, x)))
    assert len(dec) == 2
    assert np.max(np.abs(out - ref)) < 1e-9


def test_stack_backward_names(rng):
    layers = [Linear.init(rng, 3, 4), "gelu", MoeLayerParams.init(rng, 4, 2, 4, 2)]
    x = rng.normal(size=(2, 3))
    out, dec, cache = moe_stack_forward(layers, x, keep_cache=True)
    tape, dx, aux = moe_stack_backward(layers, cache, dec, np.ones_like(out), "s.")
    assert "s.0.W" in tape and "s.2.Wg" in tape and "s.2.experts.3.b2" in tape
    assert dx.shape == x.shape and aux == 0.0


def test_stack_dimension_mismatch(rng):
    with pytest.raises(ValueError, match="dimension mismatch"):
        moe_stack_forward([Linear.init(rng, 3, 4), Linear.init(rng, 5, 2)], np.zeros(3))


def test_load_stats():
    dec = _gate_row([3.0, 3.0, 1.0, 0.0], 2)
    freq, mean_w = expert_load_stats([dec, dec], 4)
    assert freq.tolist() == [1, 1, 0, 0] and np.allclose(mean_w, [0.5, 0.5, 0, 0])
    rng = np.random.default_rng(0)
    decs = [_gate_row(rng.normal(size=4), 2) for _ in range(100)]
    freq, _ = expert_load_stats(decs, 4)
    assert np.all((freq > 0) & (freq < 1)) and freq.sum() == 2.0
    with pytest.raises(ValueError, match="no decisions"):
        expert_load_stats([], 4)


def test_verify_checks_small(backend):
    assert check_moe_dense_equivalence(n_instances=20).passed
    assert check_gate_invariants(n_vectors=400).passed
