import math

import numpy as np
import pytest

from gzsl_moe.backbone import FeatureBatch
from gzsl_moe.generator import (GeneratorConfig, GeneratorParams, generate, mmd_loss,
                                mmd_loss_and_grad, per_class_mmd, synthesize_unseen,
                                train_generator)
from gzsl_moe.prototypes import synthesize_prototypes


def _mmd_oracle(X, Y, sigmas):
    def k(a, b):
        d2 = sum((p - q) ** 2 for p, q in zip(a, b))
        return sum(math.exp(-d2 / (2 * s * s)) for s in sigmas)
    xx = sum(k(a, b) for a in X for b in X) / len(X) ** 2
    yy = sum(k(a, b) for a in Y for b in Y) / len(Y) ** 2
    xy = sum(k(a, b) for a in X for b in Y) / (len(X) * len(Y))
    return xx + yy - 2 * xy


def _real(rng, n=60, dim=4):
    centers = {2: np.full(dim, 3.0), 3: np.full(dim, -3.0), 4: np.eye(dim)[0] * 6}
    feats, labels = [], []
    for c, mu in centers.items():
        feats.append(mu + 0.3 * rng.normal(size=(n, dim)))
        labels.append(np.full(n, c))
    return FeatureBatch(np.concatenate(feats), np.concatenate(labels), np.zeros(3 * n, bool))


@pytest.fixture
def protos():
    return synthesize_prototypes({1: "floor", 2: "wall", 3: "cobot", 4: "human", 5: "agv"}, 8, 0,
                                 {2, 3, 4}, {1, 5})


def _gen(rng, dim=4):
    return GeneratorParams.init(rng, 3, 8, dim, hidden=16, depth=1, n_experts=4, top_k=2)


def test_mmd_identical_is_zero(rng):
    X = rng.normal(size=(30, 5))
    assert abs(mmd_loss(X, X.copy(), (0.5, 1.0, 4.0))) < 1e-12


@pytest.mark.parametrize("t,s", [(0.5, 1.0), (2.0, 1.0), (3.0, 7.5)])
def test_mmd_singleton_closed_form(t, s):
    fake = np.zeros((1, 3))
    fake[0, 0] = t
    assert mmd_loss(np.zeros((1, 3)), fake, (s,)) == pytest.approx(2 - 2 * math.exp(-t * t / (2 * s * s)),
                                                                    abs=1e-14)


def test_mmd_matches_double_loop(rng):
    for _ in range(5):
        X, Y = rng.normal(size=(7, 3)), rng.normal(size=(5, 3)) + 0.5
        sig = (0.7, 2.0)
        assert abs(mmd_loss(X, Y, sig) - _mmd_oracle(X, Y, sig)) < 1e-10
        loss, _ = mmd_loss_and_grad(X, Y, sig)
        assert abs(loss - _mmd_oracle(X, Y, sig)) < 1e-10


def test_mmd_errors():
    with pytest.raises(ValueError):
        mmd_loss(np.empty((0, 2)), np.ones((1, 2)), (1.0,))
    with pytest.raises(ValueError):
        mmd_loss(np.ones((1, 3)), np.ones((1, 2)), (1.0,))


def test_generate_zero_output_layer(rng, protos):
    g = _gen(rng)
    g.layers[-1].W[...] = 0.0
    g.layers[-1].b[...] = [[1.0, -1.0, 0.5, 2.0]]
    for c in (1, 2):
        out = generate(g, protos[c], rng.normal(size=3))
        assert out.tolist() == [1.0, -1.0, 0.5, 2.0]


def test_generate_deterministic_and_checks(rng, protos):
    g = _gen(rng)
    z = rng.normal(size=3)
    assert np.array_equal(generate(g, protos[2], z), generate(g, protos[2], z))
    with pytest.raises(ValueError):
        generate(g, np.ones(7), z)
    with pytest.raises(ValueError):
        generate(g, protos[2], np.ones(4))


def test_train_epochs_zero(rng, protos):
    g = _gen(rng)
    before = {k: v.copy() for k, v in g.named_arrays()}
    _, hist = train_generator(g, _real(rng), protos, GeneratorConfig(epochs=0))
    assert hist.loss == []
    assert all(np.array_equal(before[k], v) for k, v in g.named_arrays())


def test_train_reduces_mmd(backend, rng, protos):
    g = _gen(rng)
    real = _real(rng)
    cfg = GeneratorConfig(epochs=15, batch_size=60, eval_rows_per_class=60)
    _, hist = train_generator(g, real, protos, cfg, seed=3, optimizer={"lr": 5e-3})
    assert len(hist.eval_mmd) == 16
    assert hist.mean_eval_mmd(-1) * 2 <= hist.mean_eval_mmd(0)
    z = rng.normal(size=3)
    assert np.linalg.norm(generate(g, protos[2], z) - generate(g, protos[3], z)) > 0


def test_train_rejects_unseen_rows(rng, protos):
    real = _real(rng)
    real.labels[0] = 1
    with pytest.raises(ValueError, match="unseen class in generator training"):
        train_generator(_gen(rng), real, protos, GeneratorConfig(epochs=1))


def test_train_rejects_missing_prototype(rng, protos):
    real = _real(rng)
    real.labels[0] = 9
    with pytest.raises(ValueError, match="prototype|unseen"):
        train_generator(_gen(rng), real, protos, GeneratorConfig(epochs=1))


def test_synthesize(rng, protos):
    g = _gen(rng)
    fb = synthesize_unseen(g, protos, 100, seed=5)
    assert len(fb) == 200 and fb.is_fake.all()
    assert (fb.labels == 1).sum() == 100 and (fb.labels == 5).sum() == 100
    again = synthesize_unseen(g, protos, 100, seed=5)
    assert np.array_equal(fb.features, again.features)
    empty = synthesize_unseen(g, protos, 0)
    assert len(empty) == 0 and empty.dim == 4


def test_per_class_mmd_fixed_draw(rng, protos):
    g = _gen(rng)
    real = _real(rng)
    a = per_class_mmd(g, real, protos, (1.0,), seed=1)
    b = per_class_mmd(g, real, protos, (1.0,), seed=1)
    assert a == b and sorted(a) == [2, 3, 4]
