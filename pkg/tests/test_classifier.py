import numpy as np
import pytest

from gzsl_moe.backbone import BackboneParams, FeatureBatch, extract_features
from gzsl_moe.classifier import (ClassifierConfig, ClassifierParams, classify, infer_frame,
                                 train_classifier)
from gzsl_moe.data import PointFrame

CENTERS = {1: (4, 0), 2: (-4, 0), 3: (0, 4), 4: (0, -4), 5: (4, 4)}


def _batch(rng, classes, n, fake):
    X, y = [], []
    for c in classes:
        X.append(np.array(CENTERS[c]) + 0.4 * rng.normal(size=(n, 2)))
        y.append(np.full(n, c))
    return FeatureBatch(np.concatenate(X), np.concatenate(y), np.full(n * len(classes), fake))


def _params(rng, classes=(1, 2, 3, 4, 5)):
    return ClassifierParams.init(rng, 2, classes, hidden=16, n_experts=4, top_k=2)


def test_zero_params_predict_lowest(rng):
    p = _params(rng)
    for a in p.trainable().values():
        a[...] = 0.0
    pred, probs = classify(p, rng.normal(size=(6, 2)))
    assert pred.tolist() == [1] * 6
    assert np.allclose(probs, 0.2)


def test_bias_shift_invariance(rng):
    p = _params(rng)
    X = rng.normal(size=(20, 2)) * 3
    before, _ = classify(p, X)
    p.layers[-1].b[...] += 3.7
    after, _ = classify(p, X)
    assert np.array_equal(before, after)


def test_epochs_zero_unchanged(rng):
    p = _params(rng)
    before = {k: v.copy() for k, v in p.trainable().items()}
    _, hist = train_classifier(p, _batch(rng, (2, 3, 4), 10, False), _batch(rng, (1, 5), 10, True),
                               ClassifierConfig(epochs=0))
    assert hist == []
    assert all(np.array_equal(before[k], v) for k, v in p.trainable().items())


def test_gzsl_training_accuracy(backend, rng):
    real = _batch(rng, (2, 3, 4), 80, False)
    fake = _batch(rng, (1, 5), 80, True)
    p = _params(rng)
    cfg = ClassifierConfig(epochs=15, batch_size=32)
    _, hist = train_classifier(p, real, fake, cfg, seed=2, optimizer={"lr": 5e-3})
    data = FeatureBatch.concat([real, fake])
    pred, _ = classify(p, data)
    assert np.mean(pred == data.labels) > 0.9
    assert hist[-1] < hist[0]
    assert pred[0] == data.labels[0]


def test_class_weights_option(rng):
    real = _batch(rng, (2, 3, 4), 30, False)
    fake = _batch(rng, (1, 5), 5, True)
    _, hist = train_classifier(_params(rng), real, fake, ClassifierConfig(epochs=2, class_weights=True))
    assert len(hist) == 2 and np.all(np.isfinite(hist))


def test_zsl_rejects_seen_label(rng):
    fake = _batch(rng, (1, 2), 5, True)
    with pytest.raises(ValueError, match="label outside ZSL space"):
        train_classifier(_params(rng, (1, 5)), None, fake, ClassifierConfig(mode="ZSL", epochs=1))


def test_gzsl_needs_real(rng):
    with pytest.raises(ValueError):
        train_classifier(_params(rng), None, _batch(rng, (1,), 5, True), ClassifierConfig(epochs=1))


def test_config_validation():
    with pytest.raises(ValueError):
        ClassifierConfig(mode="other")
    with pytest.raises(ValueError):
        ClassifierConfig(n_experts=2, top_k=3)
    assert ClassifierConfig(mode="zsl").mode == "ZSL"


def test_infer_frame_composition(backend, rng):
    bb = BackboneParams.init(rng, k=3, widths=(8,), feature_dim=4)
    cls = ClassifierParams.init(rng, 4, (1, 2, 3, 4, 5), hidden=8, n_experts=4, top_k=2)
    f = PointFrame(rng.normal(size=(25, 3)), np.zeros(25))
    a = infer_frame(bb, cls, f)
    assert np.array_equal(a, infer_frame(bb, cls, f))
    expected, _ = classify(cls, extract_features(bb, f))
    assert np.array_equal(a, expected)
    assert infer_frame(bb, cls, PointFrame(np.empty((0, 3)), [])).size == 0
