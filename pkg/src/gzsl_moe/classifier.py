"""MoE classifier over backbone features, and frame-level inference."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .backbone import BackboneParams, FeatureBatch, extract_features
from .data import PointFrame
from .moe import MoeLayerParams, moe_stack_backward, moe_stack_forward, stack_named_arrays
from .numerics import (AdamState, DivergenceError, Linear, adam_update, check_finite,
                       iter_minibatches, softmax, softmax_cross_entropy)
from .seeding import rng_for

log = logging.getLogger(__name__)

GZSL, ZSL = "GZSL", "ZSL"


@dataclass
class ClassifierConfig:
    mode: str = GZSL
    hidden: int = 128
    n_experts: int = 8
    top_k: int = 2
    expert_hidden: Optional[int] = None
    epochs: int = 20
    batch_size: int = 128
    n_per_class: Optional[int] = None
    class_weights: bool = False
    importance_coef: float = 0.0

    def __post_init__(self):
        self.mode = self.mode.upper()
        if self.mode not in (GZSL, ZSL):
            raise ValueError(f"mode must be GZSL or ZSL, got {self.mode!r}")
        if not 1 <= self.top_k <= self.n_experts:
            raise ValueError("classifier needs 1 <= K <= M")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")


@dataclass
class ClassifierParams:
    """``classes[i]`` is the class id of output column ``i``."""

    classes: Tuple[int, ...]
    in_mean: np.ndarray
    in_scale: np.ndarray
    layers: List

    @classmethod
    def init(cls, rng, feature_dim, classes, hidden=128, n_experts=8, top_k=2, expert_hidden=None):
        classes = tuple(sorted(int(c) for c in classes))
        layers = [
            MoeLayerParams.init(rng, feature_dim, hidden, n_experts, top_k, expert_hidden),
            "gelu",
            MoeLayerParams.init(rng, hidden, hidden, n_experts, top_k, expert_hidden),
            Linear.init(rng, hidden, len(classes)),
        ]
        return cls(classes, np.zeros((1, feature_dim)), np.ones((1, feature_dim)), layers)

    @property
    def feature_dim(self):
        return self.in_mean.shape[1]

    def named_arrays(self):
        yield "input.mean", self.in_mean
        yield "input.scale", self.in_scale
        yield from stack_named_arrays(self.layers, "cls.")

    def trainable(self):
        return dict(stack_named_arrays(self.layers, "cls."))


def _logits(params: ClassifierParams, X, keep_cache=False):
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if X.shape[1] != params.feature_dim:
        raise ValueError(f"classifier expects feature dim {params.feature_dim}, got {X.shape[1]}")
    return moe_stack_forward(params.layers, (X - params.in_mean) / params.in_scale,
                             keep_cache=keep_cache)


def classify(params: ClassifierParams, features):
    """Predicted class ids and probability rows.

    Ties in the argmax go to the lowest class id.
    """
    X = features.features if isinstance(features, FeatureBatch) else features
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    classes = np.asarray(params.classes, dtype=np.int64)
    if X.shape[0] == 0:
        return np.empty(0, np.int64), np.empty((0, len(classes)))
    logits, _ = _logits(params, X)
    probs = softmax(logits)
    # np.argmax returns the first maximum; columns are in ascending class order
    return classes[np.argmax(probs, axis=1)], probs


def train_classifier(params: ClassifierParams, real_seen: Optional[FeatureBatch],
                     fake_unseen: FeatureBatch, config: ClassifierConfig, seed: int = 0,
                     optimizer: Optional[dict] = None):
    """Cross-entropy training on real seen rows plus fake unseen rows (GZSL)
    or fake unseen rows alone (ZSL). Returns ``(params, history)``."""
    if config.mode == GZSL:
        if real_seen is None or len(real_seen) == 0:
            raise ValueError("GZSL training needs real seen features")
        if len(fake_unseen) == 0:
            raise ValueError("GZSL training needs fake unseen features")
        data = FeatureBatch.concat([real_seen, fake_unseen])
    else:
        if len(fake_unseen) == 0:
            raise ValueError("ZSL training needs fake unseen features")
        data = fake_unseen
    classes = np.asarray(params.classes)
    bad = np.setdiff1d(np.unique(data.labels), classes)
    if bad.size:
        raise ValueError(f"label outside {config.mode} space: {bad.tolist()}")
    target = np.searchsorted(classes, data.labels)

    params.in_mean[:] = data.features.mean(axis=0)
    params.in_scale[:] = np.maximum(data.features.std(axis=0), 1e-6)
    history: List[float] = []
    if config.epochs == 0:
        return params, history

    if config.class_weights:
        counts = np.bincount(target, minlength=len(classes)).astype(float)
        present = counts > 0
        w_class = np.zeros(len(classes))
        w_class[present] = len(target) / (present.sum() * counts[present])
        sample_w = w_class[target]
    else:
        sample_w = None

    trainable = params.trainable()
    adam = AdamState(**(optimizer or {}))
    shuffle_rng = rng_for(seed, "shuffle")
    for epoch in range(1, config.epochs + 1):
        total, count = 0.0, 0
        for idx in iter_minibatches(len(target), config.batch_size, shuffle_rng):
            logits, decisions, cache = _logits(params, data.features[idx], keep_cache=True)
            w = None if sample_w is None else sample_w[idx]
            loss, dlogits, _ = softmax_cross_entropy(logits, target[idx], w)
            if not np.isfinite(loss):
                raise DivergenceError(f"divergence: non-finite classifier loss at epoch {epoch}")
            tape, _, aux = moe_stack_backward(params.layers, cache, decisions, dlogits, "cls.",
                                              importance_coef=config.importance_coef)
            adam_update(adam, trainable, tape.as_dict())
            total += (loss + aux) * len(idx)
            count += len(idx)
        history.append(total / count)
        check_finite(trainable.items(), f"classifier epoch {epoch}")
        log.info("classifier epoch %d loss %.5f", epoch, history[-1])
    return params, history


def infer_frame(backbone: BackboneParams, classifier: ClassifierParams, frame: PointFrame) -> np.ndarray:
    """Per-point labels: backbone features, then the classifier. The
    generator takes no part in inference."""
    if len(frame) == 0:
        return np.empty(0, np.int64)
    pred, _ = classify(classifier, extract_features(backbone, frame))
    return pred
