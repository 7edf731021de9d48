"""Per-point feature extractor trained on seen classes only.

A fixed 9-value neighborhood descriptor feeds a small GELU MLP. During
training a one-layer MoE classification head sits on top; it is thrown
away afterwards and only the extractor is kept.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import kernels
from .data import BACKBONE_TRAINING, PointFrame, SplitConfig, split_frames
from .moe import MoeLayerParams, moe_stack_backward, moe_stack_forward, stack_named_arrays
from .numerics import (AdamState, DivergenceError, Linear, adam_update, check_finite,
                       iter_minibatches, softmax_cross_entropy)
from .seeding import rng_for

log = logging.getLogger(__name__)

DESCRIPTOR_DIM = 9


@dataclass
class FeatureBatch:
    features: np.ndarray
    labels: np.ndarray
    is_fake: np.ndarray

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        self.is_fake = np.asarray(self.is_fake, dtype=bool).reshape(-1)
        if self.features.ndim != 2:
            raise ValueError("features must be a 2-D array")
        n = self.features.shape[0]
        if self.labels.shape[0] != n or self.is_fake.shape[0] != n:
            raise ValueError("features, labels and provenance must have the same number of rows")

    @classmethod
    def empty(cls, dim):
        return cls(np.empty((0, dim)), np.empty(0, np.int64), np.empty(0, bool))

    @property
    def dim(self):
        return self.features.shape[1]

    def __len__(self):
        return self.features.shape[0]

    def select(self, mask) -> "FeatureBatch":
        return FeatureBatch(self.features[mask], self.labels[mask], self.is_fake[mask])

    @staticmethod
    def concat(batches: Sequence["FeatureBatch"]) -> "FeatureBatch":
        if not batches:
            raise ValueError("nothing to concatenate")
        return FeatureBatch(np.concatenate([b.features for b in batches]),
                            np.concatenate([b.labels for b in batches]),
                            np.concatenate([b.is_fake for b in batches]))


def point_descriptor(frame: PointFrame, index: int, k: int) -> np.ndarray:
    """Descriptor of a single point, computed directly (no kernel).

    Returns xyz, the mean offset to the ``k`` nearest other points and the
    per-axis standard deviation of those offsets.
    """
    pts = frame.points
    n = pts.shape[0]
    if n < k + 1:
        raise ValueError(f"frame has {n} points, need at least k+1={k + 1}")
    p = pts[index]
    d = pts - p
    d2 = d[:, 0] * d[:, 0] + d[:, 1] * d[:, 1] + d[:, 2] * d[:, 2]
    d2[index] = np.inf
    nbr = np.argsort(d2, kind="stable")[:k]
    off = d[nbr]
    mean = off.mean(axis=0)
    std = np.sqrt(((off - mean) ** 2).mean(axis=0))
    return np.concatenate([p, mean, std])


def frame_descriptors(frame: PointFrame, k: int) -> np.ndarray:
    if len(frame) == 0:
        return np.empty((0, DESCRIPTOR_DIM))
    return kernels.knn_descriptors(frame.points, k)


@dataclass
class BackboneConfig:
    feature_dim: int = 32
    k: int = 16
    widths: Tuple[int, ...] = (64, 64)
    epochs: int = 10
    batch_size: int = 64
    n_experts: int = 8
    top_k: int = 2

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        if self.feature_dim < 2 or self.k < 1:
            raise ValueError("backbone needs feature_dim >= 2 and k >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if not 1 <= self.top_k <= self.n_experts:
            raise ValueError("backbone head needs 1 <= K <= M")


@dataclass
class BackboneParams:
    k: int
    in_mean: np.ndarray
    in_scale: np.ndarray
    layers: List

    @classmethod
    def init(cls, rng, k=16, widths=(64, 64), feature_dim=32):
        dims = [DESCRIPTOR_DIM, *widths, feature_dim]
        layers: List = []
        for i in range(len(dims) - 1):
            if i:
                layers.append("gelu")
            layers.append(Linear.init(rng, dims[i], dims[i + 1]))
        return cls(k, np.zeros((1, DESCRIPTOR_DIM)), np.ones((1, DESCRIPTOR_DIM)), layers)

    @property
    def feature_dim(self):
        return self.layers[-1].d_out

    def named_arrays(self):
        yield "input.mean", self.in_mean
        yield "input.scale", self.in_scale
        yield from stack_named_arrays(self.layers, "mlp.")

    def trainable(self):
        return dict(stack_named_arrays(self.layers, "mlp."))


def _features_from_descriptors(params: BackboneParams, desc, keep_cache=False):
    x = (desc - params.in_mean) / params.in_scale
    return moe_stack_forward(params.layers, x, keep_cache=keep_cache)


def extract_features(params: BackboneParams, frame: PointFrame) -> FeatureBatch:
    """Real features for every point of ``frame``."""
    if len(frame) == 0:
        return FeatureBatch.empty(params.feature_dim)
    desc = frame_descriptors(frame, params.k)
    feats, _ = _features_from_descriptors(params, desc)
    return FeatureBatch(feats, frame.labels.copy(), np.zeros(len(frame), bool))


def seen_descriptors(frames: Sequence[PointFrame], split: SplitConfig, k: int):
    """Descriptors and labels of seen-class points, neighborhoods restricted
    to seen-class points as well."""
    parts = split_frames(frames, split, BACKBONE_TRAINING)
    descs, labels = [], []
    for part in parts:
        f = part.frame
        if len(f) == 0:
            continue
        if len(f) < k + 1:
            raise ValueError(f"frame {f.frame_id!r} has too few seen points for k={k}")
        descs.append(frame_descriptors(f, k))
        labels.append(f.labels)
    if not descs:
        raise ValueError("no seen points")
    return np.concatenate(descs), np.concatenate(labels)


def train_backbone(frames: Sequence[PointFrame], split: SplitConfig, config: BackboneConfig,
                   seed: int = 0, optimizer: Optional[dict] = None):
    """Joint training of the extractor and a throwaway MoE head on seen classes.

    Returns ``(params, history)`` with one mean training loss per epoch.
    """
    desc, labels = seen_descriptors(frames, split, config.k)
    seen_ids = sorted(split.seen)
    target = np.searchsorted(seen_ids, labels)

    init_rng = rng_for(seed, "init")
    params = BackboneParams.init(init_rng, config.k, config.widths, config.feature_dim)
    params.in_mean[:] = desc.mean(axis=0)
    params.in_scale[:] = np.maximum(desc.std(axis=0), 1e-6)
    history: List[float] = []
    if config.epochs == 0:
        return params, history

    F = config.feature_dim
    head = [MoeLayerParams.init(init_rng, F, F, config.n_experts, config.top_k),
            Linear.init(init_rng, F, len(seen_ids))]
    trainable = params.trainable()
    trainable.update(stack_named_arrays(head, "head."))
    adam = AdamState(**(optimizer or {}))
    shuffle_rng = rng_for(seed, "shuffle")

    for epoch in range(1, config.epochs + 1):
        total, count = 0.0, 0
        for idx in iter_minibatches(len(target), config.batch_size, shuffle_rng):
            feats, dec_b, cache_b = _features_from_descriptors(params, desc[idx], keep_cache=True)
            logits, dec_h, cache_h = moe_stack_forward(head, feats, keep_cache=True)
            loss, dlogits, _ = softmax_cross_entropy(logits, target[idx])
            if not np.isfinite(loss):
                raise DivergenceError(f"divergence: non-finite backbone loss at epoch {epoch}")
            tape_h, dfeat, _ = moe_stack_backward(head, cache_h, dec_h, dlogits, "head.")
            tape_b, _, _ = moe_stack_backward(params.layers, cache_b, dec_b, dfeat, "mlp.")
            grads = tape_b.as_dict()
            grads.update(tape_h.as_dict())
            adam_update(adam, trainable, grads)
            total += loss * len(idx)
            count += len(idx)
        history.append(total / count)
        check_finite(trainable.items(), f"backbone epoch {epoch}")
        log.info("backbone epoch %d loss %.5f", epoch, history[-1])
    return params, history
