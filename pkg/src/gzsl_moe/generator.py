"""Prototype-conditioned feature generator built from stacked MoE layers.

Trained with a per-class multi-bandwidth Gaussian MMD against real
features of seen classes; unseen prototypes are only used at synthesis.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .backbone import FeatureBatch
from .moe import MoeLayerParams, moe_stack_backward, moe_stack_forward, stack_named_arrays
from .numerics import AdamState, DivergenceError, Linear, adam_update, check_finite, iter_minibatches
from .prototypes import ClassPrototypeTable
from .seeding import rng_for

log = logging.getLogger(__name__)

DEFAULT_BANDWIDTHS = (2.0, 5.0, 10.0, 20.0, 40.0, 80.0)


@dataclass
class GeneratorConfig:
    noise_dim: int = 32
    hidden: int = 128
    depth: int = 2
    n_experts: int = 8
    top_k: int = 2
    expert_hidden: Optional[int] = None
    epochs: int = 30
    batch_size: int = 256
    bandwidths: Tuple[float, ...] = DEFAULT_BANDWIDTHS
    importance_coef: float = 0.0
    eval_rows_per_class: int = 256

    def __post_init__(self):
        self.bandwidths = tuple(float(b) for b in self.bandwidths)
        if not 1 <= self.top_k <= self.n_experts:
            raise ValueError("generator needs 1 <= K <= M")
        if self.epochs < 0 or self.depth < 0:
            raise ValueError("epochs and depth must be >= 0")


@dataclass
class GeneratorParams:
    noise_dim: int
    proto_dim: int
    layers: List

    @classmethod
    def init(cls, rng, noise_dim, proto_dim, feature_dim, hidden=128, depth=2,
             n_experts=8, top_k=2, expert_hidden=None):
        layers: List = [Linear.init(rng, noise_dim + proto_dim, hidden)]
        for _ in range(depth):
            layers.append(MoeLayerParams.init(rng, hidden, hidden, n_experts, top_k, expert_hidden))
        layers.append(Linear.init(rng, hidden, feature_dim))
        return cls(noise_dim, proto_dim, layers)

    @property
    def feature_dim(self):
        return self.layers[-1].d_out

    def named_arrays(self):
        return stack_named_arrays(self.layers, "gen.")

    def trainable(self):
        return dict(self.named_arrays())


def _inputs(params: GeneratorParams, prototypes, z):
    P = np.atleast_2d(np.asarray(prototypes, dtype=np.float64))
    Z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    if P.shape[1] != params.proto_dim:
        raise ValueError(f"prototype dimension {P.shape[1]} != {params.proto_dim}")
    if Z.shape[1] != params.noise_dim:
        raise ValueError(f"noise dimension {Z.shape[1]} != {params.noise_dim}")
    if P.shape[0] == 1 and Z.shape[0] > 1:
        P = np.repeat(P, Z.shape[0], axis=0)
    if P.shape[0] != Z.shape[0]:
        raise ValueError("one prototype per noise row expected")
    return np.concatenate([Z, P], axis=1)


def generate(params: GeneratorParams, prototype, z, return_decisions=False):
    """Fake feature(s) for prototype(s) and noise row(s); pure in its inputs."""
    single = np.ndim(z) == 1
    out, decisions = moe_stack_forward(params.layers, _inputs(params, prototype, z))
    out = out[0] if single else out
    return (out, decisions) if return_decisions else out


# ---------------------------------------------------------------- MMD

def _as_array(x):
    return x.features if isinstance(x, FeatureBatch) else np.atleast_2d(np.asarray(x, dtype=np.float64))


def _sqdist(A, B):
    # exact per-pair differences keep identical rows at distance 0
    d = A[:, None, :] - B[None, :, :]
    return np.einsum("ijk,ijk->ij", d, d)


def _kernel(d2, sigmas):
    return sum(np.exp(-d2 / (2.0 * s * s)) for s in sigmas)


def mmd_loss(real, fake, sigmas: Sequence[float]) -> float:
    """Biased MMD^2 with a sum of Gaussian kernels, clamped at 0."""
    X, Y = _as_array(real), _as_array(fake)
    if X.shape[0] == 0 or Y.shape[0] == 0:
        raise ValueError("MMD needs nonempty batches")
    if X.shape[1] != Y.shape[1]:
        raise ValueError("MMD batches must share a feature dimension")
    v = (_kernel(_sqdist(X, X), sigmas).mean() + _kernel(_sqdist(Y, Y), sigmas).mean()
         - 2.0 * _kernel(_sqdist(X, Y), sigmas).mean())
    return max(0.0, float(v))


def mmd_loss_and_grad(real, fake, sigmas: Sequence[float]):
    """``mmd_loss`` and its gradient with respect to the fake rows."""
    X, Y = _as_array(real), _as_array(fake)
    n, m = X.shape[0], Y.shape[0]
    if n == 0 or m == 0:
        raise ValueError("MMD needs nonempty batches")
    dXX, dYY, dYX = _sqdist(X, X), _sqdist(Y, Y), _sqdist(Y, X)
    loss = _kernel(dXX, sigmas).mean() + _kernel(dYY, sigmas).mean() - 2.0 * _kernel(dYX, sigmas).mean()
    # dk/dy for k = exp(-|y-x|^2 / 2s^2) is -k (y - x) / s^2
    cyy = sum(np.exp(-dYY / (2 * s * s)) / (s * s) for s in sigmas)
    cyx = sum(np.exp(-dYX / (2 * s * s)) / (s * s) for s in sigmas)
    g_yy = -(2.0 / (m * m)) * (cyy.sum(axis=1)[:, None] * Y - cyy @ Y)
    g_yx = (2.0 / (m * n)) * (cyx.sum(axis=1)[:, None] * Y - cyx @ X)
    return max(0.0, float(loss)), g_yy + g_yx


def median_pairwise_distance(X, rng, max_rows=512) -> float:
    X = _as_array(X)
    if X.shape[0] > max_rows:
        X = X[np.sort(rng.choice(X.shape[0], max_rows, replace=False))]
    d = np.sqrt(_sqdist(X, X))
    iu = np.triu_indices(X.shape[0], 1)
    med = float(np.median(d[iu])) if iu[0].size else 1.0
    return med if med > 0 else 1.0


# ---------------------------------------------------------------- training

@dataclass
class GeneratorHistory:
    loss: List[float] = field(default_factory=list)
    # per-class MMD on a fixed evaluation draw; entry 0 is before training
    eval_mmd: List[Dict[int, float]] = field(default_factory=list)
    sigmas: Tuple[float, ...] = ()

    def mean_eval_mmd(self, i) -> float:
        return float(np.mean(list(self.eval_mmd[i].values())))


def _check_training_labels(real_seen: FeatureBatch, prototypes: ClassPrototypeTable):
    if real_seen.is_fake.any():
        raise ValueError("generator training takes real features only")
    for c in np.unique(real_seen.labels):
        c = int(c)
        if c in prototypes.unseen or (prototypes.seen and c not in prototypes.seen):
            raise ValueError(f"unseen class in generator training: {c}")
        if c not in prototypes:
            raise ValueError(f"missing prototype for seen class {c}")


def per_class_mmd(params: GeneratorParams, real: FeatureBatch, prototypes: ClassPrototypeTable,
                  sigmas, seed: int, rows_per_class: int = 256) -> Dict[int, float]:
    """MMD between real and generated features of each class, on a fixed draw."""
    out = {}
    for c in sorted(int(c) for c in np.unique(real.labels)):
        rng = rng_for(seed, "eval-mmd", c)
        Xc = real.features[real.labels == c]
        if Xc.shape[0] > rows_per_class:
            Xc = Xc[np.sort(rng.choice(Xc.shape[0], rows_per_class, replace=False))]
        z = rng.standard_normal((Xc.shape[0], params.noise_dim))
        out[c] = mmd_loss(Xc, generate(params, prototypes[c], z), sigmas)
    return out


def train_generator(params: GeneratorParams, real_seen: FeatureBatch, prototypes: ClassPrototypeTable,
                    config: GeneratorConfig, seed: int = 0, optimizer: Optional[dict] = None):
    """Fit the generator so that, per seen class, generated features match
    the real ones in MMD. Updates ``params`` in place and returns
    ``(params, history)``."""
    _check_training_labels(real_seen, prototypes)
    if real_seen.dim != params.feature_dim:
        raise ValueError("real feature dimension does not match the generator output")
    scale = median_pairwise_distance(real_seen, rng_for(seed, "median"))
    sigmas = tuple(b * scale for b in config.bandwidths)
    history = GeneratorHistory(sigmas=sigmas)
    if config.epochs == 0 or len(real_seen) == 0:
        return params, history

    trainable = params.trainable()
    adam = AdamState(**(optimizer or {}))
    shuffle_rng = rng_for(seed, "shuffle")
    noise_rng = rng_for(seed, "noise")
    history.eval_mmd.append(per_class_mmd(params, real_seen, prototypes, sigmas, seed,
                                          config.eval_rows_per_class))
    for epoch in range(1, config.epochs + 1):
        total, steps = 0.0, 0
        for idx in iter_minibatches(len(real_seen), config.batch_size, shuffle_rng):
            labels = real_seen.labels[idx]
            classes = np.unique(labels)
            order = np.argsort(labels, kind="stable")
            lab_sorted = labels[order]
            real_sorted = real_seen.features[idx][order]
            protos = np.stack([prototypes[c] for c in lab_sorted])
            z = noise_rng.standard_normal((len(idx), params.noise_dim))
            fake, decisions, cache = moe_stack_forward(params.layers, _inputs(params, protos, z),
                                                       keep_cache=True)
            dfake = np.zeros_like(fake)
            loss = 0.0
            for c in classes:
                rows = lab_sorted == c
                l_c, g_c = mmd_loss_and_grad(real_sorted[rows], fake[rows], sigmas)
                loss += l_c / len(classes)
                dfake[rows] = g_c / len(classes)
            if not np.isfinite(loss):
                raise DivergenceError(f"divergence: non-finite generator loss at epoch {epoch}")
            tape, _, aux = moe_stack_backward(params.layers, cache, decisions, dfake, "gen.",
                                              importance_coef=config.importance_coef)
            adam_update(adam, trainable, tape.as_dict())
            total += loss + aux
            steps += 1
        history.loss.append(total / steps)
        check_finite(trainable.items(), f"generator epoch {epoch}")
        history.eval_mmd.append(per_class_mmd(params, real_seen, prototypes, sigmas, seed,
                                              config.eval_rows_per_class))
        log.info("generator epoch %d loss %.6f eval mmd %.6f", epoch, history.loss[-1],
                 history.mean_eval_mmd(-1))
    return params, history


def synthesize_unseen(params: GeneratorParams, prototypes: ClassPrototypeTable, n_per_class: int,
                      seed: int = 0, classes: Optional[Sequence[int]] = None) -> FeatureBatch:
    """``n_per_class`` fake features for every unseen class (or ``classes``)."""
    classes = sorted(prototypes.unseen) if classes is None else list(classes)
    if n_per_class <= 0 or not classes:
        return FeatureBatch.empty(params.feature_dim)
    feats, labels = [], []
    for c in classes:
        z = rng_for(seed, "synthesize", c).standard_normal((n_per_class, params.noise_dim))
        feats.append(generate(params, prototypes[c], z))
        labels.append(np.full(n_per_class, c, dtype=np.int64))
    return FeatureBatch(np.concatenate(feats), np.concatenate(labels),
                        np.ones(n_per_class * len(classes), bool))
