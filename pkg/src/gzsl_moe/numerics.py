"""Dense float64 building blocks: activations, losses, linear layers, Adam,
and a central finite-difference gradient checker.

Every array handled here is a 2-D ``float64`` matrix; biases are stored as
``(1, d)`` rows so that checkpoint blocks always carry a row/column shape.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, Iterator, Optional, Tuple

import numpy as np

from . import kernels

SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)
GELU_COEF = 0.044715
PROB_CLIP = 1e-12


class DivergenceError(RuntimeError):
    """Raised when a training loss or parameter stops being finite."""


def gelu(x):
    """Tanh-approximated GELU, elementwise on scalars or arrays."""
    if np.isscalar(x):
        return 0.5 * x * (1.0 + math.tanh(SQRT_2_OVER_PI * (x + GELU_COEF * x ** 3)))
    return kernels.gelu(x)


def gelu_grad(x):
    x = np.asarray(x, dtype=np.float64)
    return kernels.gelu_backward(x, np.ones_like(x))


def gelu_backward(x, dy):
    """``dy * gelu'(x)`` without materializing the derivative."""
    return kernels.gelu_backward(x, dy)


def softmax(logits):
    """Softmax over the last axis with max subtraction.

    ``-inf`` entries get exactly zero weight. A row with no finite entry
    raises ``ValueError("empty support")``.
    """
    z = np.asarray(logits, dtype=np.float64)
    squeeze = z.ndim == 1
    z = np.atleast_2d(z)
    finite = np.isfinite(z)
    if not finite.any(axis=-1).all():
        raise ValueError("empty support")
    zmax = np.max(np.where(finite, z, -np.inf), axis=-1, keepdims=True)
    e = np.where(finite, np.exp(np.where(finite, z - zmax, 0.0)), 0.0)
    p = e / e.sum(axis=-1, keepdims=True)
    return p[0] if squeeze else p


def softmax_backward(p, dp):
    """Gradient of softmax w.r.t. its logits, given outputs ``p`` and ``dL/dp``."""
    return p * (dp - np.sum(dp * p, axis=-1, keepdims=True))


def cross_entropy(probabilities, true_class) -> float:
    """``-ln(max(p[true_class], 1e-12))`` for a single probability vector."""
    p = np.asarray(probabilities, dtype=np.float64)
    c = int(true_class)
    if c < 0 or c >= p.shape[-1]:
        raise IndexError(f"class index {c} out of range for {p.shape[-1]} classes")
    return -math.log(max(float(p[c]), PROB_CLIP))


def softmax_cross_entropy(logits, targets, sample_weights=None):
    """Mean (optionally weighted) cross-entropy of ``softmax(logits)`` rows.

    Returns ``(loss, dlogits, probabilities)``. Targets are column indices.
    Non-finite logits give a NaN loss rather than an exception.
    The gradient ignores the probability clip, which only binds when a
    probability underflows below 1e-12.
    """
    z = np.asarray(logits, dtype=np.float64)
    t = np.asarray(targets, dtype=np.int64)
    n, c = z.shape
    if t.shape != (n,):
        raise ValueError("targets must have one entry per row")
    if n and (t.min() < 0 or t.max() >= c):
        raise IndexError("target index out of range")
    if not np.all(np.isfinite(z)):
        # callers turn a NaN loss into a divergence error naming the epoch
        nan = np.full_like(z, np.nan)
        return math.nan, nan, nan
    p = softmax(z)
    w = np.ones(n) if sample_weights is None else np.asarray(sample_weights, dtype=np.float64)
    picked = np.maximum(p[np.arange(n), t], PROB_CLIP)
    loss = float(np.sum(-np.log(picked) * w) / n)
    d = p.copy()
    d[np.arange(n), t] -= 1.0
    d *= (w / n)[:, None]
    return loss, d, p


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    a = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=(fan_in, fan_out))


@dataclass
class Linear:
    """Affine map ``X @ W + b`` on row batches."""

    W: np.ndarray
    b: np.ndarray

    @classmethod
    def init(cls, rng, d_in, d_out, zero=False):
        W = np.zeros((d_in, d_out)) if zero else glorot_uniform(rng, d_in, d_out)
        return cls(W, np.zeros((1, d_out)))

    @property
    def d_in(self):
        return self.W.shape[0]

    @property
    def d_out(self):
        return self.W.shape[1]

    def forward(self, X):
        X = np.asarray(X, dtype=np.float64)
        if X.shape[-1] != self.d_in:
            raise ValueError(f"linear map expects width {self.d_in}, got {X.shape[-1]}")
        return X @ self.W + self.b

    def backward(self, X, dY):
        return dY @ self.W.T, {"W": X.T @ dY, "b": dY.sum(axis=0, keepdims=True)}

    def named_arrays(self, prefix):
        yield f"{prefix}.W", self.W
        yield f"{prefix}.b", self.b


class GradTape:
    """Ordered ``name -> gradient`` record for one backward pass."""

    def __init__(self):
        self._grads: Dict[str, np.ndarray] = {}

    def add(self, name: str, grad: np.ndarray):
        if name in self._grads:
            raise KeyError(f"gradient for {name!r} recorded twice in one pass")
        self._grads[name] = grad

    def extend(self, prefix: str, grads: Dict[str, np.ndarray]):
        for k, g in grads.items():
            self.add(f"{prefix}.{k}", g)

    def __getitem__(self, name):
        return self._grads[name]

    def __contains__(self, name):
        return name in self._grads

    def __iter__(self):
        return iter(self._grads)

    def __len__(self):
        return len(self._grads)

    def items(self):
        return self._grads.items()

    def as_dict(self):
        return dict(self._grads)


@dataclass
class AdamState:
    lr: float = 0.0005
    beta1: float = 0.92
    beta2: float = 0.98
    weight_decay: float = 0.0001
    eps: float = 1e-8
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("betas must lie in (0, 1)")
        if self.weight_decay < 0 or not self.eps > 0:
            raise ValueError("weight decay must be >= 0 and eps > 0")


def adam_update(state: AdamState, params: Dict[str, np.ndarray], grads) -> None:
    """One decoupled-weight-decay Adam step, updating ``params`` in place.

    ``grads`` maps a subset of parameter names to gradients; parameters
    without a gradient still receive weight decay and a zero-gradient
    moment update so every parameter advances on the same step counter.
    """
    for name, g in grads.items():
        if name not in params:
            raise KeyError(f"gradient for unknown parameter {name!r}")
        if g.shape != params[name].shape:
            raise ValueError(f"shape mismatch for {name}: {g.shape} vs {params[name].shape}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = grads[name] if name in grads else np.zeros_like(p)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        kernels.adam_step(p, g, m, state.v[name], state.lr, b1, b2, bc1, bc2,
                          state.eps, state.weight_decay)


def check_finite(arrays: Iterable[Tuple[str, np.ndarray]], where: str):
    for name, a in arrays:
        if not np.all(np.isfinite(a)):
            raise DivergenceError(f"divergence: non-finite values in {name} ({where})")


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst: str
    n_coords: int
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance

    def __str__(self):
        status = "PASS" if self.passed else "FAIL"
        return (f"{status} max rel err {self.max_rel_error:.3e} at {self.worst} "
                f"({self.n_coords} coords, tol {self.tolerance:g})")


def grad_check(
    fn: Callable[[Dict[str, np.ndarray]], Tuple[float, Dict[str, np.ndarray]]],
    values: Dict[str, np.ndarray],
    tolerance: float = 1e-4,
    h: float = 1e-5,
    max_coords: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
) -> GradCheckReport:
    """Compare ``fn``'s analytic gradients with central differences.

    ``fn(values)`` must return ``(loss, grads)`` with one gradient per entry
    of ``values``. Error per coordinate is ``|a - n| / max(1, |a|, |n|)``.
    When ``max_coords`` is set, that many coordinates are sampled uniformly
    over all arrays. Failures are reported, never raised.
    """
    base = {k: np.array(v, dtype=np.float64, copy=True) for k, v in values.items()}
    _, analytic = fn({k: v.copy() for k, v in base.items()})
    coords = [(k, i) for k, v in base.items() for i in range(v.size)]
    if max_coords is not None and len(coords) > max_coords:
        rng = rng or np.random.default_rng(0)
        pick = np.sort(rng.choice(len(coords), size=max_coords, replace=False))
        coords = [coords[i] for i in pick]
    worst, worst_name = 0.0, ""
    # one working copy, perturbed and restored coordinate by coordinate
    vals = {k: v.copy() for k, v in base.items()}
    for name, i in coords:
        flat = vals[name].reshape(-1)
        x0 = flat[i]
        flat[i] = x0 + h
        fp, _ = fn(vals)
        flat[i] = x0 - h
        fm, _ = fn(vals)
        flat[i] = x0
        num = (fp - fm) / (2.0 * h)
        a = float(np.asarray(analytic[name], dtype=np.float64).reshape(-1)[i])
        rel = abs(a - num) / max(1.0, abs(a), abs(num))
        if rel > worst or not worst_name:
            worst, worst_name = rel, f"{name}[{i}]"
    return GradCheckReport(worst, worst_name, len(coords), tolerance)


def iter_minibatches(n: int, batch_size: int, rng: np.random.Generator) -> Iterator[np.ndarray]:
    """Seeded shuffle of ``range(n)`` cut into consecutive batches."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = rng.permutation(n)
    for s in range(0, n, batch_size):
        yield order[s:s + batch_size]
