"""Sparse top-K mixture-of-experts layer with forward and backward passes.

Inputs are row batches ``X`` of shape ``(n, d_in)``; 1-D vectors are
accepted wherever a single input makes sense and are treated as one row.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, List, Optional, Sequence, Union

import numpy as np

from . import kernels
from .numerics import GradTape, Linear, gelu, gelu_backward, glorot_uniform, softmax_backward


@dataclass
class ExpertParams:
    """Two-layer feed-forward expert: ``gelu(x @ W1 + b1) @ W2 + b2``."""

    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray

    @classmethod
    def init(cls, rng, d_in, d_hidden, d_out):
        return cls(
            glorot_uniform(rng, d_in, d_hidden),
            np.zeros((1, d_hidden)),
            glorot_uniform(rng, d_hidden, d_out),
            np.zeros((1, d_out)),
        )

    def named_arrays(self, prefix):
        yield f"{prefix}.W1", self.W1
        yield f"{prefix}.b1", self.b1
        yield f"{prefix}.W2", self.W2
        yield f"{prefix}.b2", self.b2


@dataclass
class MoeLayerParams:
    Wg: np.ndarray
    experts: List[ExpertParams]
    k: int

    def __post_init__(self):
        if len(self.experts) != self.Wg.shape[1]:
            raise ValueError("gate width must equal the number of experts")
        if not 1 <= self.k <= len(self.experts):
            raise ValueError(f"K must satisfy 1 <= K <= M, got K={self.k}, M={len(self.experts)}")

    @classmethod
    def init(cls, rng, d_in, d_out, n_experts, k, d_hidden=None):
        d_hidden = d_hidden or 4 * d_in
        Wg = glorot_uniform(rng, d_in, n_experts)
        experts = [ExpertParams.init(rng, d_in, d_hidden, d_out) for _ in range(n_experts)]
        return cls(Wg, experts, k)

    @property
    def n_experts(self):
        return len(self.experts)

    @property
    def d_in(self):
        return self.Wg.shape[0]

    @property
    def d_out(self):
        return self.experts[0].W2.shape[1]

    def named_arrays(self, prefix):
        yield f"{prefix}.Wg", self.Wg
        for m, e in enumerate(self.experts):
            yield from e.named_arrays(f"{prefix}.experts.{m}")


@dataclass
class GateDecision:
    """Routing for a batch: ascending selected indices ``(n, K)`` and the
    full weight matrix ``(n, M)`` that is zero off the selection."""

    selected: np.ndarray
    weights: np.ndarray
    logits: np.ndarray

    @property
    def k(self):
        return self.selected.shape[-1]

    def margin(self) -> float:
        """Smallest gap between the K-th and (K+1)-th logit over all rows."""
        l = np.atleast_2d(self.logits)
        k = self.k
        if k == l.shape[1]:
            return np.inf
        part = -np.sort(-l, axis=1)
        return float(np.min(part[:, k - 1] - part[:, k]))


def masked_softmax(logits, selected):
    """Softmax over the selected columns only; other columns get exact zeros."""
    n = logits.shape[0]
    rows = np.arange(n)[:, None]
    kept = logits[rows, selected]
    kept = np.exp(kept - kept.max(axis=1, keepdims=True))
    kept /= kept.sum(axis=1, keepdims=True)
    w = np.zeros_like(logits)
    w[rows, selected] = kept
    return w


def gate(x, Wg, k) -> GateDecision:
    """Top-K routing: keep the K largest logits of ``x @ Wg`` and softmax them.

    Ties at the K-th rank go to the lower expert index.
    """
    Wg = np.asarray(Wg, dtype=np.float64)
    m = Wg.shape[1]
    if k < 1:
        raise ValueError("K must be >= 1")
    if k > m:
        raise ValueError(f"K={k} exceeds the number of experts M={m}")
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    X = np.atleast_2d(x)
    logits = X @ Wg
    selected = kernels.topk_select(logits, k)
    weights = masked_softmax(logits, selected)
    if single:
        return GateDecision(selected[0], weights[0], logits[0])
    return GateDecision(selected, weights, logits)


def _expert_hidden(e: ExpertParams, X):
    pre = X @ e.W1 + e.b1
    return pre, gelu(pre)


def expert_forward(e: ExpertParams, x):
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != e.W1.shape[0]:
        raise ValueError(f"expert expects width {e.W1.shape[0]}, got {x.shape[-1]}")
    _, act = _expert_hidden(e, np.atleast_2d(x))
    out = act @ e.W2 + e.b2
    return out[0] if x.ndim == 1 else out


def _expert_backward(e: ExpertParams, X, dY, pre=None, act=None):
    if pre is None:
        pre, act = _expert_hidden(e, X)
    dpre = gelu_backward(pre, dY @ e.W2.T)
    grads = {
        "W1": X.T @ dpre,
        "b1": dpre.sum(axis=0, keepdims=True),
        "W2": act.T @ dY,
        "b2": dY.sum(axis=0, keepdims=True),
    }
    return dpre @ e.W1.T, grads


def _routing(decision: GateDecision, n_experts):
    """For each expert, the row indices that selected it."""
    sel = np.atleast_2d(decision.selected)
    rows = np.repeat(np.arange(sel.shape[0]), sel.shape[1])
    flat = sel.ravel()
    order = np.argsort(flat, kind="stable")
    bounds = np.searchsorted(flat[order], np.arange(n_experts + 1))
    rows = rows[order]
    return [rows[bounds[m]:bounds[m + 1]] for m in range(n_experts)]


@dataclass
class ExpertCache:
    """Per-expert activations kept from the forward pass."""

    rows: np.ndarray
    pre: np.ndarray
    act: np.ndarray
    out: np.ndarray


def moe_forward(layer: MoeLayerParams, x, return_cache=False):
    """Weighted sum of the selected experts' outputs.

    Only experts picked by at least one row are evaluated, and each only on
    the rows that picked it. With ``return_cache`` a third value carries
    the expert activations for ``moe_backward``.
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    X = np.atleast_2d(x)
    if X.shape[1] != layer.d_in:
        raise ValueError(f"MoE layer expects width {layer.d_in}, got {X.shape[1]}")
    decision = gate(X, layer.Wg, layer.k)
    out = np.zeros((X.shape[0], layer.d_out))
    cache = []
    for m, rows in enumerate(_routing(decision, layer.n_experts)):
        if rows.size == 0:
            cache.append(None)
            continue
        e = layer.experts[m]
        if return_cache:
            pre, act = _expert_hidden(e, X[rows])
            y = act @ e.W2 + e.b2
            cache.append(ExpertCache(rows, pre, act, y))
        else:
            y = expert_forward(e, X[rows])
        out[rows] += decision.weights[rows, m][:, None] * y
    if single:
        out = out[0]
        decision = GateDecision(decision.selected[0], decision.weights[0], decision.logits[0])
    return (out, decision, cache) if return_cache else (out, decision)


def importance_loss(decision: GateDecision, coef: float):
    """Squared coefficient of variation of per-expert total gate weight.

    Returns ``(loss, dL/dweights)``; both vanish when ``coef`` is 0.
    """
    W = np.atleast_2d(decision.weights)
    n, m = W.shape
    if coef == 0.0 or n == 0:
        return 0.0, np.zeros_like(W)
    imp = W.sum(axis=0)
    mean = n / m
    cv2 = float(np.mean((imp - mean) ** 2) / mean ** 2)
    dimp = 2.0 * (imp - mean) / (m * mean ** 2)
    return coef * cv2, coef * np.broadcast_to(dimp, W.shape).copy()


def moe_backward(layer: MoeLayerParams, x, upstream_grad, decision: GateDecision,
                 dweights: Optional[np.ndarray] = None, cache=None):
    """Backward pass with the routing treated as fixed.

    Returns ``(tape, dx)``. The tape holds ``Wg`` and every expert's
    parameters; experts nobody selected get exact zeros. ``dweights`` adds
    an extra gradient on the gate weights (e.g. from ``importance_loss``).
    ``cache`` is the optional third output of ``moe_forward``; without it
    the expert activations are recomputed.
    """
    X = np.atleast_2d(np.asarray(x, dtype=np.float64))
    dY = np.atleast_2d(np.asarray(upstream_grad, dtype=np.float64))
    W = np.atleast_2d(decision.weights)
    sel = np.atleast_2d(decision.selected)
    n = X.shape[0]
    if W.shape != (n, layer.n_experts) or dY.shape != (n, layer.d_out) or sel.shape[1] != layer.k:
        raise ValueError("stale gate decision: shapes do not match this layer and input")
    dX = np.zeros_like(X)
    dW = np.zeros_like(W) if dweights is None else np.array(np.atleast_2d(dweights), dtype=np.float64)
    tape = GradTape()
    routing = _routing(decision, layer.n_experts) if cache is None else None
    expert_grads = []
    for m in range(layer.n_experts):
        e = layer.experts[m]
        if cache is None:
            rows, pre, act = routing[m], None, None
            y = expert_forward(e, X[rows]) if rows.size else None
        elif cache[m] is None:
            rows = np.empty(0, np.int64)
        else:
            rows, pre, act, y = cache[m].rows, cache[m].pre, cache[m].act, cache[m].out
        if rows.size == 0:
            expert_grads.append({"W1": np.zeros_like(e.W1), "b1": np.zeros_like(e.b1),
                                 "W2": np.zeros_like(e.W2), "b2": np.zeros_like(e.b2)})
            continue
        dYr = dY[rows]
        dW[rows, m] += np.einsum("ij,ij->i", dYr, y)
        dx_e, g = _expert_backward(e, X[rows], dYr * W[rows, m][:, None], pre, act)
        dX[rows] += dx_e
        expert_grads.append(g)
    dlogits = softmax_backward(W, dW)
    # masked columns carry zero weight, hence zero logit gradient
    dlogits[W == 0.0] = 0.0
    tape.add("Wg", X.T @ dlogits)
    for m, g in enumerate(expert_grads):
        tape.extend(f"experts.{m}", g)
    dX += dlogits @ layer.Wg.T
    if np.asarray(x).ndim == 1:
        dX = dX[0]
    return tape, dX


Stage = Union[Linear, MoeLayerParams, str]


def _stage_kind(s):
    if isinstance(s, Linear):
        return "linear"
    if isinstance(s, MoeLayerParams):
        return "moe"
    if s == "gelu":
        return "gelu"
    raise TypeError(f"unknown stage {s!r}")


def moe_stack_forward(layers: Sequence[Stage], x, keep_cache=False):
    """Run a sequence of MoE layers, linear maps and ``"gelu"`` activations.

    Returns ``(output, decisions)``, or ``(output, decisions, cache)`` when
    ``keep_cache`` is set (the cache feeds ``moe_stack_backward``).
    """
    h = np.asarray(x, dtype=np.float64)
    single = h.ndim == 1
    h = np.atleast_2d(h)
    decisions, cache = [], []
    for i, s in enumerate(layers):
        kind = _stage_kind(s)
        if kind != "gelu" and h.shape[1] != s.d_in:
            raise ValueError(f"dimension mismatch at stage {i} ({kind}): "
                             f"expects width {s.d_in}, got {h.shape[1]}")
        cache.append(h)
        if kind == "linear":
            h = s.forward(h)
        elif kind == "moe":
            if keep_cache:
                h, d, ec = moe_forward(s, h, return_cache=True)
                cache[-1] = (cache[-1], ec)
            else:
                h, d = moe_forward(s, h)
            decisions.append(d)
        else:
            h = gelu(h)
    out = h[0] if single else h
    if keep_cache:
        return out, decisions, cache
    return out, decisions


def moe_stack_backward(layers: Sequence[Stage], cache, decisions, upstream_grad, prefix="",
                       importance_coef=0.0):
    """Backward through a stack run with ``keep_cache=True``.

    Parameter names are ``{prefix}{stage index}.{param}``. Returns
    ``(tape, dx, aux_loss)`` where ``aux_loss`` is the summed importance
    penalty (zero unless ``importance_coef`` is set).
    """
    tape = GradTape()
    dh = np.atleast_2d(np.asarray(upstream_grad, dtype=np.float64))
    di = len(decisions)
    aux = 0.0
    for i in range(len(layers) - 1, -1, -1):
        s = layers[i]
        kind = _stage_kind(s)
        h_in = cache[i]
        if kind == "linear":
            dh, g = s.backward(h_in, dh)
            tape.extend(f"{prefix}{i}", g)
        elif kind == "moe":
            di -= 1
            loss, dw = importance_loss(decisions[di], importance_coef)
            aux += loss
            h_in, ec = h_in
            sub, dh = moe_backward(s, h_in, dh, decisions[di],
                                   dweights=dw if importance_coef else None, cache=ec)
            for name, g in sub.items():
                tape.add(f"{prefix}{i}.{name}", g)
        else:
            dh = gelu_backward(h_in, dh)
    return tape, dh, aux


def stack_named_arrays(layers: Sequence[Stage], prefix=""):
    for i, s in enumerate(layers):
        if _stage_kind(s) != "gelu":
            yield from s.named_arrays(f"{prefix}{i}")


def expert_load_stats(decisions: Iterable[GateDecision], n_experts: int):
    """Per-expert selection frequency and mean gate weight over all inputs.

    Frequencies sum to K because every input selects exactly K experts.
    """
    decisions = list(decisions)
    if not decisions:
        raise ValueError("no decisions")
    counts = np.zeros(n_experts)
    wsum = np.zeros(n_experts)
    total = 0
    for d in decisions:
        sel = np.atleast_2d(d.selected)
        W = np.atleast_2d(d.weights)
        counts += np.bincount(sel.ravel(), minlength=n_experts)[:n_experts]
        wsum += W.sum(axis=0)
        total += sel.shape[0]
    if total == 0:
        raise ValueError("no decisions")
    return counts / total, wsum / total
