"""Built-in verification suites behind ``gzsl-moe check``.

Each check returns a ``CheckResult``; the instance counts are arguments so
the same code serves the quick CLI suites and the full acceptance runs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Dict, List

import numpy as np

from .data import SplitConfig
from .generator import GeneratorParams, _inputs, mmd_loss_and_grad
from .metrics import ConfusionMatrix, build_report, harmonic_mean, iou_per_class
from .moe import (ExpertParams, MoeLayerParams, _expert_backward, expert_forward, gate,
                  moe_backward, moe_forward, moe_stack_backward, moe_stack_forward,
                  stack_named_arrays)
from .numerics import (Linear, gelu, gelu_grad, grad_check, softmax, softmax_backward,
                       softmax_cross_entropy)
from .classifier import ClassifierParams

MOE_CONFIGS = ((8, 2), (32, 8))
MIN_MARGIN = 1e-3
GRAD_TOL = 1e-4


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str

    def line(self) -> str:
        return f"[{'PASS' if self.passed else 'FAIL'}] {self.name}: {self.detail}"


# ---------------------------------------------------------------- moe

def dense_moe_oracle(layer: MoeLayerParams, X) -> np.ndarray:
    """Evaluate every expert on every row, then mask to the top-K softmax."""
    X = np.atleast_2d(X)
    logits = X @ layer.Wg
    n, m = logits.shape
    out = np.zeros((n, layer.d_out))
    for i in range(n):
        order = sorted(range(m), key=lambda j: (-logits[i, j], j))[:layer.k]
        z = np.array([logits[i, j] for j in order])
        w = np.exp(z - z.max())
        w /= w.sum()
        for j, wj in zip(order, w):
            e = layer.experts[j]
            h = X[i] @ e.W1 + e.b1[0]
            h = 0.5 * h * (1.0 + np.tanh(math.sqrt(2.0 / math.pi) * (h + 0.044715 * h ** 3)))
            out[i] += wj * (h @ e.W2 + e.b2[0])
    return out


def check_moe_dense_equivalence(n_instances=1000, configs=MOE_CONFIGS, tol=1e-9, seed=0):
    worst = 0.0
    for m, k in configs:
        for i in range(n_instances):
            rng = np.random.default_rng([seed, m, k, i])
            d_in = int(rng.integers(2, 7))
            d_out = int(rng.integers(1, 5))
            layer = MoeLayerParams.init(rng, d_in, d_out, m, k, d_hidden=int(rng.integers(2, 9)))
            for e in layer.experts:
                e.b1[...] = rng.normal(size=e.b1.shape)
                e.b2[...] = rng.normal(size=e.b2.shape)
            X = rng.normal(size=(int(rng.integers(1, 4)), d_in))
            out, _ = moe_forward(layer, X)
            worst = max(worst, float(np.max(np.abs(out - dense_moe_oracle(layer, X)))))
    n = n_instances * len(configs)
    return CheckResult("moe dense equivalence", worst <= tol,
                       f"max abs diff {worst:.2e} over {n} instances (tol {tol:g})")


def _tied_logits(rng, m):
    kind = rng.integers(0, 4)
    if kind == 0:
        return np.full(m, float(rng.normal()))
    if kind == 1:
        return rng.integers(-2, 3, size=m).astype(float)
    if kind == 2:
        v = rng.normal(size=m)
        v[rng.choice(m, size=max(2, m // 2), replace=False)] = v.max()
        return v
    return np.round(rng.normal(size=m), 1)


def check_gate_invariants(n_vectors=10000, configs=MOE_CONFIGS, seed=0):
    """K nonzeros, unit sum and lowest-index tie-breaking on random and
    deliberately tied logit vectors. The gate input is one-hot so the
    logits equal the chosen vector exactly."""
    bad = 0
    worst_sum = 0.0
    for m, k in configs:
        rng = np.random.default_rng([seed, m, k])
        rows = [rng.normal(size=m) if i % 2 else _tied_logits(rng, m) for i in range(n_vectors // len(configs))]
        # with x = [1] and Wg = logits as a 1-row matrix, x @ Wg is the vector itself
        for logits in rows:
            dec = gate(np.array([1.0]), logits[None, :], k)
            expected = sorted(range(m), key=lambda j: (-logits[j], j))[:k]
            nz = np.flatnonzero(dec.weights)
            ok = (list(dec.selected) == sorted(expected) and nz.size == k
                  and set(nz.tolist()) == set(expected))
            worst_sum = max(worst_sum, abs(float(dec.weights.sum()) - 1.0))
            bad += not ok
    passed = bad == 0 and worst_sum <= 1e-12
    return CheckResult("gate invariants", passed,
                       f"{bad} violations over {n_vectors} vectors, max |sum-1| {worst_sum:.1e}")


def check_unselected_zero_grad(n_instances=50, seed=0):
    bad = 0
    for i in range(n_instances):
        rng = np.random.default_rng([seed, 7, i])
        layer = MoeLayerParams.init(rng, 4, 3, 8, 2, d_hidden=5)
        x = rng.normal(size=4)
        _, dec = moe_forward(layer, x)
        tape, _ = moe_backward(layer, x, rng.normal(size=3), dec)
        for mi in set(range(8)) - set(dec.selected.tolist()):
            for p in ("W1", "b1", "W2", "b2"):
                bad += bool(np.any(tape[f"experts.{mi}.{p}"] != 0.0))
    return CheckResult("unselected experts get zero gradient", bad == 0,
                       f"{bad} nonzero blocks over {n_instances} instances")


# ---------------------------------------------------------------- gradients

def _fn_from_named(named: Dict[str, np.ndarray], loss_and_grads: Callable):
    def fn(vals):
        for k, v in vals.items():
            named[k][...] = v
        return loss_and_grads()
    return fn


def _grad_gelu(rng):
    x = rng.normal(size=(3, 4)) * 2
    w = rng.normal(size=(3, 4))

    def fn(v):
        return float(np.sum(gelu(v["x"]) * w)), {"x": gelu_grad(v["x"]) * w}
    return fn, {"x": x}


def _grad_softmax(rng):
    z = rng.normal(size=(3, 5))
    w = rng.normal(size=(3, 5))

    def fn(v):
        p = softmax(v["z"])
        return float(np.sum(p * w)), {"z": softmax_backward(p, w)}
    return fn, {"z": z}


def _grad_cross_entropy(rng):
    z = rng.normal(size=(4, 5)) * 2
    t = rng.integers(0, 5, size=4)
    sw = rng.uniform(0.5, 2.0, size=4)

    def fn(v):
        loss, d, _ = softmax_cross_entropy(v["z"], t, sw)
        return loss, {"z": d}
    return fn, {"z": z}


def _grad_expert(rng):
    e = ExpertParams.init(rng, 3, 5, 2)
    e.b1[...] = rng.normal(size=e.b1.shape)
    X = rng.normal(size=(4, 3))
    w = rng.normal(size=(4, 2))
    named = {"W1": e.W1, "b1": e.b1, "W2": e.W2, "b2": e.b2, "X": X}

    def lg():
        y = expert_forward(e, X)
        dx, g = _expert_backward(e, X, w)
        return float(np.sum(y * w)), {**g, "X": dx}
    return _fn_from_named(named, lg), {k: v.copy() for k, v in named.items()}


def _margin_ok(decisions):
    return all(d.margin() >= MIN_MARGIN for d in decisions)


def _grad_moe_layer(rng):
    m, k = MOE_CONFIGS[int(rng.integers(0, 2))]
    d_in = 4
    while True:
        layer = MoeLayerParams.init(rng, d_in, 3, m, k, d_hidden=3)
        X = rng.normal(size=(3, d_in))
        _, dec = moe_forward(layer, X)
        if _margin_ok([dec]):
            break
    w = rng.normal(size=(3, 3))
    named = dict(layer.named_arrays("moe"))
    named["X"] = X

    def lg():
        out, d = moe_forward(layer, X)
        tape, dx = moe_backward(layer, X, w, d)
        grads = {f"moe.{n}": g for n, g in tape.items()}
        grads["X"] = dx
        return float(np.sum(out * w)), grads
    return _fn_from_named(named, lg), {k: v.copy() for k, v in named.items()}


def _grad_generator(rng):
    while True:
        gen = GeneratorParams.init(rng, 3, 4, 3, hidden=5, depth=2, n_experts=4, top_k=2, expert_hidden=3)
        P = rng.normal(size=(6, 4))
        Z = rng.normal(size=(6, 3))
        real = rng.normal(size=(5, 3))
        _, dec = moe_stack_forward(gen.layers, _inputs(gen, P, Z))
        if _margin_ok(dec):
            break
    named = dict(gen.named_arrays())
    sigmas = (0.5, 1.0, 2.0)

    def lg():
        fake, d, cache = moe_stack_forward(gen.layers, _inputs(gen, P, Z), keep_cache=True)
        loss, g = mmd_loss_and_grad(real, fake, sigmas)
        tape, _, _ = moe_stack_backward(gen.layers, cache, d, g, "gen.")
        return loss, tape.as_dict()
    return _fn_from_named(named, lg), {k: v.copy() for k, v in named.items()}


def _grad_classifier(rng):
    while True:
        cls = ClassifierParams.init(rng, 4, (1, 2, 3), hidden=5, n_experts=4, top_k=2, expert_hidden=3)
        X = rng.normal(size=(6, 4))
        _, dec = moe_stack_forward(cls.layers, X)
        if _margin_ok(dec):
            break
    t = rng.integers(0, 3, size=6)
    named = cls.trainable()

    def lg():
        logits, d, cache = moe_stack_forward(cls.layers, X, keep_cache=True)
        loss, dl, _ = softmax_cross_entropy(logits, t)
        tape, _, _ = moe_stack_backward(cls.layers, cache, d, dl, "cls.")
        return loss, tape.as_dict()
    return _fn_from_named(named, lg), {k: v.copy() for k, v in named.items()}


GRAD_CASES = {
    "gelu": _grad_gelu,
    "softmax": _grad_softmax,
    "cross-entropy": _grad_cross_entropy,
    "expert": _grad_expert,
    "moe layer": _grad_moe_layer,
    "generator stack": _grad_generator,
    "classifier stack": _grad_classifier,
}


def check_gradients(n_seeds=100, max_coords=40, seed=0) -> List[CheckResult]:
    """Central finite differences for every differentiable operation.

    MMD means the generator case also covers the MMD gradient. MoE cases are
    resampled until every routing margin is at least ``MIN_MARGIN``.
    """
    out = []
    for name, make in GRAD_CASES.items():
        worst, where = 0.0, ""
        for s in range(n_seeds):
            rng = np.random.default_rng([seed, s, len(name)])
            fn, values = make(rng)
            rep = grad_check(fn, values, tolerance=GRAD_TOL, max_coords=max_coords, rng=rng)
            if rep.max_rel_error >= worst:
                worst, where = rep.max_rel_error, f"seed {s} {rep.worst}"
        out.append(CheckResult(f"gradient {name}", worst < GRAD_TOL,
                               f"max rel err {worst:.2e} ({where}) over {n_seeds} seeds"))
    return out


# ---------------------------------------------------------------- metrics

def check_metric_oracles(n_pairs=10000, n_iou_instances=50, seed=0) -> List[CheckResult]:
    out = []
    split = SplitConfig({1}, {2})
    cm = ConfusionMatrix((1, 2), [[3, 1], [1, 5]])
    rep = build_report(cm, split)
    expected = (3 / 5 + 5 / 7) / 2
    out.append(CheckResult("mIoU of [[3,1],[1,5]]", abs(rep.miou_all - expected) < 1e-12,
                           f"{rep.miou_all:.6f} vs {expected:.6f}"))
    hm = harmonic_mean(89.3, 64.96)
    out.append(CheckResult("harmonic mean (89.3, 64.96)", abs(hm - 75.21) <= 0.01, f"{hm:.4f}"))

    rng = np.random.default_rng(seed)
    classes = (1, 2, 3, 4, 5)
    t = rng.choice(classes, size=n_pairs)
    p = np.where(rng.random(n_pairs) < 0.6, t, rng.choice(classes, size=n_pairs))
    cm = ConfusionMatrix(classes).accumulate(t, p)
    direct = sum(int(a == b) for a, b in zip(t.tolist(), p.tolist())) / n_pairs
    acc = float(np.trace(cm.counts)) / cm.total
    out.append(CheckResult("matrix accuracy = pairwise match fraction", acc == direct,
                           f"{acc:.6f} vs {direct:.6f} on {n_pairs} pairs"))

    worst = 0.0
    for i in range(n_iou_instances):
        r = np.random.default_rng([seed, i])
        n = int(r.integers(1, 300))
        t = r.choice(classes, size=n)
        p = np.where(r.random(n) < 0.5, t, r.choice(classes, size=n))
        iou = iou_per_class(ConfusionMatrix(classes).accumulate(t, p))
        for j, c in enumerate(classes):
            A = {x for x in range(n) if t[x] == c}
            B = {x for x in range(n) if p[x] == c}
            union = A | B
            if not union:
                worst = max(worst, 0.0 if math.isnan(iou[j]) else 1.0)
            else:
                worst = max(worst, abs(len(A & B) / len(union) - iou[j]))
    out.append(CheckResult("IoU from matrix = set IoU", worst < 1e-12,
                           f"max diff {worst:.1e} over {n_iou_instances} instances"))
    return out


# ---------------------------------------------------------------- suites

def suite(name: str) -> List[CheckResult]:
    if name == "grad":
        return check_gradients(n_seeds=10)
    if name == "moe":
        return [check_moe_dense_equivalence(n_instances=100),
                check_gate_invariants(n_vectors=2000),
                check_unselected_zero_grad()]
    if name == "metrics":
        return check_metric_oracles()
    raise ValueError(f"unknown suite {name!r}")


SUITES = ("grad", "moe", "metrics")
