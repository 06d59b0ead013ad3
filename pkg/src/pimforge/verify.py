"""On-demand oracle checks behind ``pimforge verify``."""
from __future__ import annotations

import itertools

import numpy as np

from . import trainer
from .admm import quantize_model, layer_quant_specs
from .bitserial import bitwise_conv2d, int_conv2d
from .mapper import LUT, PHYSICAL, build_layout, simulate
from .model import QuantSpec, build_network
from .sparsity import KINDS, SparsityConstraint, group_count, is_feasible, project


def check_bitserial(rng, n=200):
    for _ in range(n):
        c, f = rng.integers(1, 5, size=2)
        h, w = rng.integers(1, 9, size=2)
        kh, kw = rng.integers(1, min(h, 3) + 1), rng.integers(1, min(w, 3) + 1)
        bi, bw = rng.integers(1, 9, size=2)
        x = rng.integers(0, 2**bi, size=(c, h, w))
        wt = rng.integers(-(2**bw) + 1, 2**bw, size=(f, c, kh, kw))
        out, _ = bitwise_conv2d(x, wt, input_bits=int(bi), weight_bits=int(bw))
        if not np.array_equal(out, int_conv2d(x, wt)):
            return False, f"mismatch at input {x.shape} weights {wt.shape}"
    return True, f"{n} random layers exact"


def brute_force_distance(w, kind, budget):
    """Smallest ||w - z|| over z keeping any <= budget groups verbatim."""
    f, c = w.shape[:2]
    groups = list(np.ndindex(f)) if kind == "filter" else (
        list(np.ndindex(c)) if kind == "channel" else list(np.ndindex(f, c)))
    best = np.inf
    for k in range(budget + 1):
        for keep in itertools.combinations(range(len(groups)), k):
            z = np.zeros_like(w)
            for g in keep:
                idx = groups[g]
                if kind == "filter":
                    z[idx[0]] = w[idx[0]]
                elif kind == "channel":
                    z[:, idx[0]] = w[:, idx[0]]
                else:
                    z[idx] = w[idx]
            best = min(best, float(np.linalg.norm(w - z)))
    return best


def check_projection(rng, n=30):
    for _ in range(n):
        f, c = rng.integers(1, 4, size=2)
        w = rng.normal(size=(f, c, 2, 2))
        for kind in KINDS:
            for budget in range(1, group_count(w.shape, kind) + 1):
                con = SparsityConstraint(kind, budget)
                p = project(w, con)
                if not is_feasible(p, con) or not np.array_equal(project(p, con), p):
                    return False, "feasibility or idempotence failed"
                if np.linalg.norm(w - p) > brute_force_distance(w, kind, budget) + 1e-9:
                    return False, f"not optimal for {kind} budget {budget}"
    return True, f"{n} tensors, all kinds and budgets optimal"


def check_gradients(rng):
    model = build_network((1, 8, 8), [(2, 3), (3, 2)], 4, seed=int(rng.integers(1 << 30)))
    for layer in model.layers:
        layer.biases = rng.normal(0, 0.1, size=layer.biases.shape)
    x = rng.normal(size=(3, 1, 8, 8))
    y = rng.integers(0, 4, size=3)
    _, grads = trainer.loss_and_gradients(model, x, y)
    eps = 1e-5
    worst = 0.0
    for li, layer in enumerate(model.layers):
        for idx in np.ndindex(layer.weights.shape):
            old = layer.weights[idx]
            layer.weights[idx] = old + eps
            lp = trainer.cross_entropy(trainer.forward(model, x), y)
            layer.weights[idx] = old - eps
            lm = trainer.cross_entropy(trainer.forward(model, x), y)
            layer.weights[idx] = old
            num = (lp - lm) / (2 * eps)
            ana = grads[li][0][idx]
            err = abs(num - ana) / max(abs(num), abs(ana), 1e-7)
            worst = max(worst, err if max(abs(num), abs(ana)) > 1e-7 else 0.0)
    return worst < 1e-4, f"max relative error {worst:.2e}"


def check_pim(rng):
    model = build_network((1, 10, 10), [(4, 3), (6, 2)], 5, seed=int(rng.integers(1 << 30)))
    model.layers[1].weights[:, 1] = 0.0
    model.layers[1].weights[2, 3] = 0.0
    model = quantize_model(model, layer_quant_specs(model, QuantSpec(8, 8, 0, True, 5)))
    x = rng.uniform(0, 1, size=(10, 1, 10, 10))
    ref = trainer.quantized_forward(model, x)
    outs = [simulate(build_layout(model, mode), x) for mode in (PHYSICAL, LUT)]
    same = all(np.array_equal(o.logits, ref) for o in outs)
    ops = [sum(t.and_ops for t in o.traces) for o in outs]
    return same and ops[0] == ops[1], f"bit-exact {same}, and-ops physical/lut {ops[0]}/{ops[1]}"


def run_all(seed: int = 0, quick: bool = True):
    rng = np.random.default_rng(seed)
    checks = [
        ("bit-serial exactness", lambda: check_bitserial(rng, 200 if quick else 1000)),
        ("projection optimality", lambda: check_projection(rng, 30 if quick else 200)),
        ("gradient check", lambda: check_gradients(rng)),
        ("pim equivalence", lambda: check_pim(rng)),
    ]
    results = []
    for name, fn in checks:
        ok, detail = fn()
        results.append((name, bool(ok), detail))
    return results
