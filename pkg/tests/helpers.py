"""Independent oracles shared by the test modules."""

from __future__ import annotations

import mpmath
import numpy as np

from jemlab.diffcore import Network


def random_net(rng: np.random.Generator, activation: str | None = None, max_width: int = 6) -> Network:
    d = int(rng.integers(1, 5))
    k = int(rng.integers(1, 5))
    hidden = [int(rng.integers(2, max_width + 1)) for _ in range(int(rng.integers(1, 3)))]
    act = activation or str(rng.choice(["tanh", "softplus", "relu"]))
    net = Network.mlp([d, *hidden, k], act, rng=rng)
    for p in net.parameters:
        p.data = p.data + 0.3 * rng.standard_normal(p.shape)
    return net


def central_diff(fn, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar ``fn`` at every entry of ``x``."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        old = x[i]
        x[i] = old + h
        up = fn(x)
        x[i] = old - h
        down = fn(x)
        x[i] = old
        g[i] = (up - down) / (2 * h)
    return g


def rel_err(a, b, floor: float = 1e-3) -> float:
    """Max entrywise relative error, with ``floor`` guarding entries near zero."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


def mp_forward(net: Network, x) -> list:
    """Forward pass in 50-digit arithmetic, written without numpy."""
    with mpmath.workdps(50):
        v = [mpmath.mpf(float(t)) for t in np.ravel(x)]
        for layer in net.layers:
            if hasattr(layer, "weight"):
                w, b = layer.weight.data, layer.bias.data
                v = [sum(mpmath.mpf(float(w[o, i])) * v[i] for i in range(len(v))) + mpmath.mpf(float(b[o]))
                     for o in range(w.shape[0])]
            elif layer.name == "tanh":
                v = [mpmath.tanh(t) for t in v]
            elif layer.name == "relu":
                v = [t if t > 0 else mpmath.mpf(0) for t in v]
            else:
                v = [mpmath.log(1 + mpmath.exp(t)) for t in v]
        return v


def mp_logsumexp(values) -> float:
    with mpmath.workdps(50):
        return float(mpmath.log(mpmath.fsum(mpmath.exp(mpmath.mpf(float(t))) for t in values)))


def brute_ece(conf, correct, m: int = 20) -> float:
    """ECE by looping over buckets and testing membership interval by interval."""
    n = len(conf)
    total = 0.0
    for b in range(1, m + 1):
        lo, hi = (b - 1) / m, b / m
        members = [i for i in range(n) if (lo < conf[i] <= hi) or (b == 1 and conf[i] == 0.0)]
        if not members:
            continue
        acc = sum(float(correct[i]) for i in members) / len(members)
        cf = sum(float(conf[i]) for i in members) / len(members)
        total += len(members) / n * abs(acc - cf)
    return total


def pairwise_auroc(pos, neg) -> float:
    s = 0.0
    for p in pos:
        for q in neg:
            s += 1.0 if p > q else 0.5 if p == q else 0.0
    return s / (len(pos) * len(neg))
