"""Calibration, AUROC and out-of-distribution scoring."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from .diffcore import logsumexp

__all__ = [
    "ReliabilityTable",
    "OodScoreReport",
    "ece",
    "auroc",
    "score_logp",
    "score_maxprob",
    "score_approx_mass",
    "SCORES",
    "ood_report",
    "two_column_text",
]


@dataclass
class ReliabilityTable:
    counts: np.ndarray
    confidence: np.ndarray  # mean confidence per bucket (0 where empty)
    accuracy: np.ndarray  # mean accuracy per bucket (0 where empty)
    ece: float

    @property
    def num_buckets(self) -> int:
        return len(self.counts)

    def edges(self) -> np.ndarray:
        return np.linspace(0.0, 1.0, self.num_buckets + 1)

    def to_dict(self) -> dict:
        return {
            "ece": self.ece,
            "buckets": [
                {"upper": float(u), "count": int(c), "confidence": float(cf), "accuracy": float(a)}
                for u, c, cf, a in zip(self.edges()[1:], self.counts, self.confidence, self.accuracy)
            ],
        }


def ece(confidences, correct, num_buckets: int = 20) -> ReliabilityTable:
    """Expected calibration error over equal-width right-closed buckets.

    Bucket ``b = ceil(conf * M)`` clamped to ``[1, M]``, so a confidence of
    exactly 0 lands in the first bucket.
    """
    conf = np.asarray(confidences, dtype=np.float64)
    hit = np.asarray(correct, dtype=np.float64)
    if conf.shape != hit.shape or conf.ndim != 1:
        raise ValueError("confidences and correct flags must be 1-D and the same length")
    if len(conf) == 0:
        raise ValueError("need at least one prediction")
    if np.any(conf < 0) or np.any(conf > 1):
        raise ValueError("confidences must lie in [0, 1]")
    m = int(num_buckets)
    b = np.clip(np.ceil(conf * m).astype(np.int64), 1, m) - 1
    counts = np.bincount(b, minlength=m)
    conf_sum = np.bincount(b, weights=conf, minlength=m)
    hit_sum = np.bincount(b, weights=hit, minlength=m)
    safe = np.maximum(counts, 1)
    mean_conf = np.where(counts > 0, conf_sum / safe, 0.0)
    mean_acc = np.where(counts > 0, hit_sum / safe, 0.0)
    value = float(np.sum(counts / len(conf) * np.abs(mean_acc - mean_conf)))
    return ReliabilityTable(counts, mean_conf, mean_acc, value)


def auroc(pos_scores, neg_scores) -> float:
    """P(pos > neg) with ties counted one half, via midrank sums."""
    pos = np.asarray(pos_scores, dtype=np.float64).ravel()
    neg = np.asarray(neg_scores, dtype=np.float64).ravel()
    if len(pos) == 0 or len(neg) == 0:
        raise ValueError("auroc needs non-empty score arrays")
    ranks = rankdata(np.concatenate([pos, neg]), method="average")
    n_pos, n_neg = len(pos), len(neg)
    u = ranks[:n_pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def score_logp(model, x) -> np.ndarray:
    return logsumexp(model.logits(x), axis=-1)


def score_maxprob(model, x) -> np.ndarray:
    return np.exp(np.max(model.log_p_y_given_x(x), axis=-1))


def score_approx_mass(model, x) -> np.ndarray:
    """Negative L2 norm of the input gradient of ``log p~(x)``."""
    g = model.grad_logp(np.asarray(x, dtype=np.float64))
    return -np.linalg.norm(g.reshape(g.shape[0], -1) if g.ndim > 1 else g[None], axis=-1)


SCORES = {"logp": score_logp, "maxprob": score_maxprob, "approx_mass": score_approx_mass}


@dataclass
class OodScoreReport:
    score: str
    in_scores: np.ndarray
    ood_scores: dict = field(default_factory=dict)
    auroc: dict = field(default_factory=dict)
    histograms: dict = field(default_factory=dict)  # name -> (edges, in_counts, ood_counts)

    def to_dict(self) -> dict:
        return {
            "score": self.score,
            "auroc": dict(self.auroc),
            "in_mean": float(np.mean(self.in_scores)),
            "ood_mean": {k: float(np.mean(v)) for k, v in self.ood_scores.items()},
            "histograms": {
                k: {"edges": e.tolist(), "in_counts": a.tolist(), "ood_counts": b.tolist()}
                for k, (e, a, b) in self.histograms.items()
            },
        }


def default_ood_sets(dim: int, n: int, rng: np.random.Generator) -> dict:
    """The all-zeros "constant" set and a uniform-box set."""
    return {"constant": np.zeros((n, dim)), "uniform": rng.uniform(-1.0, 1.0, size=(n, dim))}


def ood_report(model, in_x, ood_sets: dict, scores=("logp", "maxprob", "approx_mass"), bins: int = 30) -> list:
    """AUROC (in-distribution as positives) and shared-edge histograms per score and OOD set."""
    if not ood_sets:
        raise ValueError("need at least one OOD set")
    reports = []
    for name in scores:
        fn = SCORES[name]
        s_in = fn(model, in_x)
        rep = OodScoreReport(name, s_in)
        for ood_name, ood_x in ood_sets.items():
            if len(ood_x) == 0:
                raise ValueError(f"OOD set {ood_name!r} is empty")
            s_ood = fn(model, ood_x)
            rep.ood_scores[ood_name] = s_ood
            rep.auroc[ood_name] = auroc(s_in, s_ood)
            both = np.concatenate([s_in, s_ood])
            lo, hi = float(np.min(both)), float(np.max(both))
            if hi <= lo:
                hi = lo + 1.0
            edges = np.linspace(lo, hi, bins + 1)
            rep.histograms[ood_name] = (edges, np.histogram(s_in, edges)[0], np.histogram(s_ood, edges)[0])
        reports.append(rep)
    return reports


def two_column_text(a, b) -> str:
    return "".join(f"{float(u)!r} {float(v)!r}\n" for u, v in zip(a, b))
