"""Adversarial evaluation of SGLD-refined classifiers.

A defended classifier runs ``k`` SGLD steps seeded at the input before
classifying and averages ``log p(y|x)`` over ``n`` refinements. Attacks see
the refinement through first-order expectation-over-transformations: each
refined copy contributes its own input gradient, treating the refinement map
as identity in the backward pass, so no second derivatives are needed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .diffcore import Tape
from .sampler import SamplerConfig, draw_p0, sgld_chain

__all__ = [
    "AttackConfig",
    "Defended",
    "refine",
    "eot_logits",
    "pgd_attack",
    "pgd_minimal_eps",
    "pointwise_attack",
    "transfer_eval",
    "transfer_distances",
    "robustness_curve",
    "DistalResult",
    "distal_generate",
]

NORMS = ("linf", "l2")


@dataclass
class AttackConfig:
    norm: str = "linf"
    pgd_iters: int = 40
    restarts: int = 20
    eot_samples: int = 5
    refine_steps: tuple = (0, 1, 10)
    search_iters: int = 12
    step_scale: float = 2.5
    eps_max: float = 0.0  # 0 selects 2 (linf) or 2*sqrt(D) (l2)
    votes: int = 5
    num_inputs: int = 300

    def __post_init__(self):
        self.norm = self.norm.lower()
        if self.norm not in NORMS:
            raise ValueError(f"norm must be one of {NORMS}")
        if self.pgd_iters < 1 or self.eot_samples < 1 or self.restarts < 1:
            raise ValueError("pgd_iters, eot_samples and restarts must be >= 1")
        self.refine_steps = tuple(int(k) for k in self.refine_steps)

    def bracket(self, dim: int) -> float:
        if self.eps_max > 0:
            return float(self.eps_max)
        return 2.0 if self.norm == "linf" else 2.0 * float(np.sqrt(dim))


def refine(model, x, k: int, cfg: SamplerConfig, rng: np.random.Generator) -> np.ndarray:
    """``k`` unconditional SGLD steps seeded at ``x``."""
    if k < 0:
        raise ValueError("k must be >= 0")
    x = np.asarray(x, dtype=np.float64)
    if k == 0:
        return x
    return sgld_chain(model, x, cfg, rng, k)


def eot_logits(model, x, n: int, k: int, cfg: SamplerConfig, rng: np.random.Generator) -> np.ndarray:
    """Mean of ``log p(y|x_i)`` over ``n`` independent ``k``-step refinements."""
    if n < 1:
        raise ValueError("n must be >= 1")
    x = np.asarray(x, dtype=np.float64)
    if k == 0:
        return model.log_p_y_given_x(x)
    single = x.ndim == 1
    xb = np.atleast_2d(x)
    rep = np.tile(xb, (n, 1))
    lp = model.log_p_y_given_x(refine(model, rep, k, cfg, rng)).reshape(n, len(xb), -1).mean(axis=0)
    return lp[0] if single else lp


@dataclass
class Defended:
    """A JEM classifier behind ``k`` refinement steps and ``n``-sample EOT."""

    model: object
    k: int = 0
    n: int = 5
    sampler: SamplerConfig = field(default_factory=SamplerConfig)

    @property
    def deterministic(self) -> bool:
        return self.k == 0

    def log_probs(self, x, rng) -> np.ndarray:
        return eot_logits(self.model, x, self.n, self.k, self.sampler, rng)

    def predict(self, x, rng) -> np.ndarray:
        return np.argmax(self.log_probs(x, rng), axis=-1)

    def predict_majority(self, x, rng, votes: int = 5) -> np.ndarray:
        """Majority label over ``votes`` fresh EOT evaluations (ties to the lowest label)."""
        if self.deterministic:
            return self.predict(x, rng)
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        k = self.model.num_classes
        tally = np.zeros((len(x), k), dtype=np.int64)
        for _ in range(votes):
            tally[np.arange(len(x)), self.predict(x, rng)] += 1
        return np.argmax(tally, axis=1)

    def loss_grad(self, x, y, rng):
        """EOT log-probs and the input gradient of their cross-entropy."""
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.int64)
        n = 1 if self.deterministic else self.n
        rep = np.tile(x, (n, 1))
        xr = refine(self.model, rep, self.k, self.sampler, rng)
        yr = np.tile(y, n)
        with Tape() as tape:
            xt = tape.watch(xr.copy())
            lp = self.model.net(xt).log_softmax(axis=-1)
            loss = -lp.index_select(yr).sum()
        (g,) = tape.gradient(loss, [xt])
        logp = lp.data.reshape(n, len(x), -1).mean(axis=0)
        return logp, g.reshape(n, len(x), -1).mean(axis=0)


def _project(x0, x_adv, eps, norm):
    delta = x_adv - x0
    if norm == "linf":
        delta = np.clip(delta, -eps[:, None], eps[:, None])
    else:
        nrm = np.linalg.norm(delta, axis=1)
        scale = np.where(nrm > eps, eps / np.maximum(nrm, 1e-300), 1.0)
        delta = delta * scale[:, None]
    return np.clip(x0 + delta, -1.0, 1.0)


def _random_start(x0, eps, norm, rng):
    if norm == "linf":
        delta = rng.uniform(-1.0, 1.0, size=x0.shape) * eps[:, None]
    else:
        d = rng.standard_normal(x0.shape)
        d /= np.maximum(np.linalg.norm(d, axis=1, keepdims=True), 1e-300)
        r = eps * rng.random(len(x0)) ** (1.0 / x0.shape[1])
        delta = d * r[:, None]
    return _project(x0, x0 + delta, eps, norm)


def _ascent_step(g, step, norm):
    if norm == "linf":
        return step[:, None] * np.sign(g)
    scale = np.max(np.abs(g), axis=1, keepdims=True)
    g = g / np.where(scale > 0, scale, 1.0)
    nrm = np.linalg.norm(g, axis=1, keepdims=True)
    return step[:, None] * g / np.where(nrm > 0, nrm, 1.0)


def pgd_attack(defended: Defended, x, y, eps, ac: AttackConfig, rng: np.random.Generator):
    """Restarted PGD at per-row budgets ``eps``.

    Returns ``(success, x_adv)``; success is confirmed by a majority of
    ``ac.votes`` fresh defended evaluations.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    eps = np.broadcast_to(np.asarray(eps, dtype=np.float64), (len(x),))
    r = ac.restarts
    x0 = np.repeat(x, r, axis=0)
    yr = np.repeat(y, r)
    er = np.repeat(eps, r)
    step = ac.step_scale * er / ac.pgd_iters
    x_adv = _random_start(x0, er, ac.norm, rng)
    found = np.zeros(len(x0), dtype=bool)
    cand = x_adv.copy()
    for _ in range(ac.pgd_iters):
        logp, g = defended.loss_grad(x_adv, yr, rng)
        hit = (np.argmax(logp, axis=1) != yr) & ~found
        cand[hit] = x_adv[hit]
        found |= hit
        x_adv = _project(x0, x_adv + _ascent_step(g, step, ac.norm), er, ac.norm)
    logp = defended.log_probs(x_adv, rng)
    hit = (np.argmax(logp, axis=-1) != yr) & ~found
    cand[hit] = x_adv[hit]
    found |= hit

    verified = np.zeros(len(x0), dtype=bool)
    if np.any(found):
        idx = np.nonzero(found)[0]
        verified[idx] = defended.predict_majority(cand[idx], rng, ac.votes) != yr[idx]
    verified = verified.reshape(len(x), r)
    success = verified.any(axis=1)
    first = np.argmax(verified, axis=1)
    x_best = cand.reshape(len(x), r, -1)[np.arange(len(x)), first]
    x_best[~success] = x[~success]
    return success, x_best


def pgd_minimal_eps(defended: Defended, x, y, ac: AttackConfig, rng: np.random.Generator):
    """Per-input minimal successful budget by bisection over ``[0, eps_max]``.

    Inputs are clipped into the data box first. Returns ``(eps, x_adv)``;
    ``eps`` is 0 for inputs the defense already misclassifies and ``inf``
    when the attack fails at ``eps_max``.
    """
    x = np.clip(np.atleast_2d(np.asarray(x, dtype=np.float64)), -1.0, 1.0)
    y = np.atleast_1d(np.asarray(y, dtype=np.int64))
    n = len(x)
    out = np.full(n, np.inf)
    adv = x.copy()
    wrong = defended.predict_majority(x, rng, ac.votes) != y
    out[wrong] = 0.0
    active = np.nonzero(~wrong)[0]
    if len(active) == 0:
        return out, adv
    hi = np.full(len(active), ac.bracket(x.shape[1]))
    ok, xa = pgd_attack(defended, x[active], y[active], hi, ac, rng)
    active, hi, xa = active[ok], hi[ok], xa[ok]
    adv[active] = xa
    lo = np.zeros(len(active))
    for _ in range(ac.search_iters):
        if len(active) == 0:
            break
        mid = 0.5 * (lo + hi)
        ok, xa = pgd_attack(defended, x[active], y[active], mid, ac, rng)
        hi = np.where(ok, mid, hi)
        lo = np.where(ok, lo, mid)
        adv[active[ok]] = xa[ok]
    out[active] = hi
    return out, adv


def _norm(delta, norm):
    return float(np.max(np.abs(delta))) if norm == "linf" else float(np.linalg.norm(delta))


def pointwise_attack(defended: Defended, x, y_true: int, norm: str, rng: np.random.Generator,
                     votes: int = 5, noise_levels: int = 100, repetitions: int = 10, search_iters: int = 10) -> float:
    """Gradient-free minimal perturbation from a salt-and-pepper start.

    Coordinates are reset to their clean values while the input stays
    misclassified, then each remaining coordinate is bisected toward its
    clean value; repeated until nothing improves. Returns the norm of the
    final perturbation (``inf`` if no misclassified start was found).
    """
    x = np.clip(np.asarray(x, dtype=np.float64), -1.0, 1.0)
    norm = norm.lower()

    def adversarial(z) -> bool:
        return int(defended.predict_majority(z[None], rng, votes)[0]) != int(y_true)

    if adversarial(x):
        return 0.0
    start = None
    for _ in range(repetitions):
        for p in np.linspace(0.0, 1.0, noise_levels + 1)[1:]:
            u = rng.random(x.shape)
            z = np.where(u < p / 2, -1.0, np.where(u > 1 - p / 2, 1.0, x))
            if adversarial(z):
                start = z
                break
        if start is not None:
            break
    if start is None:
        return np.inf

    adv = start.copy()
    while True:
        improved = False
        for i in rng.permutation(len(x)):
            if adv[i] == x[i]:
                continue
            trial = adv.copy()
            trial[i] = x[i]
            if adversarial(trial):
                adv = trial
                improved = True
        for i in rng.permutation(len(x)):
            if adv[i] == x[i]:
                continue
            good, bad = adv[i], x[i]
            for _ in range(search_iters):
                mid = 0.5 * (good + bad)
                trial = adv.copy()
                trial[i] = mid
                if adversarial(trial):
                    good = mid
                else:
                    bad = mid
            if good != adv[i]:
                adv[i] = good
                improved = True
        if not improved:
            break
    return _norm(adv - x, norm)


def transfer_eval(defended: Defended, adv_x, y_true, rng: np.random.Generator, votes: int = 5) -> float:
    """Accuracy of ``defended`` on adversarial inputs crafted against another model."""
    adv_x = np.asarray(adv_x, dtype=np.float64)
    if len(adv_x) == 0:
        raise ValueError("no adversarial examples to evaluate")
    pred = defended.predict_majority(adv_x, rng, votes)
    return float(np.mean(pred == np.asarray(y_true)))


def transfer_distances(defended: Defended, x, adv_x, y_true, norm: str, rng, votes: int = 5) -> np.ndarray:
    """Perturbation sizes, set to ``inf`` wherever ``defended`` recovers the true class."""
    adv_x = np.asarray(adv_x, dtype=np.float64)
    delta = adv_x - np.asarray(x, dtype=np.float64)
    d = np.max(np.abs(delta), axis=1) if norm == "linf" else np.linalg.norm(delta, axis=1)
    pred = defended.predict_majority(adv_x, rng, votes)
    return np.where(pred == np.asarray(y_true), np.inf, d)


def robustness_curve(min_eps, grid) -> np.ndarray:
    """Accuracy at each budget in ``grid``: fraction of inputs whose minimal eps exceeds it."""
    e = np.asarray(min_eps, dtype=np.float64)
    return np.array([np.mean(e > g) for g in np.asarray(grid, dtype=np.float64)])


@dataclass
class DistalResult:
    x: np.ndarray
    confidence: np.ndarray
    trajectory: np.ndarray  # [iters + 1, n] confidences
    reached: np.ndarray


def distal_generate(model, y_target: int, rng: np.random.Generator, conf_target: float = 0.9,
                    max_iters: int = 200, n: int = 1, step: float = 0.02,
                    init: SamplerConfig | None = None) -> DistalResult:
    """Normalized gradient ascent on ``log p(y_target|x)`` from p0, projected to the box.

    A chain stops moving once its confidence reaches ``conf_target``.
    """
    if not 0.0 < conf_target < 1.0:
        raise ValueError("conf_target must lie in (0, 1)")
    k = model.num_classes
    if not 0 <= y_target < k:
        raise IndexError("target class out of range")
    x = draw_p0(init or SamplerConfig(), rng, n, model.input_dim)
    yt = np.full(n, int(y_target))
    conf = np.exp(model.log_p_y_given_x(x)[:, y_target])
    traj = [conf.copy()]
    done = conf >= conf_target
    for _ in range(max_iters):
        if np.all(done):
            traj.append(conf.copy())
            continue
        with Tape() as tape:
            xt = tape.watch(x.copy())
            obj = model.net(xt).log_softmax(axis=-1).index_select(yt).sum()
        (g,) = tape.gradient(obj, [xt])
        nrm = np.linalg.norm(g, axis=1, keepdims=True)
        move = np.where(nrm > 0, g / np.where(nrm > 0, nrm, 1.0), 0.0) * step
        x = np.where(done[:, None], x, np.clip(x + move, -1.0, 1.0))
        conf = np.exp(model.log_p_y_given_x(x)[:, y_target])
        done |= conf >= conf_target
        traj.append(conf.copy())
    return DistalResult(x, conf, np.array(traj), conf >= conf_target)
