"""Joint classifier/EBM training with persistent contrastive divergence.

Each step draws a labeled batch, evolves replay-buffer chains for ``eta`` SGLD
steps, and descends ``L_clf + gen_weight * L_gen`` with Adam, where

    L_clf = mean cross-entropy of p(y|x)
    L_gen = mean logsumexp f(x_neg) - mean logsumexp f(x_data)

Negatives are constants: no gradient flows through the sampling trajectory.
Divergence (non-finite loss, or a runaway energy gap) rolls back to the last
epoch snapshot and retries with a new seed, then a halved learning rate, then
doubled SGLD steps.
"""

from __future__ import annotations

import copy
import logging
from collections import deque
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from .data import LabeledDataset
from .diffcore import Tape
from .energy import JemModel
from .rng import make_rng
from .sampler import DivergenceError, ReplayBuffer, SamplerConfig, pcd_transition

__all__ = [
    "TrainConfig",
    "TrainState",
    "TrainingFailedError",
    "Adam",
    "loss_terms",
    "loss_terms_conditional",
    "log_prior_term",
    "loss_and_grads",
    "init_state",
    "recover",
    "train",
    "accuracy",
]

log = logging.getLogger(__name__)

OBJECTIVES = ("joint_factored", "conditional_factored")
RECOVERY_LADDER = ("seed", "lr", "eta")


@dataclass
class TrainConfig:
    lr: float = 1e-4
    decay_factor: float = 0.3
    decay_epochs: tuple = (50, 100)
    epochs: int = 150
    batch_size: int = 64
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    objective: str = "joint_factored"
    gen_weight: float = 1.0
    divergence_threshold: float = 100.0
    divergence_window: int = 50
    max_restarts: int = 6
    val_fraction: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if not 0 < self.decay_factor <= 1:
            raise ValueError("decay_factor must lie in (0, 1]")
        if self.objective not in OBJECTIVES:
            raise ValueError(f"unknown objective {self.objective!r}")
        self.decay_epochs = tuple(int(e) for e in self.decay_epochs)

    def lr_at(self, epoch: int) -> float:
        return self.lr * self.decay_factor ** sum(epoch >= e for e in self.decay_epochs)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["decay_epochs"] = list(self.decay_epochs)
        return d


class Adam:
    def __init__(self, shapes, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros(s) for s in shapes]
        self.v = [np.zeros(s) for s in shapes]
        self.t = 0

    def step(self, params, grads, lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass
class TrainState:
    model: JemModel
    buffer: ReplayBuffer
    optimizer: Adam
    rng: np.random.Generator
    epoch: int = 0
    step: int = 0
    lr_scale: float = 1.0
    eta: int = 20
    seed: int = 0
    restarts: int = 0
    actions: list = field(default_factory=list)
    gap_window: list = field(default_factory=list)
    history: list = field(default_factory=list)
    best_val: float = -1.0

    def snapshot(self) -> "TrainState":
        return copy.deepcopy(self)


class TrainingFailedError(RuntimeError):
    def __init__(self, message: str, state: TrainState):
        super().__init__(message)
        self.state = state


def accuracy(model, x, y) -> float:
    if len(y) == 0:
        return float("nan")
    return float(np.mean(np.argmax(model.logits(x), axis=1) == np.asarray(y)))


def _onehot(y: np.ndarray, k: int) -> np.ndarray:
    out = np.zeros((len(y), k))
    lab = y >= 0
    out[np.nonzero(lab)[0], y[lab]] = 1.0
    return out


def log_prior_term(y, prior) -> float:
    """Mean ``log p(y)`` under a class prior."""
    return float(np.mean(np.log(np.asarray(prior, dtype=np.float64)[np.asarray(y)])))


def loss_and_grads(model: JemModel, x, y, negatives, gen_weight: float = 1.0,
                   objective: str = "joint_factored", prior=None):
    """Loss terms and parameter gradients of the training objective.

    Labels of ``-1`` mark unlabeled rows, which contribute only to the
    generative term under the joint objective. Returns ``(terms, grads)``
    where ``terms`` holds ``l_clf``, ``l_gen``, ``loss``, ``e_data``, ``e_neg``.
    """
    net = model.net
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    neg = np.asarray(negatives, dtype=np.float64)
    k = model.num_classes
    with Tape() as tape:
        f_data = net(x)
        f_neg = net(neg)
        lse_data = f_data.logsumexp(axis=-1)
        lse_neg = f_neg.logsumexp(axis=-1)
        if objective == "joint_factored":
            n_lab = max(int(np.sum(y >= 0)), 1)
            l_clf = -(f_data.log_softmax(axis=-1) * _onehot(y, k)).sum() * (1.0 / n_lab)
            l_gen = lse_neg.mean() - lse_data.mean()
            loss = l_clf + gen_weight * l_gen if gen_weight != 0.0 else l_clf
        else:
            mask = _onehot(y, k)
            l_gen = (f_neg * mask).sum(axis=-1).mean() - (f_data * mask).sum(axis=-1).mean()
            loss = l_gen
    grads = tape.gradient(loss, net.parameters)
    terms = {
        "l_clf": float(-np.mean(np.sum(model.log_p_y_given_x(x) * _onehot(y, k), axis=1)[y >= 0]))
        if np.any(y >= 0) else 0.0,
        "l_gen": l_gen.item(),
        "loss": loss.item(),
        "e_data": float(-lse_data.data.mean()),
        "e_neg": float(-lse_neg.data.mean()),
    }
    if objective == "conditional_factored":
        lp = 0.0 if prior is None else log_prior_term(y, prior)
        terms["loss"] = terms["l_gen"] - lp
    return terms, grads


def loss_terms(model: JemModel, batch_x, batch_y, negatives):
    """``(L_clf, L_gen)`` for a batch and fixed negatives."""
    terms, _ = loss_and_grads(model, batch_x, batch_y, negatives)
    return terms["l_clf"], terms["l_gen"]


def loss_terms_conditional(model: JemModel, batch_x, batch_y, negatives_y, prior=None) -> float:
    """Contrastive loss on ``f(x)[y]`` minus ``log p(y)`` (empirical prior by default)."""
    y = np.asarray(batch_y, dtype=np.int64)
    if prior is None:
        prior = np.bincount(y, minlength=model.num_classes) / len(y)
    terms, _ = loss_and_grads(model, batch_x, y, negatives_y, objective="conditional_factored", prior=prior)
    return terms["loss"]


def init_state(model: JemModel, cfg: TrainConfig, rng: np.random.Generator | None = None) -> TrainState:
    rng = make_rng(cfg.seed, "train") if rng is None else rng
    buf = ReplayBuffer(cfg.sampler.buffer_size, model.input_dim)
    buf.fill_from_p0(cfg.sampler, rng)
    opt = Adam([p.shape for p in model.net.parameters], cfg.beta1, cfg.beta2, cfg.adam_eps)
    return TrainState(model=model, buffer=buf, optimizer=opt, rng=rng, eta=cfg.sampler.eta, seed=cfg.seed)


def recover(state: TrainState, cfg: TrainConfig) -> TrainState:
    """Next rung of the retry ladder, applied to a restored snapshot."""
    new = state.snapshot()
    action = RECOVERY_LADDER[state.restarts % len(RECOVERY_LADDER)]
    if action == "seed":
        new.seed = state.seed + 1
        new.rng = make_rng(new.seed, "train", "restart", state.restarts + 1)
    elif action == "lr":
        new.lr_scale = state.lr_scale * 0.5
    else:
        new.eta = state.eta * 2
    new.restarts = state.restarts + 1
    new.actions = state.actions + [action]
    log.warning("divergence: restart %d (%s) from epoch %d", new.restarts, action, new.epoch)
    return new


def _check_divergence(state: TrainState, terms: dict, cfg: TrainConfig) -> None:
    if not all(np.isfinite(v) for v in terms.values()):
        raise DivergenceError("non-finite loss")
    if cfg.gen_weight == 0.0 and cfg.objective == "joint_factored":
        return
    state.gap_window.append(abs(terms["e_neg"] - terms["e_data"]))
    del state.gap_window[: -cfg.divergence_window]
    if np.mean(state.gap_window) > cfg.divergence_threshold:
        raise DivergenceError(f"energy gap {np.mean(state.gap_window):.3g} above threshold")


def _run_epoch(state: TrainState, train_ds: LabeledDataset, cfg: TrainConfig, prior, inject) -> dict:
    model, rng = state.model, state.rng
    scfg = cfg.sampler
    lr = cfg.lr_at(state.epoch) * state.lr_scale
    perm = rng.permutation(len(train_ds))
    sums = deque()
    for start in range(0, len(perm), cfg.batch_size):
        idx = perm[start : start + cfg.batch_size]
        x, y = train_ds.batch(idx, rng)
        cond = None
        if cfg.objective == "conditional_factored":
            cond = np.where(y >= 0, y, rng.integers(0, model.num_classes, size=len(y)))
        if cfg.gen_weight == 0.0 and cfg.objective == "joint_factored":
            neg = x  # plain classifier: negatives would not enter the loss
        else:
            neg = pcd_transition(model, state.buffer, scfg, rng, len(idx), eta=state.eta, conditional_y=cond)
        terms, grads = loss_and_grads(model, x, y, neg, cfg.gen_weight, cfg.objective, prior)
        fault = inject(state.step, state.restarts) if inject else None
        if fault == "nan":
            terms["loss"] = float("nan")
        elif fault == "gap":
            terms["e_neg"] = terms["e_data"] + 1e6
        _check_divergence(state, terms, cfg)
        state.optimizer.step(model.net.parameters, grads, lr)
        state.step += 1
        sums.append(terms)
    return {key: float(np.mean([t[key] for t in sums])) for key in ("l_clf", "l_gen", "e_data", "e_neg")} | {"lr": lr}


def train(
    model: JemModel,
    dataset: LabeledDataset,
    cfg: TrainConfig,
    rng: np.random.Generator | None = None,
    *,
    val: LabeledDataset | None = None,
    state: TrainState | None = None,
    on_epoch: Callable[[TrainState, dict], None] | None = None,
    inject: Callable[[int, int], str | None] | None = None,
):
    """Train ``model`` in place; returns ``(model, metrics)``.

    ``dataset`` should already be preprocessed (ideally a re-noising view).
    Without ``val`` a ``cfg.val_fraction`` split is taken by seeded shuffle.
    Pass ``state`` to resume; ``on_epoch`` receives each completed epoch's
    state (for checkpointing) and metrics; ``inject`` is a fault-injection
    hook returning ``"nan"`` or ``"gap"`` for a given ``(step, restarts)``.
    """
    if val is None:
        dataset, val = dataset.split(cfg.val_fraction, make_rng(cfg.seed, "split"))
    if state is None:
        state = init_state(model, cfg, rng)
    else:
        model.net = state.model.net
        state.model = model
    labelled = dataset.labels[dataset.labels >= 0]
    prior = np.bincount(labelled, minlength=model.num_classes) / max(len(labelled), 1)
    good = state.snapshot()
    while state.epoch < cfg.epochs:
        try:
            stats = _run_epoch(state, dataset, cfg, prior, inject)
        except DivergenceError as exc:
            if good.restarts >= cfg.max_restarts:
                raise TrainingFailedError(f"gave up after {good.restarts} restarts: {exc}", good) from exc
            state = recover(good, cfg)
            model.net = state.model.net
            good = state.snapshot()
            continue
        val_acc = accuracy(model, val.inputs, val.labels)
        metrics = {
            "epoch": state.epoch,
            "train_acc": accuracy(model, dataset.inputs, dataset.labels),
            "val_acc": val_acc,
            "e_data_mean": stats["e_data"],
            "e_neg_mean": stats["e_neg"],
            "l_clf": stats["l_clf"],
            "l_gen": stats["l_gen"],
            "lr": stats["lr"],
            "restarts": state.restarts,
        }
        state.history.append(metrics)
        state.epoch += 1
        state.best_val = max(state.best_val, val_acc)
        good = state.snapshot()
        if on_epoch is not None:
            on_epoch(state, metrics)
    model.net = state.model.net
    return model, state.history
