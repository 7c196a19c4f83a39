"""SGLD chains, the replay buffer and persistent contrastive divergence.

Any object exposing ``grad_logp(x, y=None)`` (input gradient of the
unnormalized log-density, or of logit ``y``) can drive a chain; that is
:class:`~jemlab.energy.JemModel` in practice and an analytic energy in tests.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

__all__ = [
    "DivergenceError",
    "SamplerConfig",
    "ReplayBuffer",
    "sgld_step",
    "sgld_chain",
    "draw_p0",
    "draw_init",
    "pcd_transition",
    "sample_px_method1",
    "sample_px_method2",
]


class DivergenceError(FloatingPointError):
    """A chain or loss produced non-finite values."""


@dataclass
class SamplerConfig:
    alpha: float = 1.0
    sigma: float = 0.01
    eta: int = 20
    rho: float = 0.05
    init: str = "uniform"
    proper_mode: bool = False
    buffer_size: int = 10000

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")
        if self.sigma < 0:
            raise ValueError("sigma must be non-negative")
        if self.eta < 0:
            raise ValueError("eta must be non-negative")
        if not 0.0 <= self.rho <= 1.0:
            raise ValueError("rho must lie in [0, 1]")
        if self.init not in ("uniform", "normal"):
            raise ValueError(f"unknown p0 {self.init!r}")
        if self.buffer_size < 1:
            raise ValueError("buffer_size must be positive")

    @property
    def drift(self) -> float:
        return 0.5 * self.alpha if self.proper_mode else self.alpha

    @property
    def noise(self) -> float:
        return float(np.sqrt(self.alpha)) if self.proper_mode else self.sigma

    def to_dict(self) -> dict:
        return asdict(self)


def draw_p0(cfg: SamplerConfig, rng: np.random.Generator, n: int, dim: int) -> np.ndarray:
    if cfg.init == "uniform":
        return rng.uniform(-1.0, 1.0, size=(n, dim))
    return rng.standard_normal((n, dim))


def sgld_step(model, x, cfg: SamplerConfig, rng: np.random.Generator, conditional_y=None) -> np.ndarray:
    """One Langevin update ``x + drift * grad log p(x) + noise * N(0, I)``.

    Improper mode uses ``drift = alpha`` and ``noise = sigma``; proper mode uses
    ``alpha / 2`` and ``sqrt(alpha)``.
    """
    x = np.asarray(x, dtype=np.float64)
    g = model.grad_logp(x, conditional_y)
    if not np.all(np.isfinite(g)):
        raise DivergenceError("non-finite input gradient during SGLD")
    out = x + cfg.drift * g
    if cfg.noise > 0.0:
        out = out + cfg.noise * rng.standard_normal(x.shape)
    return out


def sgld_chain(model, x, cfg: SamplerConfig, rng: np.random.Generator, steps: int, conditional_y=None) -> np.ndarray:
    for _ in range(steps):
        x = sgld_step(model, x, cfg, rng, conditional_y)
    return np.asarray(x, dtype=np.float64)


class ReplayBuffer:
    """Fixed-capacity ring of persistent chain states."""

    def __init__(self, capacity: int, dim: int):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = int(capacity)
        self.dim = int(dim)
        self.slots = np.zeros((self.capacity, self.dim))
        self.size = 0
        self.write_cursor = 0

    def __len__(self) -> int:
        return self.size

    @property
    def states(self) -> np.ndarray:
        return self.slots[: self.size]

    def fill_from_p0(self, cfg: SamplerConfig, rng: np.random.Generator) -> None:
        self.slots[:] = draw_p0(cfg, rng, self.capacity, self.dim)
        self.size = self.capacity
        self.write_cursor = 0

    def _ring_slot(self) -> int:
        if self.size < self.capacity:
            slot = self.size
            self.size += 1
            return slot
        slot = self.write_cursor
        self.write_cursor = (self.write_cursor + 1) % self.capacity
        return slot

    def write(self, slots: np.ndarray, states: np.ndarray, cfg: SamplerConfig, rng: np.random.Generator) -> np.ndarray:
        """Store ``states``; slot ``-1`` means "fresh draw, take the next ring slot".

        Non-finite states are replaced by fresh p0 draws. Returns the slot
        indices actually written.
        """
        states = np.asarray(states, dtype=np.float64)
        written = np.empty(len(states), dtype=np.int64)
        bad = ~np.all(np.isfinite(states), axis=1)
        if np.any(bad):
            states = states.copy()
            states[bad] = draw_p0(cfg, rng, int(bad.sum()), self.dim)
        for i, (slot, s) in enumerate(zip(slots, states)):
            slot = self._ring_slot() if slot < 0 else int(slot)
            self.slots[slot] = s
            written[i] = slot
        return written

    def copy(self) -> "ReplayBuffer":
        out = ReplayBuffer(self.capacity, self.dim)
        out.slots = self.slots.copy()
        out.size = self.size
        out.write_cursor = self.write_cursor
        return out


def draw_init(buf: ReplayBuffer, cfg: SamplerConfig, rng: np.random.Generator, n: int):
    """Initial chain states: a random buffer slot w.p. ``1 - rho``, else p0.

    Returns ``(states, slots)`` with ``slots[i] == -1`` for fresh draws.
    """
    fresh = rng.random(n) < cfg.rho
    if len(buf) == 0:
        fresh[:] = True
    picks = rng.integers(0, max(len(buf), 1), size=n)
    slots = np.where(fresh, -1, picks).astype(np.int64)
    states = np.empty((n, buf.dim))
    n_fresh = int(fresh.sum())
    if n_fresh:
        states[fresh] = draw_p0(cfg, rng, n_fresh, buf.dim)
    if n_fresh < n:
        states[~fresh] = buf.slots[slots[~fresh]]
    return states, slots


def pcd_transition(model, buf: ReplayBuffer, cfg: SamplerConfig, rng: np.random.Generator, n: int, eta=None, conditional_y=None):
    """Run ``eta`` SGLD steps from buffer/p0 starts and write the results back."""
    steps = cfg.eta if eta is None else int(eta)
    x0, slots = draw_init(buf, cfg, rng, n)
    x = sgld_chain(model, x0, cfg, rng, steps, conditional_y)
    buf.write(slots, x, cfg, rng)
    return x


def sample_px_method2(model, cfg: SamplerConfig, rng: np.random.Generator, steps: int, n: int = 1) -> np.ndarray:
    """Fresh unconditional chains from p0, driven by ``logsumexp`` of the logits."""
    x0 = draw_p0(cfg, rng, n, model.input_dim)
    return sgld_chain(model, x0, cfg, rng, steps)


def sample_px_method1(model, cfg: SamplerConfig, rng: np.random.Generator, steps: int, n: int = 1, class_prior=None):
    """Draw ``y`` from ``class_prior`` (uniform default), then run chains on ``f(x)[y]``.

    Returns ``(samples, labels)``.
    """
    k = model.num_classes
    prior = np.full(k, 1.0 / k) if class_prior is None else np.asarray(class_prior, dtype=np.float64)
    if prior.shape != (k,) or np.any(prior < 0) or not np.isclose(prior.sum(), 1.0):
        raise ValueError("class_prior must be a length-K probability vector")
    y = rng.choice(k, size=n, p=prior)
    x0 = draw_p0(cfg, rng, n, model.input_dim)
    return sgld_chain(model, x0, cfg, rng, steps, conditional_y=y), y
