"""Classifier logits read as a joint energy-based model.

For logits ``f(x)``: ``E(x, y) = -f(x)[y]``, ``E(x) = -logsumexp_y f(x)[y]``
and ``p(y|x)`` is the usual softmax. Densities stay unnormalized; nothing here
estimates the partition function.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .diffcore import Network, Tape, logsumexp

__all__ = ["JemModel", "QuadraticEnergy", "energy_xy", "energy_x", "log_p_tilde", "log_p_y_given_x", "grad_logp_x"]


@dataclass
class JemModel:
    net: Network

    @property
    def num_classes(self) -> int:
        return self.net.num_classes

    @property
    def input_dim(self) -> int:
        return self.net.input_dim

    def logits(self, x) -> np.ndarray:
        return self.net.logits(x)

    def energy_xy(self, x, y) -> np.ndarray:
        f = self.logits(x)
        y = np.asarray(y)
        if np.any(y < 0) or np.any(y >= self.num_classes):
            raise IndexError(f"class index out of range [0, {self.num_classes})")
        if f.ndim == 1:
            return -f[int(y)]
        return -np.take_along_axis(f, np.broadcast_to(y, f.shape[:1])[:, None].astype(np.int64), axis=1)[:, 0]

    def energy_x(self, x) -> np.ndarray:
        return -logsumexp(self.logits(x), axis=-1)

    def log_p_tilde(self, x) -> np.ndarray:
        return logsumexp(self.logits(x), axis=-1)

    def log_p_y_given_x(self, x) -> np.ndarray:
        f = self.logits(x)
        return f - logsumexp(f, axis=-1, keepdims=True)

    def grad_logp(self, x, y=None) -> np.ndarray:
        """Input gradient of ``log p~(x)``, or of ``f(x)[y]`` when ``y`` is given.

        Accepts ``[N, D]`` or ``[D]``; rows are independent so summing the
        per-row scalars yields every row's gradient in one reverse pass.
        """
        x = np.asarray(x, dtype=np.float64)
        with Tape() as tape:
            xt = tape.watch(x.copy())
            f = self.net(xt)
            if y is None:
                s = f.logsumexp(axis=-1)
            else:
                if f.ndim == 1:
                    s = f.index_select(int(y))
                else:
                    s = f.index_select(np.broadcast_to(np.asarray(y, dtype=np.int64), (x.shape[0],)))
            total = s.sum() if s.ndim else s
        (g,) = tape.gradient(total, [xt])
        return g


@dataclass
class QuadraticEnergy:
    """Analytic test energy ``E(x) = curvature * ||x - center||^2 / 2`` with ``K`` identical logits."""

    curvature: float = 1.0
    center: float = 0.0
    num_classes: int = 1
    input_dim: int = 1

    def logits(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        lp = -0.5 * self.curvature * np.sum((x - self.center) ** 2, axis=-1) - np.log(self.num_classes)
        return np.repeat(lp[..., None], self.num_classes, axis=-1)

    def log_p_tilde(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        return -0.5 * self.curvature * np.sum((x - self.center) ** 2, axis=-1)

    def energy_x(self, x) -> np.ndarray:
        return -self.log_p_tilde(x)

    def log_p_y_given_x(self, x) -> np.ndarray:
        f = self.logits(x)
        return f - logsumexp(f, axis=-1, keepdims=True)

    def grad_logp(self, x, y=None) -> np.ndarray:
        return -self.curvature * (np.asarray(x, dtype=np.float64) - self.center)


def energy_xy(m: JemModel, x, y):
    return m.energy_xy(x, y)


def energy_x(m: JemModel, x):
    return m.energy_x(x)


def log_p_tilde(m: JemModel, x):
    return m.log_p_tilde(x)


def log_p_y_given_x(m: JemModel, x):
    return m.log_p_y_given_x(x)


def grad_logp_x(m: JemModel, x):
    return m.grad_logp(x)
