"""Tape-based reverse-mode differentiation and a small feed-forward network.

Everything is float64. A :class:`Tape` records every differentiable operation
executed while it is active; :meth:`Tape.gradient` replays the records in
reverse, so each recorded op is visited exactly once.

    with Tape() as tape:
        x = tape.watch(x_array)
        loss = net(x).logsumexp(axis=-1).sum()
    gx, = tape.gradient(loss, [x])
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "DimensionError",
    "UnsupportedOpError",
    "Tensor",
    "Tape",
    "Affine",
    "Activation",
    "Network",
    "logsumexp",
    "forward",
    "grad_params",
    "grad_input",
]


class DimensionError(ValueError):
    pass


class UnsupportedOpError(TypeError):
    pass


_ACTIVE: list["Tape"] = []


def _as_array(value) -> np.ndarray:
    return np.asarray(value, dtype=np.float64)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def logsumexp(v, axis=-1, keepdims: bool = False) -> np.ndarray:
    """Max-shifted log-sum-exp over ``axis`` (plain numpy, no tape)."""
    v = _as_array(v)
    m = np.max(v, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    out = np.log(np.sum(np.exp(v - m), axis=axis, keepdims=True)) + m
    if not keepdims:
        out = np.squeeze(out, axis=axis)
    return out


class Tensor:
    """A float64 array that participates in the active tape.

    Arithmetic between tensors (or tensors and plain numbers) is recorded on
    the innermost active :class:`Tape`. Passing a Tensor to a numpy ufunc is
    rejected, since such an op would silently drop out of the gradient.
    """

    __slots__ = ("data",)
    __array_priority__ = 1000

    def __init__(self, data):
        self.data = _as_array(data)

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, data={self.data!r})"

    def __array_ufunc__(self, ufunc, method, *inputs, **kwargs):
        raise UnsupportedOpError(f"numpy ufunc {ufunc.__name__!r} is not a differentiable primitive")

    def __array_function__(self, func, types, args, kwargs):
        raise UnsupportedOpError(f"numpy function {func.__name__!r} is not a differentiable primitive")

    # -- recording ---------------------------------------------------------

    @staticmethod
    def _lift(value) -> "Tensor":
        return value if isinstance(value, Tensor) else Tensor(value)

    @staticmethod
    def _record(out_data, inputs: Sequence["Tensor"], backward: Callable) -> "Tensor":
        out = Tensor(out_data)
        if _ACTIVE:
            _ACTIVE[-1]._push(out, tuple(inputs), backward)
        return out

    # -- elementwise binary ------------------------------------------------

    def __add__(self, other):
        other = Tensor._lift(other)
        a, b = self.shape, other.shape
        return Tensor._record(
            self.data + other.data, (self, other), lambda g: (_unbroadcast(g, a), _unbroadcast(g, b))
        )

    __radd__ = __add__

    def __sub__(self, other):
        other = Tensor._lift(other)
        a, b = self.shape, other.shape
        return Tensor._record(
            self.data - other.data, (self, other), lambda g: (_unbroadcast(g, a), -_unbroadcast(g, b))
        )

    def __rsub__(self, other):
        return Tensor._lift(other) - self

    def __mul__(self, other):
        other = Tensor._lift(other)
        x, y = self.data, other.data
        return Tensor._record(
            x * y, (self, other), lambda g: (_unbroadcast(g * y, x.shape), _unbroadcast(g * x, y.shape))
        )

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise UnsupportedOpError("division by a Tensor is not supported")
        return self * (1.0 / float(other))

    def __neg__(self):
        return Tensor._record(-self.data, (self,), lambda g: (-g,))

    def __pow__(self, power):
        if power != 2:
            raise UnsupportedOpError("only square (power 2) is supported")
        return self.square()

    def __matmul__(self, other):
        other = Tensor._lift(other)
        x, w = self.data, other.data
        if x.shape[-1] != w.shape[0]:
            raise DimensionError(f"matmul shape mismatch {x.shape} @ {w.shape}")

        def back(g):
            gx = g @ w.T
            gw = np.outer(x, g) if x.ndim == 1 else x.T @ g
            return gx, gw

        return Tensor._record(x @ w, (self, other), back)

    # -- elementwise unary -------------------------------------------------

    def square(self):
        x = self.data
        return Tensor._record(x * x, (self,), lambda g: (2.0 * x * g,))

    def exp(self):
        y = np.exp(self.data)
        return Tensor._record(y, (self,), lambda g: (g * y,))

    def log(self):
        x = self.data
        return Tensor._record(np.log(x), (self,), lambda g: (g / x,))

    def tanh(self):
        y = np.tanh(self.data)
        return Tensor._record(y, (self,), lambda g: (g * (1.0 - y * y),))

    def relu(self):
        # subgradient at exactly 0 is 0
        mask = self.data > 0.0
        return Tensor._record(np.where(mask, self.data, 0.0), (self,), lambda g: (g * mask,))

    def softplus(self):
        x = self.data
        y = np.logaddexp(0.0, x)
        return Tensor._record(y, (self,), lambda g: (g * _sigmoid(x),))

    # -- reductions --------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False):
        shape = self.shape

        def back(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)

        return Tensor._record(self.data.sum(axis=axis, keepdims=keepdims), (self,), back)

    def mean(self, axis=None, keepdims: bool = False):
        count = self.data.size if axis is None else self.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    def logsumexp(self, axis: int = -1, keepdims: bool = False):
        x = self.data
        out = logsumexp(x, axis=axis, keepdims=True)
        soft = np.exp(x - out)

        def back(g):
            if not keepdims:
                g = np.expand_dims(g, axis)
            return (g * soft,)

        return Tensor._record(out if keepdims else np.squeeze(out, axis=axis), (self,), back)

    def log_softmax(self, axis: int = -1):
        return self - self.logsumexp(axis=axis, keepdims=True)

    def index_select(self, index) -> "Tensor":
        """Pick ``self[i, index[i]]`` for each row (or ``self[index]`` for 1-D)."""
        x = self.data
        index = np.asarray(index, dtype=np.int64)
        if x.ndim == 1:
            if index.ndim != 0:
                raise DimensionError("1-D index_select takes a scalar index")
            if not 0 <= int(index) < x.shape[0]:
                raise IndexError(f"index {int(index)} out of range for size {x.shape[0]}")

            def back1(g):
                out = np.zeros_like(x)
                out[int(index)] = g
                return (out,)

            return Tensor._record(x[int(index)], (self,), back1)
        if index.shape != (x.shape[0],):
            raise DimensionError(f"index shape {index.shape} does not match batch {x.shape[0]}")
        if np.any(index < 0) or np.any(index >= x.shape[1]):
            raise IndexError("class index out of range")
        rows = np.arange(x.shape[0])

        def back(g):
            out = np.zeros_like(x)
            out[rows, index] = g
            return (out,)

        return Tensor._record(x[rows, index], (self,), back)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return np.exp(-np.logaddexp(0.0, -x))


@dataclass
class _Record:
    out: Tensor
    inputs: tuple
    backward: Callable


class Tape:
    """Records operations while active; computes reverse-mode gradients."""

    def __init__(self):
        self._records: list[_Record] = []
        self._used = False

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.remove(self)

    def _push(self, out: Tensor, inputs: tuple, backward: Callable) -> None:
        self._records.append(_Record(out, inputs, backward))

    @staticmethod
    def watch(value) -> Tensor:
        return value if isinstance(value, Tensor) else Tensor(value)

    def gradient(self, target: Tensor, sources: Sequence[Tensor]) -> list[np.ndarray]:
        """Gradients of scalar ``target`` with respect to each of ``sources``.

        Sources that ``target`` does not depend on receive zeros. A tape may be
        differentiated once.
        """
        if self._used:
            raise RuntimeError("tape already consumed")
        self._used = True
        if target.data.size != 1:
            raise DimensionError("gradient target must be a scalar")
        grads: dict[int, np.ndarray] = {id(target): np.ones_like(target.data)}
        for rec in reversed(self._records):
            g = grads.pop(id(rec.out), None)
            if g is None:
                continue
            for inp, gi in zip(rec.inputs, rec.backward(g)):
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        out = []
        for s in sources:
            g = grads.get(id(s))
            out.append(np.zeros_like(s.data) if g is None else np.asarray(g, dtype=np.float64).reshape(s.shape))
        self._records.clear()
        return out


# -- network ---------------------------------------------------------------

_ACTIVATIONS = ("tanh", "relu", "softplus")


@dataclass
class Affine:
    weight: Tensor  # [out, in]
    bias: Tensor  # [out]

    def __call__(self, x: Tensor) -> Tensor:
        return x @ _Transposed.of(self.weight) + self.bias

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]


class _Transposed:
    """Differentiable transpose of a 2-D weight, kept out of the public API."""

    @staticmethod
    def of(w: Tensor) -> Tensor:
        return Tensor._record(w.data.T, (w,), lambda g: (g.T,))


@dataclass
class Activation:
    name: str

    def __post_init__(self):
        if self.name not in _ACTIVATIONS:
            raise UnsupportedOpError(f"unknown activation {self.name!r}")

    def __call__(self, x: Tensor) -> Tensor:
        return getattr(x, self.name)()


@dataclass
class Network:
    """Ordered affine/nonlinearity stack mapping ``[N, D]`` inputs to ``[N, K]`` logits."""

    layers: list = field(default_factory=list)

    @classmethod
    def mlp(cls, sizes: Sequence[int], activation: str = "softplus", rng=None, zero: bool = False) -> "Network":
        """Build an MLP; ``sizes`` is ``[D, h1, ..., K]``."""
        if len(sizes) < 2:
            raise ValueError("need at least input and output sizes")
        rng = np.random.default_rng(0) if rng is None else rng
        layers: list = []
        for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            if zero:
                w = np.zeros((fan_out, fan_in))
            else:
                bound = np.sqrt(6.0 / (fan_in + fan_out))
                w = rng.uniform(-bound, bound, size=(fan_out, fan_in))
            layers.append(Affine(Tensor(w), Tensor(np.zeros(fan_out))))
            if i < len(sizes) - 2:
                layers.append(Activation(activation))
        return cls(layers)

    @property
    def parameters(self) -> list[Tensor]:
        out = []
        for layer in self.layers:
            if isinstance(layer, Affine):
                out.extend([layer.weight, layer.bias])
        return out

    @property
    def input_dim(self) -> int:
        return next(l for l in self.layers if isinstance(l, Affine)).in_dim

    @property
    def num_classes(self) -> int:
        return next(l for l in reversed(self.layers) if isinstance(l, Affine)).out_dim

    def descriptors(self) -> list[dict]:
        """Layer structure without parameter values (for serialization)."""
        out = []
        for layer in self.layers:
            if isinstance(layer, Affine):
                out.append({"type": "affine", "in": layer.in_dim, "out": layer.out_dim})
            else:
                out.append({"type": "activation", "name": layer.name})
        return out

    @classmethod
    def from_descriptors(cls, descriptors: Sequence[dict], params: Sequence[np.ndarray]) -> "Network":
        params = list(params)
        layers: list = []
        for d in descriptors:
            if d["type"] == "affine":
                w, b = params.pop(0), params.pop(0)
                if w.shape != (d["out"], d["in"]) or b.shape != (d["out"],):
                    raise DimensionError("parameter shapes do not match layer descriptors")
                layers.append(Affine(Tensor(w), Tensor(b)))
            elif d["type"] == "activation":
                layers.append(Activation(d["name"]))
            else:
                raise UnsupportedOpError(f"unknown layer type {d['type']!r}")
        if params:
            raise DimensionError("extra parameter arrays")
        return cls(layers)

    def copy(self) -> "Network":
        return Network.from_descriptors(self.descriptors(), [p.data.copy() for p in self.parameters])

    def __call__(self, x) -> Tensor:
        x = Tensor._lift(x)
        if x.shape[-1] != self.input_dim:
            raise DimensionError(f"expected input dim {self.input_dim}, got {x.shape[-1]}")
        for layer in self.layers:
            x = layer(x)
        return x

    def logits(self, x) -> np.ndarray:
        """Forward pass without recording; returns a plain array."""
        x = _as_array(x)
        if x.shape[-1] != self.input_dim:
            raise DimensionError(f"expected input dim {self.input_dim}, got {x.shape[-1]}")
        for layer in self.layers:
            if isinstance(layer, Affine):
                x = x @ layer.weight.data.T + layer.bias.data
            elif layer.name == "tanh":
                x = np.tanh(x)
            elif layer.name == "relu":
                x = np.where(x > 0.0, x, 0.0)
            else:
                x = np.logaddexp(0.0, x)
        return x


def forward(net: Network, x) -> np.ndarray:
    x = _as_array(x)
    if x.ndim not in (1, 2):
        raise DimensionError("input must be [D] or [N, D]")
    return net.logits(x)


def grad_params(net: Network, x, scalar_fn: Callable[[Tensor], Tensor]) -> list[np.ndarray]:
    """Gradients of ``scalar_fn(net(x))`` with respect to every parameter."""
    with Tape() as tape:
        out = scalar_fn(net(x))
    return tape.gradient(out, net.parameters)


def grad_input(net: Network, x, scalar_fn: Callable[[Tensor], Tensor]) -> np.ndarray:
    """Gradient of ``scalar_fn(net(x))`` with respect to ``x``."""
    with Tape() as tape:
        xt = tape.watch(_as_array(x).copy())
        out = scalar_fn(net(xt))
    (g,) = tape.gradient(out, [xt])
    return g
