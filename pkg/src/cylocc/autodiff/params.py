"""Named parameter storage, initializers, and the momentum optimizer."""

from __future__ import annotations

from collections import OrderedDict

import numpy as np

from .tensor import Tensor


class Params(OrderedDict):
    """Insertion-ordered map of parameter name -> trainable Tensor."""

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self:
            raise KeyError(f"duplicate parameter {name!r}")
        t = Tensor(value, requires_grad=True, name=name)
        self[name] = t
        return t

    def zero_grad(self) -> None:
        for p in self.values():
            p.grad = None

    def num_elements(self) -> int:
        return int(sum(p.size for p in self.values()))

    def arrays(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, v.data) for k, v in self.items())

    def load_arrays(self, arrays) -> None:
        """Replace values in place; names and shapes must match exactly."""
        missing = set(self) - set(arrays)
        extra = set(arrays) - set(self)
        if missing or extra:
            raise KeyError(f"parameter mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for k, arr in arrays.items():
            if tuple(arr.shape) != self[k].shape:
                raise ValueError(f"parameter {k!r}: shape {tuple(arr.shape)} != {self[k].shape}")
            self[k] = Tensor(arr, requires_grad=True, name=k)

    def copy(self) -> "Params":
        out = Params()
        for k, v in self.items():
            out.add(k, v.data)
        return out


def he_normal(rng: np.random.Generator, shape, fan_in: int, gain: float = 1.0) -> np.ndarray:
    return rng.standard_normal(shape) * (gain * np.sqrt(2.0 / max(fan_in, 1)))


def init_linear(params: Params, name: str, n_in: int, n_out: int, rng, gain: float = 1.0) -> None:
    params.add(f"{name}.w", he_normal(rng, (n_in, n_out), n_in, gain))
    params.add(f"{name}.b", np.zeros(n_out))


def init_conv(params: Params, name: str, c_in: int, c_out: int, k: int, rng, gain: float = 1.0) -> None:
    params.add(f"{name}.w", he_normal(rng, (c_out, c_in, k, k), c_in * k * k, gain))
    params.add(f"{name}.b", np.zeros(c_out))


class SGD:
    """Gradient descent with heavy-ball momentum: v <- mu*v + g; p <- p - lr*v."""

    def __init__(self, params: Params, lr: float, momentum: float = 0.9, clip_norm: float | None = None):
        self.params = params
        self.lr = float(lr)
        self.momentum = float(momentum)
        self.clip_norm = clip_norm
        self.velocity = {k: np.zeros(p.shape) for k, p in params.items()}

    def grad_norm(self) -> float:
        return float(np.sqrt(sum(float((p.grad**2).sum()) for p in self.params.values() if p.grad is not None)))

    def step(self) -> None:
        factor = 1.0
        if self.clip_norm:
            norm = self.grad_norm()
            if norm > self.clip_norm:
                factor = self.clip_norm / norm
        for k, p in self.params.items():
            if p.grad is None:
                continue
            v = self.velocity[k] * self.momentum + p.grad * factor
            self.velocity[k] = v
            new = p.data - self.lr * v
            new.flags.writeable = False
            p.data = new
