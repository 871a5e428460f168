"""Thin helpers binding named parameters to autodiff ops."""

from __future__ import annotations

from .autodiff import Params, Tensor, conv2d, init_conv, init_linear, linear, relu


def init_mlp2(params: Params, name: str, n_in: int, n_hidden: int, n_out: int, rng, gain: float = 1.0) -> None:
    init_linear(params, f"{name}.0", n_in, n_hidden, rng)
    init_linear(params, f"{name}.1", n_hidden, n_out, rng, gain)


def dense(params: Params, name: str, x: Tensor) -> Tensor:
    return linear(x, params[f"{name}.w"], params[f"{name}.b"])


def mlp2(params: Params, name: str, x: Tensor) -> Tensor:
    """linear -> relu -> linear, applied row-wise to (N, in)."""
    return dense(params, f"{name}.1", relu(dense(params, f"{name}.0", x)))


def conv(params: Params, name: str, x: Tensor, stride: int = 1, padding=0, pad_mode="zero") -> Tensor:
    return conv2d(x, params[f"{name}.w"], params[f"{name}.b"], stride=stride, padding=padding, pad_mode=pad_mode)


__all__ = ["init_conv", "init_linear", "init_mlp2", "dense", "mlp2", "conv"]
