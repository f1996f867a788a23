"""Parameterized layers built on :mod:`deskdetr.tensor`."""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Module:
    """Minimal container: parameters are discovered from attributes."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            full = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")
                    elif isinstance(item, Tensor) and item.requires_grad:
                        yield f"{full}.{i}", item

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


def _param(data: np.ndarray, dtype) -> Tensor:
    return Tensor(np.ascontiguousarray(data, dtype=dtype), requires_grad=True)


def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, shape) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


class Linear(Module):
    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator, dtype=np.float64, bias: bool = True):
        self.weight = _param(xavier_uniform(rng, in_dim, out_dim, (in_dim, out_dim)), dtype)
        self.bias = _param(np.zeros(out_dim), dtype) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        out = x @ self.weight
        return out + self.bias if self.bias is not None else out


class Conv2d(Module):
    def __init__(self, in_ch: int, out_ch: int, kernel: int, rng: np.random.Generator, stride: int = 1,
                 padding: int = 0, dtype=np.float64):
        fan_in = in_ch * kernel * kernel
        self.weight = _param(rng.normal(0.0, math.sqrt(2.0 / fan_in), size=(out_ch, in_ch, kernel, kernel)), dtype)
        self.bias = _param(np.zeros(out_ch), dtype)
        self.stride = stride
        self.padding = padding

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class LayerNorm(Module):
    def __init__(self, dim: int, dtype=np.float64, eps: float = 1e-5):
        self.gamma = _param(np.ones(dim), dtype)
        self.beta = _param(np.zeros(dim), dtype)
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return T.layernorm(x, self.gamma, self.beta, self.eps)


class GroupNorm(Module):
    def __init__(self, num_groups: int, channels: int, dtype=np.float64, eps: float = 1e-5):
        self.num_groups = num_groups
        self.gamma = _param(np.ones(channels), dtype)
        self.beta = _param(np.zeros(channels), dtype)
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return T.groupnorm(x, self.num_groups, self.gamma, self.beta, self.eps)


class MLP(Module):
    def __init__(self, dims: list[int], rng: np.random.Generator, dtype=np.float64):
        self.layers = [Linear(a, b, rng, dtype) for a, b in zip(dims[:-1], dims[1:])]

    def __call__(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = T.relu(x)
        return x


class MultiHeadAttention(Module):
    """Scaled dot-product attention over ``[B, T, C]`` inputs."""

    def __init__(self, dim: int, num_heads: int, rng: np.random.Generator, dtype=np.float64):
        self.num_heads = num_heads
        self.q_proj = Linear(dim, dim, rng, dtype)
        self.k_proj = Linear(dim, dim, rng, dtype)
        self.v_proj = Linear(dim, dim, rng, dtype)
        self.out_proj = Linear(dim, dim, rng, dtype)
        self._last_weights: np.ndarray | None = None

    def _split(self, x: Tensor) -> Tensor:
        b, t, c = x.shape
        return x.reshape(b, t, self.num_heads, c // self.num_heads).transpose(0, 2, 1, 3)

    def __call__(self, query: Tensor, key: Tensor, value: Tensor) -> Tensor:
        b, tq, c = query.shape
        q = self._split(self.q_proj(query))
        k = self._split(self.k_proj(key))
        v = self._split(self.v_proj(value))
        scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(c // self.num_heads))
        weights = T.softmax(scores, axis=-1)
        self._last_weights = weights.data
        out = (weights @ v).transpose(0, 2, 1, 3).reshape(b, tq, c)
        return self.out_proj(out)

    @property
    def last_weights(self) -> np.ndarray | None:
        """Attention weights ``[B, heads, Tq, Tk]`` from the most recent call."""
        return self._last_weights
