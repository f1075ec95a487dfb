"""Small layer library on top of :mod:`textinv.autograd`."""

from __future__ import annotations

import math
from collections import OrderedDict
from typing import Iterator

import numpy as np

from . import autograd as ag
from .autograd import Tensor

NEG_INF = -1e9


class Module:
    """Parameter container. Child modules and parameters are discovered from attributes."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Tensor):
                if val.name == "param":
                    yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(name + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, p.data) for k, p in self.named_parameters())

    def load_state_dict(self, state: dict) -> None:
        params = dict(self.named_parameters())
        missing = set(params) - set(state)
        unexpected = set(state) - set(params)
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(unexpected)}")
        for k, p in params.items():
            arr = np.asarray(state[k])
            if arr.shape != p.shape:
                raise ag.ShapeError(f"{k}: expected {p.shape}, got {arr.shape}")
            p.data = np.array(arr, dtype=p.dtype)

    def requires_grad_(self, flag: bool = True) -> "Module":
        for p in self.parameters():
            p.requires_grad = flag
        return self

    def freeze(self) -> "Module":
        """Turn off gradients and make parameter buffers read-only."""
        for p in self.parameters():
            p.requires_grad = False
            p.grad = None
            p.data.flags.writeable = False
        return self

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def checksum(self) -> str:
        return ag.parameters_checksum(self.parameters())

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def param(arr: np.ndarray) -> Tensor:
    t = Tensor(arr.astype(ag.DEFAULT_DTYPE), requires_grad=True)
    t.name = "param"
    return t


def _uniform(rng: np.random.Generator, shape, fan_in: int, gain: float = 1.0) -> np.ndarray:
    bound = gain * math.sqrt(3.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Linear(Module):
    def __init__(self, rng, d_in: int, d_out: int, bias: bool = True, gain: float = 1.0):
        self.weight = param(_uniform(rng, (d_in, d_out), d_in, gain))
        self.bias = param(np.zeros(d_out)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        y = ag.matmul(x, self.weight)
        return y + self.bias if self.bias is not None else y


class Conv2d(Module):
    def __init__(self, rng, c_in: int, c_out: int, kernel: int = 3, stride: int = 1,
                 padding: int | None = None, gain: float = 1.0):
        self.weight = param(_uniform(rng, (kernel, kernel, c_in, c_out), kernel * kernel * c_in, gain))
        self.bias = param(np.zeros(c_out))
        self.stride = stride
        self.padding = kernel // 2 if padding is None else padding

    def forward(self, x: Tensor) -> Tensor:
        return ag.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class GroupNorm(Module):
    def __init__(self, groups: int, channels: int):
        self.groups = groups
        self.gamma = param(np.ones(channels))
        self.beta = param(np.zeros(channels))

    def forward(self, x: Tensor) -> Tensor:
        return ag.group_norm(x, self.groups, self.gamma, self.beta)


class LayerNorm(Module):
    def __init__(self, dim: int):
        self.gamma = param(np.ones(dim))
        self.beta = param(np.zeros(dim))

    def forward(self, x: Tensor) -> Tensor:
        return ag.layer_norm(x, self.gamma, self.beta)


def attention(q: Tensor, k: Tensor, v: Tensor, heads: int, key_mask: np.ndarray | None = None) -> Tensor:
    """Multi-head scaled dot-product attention.

    q: (B, Lq, D), k/v: (B, Lk, D). ``key_mask`` is a boolean (B, Lk) array,
    True where the key may be attended to.
    """
    b, lq, d = q.shape
    lk = k.shape[1]
    hd = d // heads
    qh = q.reshape(b, lq, heads, hd).transpose(0, 2, 1, 3)
    kh = k.reshape(b, lk, heads, hd).transpose(0, 2, 3, 1)
    vh = v.reshape(b, lk, heads, hd).transpose(0, 2, 1, 3)
    scores = ag.matmul(qh, kh) * (1.0 / math.sqrt(hd))
    if key_mask is not None:
        bias = np.where(key_mask, 0.0, NEG_INF).astype(q.dtype)[:, None, None, :]
        scores = scores + Tensor(bias, dtype=q.dtype)
    weights = ag.softmax(scores, axis=-1)
    out = ag.matmul(weights, vh)
    return out.transpose(0, 2, 1, 3).reshape(b, lq, d)


class TransformerBlock(Module):
    """Pre-norm self-attention block."""

    def __init__(self, rng, dim: int, heads: int, mlp_ratio: int = 2):
        self.heads = heads
        self.ln1 = LayerNorm(dim)
        self.qkv = Linear(rng, dim, 3 * dim)
        self.proj = Linear(rng, dim, dim)
        self.ln2 = LayerNorm(dim)
        self.fc1 = Linear(rng, dim, mlp_ratio * dim)
        self.fc2 = Linear(rng, mlp_ratio * dim, dim)

    def forward(self, x: Tensor, key_mask: np.ndarray | None = None) -> Tensor:
        d = x.shape[-1]
        h = self.qkv(self.ln1(x))
        q, k, v = h[..., :d], h[..., d:2 * d], h[..., 2 * d:]
        x = x + self.proj(attention(q, k, v, self.heads, key_mask))
        return x + self.fc2(ag.gelu(self.fc1(self.ln2(x))))
