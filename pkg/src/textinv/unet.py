"""Conditional U-shaped denoiser over 8x8 latents with cross-attention to text."""

from __future__ import annotations

import math

import numpy as np

from . import autograd as ag
from . import nn
from .autograd import Tensor


def timestep_embedding(t: np.ndarray, dim: int, dtype=np.float32) -> np.ndarray:
    """Sinusoidal features of integer timesteps, shape (B, dim)."""
    t = np.asarray(t, dtype=np.float64).reshape(-1)
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    args = t[:, None] * freqs[None, :]
    return np.concatenate([np.cos(args), np.sin(args)], axis=1).astype(dtype)


class ResBlock(nn.Module):
    def __init__(self, rng, c_in: int, c_out: int, t_dim: int, groups: int = 8):
        self.norm1 = nn.GroupNorm(groups, c_in)
        self.conv1 = nn.Conv2d(rng, c_in, c_out, 3)
        self.temb = nn.Linear(rng, t_dim, c_out)
        self.norm2 = nn.GroupNorm(groups, c_out)
        self.conv2 = nn.Conv2d(rng, c_out, c_out, 3, gain=0.5)
        self.skip = nn.Conv2d(rng, c_in, c_out, 1) if c_in != c_out else None

    def forward(self, x: Tensor, temb: Tensor) -> Tensor:
        h = self.conv1(ag.silu(self.norm1(x)))
        b, c = temb.shape[0], h.shape[3]
        h = h + self.temb(temb).reshape(b, 1, 1, c)
        h = self.conv2(ag.silu(self.norm2(h)))
        return h + (self.skip(x) if self.skip is not None else x)


class CrossAttention(nn.Module):
    def __init__(self, rng, channels: int, context_dim: int, heads: int = 4, groups: int = 8):
        self.heads = heads
        self.norm = nn.GroupNorm(groups, channels)
        self.q = nn.Linear(rng, channels, channels, bias=False)
        self.k = nn.Linear(rng, context_dim, channels, bias=False)
        self.v = nn.Linear(rng, context_dim, channels, bias=False)
        self.out = nn.Linear(rng, channels, channels, gain=0.5)

    def forward(self, x: Tensor, context: Tensor, mask: np.ndarray) -> Tensor:
        b, h, w, c = x.shape
        seq = self.norm(x).reshape(b, h * w, c)
        att = nn.attention(self.q(seq), self.k(context), self.v(context), self.heads, mask)
        return x + self.out(att).reshape(b, h, w, c)


class UNet(nn.Module):
    """Two resolutions (8x8 and 4x4) with skip connections."""

    def __init__(self, rng, latent_channels: int = 4, width: int = 32, context_dim: int = 64,
                 t_dim: int = 128):
        w1, w2 = width, 2 * width
        self.t_dim = t_dim
        self.t1 = nn.Linear(rng, t_dim // 2, t_dim)
        self.t2 = nn.Linear(rng, t_dim, t_dim)
        self.conv_in = nn.Conv2d(rng, latent_channels, w1, 3)
        self.down0 = ResBlock(rng, w1, w1, t_dim)
        self.attn0 = CrossAttention(rng, w1, context_dim)
        self.downsample = nn.Conv2d(rng, w1, w2, 3, stride=2)
        self.down1 = ResBlock(rng, w2, w2, t_dim)
        self.attn1 = CrossAttention(rng, w2, context_dim)
        self.mid = ResBlock(rng, w2, w2, t_dim)
        self.up1 = ResBlock(rng, 2 * w2, w2, t_dim)
        self.attn_up1 = CrossAttention(rng, w2, context_dim)
        self.upconv = nn.Conv2d(rng, w2, w1, 3)
        self.up0 = ResBlock(rng, 2 * w1, w1, t_dim)
        self.attn_up0 = CrossAttention(rng, w1, context_dim)
        self.norm_out = nn.GroupNorm(8, w1)
        self.conv_out = nn.Conv2d(rng, w1, latent_channels, 3, gain=0.3)

    def forward(self, x: Tensor, t, context: Tensor, mask: np.ndarray) -> Tensor:
        """x: (B, 8, 8, C) noisy latents; t: (B,) timesteps; context: (B, L, D)."""
        temb = Tensor(timestep_embedding(t, self.t_dim // 2, x.dtype))
        temb = self.t2(ag.silu(self.t1(temb)))
        h0 = self.conv_in(x)
        h0 = self.attn0(self.down0(h0, temb), context, mask)
        h1 = self.downsample(h0)
        h1 = self.attn1(self.down1(h1, temb), context, mask)
        m = self.mid(h1, temb)
        u1 = self.attn_up1(self.up1(ag.concat([m, h1], axis=3), temb), context, mask)
        u0 = self.upconv(ag.upsample2x(u1))
        u0 = self.attn_up0(self.up0(ag.concat([u0, h0], axis=3), temb), context, mask)
        return self.conv_out(ag.silu(self.norm_out(u0)))
