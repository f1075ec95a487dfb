"""Convolutional autoencoder between 32x32 RGB images and 8x8 latents."""

from __future__ import annotations

import numpy as np

from . import autograd as ag
from . import nn
from .autograd import Tensor

DOWNSAMPLE = 4


class Encoder(nn.Module):
    def __init__(self, rng, latent_channels: int = 4, width: int = 32):
        self.c1 = nn.Conv2d(rng, 3, width // 2, 3)
        self.c2 = nn.Conv2d(rng, width // 2, width, 3, stride=2)
        self.c3 = nn.Conv2d(rng, width, width, 3)
        self.c4 = nn.Conv2d(rng, width, width, 3, stride=2)
        self.c5 = nn.Conv2d(rng, width, width, 3)
        self.out = nn.Conv2d(rng, width, latent_channels, 1)

    def forward(self, x: Tensor) -> Tensor:
        h = ag.silu(self.c1(x))
        h = ag.silu(self.c2(h))
        h = ag.silu(self.c3(h))
        h = ag.silu(self.c4(h))
        h = ag.silu(self.c5(h))
        return self.out(h)


class Decoder(nn.Module):
    def __init__(self, rng, latent_channels: int = 4, width: int = 32):
        self.inp = nn.Conv2d(rng, latent_channels, width, 3)
        self.c1 = nn.Conv2d(rng, width, width, 3)
        self.c2 = nn.Conv2d(rng, width, width, 3)
        self.c3 = nn.Conv2d(rng, width, width // 2, 3)
        self.out = nn.Conv2d(rng, width // 2, 3, 3)

    def forward(self, z: Tensor) -> Tensor:
        h = ag.silu(self.inp(z))
        h = ag.silu(self.c1(h))
        h = ag.upsample2x(h)
        h = ag.silu(self.c2(h))
        h = ag.upsample2x(h)
        h = ag.silu(self.c3(h))
        return ag.sigmoid(self.out(h))


class LatentCodec(nn.Module):
    """Encoder/decoder pair. ``scale`` normalizes latents to roughly unit variance."""

    def __init__(self, rng, latent_channels: int = 4, width: int = 32):
        self.encoder = Encoder(rng, latent_channels, width)
        self.decoder = Decoder(rng, latent_channels, width)
        self.latent_channels = latent_channels
        self.scale = 1.0

    def latent_shape(self, h: int, w: int) -> tuple[int, int, int]:
        return (h // DOWNSAMPLE, w // DOWNSAMPLE, self.latent_channels)

    def encode_tensor(self, images: Tensor) -> Tensor:
        if images.ndim != 4 or images.shape[3] != 3:
            raise ag.ShapeError(f"encode expects (N, H, W, 3) images, got {images.shape}")
        if images.shape[1] % DOWNSAMPLE or images.shape[2] % DOWNSAMPLE:
            raise ag.ShapeError(f"image size {images.shape[1:3]} not divisible by {DOWNSAMPLE}")
        return self.encoder(images) * self.scale

    def decode_tensor(self, latents: Tensor) -> Tensor:
        if latents.ndim != 4 or latents.shape[3] != self.latent_channels:
            raise ag.ShapeError(f"decode expects (N, h, w, {self.latent_channels}) latents, got {latents.shape}")
        return self.decoder(latents * (1.0 / self.scale))

    def encode(self, images: np.ndarray, batch: int = 256) -> np.ndarray:
        images = np.asarray(images, dtype=np.float32)
        single = images.ndim == 3
        if single:
            images = images[None]
        out = [self.encode_tensor(Tensor(images[i:i + batch])).data for i in range(0, len(images), batch)]
        z = np.concatenate(out)
        return z[0] if single else z

    def decode(self, latents: np.ndarray, batch: int = 256) -> np.ndarray:
        latents = np.asarray(latents, dtype=np.float32)
        single = latents.ndim == 3
        if single:
            latents = latents[None]
        out = [self.decode_tensor(Tensor(latents[i:i + batch])).data for i in range(0, len(latents), batch)]
        x = np.clip(np.concatenate(out), 0.0, 1.0)
        return x[0] if single else x


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    err = float(np.mean((np.asarray(a, np.float64) - np.asarray(b, np.float64)) ** 2))
    return float("inf") if err == 0 else 10.0 * np.log10(1.0 / err)
