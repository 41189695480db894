"""Desk-scale networks.

The frozen stand-ins (``FeatureExtractor``, ``FaceEmbedder``) take the place of
pretrained VGG / face-recognition backbones; anything with the same call
signature can be swapped in.
"""
from __future__ import annotations

import contextlib
import math

import torch
import torch.nn.functional as F
from torch import nn


@contextlib.contextmanager
def seeded(seed: int):
    """Build modules under a private torch RNG seeded with ``seed``."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        yield


def freeze(module: nn.Module) -> nn.Module:
    for p in module.parameters():
        p.requires_grad_(False)
    return module.eval()


def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    t = torch.as_tensor(t, dtype=torch.float32).reshape(-1)
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float32) / half)
    args = t[:, None] * freqs[None]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


# frozen stand-ins --------------------------------------------------------------


class FeatureExtractor(nn.Module):
    """Three-stage conv pyramid with fixed random weights.

    ``forward`` returns ``[x, f1, f2, f3]``; the input itself is stage 0 so the
    DISTS-style metric also compares raw pixels.
    """

    widths = (16, 32, 64)

    def __init__(self, seed: int = 1234):
        super().__init__()
        with seeded(seed):
            c = [3, *self.widths]
            self.stages = nn.ModuleList(
                nn.Conv2d(c[i], c[i + 1], 3, padding=1, padding_mode="replicate") for i in range(3)
            )
            for conv in self.stages:
                nn.init.kaiming_normal_(conv.weight, nonlinearity="relu")
                nn.init.zeros_(conv.bias)
        freeze(self)

    @property
    def out_dim(self):
        return self.widths[-1]

    def forward(self, x):
        feats = [x]
        h = x
        for i, conv in enumerate(self.stages):
            if i > 0:
                h = F.avg_pool2d(h, 2)
            h = F.relu(conv(h))
            feats.append(h)
        return feats

    def pooled(self, x):
        return self.forward(x)[-1].mean(dim=(2, 3))


class FaceEmbedder(nn.Module):
    """Four conv layers, global average pooling, unit-norm 128-d output."""

    provenance = "stand-in"

    def __init__(self, dim: int = 128, seed: int = 4321):
        super().__init__()
        with seeded(seed):
            self.net = nn.Sequential(
                nn.Conv2d(3, 16, 3, stride=2, padding=1),
                nn.ReLU(),
                nn.Conv2d(16, 32, 3, stride=2, padding=1),
                nn.ReLU(),
                nn.Conv2d(32, 64, 3, stride=2, padding=1),
                nn.ReLU(),
                nn.Conv2d(64, dim, 3, padding=1),
            )
        self.dim = dim
        freeze(self)

    def forward(self, x):
        # centre the input so embeddings are not all crowded into one orthant
        h = self.net(x - 0.5).mean(dim=(2, 3))
        return F.normalize(h, dim=-1, eps=1e-12)


# discriminators ----------------------------------------------------------------

PROB_EPS = 1e-6


class PatchDiscriminator(nn.Module):
    """Three strided convs, sigmoid per patch, mean over patches -> (B,)."""

    def __init__(self, width: int = 32):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(3, width, 4, stride=2, padding=1),
            nn.LeakyReLU(0.2),
            nn.Conv2d(width, width * 2, 4, stride=2, padding=1),
            nn.LeakyReLU(0.2),
            nn.Conv2d(width * 2, 1, 4, stride=2, padding=1),
        )

    def forward(self, x):
        p = torch.sigmoid(self.net(x)).mean(dim=(1, 2, 3))
        return p.clamp(PROB_EPS, 1 - PROB_EPS)


class LatentDiscriminator(nn.Module):
    """Probability that a noised latent at timestep ``t`` came from a real face."""

    def __init__(self, latent_ch: int = 4, width: int = 32, t_dim: int = 32):
        super().__init__()
        self.t_dim = t_dim
        self.conv1 = nn.Conv2d(latent_ch, width, 3, padding=1)
        self.conv2 = nn.Conv2d(width, width * 2, 4, stride=2, padding=1)
        self.temb = nn.Linear(t_dim, width * 2)
        self.head = nn.Conv2d(width * 2, 1, 3, padding=1)

    def forward(self, z, t):
        t = torch.as_tensor(t).reshape(-1)
        if t.numel() == 1:
            t = t.expand(z.shape[0])
        h = F.silu(self.conv1(z))
        h = self.conv2(h) + self.temb(timestep_embedding(t, self.t_dim)).to(z.dtype)[:, :, None, None]
        logits = self.head(F.silu(h)).mean(dim=(1, 2, 3))
        return torch.sigmoid(logits).clamp(PROB_EPS, 1 - PROB_EPS)


# autoencoder -----------------------------------------------------------------


class Autoencoder(nn.Module):
    """4x spatial downsample to a 4-channel latent and back."""

    def __init__(self, latent_ch: int = 4, width: int = 32):
        super().__init__()
        self.latent_ch = latent_ch
        self.encoder = nn.Sequential(
            nn.Conv2d(3, width, 3, padding=1),
            nn.SiLU(),
            nn.Conv2d(width, width, 4, stride=2, padding=1),
            nn.SiLU(),
            nn.Conv2d(width, width * 2, 4, stride=2, padding=1),
            nn.SiLU(),
            nn.Conv2d(width * 2, latent_ch, 1),
        )
        self.decoder = nn.Sequential(
            nn.Conv2d(latent_ch, width * 2, 3, padding=1),
            nn.SiLU(),
            nn.Upsample(scale_factor=2, mode="nearest"),
            nn.Conv2d(width * 2, width, 3, padding=1),
            nn.SiLU(),
            nn.Upsample(scale_factor=2, mode="nearest"),
            nn.Conv2d(width, width, 3, padding=1),
            nn.SiLU(),
            nn.Conv2d(width, 3, 3, padding=1),
        )

    def encode(self, x):
        return self.encoder(x)

    def decode(self, z):
        return torch.sigmoid(self.decoder(z))

    def forward(self, x):
        return self.decode(self.encode(x))


# denoiser --------------------------------------------------------------------


class CrossAttention(nn.Module):
    """Spatial queries attend over prompt tokens; residual output."""

    def __init__(self, channels: int, context_dim: int):
        super().__init__()
        self.norm = nn.GroupNorm(8, channels)
        self.q = nn.Linear(channels, channels, bias=False)
        self.k = nn.Linear(context_dim, channels, bias=False)
        self.v = nn.Linear(context_dim, channels, bias=False)
        self.out = nn.Linear(channels, channels)

    def forward(self, x, context):
        B, C, H, W = x.shape
        h = self.norm(x).flatten(2).transpose(1, 2)
        q, k, v = self.q(h), self.k(context), self.v(context)
        att = torch.softmax(q @ k.transpose(1, 2) / math.sqrt(C), dim=-1)
        h = self.out(att @ v)
        return x + h.transpose(1, 2).reshape(B, C, H, W)


class ResBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int, t_dim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(8, c_in)
        self.conv1 = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.temb = nn.Linear(t_dim, c_out)
        self.norm2 = nn.GroupNorm(8, c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)
        self.skip = nn.Conv2d(c_in, c_out, 1) if c_in != c_out else nn.Identity()

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.temb(temb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class Denoiser(nn.Module):
    """Two-level U-shaped noise predictor with prompt cross-attention per level.

    ``calls`` counts forward passes so callers can check the one-step contract.
    """

    def __init__(self, latent_ch: int = 4, width: int = 32, prompt_dim: int = 64, t_dim: int = 64):
        super().__init__()
        self.prompt_dim = prompt_dim
        self.t_dim = t_dim
        self.time_mlp = nn.Sequential(nn.Linear(t_dim, t_dim), nn.SiLU(), nn.Linear(t_dim, t_dim))
        self.conv_in = nn.Conv2d(latent_ch, width, 3, padding=1)
        self.block1 = ResBlock(width, width, t_dim)
        self.attn1 = CrossAttention(width, prompt_dim)
        self.down = nn.Conv2d(width, width * 2, 3, stride=2, padding=1)
        self.block2 = ResBlock(width * 2, width * 2, t_dim)
        self.attn2 = CrossAttention(width * 2, prompt_dim)
        self.up = nn.Conv2d(width * 2, width, 3, padding=1)
        self.block3 = ResBlock(width * 2, width, t_dim)
        self.norm_out = nn.GroupNorm(8, width)
        self.conv_out = nn.Conv2d(width, latent_ch, 3, padding=1)
        self.calls = 0

    # attention projections of both levels plus the two widest convolutions
    lora_targets = tuple(
        [f"attn{i}.{p}" for i in (1, 2) for p in ("q", "k", "v", "out")] + ["block2.conv1", "block2.conv2"]
    )

    def forward(self, z, t, prompt):
        if prompt.shape[-1] != self.prompt_dim:
            raise ValueError(f"prompt width {prompt.shape[-1]} does not match denoiser width {self.prompt_dim}")
        self.calls += 1
        t = torch.as_tensor(t).reshape(-1)
        if t.numel() == 1:
            t = t.expand(z.shape[0])
        temb = self.time_mlp(timestep_embedding(t, self.t_dim).to(z.dtype))
        h1 = self.attn1(self.block1(self.conv_in(z), temb), prompt)
        h2 = self.attn2(self.block2(self.down(h1), temb), prompt)
        u = self.up(F.interpolate(h2, scale_factor=2, mode="nearest"))
        h = self.block3(torch.cat([u, h1], dim=1), temb)
        return self.conv_out(F.silu(self.norm_out(h)))
