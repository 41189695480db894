"""Noise schedule, forward diffusion and closed-form clean-latent recovery.

The arithmetic helpers accept numpy arrays or torch tensors alike. Timesteps
are 1-based (``1..T``); ``alpha_bar_at(0)`` is 1, the noise-free limit.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray
    beta_start: float = float("nan")
    beta_end: float = float("nan")

    def alpha_bar_at(self, t: int) -> float:
        t = int(t)
        if not 0 <= t <= self.T:
            raise ValueError(f"timestep {t} outside [0, {self.T}]")
        return 1.0 if t == 0 else float(self.alpha_bars[t - 1])

    def to_dict(self) -> dict:
        return {"T": self.T, "beta_start": self.beta_start, "beta_end": self.beta_end}


def build_schedule(T: int, beta_start: float, beta_end: float) -> NoiseSchedule:
    """Linear beta schedule with alpha_t = 1 - beta_t and cumulative alpha_bar."""
    if int(T) != T or T < 1:
        raise ValueError(f"T must be a positive integer, got {T}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    betas = np.linspace(beta_start, beta_end, int(T), dtype=np.float64)
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    for a in (betas, alphas, alpha_bars):
        a.setflags(write=False)
    return NoiseSchedule(int(T), betas, alphas, alpha_bars, float(beta_start), float(beta_end))


def _check_shapes(a, b, what):
    if tuple(a.shape) != tuple(b.shape):
        raise ValueError(f"{what} shape {tuple(b.shape)} does not match latent shape {tuple(a.shape)}")


def diffuse_with(z, eps, alpha_bar: float):
    return math.sqrt(alpha_bar) * z + math.sqrt(1.0 - alpha_bar) * eps


def recover_with(z_t, eps_hat, alpha_bar: float):
    if alpha_bar <= 0.0:
        raise ZeroDivisionError("alpha_bar is zero; the clean latent is not recoverable")
    return (z_t - math.sqrt(1.0 - alpha_bar) * eps_hat) / math.sqrt(alpha_bar)


def forward_diffuse(z, t: int, eps, sched: NoiseSchedule):
    """z_t = sqrt(alpha_bar_t) z + sqrt(1 - alpha_bar_t) eps."""
    if not 1 <= int(t) <= sched.T:
        raise ValueError(f"timestep {t} outside [1, {sched.T}]")
    _check_shapes(z, eps, "noise")
    return diffuse_with(z, eps, sched.alpha_bar_at(t))


def recover_clean(z_t, eps_hat, t: int, sched: NoiseSchedule):
    """Invert ``forward_diffuse`` for a given noise estimate."""
    _check_shapes(z_t, eps_hat, "noise estimate")
    return recover_with(z_t, eps_hat, sched.alpha_bar_at(t))


def forward_diffuse_batch(z, t, eps, sched: NoiseSchedule):
    """Per-sample timesteps: ``t`` is a length-B integer tensor, ``z`` is B x ..."""
    import torch

    ab = torch.tensor(sched.alpha_bars, dtype=z.dtype)[t.long() - 1]
    ab = ab.view(-1, *([1] * (z.dim() - 1)))
    return ab.sqrt() * z + (1.0 - ab).sqrt() * eps


@dataclass
class GeneratorConfig:
    T_L: int = 300
    latent_shape: tuple = (16, 16, 4)
    lora_rank: int = 4
    lora_scale: float = 1.0

    def validate(self, sched: NoiseSchedule | None = None):
        if self.lora_rank < 1:
            raise ValueError("lora_rank must be >= 1")
        T = sched.T if sched is not None else None
        if self.T_L < 0 or (T is not None and self.T_L > T):
            raise ValueError(f"T_L={self.T_L} outside [0, {T}]")
