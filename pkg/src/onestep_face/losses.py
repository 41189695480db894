"""Stage-2 alignment losses: identity, edge-aware DISTS, latent GAN, MSE.

All functions take ``B x 3 x H x W`` image tensors (or ``B x C x h x w``
latents) and reduce to a scalar by averaging over the batch.
"""
from __future__ import annotations

import json
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .diffusion import NoiseSchedule, forward_diffuse_batch
from .networks import PROB_EPS

DISTS_C = 1e-6
SOBEL_EPS = 1e-12


class LossReport(dict):
    """Named loss components; values may be tensors or floats."""

    def scalars(self) -> dict[str, float]:
        return {k: float(v.detach()) if torch.is_tensor(v) else float(v) for k, v in self.items()}

    def to_json(self, **extra) -> str:
        rec = dict(extra)
        rec.update(self.scalars())
        return json.dumps(rec, sort_keys=True)


@dataclass
class LossWeights:
    lambda_dis: float = 0.1
    lambda_id: float = 0.5
    lambda_per: float = 1.0

    def __post_init__(self):
        for name in ("lambda_dis", "lambda_id", "lambda_per"):
            v = float(getattr(self, name))
            if not (v >= 0 and v < float("inf")):
                raise ValueError(f"{name} must be finite and non-negative, got {v}")


def _same_shape(a, b):
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def _clamp_prob(p):
    return p.clamp(PROB_EPS, 1.0 - PROB_EPS)


# identity ------------------------------------------------------------------------


def identity_loss(I_H, I_hat, face_embedder) -> torch.Tensor:
    """1 - cos(F(I_H), F(I_hat)), averaged over the batch."""
    _same_shape(I_H, I_hat)
    a, b = face_embedder(I_H), face_embedder(I_hat)
    cos = F.cosine_similarity(a, b, dim=-1, eps=1e-12)
    return (1.0 - cos).clamp(0.0, 2.0).mean()


# sobel / DISTS -----------------------------------------------------------------


def sobel(x: torch.Tensor) -> torch.Tensor:
    """Per-channel Sobel gradient magnitude with replicate padding.

    Differentiable everywhere: uses ``sqrt(g^2 + eps) - sqrt(eps)``, which is
    exactly zero on flat regions and within 1e-6 of the true magnitude.
    """
    kx = torch.tensor([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]], dtype=x.dtype)
    C = x.shape[1]
    wx = kx.expand(C, 1, 3, 3)
    wy = kx.t().expand(C, 1, 3, 3)
    p = F.pad(x, (1, 1, 1, 1), mode="replicate")
    gx = F.conv2d(p, wx, groups=C)
    gy = F.conv2d(p, wy, groups=C)
    eps = torch.tensor(SOBEL_EPS, dtype=x.dtype)
    return torch.sqrt(gx * gx + gy * gy + eps) - torch.sqrt(eps)


def _stage_similarity(fx, fy, c=DISTS_C):
    mx, my = fx.mean(dim=(2, 3)), fy.mean(dim=(2, 3))
    dx = fx - mx[:, :, None, None]
    dy = fy - my[:, :, None, None]
    vx = (dx * dx).mean(dim=(2, 3))
    vy = (dy * dy).mean(dim=(2, 3))
    cov = (dx * dy).mean(dim=(2, 3))
    structure = (2 * mx * my + c) / (mx * mx + my * my + c)
    texture = (2 * cov + c) / (vx + vy + c)
    return 0.5 * (structure + texture).mean(dim=1)


def dists_per_sample(x, y, feat) -> torch.Tensor:
    _same_shape(x, y)
    sims = [_stage_similarity(a, b) for a, b in zip(feat(x), feat(y))]
    return 1.0 - torch.stack(sims, dim=0).mean(dim=0)


def dists(x, y, feat) -> torch.Tensor:
    """Structure (means) and texture (covariances) similarity over feature stages.

    Uniform weights across stages and across channels within a stage.
    """
    return dists_per_sample(x, y, feat).mean()


def ea_dists(x, y, feat) -> torch.Tensor:
    return dists(x, y, feat) + dists(sobel(x), sobel(y), feat)


# latent GAN --------------------------------------------------------------------


def _timesteps(t, batch, sched: NoiseSchedule, generator):
    if t is None:
        return torch.randint(1, sched.T + 1, (batch,), generator=generator)
    t = torch.as_tensor(t, dtype=torch.long).reshape(-1)
    if t.numel() == 1:
        t = t.expand(batch)
    if (t < 1).any() or (t > sched.T).any():
        raise ValueError(f"timesteps must lie in [1, {sched.T}]")
    return t


def _noise_like(z, eps, generator):
    if eps is not None:
        _same_shape(z, eps)
        return eps
    return torch.randn(z.shape, generator=generator, dtype=z.dtype)


def gan_generator_loss(z_hat, t, D, sched: NoiseSchedule, eps=None, generator=None) -> torch.Tensor:
    """-E[log D(forward_diffuse(z_hat, t))]; ``t=None`` samples uniform [1, T]."""
    t = _timesteps(t, z_hat.shape[0], sched, generator)
    z_t = forward_diffuse_batch(z_hat, t, _noise_like(z_hat, eps, generator), sched)
    return -torch.log(_clamp_prob(D(z_t, t))).mean()


def gan_discriminator_loss(
    z_H, z_hat, t, D, sched: NoiseSchedule, eps_real=None, eps_fake=None, generator=None
) -> torch.Tensor:
    """-E[log(1 - D(fake_t))] - E[log D(real_t)] with one shared t, separate noise."""
    _same_shape(z_H, z_hat)
    t = _timesteps(t, z_H.shape[0], sched, generator)
    eps_fake = _noise_like(z_hat, eps_fake, generator)
    eps_real = _noise_like(z_H, eps_real, generator)
    fake = forward_diffuse_batch(z_hat, t, eps_fake, sched)
    real = forward_diffuse_batch(z_H, t, eps_real, sched)
    return -torch.log(1.0 - _clamp_prob(D(fake, t))).mean() - torch.log(_clamp_prob(D(real, t))).mean()


# totals --------------------------------------------------------------------------


def mse(a, b) -> torch.Tensor:
    _same_shape(a, b)
    return ((a - b) ** 2).mean()


GENERATOR_COMPONENTS = ("gan", "id", "ea_dists", "mse")


def combine_generator(components, w: LossWeights):
    missing = [k for k in GENERATOR_COMPONENTS if k not in components]
    if missing:
        raise KeyError(f"missing generator loss component(s): {missing}")
    return (
        w.lambda_dis * components["gan"]
        + w.lambda_id * components["id"]
        + w.lambda_per * components["ea_dists"]
        + components["mse"]
    )


def generator_total(
    I_H, I_hat, z_H, z_hat, w: LossWeights, face_embedder, feat, D, sched,
    t=None, eps=None, generator=None, perceptual=None,
) -> LossReport:
    """Weighted generator objective; the report also carries every component.

    ``perceptual`` swaps the edge-aware DISTS term for another ``f(x, y, feat)``.
    """
    _same_shape(z_H, z_hat)
    perceptual = perceptual or ea_dists
    rep = LossReport(
        gan=gan_generator_loss(z_hat, t, D, sched, eps=eps, generator=generator),
        id=identity_loss(I_H, I_hat, face_embedder),
        ea_dists=perceptual(I_hat, I_H, feat),
        mse=mse(I_H, I_hat),
    )
    rep["total"] = combine_generator(rep, w)
    return rep
