"""Visual representation embedder: VQ encoders, dictionaries and stage-1 losses.

An encoder maps a face to ``K`` feature vectors of width ``d``. Matching each
feature to its nearest dictionary row yields tokens; looking the tokens back up
gives the prompt embedding the denoiser attends over.
"""
from __future__ import annotations

import math

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import kernels
from .images import to_tensor
from .losses import LossReport, _clamp_prob, _same_shape

QUANT_BETA = 0.25
ASSOC_TEMPERATURE = 0.07


class CodeDictionary(nn.Module):
    """``N x d`` learnable code items.

    ``distance_evals`` counts matching calls so tests can confirm that
    embedding never searches.
    """

    def __init__(self, n_codes: int = 256, dim: int = 64, items=None):
        super().__init__()
        if n_codes < 2:
            raise ValueError("a dictionary needs at least 2 items")
        if items is None:
            items = torch.empty(n_codes, dim).uniform_(-1.0 / n_codes, 1.0 / n_codes)
        items = torch.as_tensor(items, dtype=torch.float32)
        if items.shape != (n_codes, dim):
            raise ValueError(f"items shape {tuple(items.shape)} != ({n_codes}, {dim})")
        self.items = nn.Parameter(items.clone())
        self.distance_evals = 0

    @property
    def n_codes(self):
        return self.items.shape[0]

    @property
    def dim(self):
        return self.items.shape[1]

    def items_np(self) -> np.ndarray:
        return self.items.detach().double().numpy()


class SelfAttention(nn.Module):
    """Single-head self-attention that keeps its last weight matrix."""

    def __init__(self, dim: int):
        super().__init__()
        self.norm = nn.LayerNorm(dim)
        self.qkv = nn.Linear(dim, 3 * dim)
        self.out = nn.Linear(dim, dim)
        self.last_weights = None

    def forward(self, x):
        q, k, v = self.qkv(self.norm(x)).chunk(3, dim=-1)
        att = torch.softmax(q @ k.transpose(1, 2) / math.sqrt(x.shape[-1]), dim=-1)
        self.last_weights = att.detach()
        return x + self.out(att @ v)


class VreEncoder(nn.Module):
    def __init__(self, dim: int = 64, width: int = 32, image_size: int = 64):
        super().__init__()
        self.dim = dim
        self.image_size = image_size
        self.grid = image_size // 4
        self.conv = nn.Sequential(
            nn.Conv2d(3, width, 3, padding=1),
            nn.SiLU(),
            nn.Conv2d(width, width * 2, 4, stride=2, padding=1),
            nn.SiLU(),
            nn.Conv2d(width * 2, dim, 4, stride=2, padding=1),
            nn.SiLU(),
            nn.Conv2d(dim, dim, 3, padding=1),
        )
        self.attn = SelfAttention(dim)
        self.proj = nn.Linear(dim, dim)

    @property
    def n_tokens(self):
        return self.grid * self.grid

    def conv_features(self, x):
        return self.conv(x).flatten(2).transpose(1, 2)

    def forward(self, x):
        """``B x 3 x S x S`` -> ``B x K x d``."""
        if x.shape[-2:] != (self.image_size, self.image_size):
            raise ValueError(f"expected {self.image_size}x{self.image_size} images, got {tuple(x.shape[-2:])}")
        return self.proj(self.attn(self.conv_features(x)))


class VreDecoder(nn.Module):
    def __init__(self, dim: int = 64, width: int = 32, grid: int = 16):
        super().__init__()
        self.grid = grid
        self.net = nn.Sequential(
            nn.Conv2d(dim, width * 2, 3, padding=1),
            nn.SiLU(),
            nn.Upsample(scale_factor=2, mode="nearest"),
            nn.Conv2d(width * 2, width, 3, padding=1),
            nn.SiLU(),
            nn.Upsample(scale_factor=2, mode="nearest"),
            nn.Conv2d(width, width, 3, padding=1),
            nn.SiLU(),
            nn.Conv2d(width, 3, 3, padding=1),
        )

    def forward(self, zq):
        B, K, d = zq.shape
        h = zq.transpose(1, 2).reshape(B, d, self.grid, self.grid)
        return torch.sigmoid(self.net(h))


# tokenizer / embedder ------------------------------------------------------------


def _image_tensor(image, enc: VreEncoder):
    arr = np.asarray(image, dtype=np.float64)
    if arr.shape != (enc.image_size, enc.image_size, 3):
        raise ValueError(f"expected a {enc.image_size}x{enc.image_size}x3 image, got {arr.shape}")
    if arr.min() < 0 or arr.max() > 1:
        raise ValueError("image values must lie in [0, 1]")
    return to_tensor(arr)


def encode(image, enc: VreEncoder) -> np.ndarray:
    """Image ``H x W x 3`` -> ``K x d`` feature grid (float64)."""
    with torch.no_grad():
        return enc(_image_tensor(image, enc))[0].double().numpy()


def match(features, dictionary: CodeDictionary) -> np.ndarray:
    """Nearest dictionary index per feature; ties go to the lowest index."""
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[1] != dictionary.dim:
        raise ValueError(f"features must be K x {dictionary.dim}, got {features.shape}")
    dictionary.distance_evals += 1
    return kernels.nearest_code(features, dictionary.items_np())


def embed(tokens, dictionary: CodeDictionary) -> np.ndarray:
    tokens = np.asarray(tokens)
    if tokens.size and (tokens.min() < 0 or tokens.max() >= dictionary.n_codes):
        raise IndexError(f"token outside [0, {dictionary.n_codes})")
    return dictionary.items_np()[tokens]


class VisualPromptEmbedder(nn.Module):
    """LQ encoder plus LQ dictionary; turns a face into a prompt embedding."""

    def __init__(self, encoder: VreEncoder, dictionary: CodeDictionary):
        super().__init__()
        self.encoder = encoder
        self.dictionary = dictionary

    def forward(self, image) -> np.ndarray:
        return vre_forward(image, self)

    def prompt_batch(self, x: torch.Tensor) -> torch.Tensor:
        """Batched prompts for ``B x 3 x H x W`` input, same matching path as ``match``."""
        with torch.no_grad():
            feats = self.encoder(x).double().numpy()
        items = self.dictionary.items_np()
        self.dictionary.distance_evals += len(feats)
        prompts = np.stack([items[kernels.nearest_code(f, items)] for f in feats])
        return torch.from_numpy(prompts).float()


def vre_forward(image, vre: VisualPromptEmbedder) -> np.ndarray:
    return embed(match(encode(image, vre.encoder), vre.dictionary), vre.dictionary)


# training path -----------------------------------------------------------------


def straight_through(z, z_q):
    """Forward value ``z_q``; gradient flows to ``z`` unchanged."""
    _same_shape(z, z_q)
    return z + (z_q - z).detach()


def quantize(z: torch.Tensor, dictionary: CodeDictionary):
    """Nearest-code lookup for a ``B x K x d`` batch; returns ``(z_q, tokens)``."""
    flat = z.detach().reshape(-1, z.shape[-1]).double().numpy()
    tokens = torch.from_numpy(kernels.nearest_code(flat, dictionary.items_np()))
    dictionary.distance_evals += 1
    z_q = dictionary.items[tokens].reshape(z.shape)
    return z_q, tokens.reshape(z.shape[:-1])


def quantization_loss(z, z_q, beta: float = QUANT_BETA, reduction: str = "sum") -> torch.Tensor:
    """||sg(z) - z_q||^2 + beta ||z - sg(z_q)||^2.

    With ``reduction="sum"`` squared norms are taken over the last axis and
    averaged over the rest; ``"mean"`` averages over every element instead,
    which is the sum form divided by the token width.
    """
    _same_shape(z, z_q)
    if beta < 0:
        raise ValueError("beta must be non-negative")
    if reduction not in ("sum", "mean"):
        raise ValueError(f"unknown reduction {reduction!r}")
    codebook = ((z.detach() - z_q) ** 2).sum(-1).mean()
    commit = ((z - z_q.detach()) ** 2).sum(-1).mean()
    loss = codebook + beta * commit
    return loss / z.shape[-1] if reduction == "mean" else loss


def perceptual_loss(I_h, I_rec, feat) -> torch.Tensor:
    fa, fb = feat(I_h)[1:], feat(I_rec)[1:]
    return sum(((a - b) ** 2).mean() for a, b in zip(fa, fb))


def reconstruction_losses(I_h, I_rec, feat, disc) -> LossReport:
    _same_shape(I_h, I_rec)
    dis = torch.log(_clamp_prob(disc(I_h))) + torch.log(1.0 - _clamp_prob(disc(I_rec)))
    return LossReport(
        l1=(I_h - I_rec).abs().mean(),
        per=perceptual_loss(I_h, I_rec, feat),
        dis=dis.mean(),
    )


def association_logits(z_H, z_L, temperature: float = ASSOC_TEMPERATURE):
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    _same_shape(z_H, z_L)
    a = F.normalize(z_H, dim=-1)
    b = F.normalize(z_L, dim=-1)
    return a @ b.transpose(-1, -2) / temperature


def association_loss(z_H, z_L, temperature: float = ASSOC_TEMPERATURE) -> torch.Tensor:
    """Symmetric cross-entropy on the K x K HQ/LQ similarity matrix.

    Accepts ``K x d`` or ``B x K x d``; the diagonal is the positive pair.
    """
    m = association_logits(z_H, z_L, temperature)
    ce_h = -torch.diagonal(torch.log_softmax(m, dim=-1), dim1=-2, dim2=-1).mean(-1)
    ce_l = -torch.diagonal(torch.log_softmax(m, dim=-2), dim1=-2, dim2=-1).mean(-1)
    return ((ce_h + ce_l) / 2).mean()


STAGE1_COMPONENTS = ("l1", "per", "dis", "quant", "assoc")


def stage1_total(components, lambda_per: float = 1.0, lambda_dis: float = 0.8, lambda_assoc: float = 0.0):
    needed = STAGE1_COMPONENTS if lambda_assoc != 0 else STAGE1_COMPONENTS[:-1]
    missing = [k for k in needed if k not in components]
    if missing:
        raise KeyError(f"missing stage-1 loss component(s): {missing}")
    total = components["l1"] + lambda_per * components["per"] + lambda_dis * components["dis"] + components["quant"]
    if lambda_assoc != 0:
        total = total + lambda_assoc * components["assoc"]
    return total


class VreBranch(nn.Module):
    """Encoder, dictionary and stage-1-only decoder for one quality domain."""

    def __init__(self, dim: int = 64, n_codes: int = 256, width: int = 32, image_size: int = 64):
        super().__init__()
        self.encoder = VreEncoder(dim, width, image_size)
        self.dictionary = CodeDictionary(n_codes, dim)
        self.decoder = VreDecoder(dim, width, self.encoder.grid)

    def forward(self, x):
        z = self.encoder(x)
        z_q, tokens = quantize(z, self.dictionary)
        rec = self.decoder(straight_through(z, z_q))
        return {"rec": rec, "z": z, "z_q": z_q, "tokens": tokens}

    def init_dictionary(self, x, generator=None):
        """One-time data-dependent init: codes copied from encoder features of ``x``."""
        with torch.no_grad():
            z = self.encoder(x).reshape(-1, self.dictionary.dim)
            pick = torch.randperm(z.shape[0], generator=generator)[: self.dictionary.n_codes]
            if len(pick) < self.dictionary.n_codes:
                pick = pick[torch.randint(len(pick), (self.dictionary.n_codes,), generator=generator)]
            self.dictionary.items.copy_(z[pick])

    def embedder(self) -> VisualPromptEmbedder:
        return VisualPromptEmbedder(self.encoder, self.dictionary)


# inspection ----------------------------------------------------------------------


def inspect(encoder: VreEncoder, image, dictionary: CodeDictionary | None = None, batch=None,
            positions=None, channels=(0, 1, 2, 3)) -> dict:
    """Attention maps, encoder activations and dictionary usage for one image.

    ``att[k]`` is the attention of query position ``k`` over all positions and
    ``enc[c]`` is channel ``c`` of the conv features, both reshaped to the grid.
    """
    g = encoder.grid
    K = g * g
    if positions is None:
        positions = (K // 2 + g // 2, K // 4 + g // 4, K // 2 + g // 4, 3 * K // 4 + g // 2)
    x = _image_tensor(image, encoder)
    with torch.no_grad():
        conv = encoder.conv_features(x)[0]
        encoder(x)
    attention = encoder.attn.last_weights[0].double().numpy()
    bundle = {
        "attention": attention,
        "att": {int(k): attention[k].reshape(g, g) for k in positions},
        "enc": {int(c): conv[:, c].double().numpy().reshape(g, g) for c in channels},
    }
    if dictionary is not None:
        images = [image] if batch is None else list(batch)
        usage = np.zeros(dictionary.n_codes, dtype=np.int64)
        for im in images:
            usage += np.bincount(match(encode(im, encoder), dictionary), minlength=dictionary.n_codes)
        bundle["usage"] = usage
    return bundle
