"""Low-rank adapters for linear and conv layers."""
from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import nn


class LoraAdapter(nn.Module):
    """``scale * up @ down`` added to a frozen layer; ``up`` starts at zero."""

    def __init__(self, target: str, d_in: int, d_out: int, rank: int, scale: float = 1.0, generator=None):
        super().__init__()
        if rank < 1:
            raise ValueError("rank must be >= 1")
        self.target = target
        self.rank = rank
        self.scale = float(scale)
        down = torch.randn(rank, d_in, generator=generator) / math.sqrt(d_in)
        self.down = nn.Parameter(down)
        self.up = nn.Parameter(torch.zeros(d_out, rank))

    @property
    def d_in(self):
        return self.down.shape[1]

    @property
    def d_out(self):
        return self.up.shape[0]

    def delta(self) -> torch.Tensor:
        return self.scale * (self.up @ self.down)


class LoraLinear(nn.Module):
    def __init__(self, base: nn.Linear, adapter: LoraAdapter):
        super().__init__()
        self.base = base
        self.adapter = adapter

    def forward(self, x):
        a = self.adapter
        return self.base(x) + a.scale * F.linear(F.linear(x, a.down), a.up)


class LoraConv2d(nn.Module):
    def __init__(self, base: nn.Conv2d, adapter: LoraAdapter):
        super().__init__()
        self.base = base
        self.adapter = adapter

    def forward(self, x):
        b = self.base
        w = self.adapter.delta().view_as(b.weight)
        return b(x) + F.conv2d(x, w, None, b.stride, b.padding, b.dilation, b.groups)


def _layer_dims(layer):
    if isinstance(layer, nn.Linear):
        return layer.in_features, layer.out_features
    if isinstance(layer, nn.Conv2d):
        if layer.groups != 1:
            raise ValueError("grouped convolutions are not supported")
        kh, kw = layer.kernel_size
        return layer.in_channels * kh * kw, layer.out_channels
    raise TypeError(f"cannot adapt layer of type {type(layer).__name__}")


def make_adapters(model: nn.Module, targets, rank: int, scale: float = 1.0, seed: int = 0) -> list[LoraAdapter]:
    g = torch.Generator().manual_seed(seed)
    adapters = []
    for name in targets:
        d_in, d_out = _layer_dims(model.get_submodule(name))
        adapters.append(LoraAdapter(name, d_in, d_out, rank, scale, generator=g))
    return adapters


def apply_lora(model: nn.Module, adapters) -> nn.Module:
    """Wrap each adapter's target layer in place and freeze every base weight.

    Afterwards only adapter parameters require gradients.
    """
    for p in model.parameters():
        p.requires_grad_(False)
    for a in adapters:
        parent_name, _, attr = a.target.rpartition(".")
        parent = model.get_submodule(parent_name) if parent_name else model
        layer = getattr(parent, attr)
        d_in, d_out = _layer_dims(layer)
        if (a.d_in, a.d_out) != (d_in, d_out):
            raise ValueError(
                f"adapter for {a.target!r} is {a.d_out}x{a.d_in}, layer needs {d_out}x{d_in}"
            )
        wrapper = LoraLinear(layer, a) if isinstance(layer, nn.Linear) else LoraConv2d(layer, a)
        setattr(parent, attr, wrapper)
        for p in a.parameters():
            p.requires_grad_(True)
    return model


def lora_parameters(model: nn.Module):
    return [p for n, p in model.named_parameters() if ".adapter." in n]


def base_parameters(model: nn.Module):
    return {n: p for n, p in model.named_parameters() if ".adapter." not in n}
