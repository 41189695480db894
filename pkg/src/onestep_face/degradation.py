"""Seeded two-stage synthetic degradation: blur -> downsample -> noise -> compress.

Sampling ranges are data (``DegradationRecipe``, loadable from JSON); the
defaults are placeholders chosen for 64x64 faces.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import kernels

# IJG reference luminance table, used for every channel.
BASE_QTABLE = np.array(
    [
        [16, 11, 10, 16, 24, 40, 51, 61],
        [12, 12, 14, 19, 26, 58, 60, 55],
        [14, 13, 16, 24, 40, 57, 69, 56],
        [14, 17, 22, 29, 51, 87, 80, 62],
        [18, 22, 37, 56, 68, 109, 103, 77],
        [24, 35, 55, 64, 81, 104, 113, 92],
        [49, 64, 78, 87, 103, 121, 120, 101],
        [72, 92, 95, 98, 112, 100, 103, 99],
    ],
    dtype=np.float64,
)

# smallest quantiser step; keeps quality=100 inside one 8-bit level
MIN_QSTEP = 0.5


def quality_table(quality: int) -> np.ndarray:
    """IJG quality scaling without integer flooring, floored at ``MIN_QSTEP``."""
    if not 1 <= quality <= 100:
        raise ValueError(f"quality must be in [1, 100], got {quality}")
    scale = 5000.0 / quality if quality < 50 else 200.0 - 2.0 * quality
    return np.clip(BASE_QTABLE * scale / 100.0, MIN_QSTEP, 255.0)


def compress_roundtrip(image: np.ndarray, quality: int) -> np.ndarray:
    """8x8 block-DCT quantise/dequantise round trip, output clipped to [0, 1]."""
    table = quality_table(int(quality))
    out = kernels.dct_roundtrip(np.asarray(image, dtype=np.float64) * 255.0, table) / 255.0
    return np.clip(out, 0.0, 1.0)


def _check_range(name, lo, hi):
    if not (np.isfinite(lo) and np.isfinite(hi)) or lo > hi:
        raise ValueError(f"degenerate range for {name}: [{lo}, {hi}]")


@dataclass
class StageRanges:
    blur_sigma: tuple[float, float] = (0.1, 3.0)
    down_factor: tuple[float, float] = (1.0, 4.0)
    noise_sigma: tuple[float, float] = (0.0, 0.1)
    quality: tuple[int, int] = (30, 95)
    compress: bool = True

    def validate(self):
        _check_range("blur_sigma", *self.blur_sigma)
        _check_range("down_factor", *self.down_factor)
        _check_range("noise_sigma", *self.noise_sigma)
        _check_range("quality", *self.quality)
        if self.blur_sigma[0] < 0 or self.noise_sigma[0] < 0:
            raise ValueError("sigma ranges must be non-negative")
        if self.down_factor[0] < 1:
            raise ValueError("down_factor must be >= 1")
        if self.compress and not (1 <= self.quality[0] and self.quality[1] <= 100):
            raise ValueError("quality range must lie in [1, 100]")


@dataclass
class DegradationRecipe:
    stages: list[StageRanges] = field(default_factory=lambda: [StageRanges(), StageRanges()])
    seed: int = 0

    def __post_init__(self):
        self.stages = [s if isinstance(s, StageRanges) else StageRanges(**s) for s in self.stages]
        for s in self.stages:
            s.blur_sigma = tuple(s.blur_sigma)
            s.down_factor = tuple(s.down_factor)
            s.noise_sigma = tuple(s.noise_sigma)
            s.quality = tuple(s.quality)
        self.validate()

    def validate(self):
        if not self.stages:
            raise ValueError("recipe needs at least one stage")
        for s in self.stages:
            s.validate()

    def with_seed(self, seed: int) -> "DegradationRecipe":
        return DegradationRecipe(stages=[StageRanges(**asdict(s)) for s in self.stages], seed=int(seed))

    def to_dict(self) -> dict:
        return {"stages": [asdict(s) for s in self.stages], "seed": self.seed}

    @classmethod
    def from_dict(cls, data: dict) -> "DegradationRecipe":
        unknown = set(data) - {"stages", "seed"}
        if unknown:
            raise ValueError(f"unknown recipe field(s): {sorted(unknown)}")
        return cls(stages=data.get("stages", [asdict(StageRanges()), asdict(StageRanges())]), seed=data.get("seed", 0))

    @classmethod
    def load(cls, path) -> "DegradationRecipe":
        return cls.from_dict(json.loads(Path(path).read_text()))

    @classmethod
    def identity(cls, stages: int = 2, compress: bool = False) -> "DegradationRecipe":
        st = StageRanges((0.0, 0.0), (1.0, 1.0), (0.0, 0.0), (100, 100), compress)
        return cls(stages=[StageRanges(**asdict(st)) for _ in range(stages)])


def _apply_stage(img, rng, st: StageRanges):
    sigma = float(rng.uniform(*st.blur_sigma))
    factor = float(rng.uniform(*st.down_factor))
    noise = float(rng.uniform(*st.noise_sigma))
    quality = int(rng.integers(st.quality[0], st.quality[1] + 1))

    img = kernels.gaussian_blur(img, sigma)
    H, W = img.shape[:2]
    h, w = max(1, int(round(H / factor))), max(1, int(round(W / factor)))
    img = kernels.resize_bilinear(img, h, w)
    if noise > 0:
        img = img + rng.normal(0.0, noise, img.shape)
    img = np.clip(img, 0.0, 1.0)
    if st.compress:
        img = compress_roundtrip(img, quality)
    params = {
        "blur_sigma": sigma,
        "down_factor": factor,
        "size": [h, w],
        "noise_sigma": noise,
        "quality": quality if st.compress else None,
    }
    return img, params


def degrade(I_H: np.ndarray, recipe: DegradationRecipe) -> tuple[np.ndarray, dict]:
    """Synthesise a low-quality image; returns it with the sampled parameters."""
    I_H = np.asarray(I_H, dtype=np.float64)
    if I_H.min() < 0 or I_H.max() > 1:
        raise ValueError("input image must lie in [0, 1]")
    recipe.validate()
    rng = np.random.default_rng(recipe.seed)
    img = I_H
    stages = []
    for st in recipe.stages:
        img, p = _apply_stage(img, rng, st)
        stages.append(p)
    img = kernels.resize_bilinear(img, I_H.shape[0], I_H.shape[1])
    return np.clip(img, 0.0, 1.0), {"seed": recipe.seed, "stages": stages}


def sample_seed(base: int, index: int) -> int:
    """Per-image seed; independent of processing order."""
    return int(base) ^ int(index)


def degrade_batch(images: np.ndarray, recipe: DegradationRecipe, base_seed: int | None = None) -> np.ndarray:
    base = recipe.seed if base_seed is None else base_seed
    return np.stack([degrade(img, recipe.with_seed(sample_seed(base, i)))[0] for i, img in enumerate(images)])
