"""One-step restoration: encode, one denoiser pass, closed-form clean latent, decode."""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor

import numpy as np
import torch

from .diffusion import GeneratorConfig, NoiseSchedule, recover_with
from .images import to_numpy, to_tensor
from .networks import Autoencoder, Denoiser
from .vre import VisualPromptEmbedder, vre_forward


def generate(z_L, prompts, model: Denoiser, cfg: GeneratorConfig, sched: NoiseSchedule):
    """Predicted HQ latent from an LQ latent batch (differentiable)."""
    t = torch.full((z_L.shape[0],), cfg.T_L, dtype=torch.long)
    eps_hat = model(z_L, t, prompts)
    return recover_with(z_L, eps_hat, sched.alpha_bar_at(cfg.T_L))


def _prompt_tensor(p, model: Denoiser):
    p = torch.as_tensor(np.asarray(p), dtype=torch.float32)
    if p.dim() == 2:
        p = p[None]
    if p.shape[-1] != model.prompt_dim:
        raise ValueError(f"prompt width {p.shape[-1]} does not match denoiser width {model.prompt_dim}")
    return p


def one_step_restore(I_L, p, model: Denoiser, ae: Autoencoder, cfg: GeneratorConfig, sched: NoiseSchedule):
    """Restore one ``H x W x 3`` image given its prompt embedding ``p`` (``K x d``)."""
    I_L = np.asarray(I_L, dtype=np.float64)
    if I_L.min() < 0 or I_L.max() > 1:
        raise ValueError("input image must lie in [0, 1]")
    prompt = _prompt_tensor(p, model)
    with torch.no_grad():
        z_L = ae.encode(to_tensor(I_L))
        z_hat = generate(z_L, prompt, model, cfg, sched)
        out = ae.decode(z_hat).clamp(0.0, 1.0)
    return to_numpy(out)


class OneStepRestorer:
    """Immutable bundle of everything inference needs.

    Prompt embedding and latent encoding do not depend on each other, so
    ``restore(..., overlap=True)`` runs them on two threads. Results are the
    same bytes either way.
    """

    def __init__(self, vre: VisualPromptEmbedder, model: Denoiser, ae: Autoencoder,
                 cfg: GeneratorConfig, sched: NoiseSchedule):
        self.vre = vre.eval()
        self.model = model.eval()
        self.ae = ae.eval()
        self.cfg = cfg
        self.sched = sched
        self._pool = None

    def embed_prompt(self, I_L) -> np.ndarray:
        return vre_forward(I_L, self.vre)

    def encode_latent(self, I_L) -> torch.Tensor:
        with torch.no_grad():
            return self.ae.encode(to_tensor(np.asarray(I_L, dtype=np.float64)))

    def denoise_decode(self, z_L, p) -> np.ndarray:
        with torch.no_grad():
            z_hat = generate(z_L, _prompt_tensor(p, self.model), self.model, self.cfg, self.sched)
            return to_numpy(self.ae.decode(z_hat).clamp(0.0, 1.0))

    def restore(self, I_L, overlap: bool = False) -> np.ndarray:
        if overlap:
            if self._pool is None:
                self._pool = ThreadPoolExecutor(max_workers=2)
            fp = self._pool.submit(self.embed_prompt, I_L)
            fz = self._pool.submit(self.encode_latent, I_L)
            p, z_L = fp.result(), fz.result()
        else:
            p = self.embed_prompt(I_L)
            z_L = self.encode_latent(I_L)
        return self.denoise_decode(z_L, p)

    def close(self):
        if self._pool is not None:
            self._pool.shutdown()
            self._pool = None
