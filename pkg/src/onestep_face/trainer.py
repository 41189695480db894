"""Training loops for the prompt embedder (stage 1) and the one-step generator (stage 2).

Both trainers are fully determined by their config seed: model init uses a
seeded private RNG, data order is a pure function of ``(seed, step)``, and the
only streaming RNG (stage-2 noise/timesteps) is saved in every checkpoint.
"""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch

from . import checkpoint as ckpt
from .degradation import DegradationRecipe, degrade_batch
from .diffusion import GeneratorConfig, build_schedule
from .images import list_images, load_image, procedural_dataset, to_tensor
from .lora import apply_lora, base_parameters, lora_parameters, make_adapters
from .losses import LossReport, LossWeights, gan_discriminator_loss, generator_total
from .networks import Autoencoder, Denoiser, FaceEmbedder, FeatureExtractor, LatentDiscriminator, PatchDiscriminator, seeded
from .restore import OneStepRestorer, generate
from .vre import VisualPromptEmbedder, VreBranch, association_loss, quantization_loss, reconstruction_losses, stage1_total

log = logging.getLogger(__name__)

VRE_PHASES = ("vre_hq", "vre_lq", "vre_assoc")


class ConfigError(ValueError):
    def __init__(self, field_name: str, message: str):
        super().__init__(f"config field {field_name!r}: {message}")
        self.field = field_name


class PhaseOrderError(RuntimeError):
    pass


# configs -------------------------------------------------------------------------


def _positive(cfg, name, integer=False):
    v = getattr(cfg, name)
    if integer and (not isinstance(v, int) or isinstance(v, bool)):
        raise ConfigError(name, f"must be an integer, got {v!r}")
    if not isinstance(v, (int, float)) or isinstance(v, bool) or not v > 0 or not math.isfinite(v):
        raise ConfigError(name, f"must be a positive number, got {v!r}")


@dataclass
class VreTrainConfig:
    out_dir: str = "runs/vre"
    data_dir: str | None = None
    num_faces: int = 64
    image_size: int = 64
    seed: int = 0
    batch_size: int = 8
    lr: float = 2e-3
    dictionary_lr: float | None = 1e-2
    weight_decay: float = 0.0
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    phases: tuple = VRE_PHASES
    iterations: dict = field(default_factory=lambda: {"vre_hq": 200, "vre_lq": 100, "vre_assoc": 100})
    lambda_per: float = 1.0
    lambda_dis: float = 0.8
    lambda_assoc: dict = field(default_factory=lambda: {"vre_hq": 0.0, "vre_lq": 0.0, "vre_assoc": 1.0})
    quant_beta: float = 0.25
    quant_reduction: str = "mean"
    dictionary_init: str = "data"
    temperature: float = 0.07
    disc_lr: float | None = 1e-4
    disc_start: int = 0
    n_codes: int = 256
    code_dim: int = 64
    width: int = 32
    checkpoint_every: int = 100
    recipe: dict | None = None
    stage: str = "vre"

    def validate(self):
        if self.stage != "vre":
            raise ConfigError("stage", f"expected 'vre', got {self.stage!r}")
        for name in ("num_faces", "image_size", "batch_size", "n_codes", "code_dim", "width", "checkpoint_every"):
            _positive(self, name, integer=True)
        for name in ("lr", "eps", "temperature"):
            _positive(self, name)
        if self.image_size % 4:
            raise ConfigError("image_size", "must be a multiple of 4")
        if self.weight_decay < 0 or self.quant_beta < 0:
            raise ConfigError("weight_decay" if self.weight_decay < 0 else "quant_beta", "must be non-negative")
        if self.quant_reduction not in ("sum", "mean"):
            raise ConfigError("quant_reduction", f"must be 'sum' or 'mean', got {self.quant_reduction!r}")
        if self.dictionary_init not in ("data", "uniform"):
            raise ConfigError("dictionary_init", f"must be 'data' or 'uniform', got {self.dictionary_init!r}")
        if self.disc_start < 0:
            raise ConfigError("disc_start", "must be non-negative")
        for name in ("disc_lr", "dictionary_lr"):
            v = getattr(self, name)
            if v is not None and not v > 0:
                raise ConfigError(name, "must be positive or null")
        bad = [p for p in self.phases if p not in VRE_PHASES]
        if bad:
            raise ConfigError("phases", f"unknown phase(s) {bad}")
        for p in self.phases:
            it = self.iterations.get(p)
            if not isinstance(it, int) or it < 1:
                raise ConfigError(f"iterations.{p}", f"must be an integer >= 1, got {it!r}")
        for p in ("vre_hq", "vre_lq"):
            if self.lambda_assoc.get(p, 0.0) != 0.0:
                raise ConfigError(f"lambda_assoc.{p}", "must be 0 outside the association phase")
        if not self.lambda_assoc.get("vre_assoc", 1.0) > 0:
            raise ConfigError("lambda_assoc.vre_assoc", "must be > 0")
        if self.recipe is not None:
            try:
                DegradationRecipe.from_dict(self.recipe)
            except (TypeError, ValueError) as e:
                raise ConfigError("recipe", str(e)) from None
        return self

    @property
    def total_iterations(self):
        return sum(self.iterations[p] for p in self.phases)


@dataclass
class OsdTrainConfig:
    out_dir: str = "runs/osd"
    vre_checkpoint: str = ""
    data_dir: str | None = None
    num_faces: int = 64
    image_size: int = 64
    seed: int = 0
    batch_size: int = 4
    lr: float = 1e-3
    weight_decay: float = 1e-2
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    iterations: int = 300
    ae_prefit_iterations: int = 300
    ae_lr: float = 2e-3
    lambda_dis: float = 0.1
    lambda_id: float = 0.5
    lambda_per: float = 1.0
    T: int = 1000
    beta_start: float = 8.5e-4
    beta_end: float = 1.2e-2
    T_L: int = 300
    lora_rank: int = 4
    lora_scale: float = 1.0
    width: int = 32
    latent_ch: int = 4
    checkpoint_every: int = 100
    recipe: dict | None = None
    stage: str = "osd"

    def validate(self):
        if self.stage != "osd":
            raise ConfigError("stage", f"expected 'osd', got {self.stage!r}")
        for name in ("num_faces", "image_size", "batch_size", "iterations", "T", "lora_rank", "width",
                     "latent_ch", "checkpoint_every"):
            _positive(self, name, integer=True)
        for name in ("lr", "eps", "ae_lr"):
            _positive(self, name)
        if not isinstance(self.ae_prefit_iterations, int) or self.ae_prefit_iterations < 0:
            raise ConfigError("ae_prefit_iterations", "must be a non-negative integer")
        if not isinstance(self.T_L, int) or not 0 <= self.T_L <= self.T:
            raise ConfigError("T_L", f"must be an integer in [0, {self.T}]")
        if not 0 < self.beta_start <= self.beta_end < 1:
            raise ConfigError("beta_start", "need 0 < beta_start <= beta_end < 1")
        try:
            LossWeights(self.lambda_dis, self.lambda_id, self.lambda_per)
        except ValueError as e:
            raise ConfigError(str(e).split()[0], str(e)) from None
        if self.weight_decay < 0:
            raise ConfigError("weight_decay", "must be non-negative")
        if self.recipe is not None:
            try:
                DegradationRecipe.from_dict(self.recipe)
            except (TypeError, ValueError) as e:
                raise ConfigError("recipe", str(e)) from None
        return self

    def generator_config(self) -> GeneratorConfig:
        g = self.image_size // 4
        return GeneratorConfig(self.T_L, (g, g, self.latent_ch), self.lora_rank, self.lora_scale)

    def weights(self) -> LossWeights:
        return LossWeights(self.lambda_dis, self.lambda_id, self.lambda_per)


def config_from_dict(data: dict):
    stage = data.get("stage")
    cls = {"vre": VreTrainConfig, "osd": OsdTrainConfig}.get(stage)
    if cls is None:
        raise ConfigError("stage", f"must be 'vre' or 'osd', got {stage!r}")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(unknown[0], "unknown field")
    data = dict(data)
    for key in ("betas", "phases"):
        if key in data:
            data[key] = tuple(data[key])
    if "iterations" in data and cls is VreTrainConfig:
        data["iterations"] = {**VreTrainConfig().iterations, **data["iterations"]}
    if "lambda_assoc" in data:
        data["lambda_assoc"] = {**VreTrainConfig().lambda_assoc, **data["lambda_assoc"]}
    try:
        cfg = cls(**data)
    except TypeError as e:
        raise ConfigError("?", str(e)) from None
    return cfg.validate()


def load_config(path):
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise ConfigError("<file>", f"not valid JSON: {e}") from None
    if not isinstance(data, dict):
        raise ConfigError("<file>", "top level must be an object")
    return config_from_dict(data)


def config_hash(cfg) -> str:
    import hashlib

    blob = json.dumps(asdict(cfg), sort_keys=True, default=list).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


# data ----------------------------------------------------------------------------


def load_dataset(data_dir, num_faces, image_size, seed) -> np.ndarray:
    if data_dir is None:
        return procedural_dataset(num_faces, image_size, seed)[0]
    paths = list_images(data_dir)
    if not paths:
        raise ValueError(f"no images found in {data_dir}")
    images = np.stack([load_image(p) for p in paths])
    if images.shape[1:3] != (image_size, image_size):
        raise ValueError(f"images must be {image_size}x{image_size}, got {images.shape[1:3]}")
    return images


class BatchSampler:
    """Shuffled epochs where batch ``step`` depends only on ``(seed, step)``."""

    def __init__(self, n: int, batch_size: int, seed: int):
        if n < 1:
            raise ValueError("empty dataset")
        self.n, self.batch_size, self.seed = n, batch_size, seed
        self._perms: dict[int, np.ndarray] = {}

    def _perm(self, epoch):
        if epoch not in self._perms:
            self._perms[epoch] = np.random.default_rng([self.seed, epoch]).permutation(self.n)
        return self._perms[epoch]

    def indices(self, step: int) -> np.ndarray:
        pos = step * self.batch_size + np.arange(self.batch_size)
        return np.array([self._perm(p // self.n)[p % self.n] for p in pos])


def _adam(params, cfg, weight_decay=None):
    wd = cfg.weight_decay if weight_decay is None else weight_decay
    return torch.optim.AdamW(params, lr=cfg.lr, betas=tuple(cfg.betas), eps=cfg.eps, weight_decay=wd) if wd > 0 \
        else torch.optim.Adam(params, lr=cfg.lr, betas=tuple(cfg.betas), eps=cfg.eps)


def _check_finite(report: LossReport, trainer, out_dir: Path):
    bad = [k for k, v in report.scalars().items() if not math.isfinite(v)]
    if bad:
        snap = out_dir / "nan_snapshot.ckpt"
        trainer.save(snap)
        raise FloatingPointError(f"non-finite loss component(s) {bad} at iteration {trainer.step}; snapshot at {snap}")


class _LogWriter:
    """Line-delimited JSON log truncated to the resume point."""

    def __init__(self, path: Path, keep_lines: int):
        self.path = path
        lines = path.read_text().splitlines()[:keep_lines] if (keep_lines and path.exists()) else []
        path.write_text("".join(line + "\n" for line in lines))

    def write(self, line: str):
        with self.path.open("a") as f:
            f.write(line + "\n")


# stage 1 -----------------------------------------------------------------------


def _dictionary_usage(branch: VreBranch, images: np.ndarray) -> list:
    emb = branch.embedder()
    with torch.no_grad():
        tokens = torch.cat([
            torch.as_tensor(_tokens_for(emb, to_tensor(images[i:i + 16]))) for i in range(0, len(images), 16)
        ])
    return np.bincount(tokens.reshape(-1).numpy(), minlength=branch.dictionary.n_codes).tolist()


def _tokens_for(emb: VisualPromptEmbedder, x):
    from .vre import quantize

    z = emb.encoder(x)
    return quantize(z, emb.dictionary)[1].numpy()


class VreTrainer:
    def __init__(self, cfg: VreTrainConfig, hq_images: np.ndarray | None = None):
        self.cfg = cfg.validate()
        if hq_images is None:
            hq_images = load_dataset(cfg.data_dir, cfg.num_faces, cfg.image_size, cfg.seed)
        if len(hq_images) == 0:
            raise ValueError("empty dataset")
        self.hq = np.asarray(hq_images, dtype=np.float64)
        recipe = DegradationRecipe.from_dict(cfg.recipe) if cfg.recipe else DegradationRecipe(seed=cfg.seed)
        self.lq = degrade_batch(self.hq, recipe)
        self.sampler = BatchSampler(len(self.hq), cfg.batch_size, cfg.seed)
        self.feat = FeatureExtractor()
        with seeded(cfg.seed):
            self.branches = {
                "hq": VreBranch(cfg.code_dim, cfg.n_codes, cfg.width, cfg.image_size),
                "lq": VreBranch(cfg.code_dim, cfg.n_codes, cfg.width, cfg.image_size),
            }
            self.discs = {"hq": PatchDiscriminator(cfg.width), "lq": PatchDiscriminator(cfg.width)}
        if cfg.dictionary_init == "data":
            gen = torch.Generator().manual_seed(cfg.seed)
            n = min(len(self.hq), 16)
            for k, imgs in (("hq", self.hq), ("lq", self.lq)):
                self.branches[k].init_dictionary(to_tensor(imgs[:n]), gen)
        self.g_opts = {k: _adam(self._param_groups(b), cfg) for k, b in self.branches.items()}
        d_lr = cfg.disc_lr or cfg.lr
        self.d_opts = {k: torch.optim.Adam(d.parameters(), lr=d_lr, betas=tuple(cfg.betas), eps=cfg.eps)
                       for k, d in self.discs.items()}
        self.step = 0
        self.phase_steps = {p: 0 for p in VRE_PHASES}
        self.completed: list[str] = []
        self.out_dir = Path(cfg.out_dir)

    def _param_groups(self, branch: VreBranch):
        rest = [p for n, p in branch.named_parameters() if not n.startswith("dictionary.")]
        codes = {"params": [branch.dictionary.items]}
        if self.cfg.dictionary_lr is not None:
            codes["lr"] = self.cfg.dictionary_lr
        return [{"params": rest}, codes]

    # -- one iteration
    def train_step(self, phase: str) -> LossReport:
        cfg = self.cfg
        active = {"vre_hq": ("hq",), "vre_lq": ("lq",), "vre_assoc": ("hq", "lq")}[phase]
        lam_assoc = float(cfg.lambda_assoc.get(phase, 0.0))
        lam_dis = cfg.lambda_dis if self.phase_steps[phase] >= cfg.disc_start else 0.0
        idx = self.sampler.indices(self.step)
        data = {"hq": to_tensor(self.hq[idx]), "lq": to_tensor(self.lq[idx])}

        for k in active:
            self.discs[k].requires_grad_(False)
        outs, comps = {}, {}
        for k in active:
            out = self.branches[k](data[k])
            rep = reconstruction_losses(data[k], out["rec"], self.feat, self.discs[k])
            rep["quant"] = quantization_loss(out["z"], out["z_q"], cfg.quant_beta, cfg.quant_reduction)
            outs[k], comps[k] = out, rep
        total = 0.0
        assoc = None
        if lam_assoc != 0.0:
            assoc = association_loss(outs["hq"]["z"], outs["lq"]["z"], cfg.temperature)
        for k in active:
            c = dict(comps[k])
            lam = 0.0
            if assoc is not None and k == active[-1]:
                c["assoc"], lam = assoc, lam_assoc
            total = total + stage1_total(c, cfg.lambda_per, lam_dis, lam)
        for k in active:
            self.g_opts[k].zero_grad(set_to_none=True)
        total.backward()
        for k in active:
            self.g_opts[k].step()

        d_losses = []
        for k in active:
            disc = self.discs[k]
            disc.requires_grad_(True)
            real = torch.log(disc(data[k]))
            fake = torch.log(1.0 - disc(outs[k]["rec"].detach()))
            d_loss = -(real + fake).mean()
            self.d_opts[k].zero_grad(set_to_none=True)
            d_loss.backward()
            self.d_opts[k].step()
            d_losses.append(d_loss.detach())

        n = len(active)
        report = LossReport(
            {name: sum(comps[k][name].detach() for k in active) / n for name in ("l1", "per", "dis", "quant")}
        )
        for k in active:
            report[f"l1_{k}"] = comps[k]["l1"].detach()
        if assoc is not None:
            report["assoc"] = assoc.detach()
        report["total"] = total.detach()
        report["d_loss"] = sum(d_losses) / n
        return report

    # -- phases
    def run_phase(self, phase: str, log_writer=None, on_step=None):
        if phase == "vre_assoc" and not {"vre_hq", "vre_lq"} <= set(self.completed):
            raise PhaseOrderError("vre_assoc needs completed vre_hq and vre_lq phases")
        if phase in self.completed:
            return
        n_iter = self.cfg.iterations[phase]
        while self.phase_steps[phase] < n_iter:
            report = self.train_step(phase)
            self.step += 1
            self.phase_steps[phase] += 1
            _check_finite(report, self, self.out_dir)
            if log_writer is not None:
                log_writer.write(report.to_json(iteration=self.step, phase=phase))
            if on_step is not None:
                on_step(self, report)
            if self.step % self.cfg.checkpoint_every == 0 and self.phase_steps[phase] < n_iter:
                self.save(self.out_dir / "vre_last.ckpt")
        self.completed.append(phase)
        self.save(self.out_dir / f"{phase}.ckpt")

    def run(self, on_step=None):
        self.out_dir.mkdir(parents=True, exist_ok=True)
        writer = _LogWriter(self.out_dir / "train_log.jsonl", self.step)
        for phase in self.cfg.phases:
            self.run_phase(phase, writer, on_step)
        final = self.out_dir / "vre.ckpt"
        self.save(final)
        return final

    # -- persistence
    def tensors(self) -> dict:
        t = {}
        for k in ("hq", "lq"):
            t.update(ckpt.module_tensors(f"vre_{k}", self.branches[k]))
            t.update(ckpt.module_tensors(f"disc_{k}", self.discs[k]))
        return t

    def save(self, path):
        tensors = self.tensors()
        groups = {}
        for name, opt in [*(("g_opt_" + k, o) for k, o in self.g_opts.items()),
                          *(("d_opt_" + k, o) for k, o in self.d_opts.items())]:
            ot, pg = ckpt.optimizer_tensors(name, opt)
            tensors.update(ot)
            groups[name] = pg
        manifest = {
            "kind": "vre",
            "config": asdict(self.cfg),
            "step": self.step,
            "phase_steps": self.phase_steps,
            "completed": self.completed,
            "optimizer_groups": groups,
            "image_size": self.cfg.image_size,
            "dictionaries": {
                k: {"N": b.dictionary.n_codes, "d": b.dictionary.dim,
                    "usage": _dictionary_usage(b, self.hq if k == "hq" else self.lq)}
                for k, b in self.branches.items()
            },
        }
        ckpt.save_archive(path, tensors, manifest)

    @classmethod
    def load(cls, path, hq_images=None) -> "VreTrainer":
        arrays, manifest = ckpt.load_archive(path)
        if manifest.get("kind") != "vre":
            raise ckpt.CheckpointError("kind", f"expected 'vre', found {manifest.get('kind')!r}")
        cfg = config_from_dict(manifest["config"])
        self = cls(cfg, hq_images)
        for k in ("hq", "lq"):
            ckpt.load_module(f"vre_{k}", self.branches[k], arrays)
            ckpt.load_module(f"disc_{k}", self.discs[k], arrays)
        for name, opt in [*(("g_opt_" + k, o) for k, o in self.g_opts.items()),
                          *(("d_opt_" + k, o) for k, o in self.d_opts.items())]:
            ckpt.load_optimizer(name, opt, arrays, manifest["optimizer_groups"][name])
        self.step = manifest["step"]
        self.phase_steps = dict(manifest["phase_steps"])
        self.completed = list(manifest["completed"])
        return self


def train_vre(dataset, config: VreTrainConfig, resume=None, on_step=None) -> Path:
    trainer = VreTrainer.load(resume, dataset) if resume else VreTrainer(config, dataset)
    return trainer.run(on_step)


def load_prompt_embedder(path) -> tuple[VisualPromptEmbedder, dict]:
    """LQ encoder + dictionary from a stage-1 checkpoint."""
    arrays, manifest = ckpt.load_archive(path)
    if manifest.get("kind") != "vre":
        raise ckpt.CheckpointError("kind", f"expected 'vre', found {manifest.get('kind')!r}")
    if "vre_lq" not in manifest.get("completed", []):
        raise ckpt.CheckpointError("completed", "LQ embedder phase has not finished")
    c = manifest["config"]
    branch = VreBranch(c["code_dim"], c["n_codes"], c["width"], c["image_size"])
    ckpt.load_module("vre_lq", branch, arrays)
    emb = branch.embedder()
    for p in emb.parameters():
        p.requires_grad_(False)
    return emb.eval(), manifest


# stage 2 -----------------------------------------------------------------------


def _embedder_tensors(emb: VisualPromptEmbedder) -> dict:
    return {**ckpt.module_tensors("vre.encoder", emb.encoder), **ckpt.module_tensors("vre.dictionary", emb.dictionary)}


class OsdTrainer:
    def __init__(self, cfg: OsdTrainConfig, hq_images=None, vre: VisualPromptEmbedder | None = None,
                 vre_manifest: dict | None = None):
        self.cfg = cfg.validate()
        if vre is None:
            if not cfg.vre_checkpoint or not Path(cfg.vre_checkpoint).is_file():
                raise FileNotFoundError(f"VRE checkpoint not found: {cfg.vre_checkpoint!r}")
            vre, vre_manifest = load_prompt_embedder(cfg.vre_checkpoint)
        self.vre = vre
        self.vre_manifest = vre_manifest or {}
        if vre.encoder.image_size != cfg.image_size:
            raise ckpt.CheckpointError("image_size", f"VRE expects {vre.encoder.image_size}, config says {cfg.image_size}")
        if hq_images is None:
            hq_images = load_dataset(cfg.data_dir, cfg.num_faces, cfg.image_size, cfg.seed)
        if len(hq_images) == 0:
            raise ValueError("empty dataset")
        self.hq = np.asarray(hq_images, dtype=np.float64)
        recipe = DegradationRecipe.from_dict(cfg.recipe) if cfg.recipe else DegradationRecipe(seed=cfg.seed)
        self.lq = degrade_batch(self.hq, recipe)
        self.sampler = BatchSampler(len(self.hq), cfg.batch_size, cfg.seed)
        self.ae_sampler = BatchSampler(2 * len(self.hq), cfg.batch_size * 2, cfg.seed + 1)

        self.sched = build_schedule(cfg.T, cfg.beta_start, cfg.beta_end)
        self.gcfg = cfg.generator_config()
        self.gcfg.validate(self.sched)
        self.feat = FeatureExtractor()
        self.face = FaceEmbedder()
        with seeded(cfg.seed):
            self.ae = Autoencoder(cfg.latent_ch, cfg.width)
            self.denoiser = Denoiser(cfg.latent_ch, cfg.width, vre.dictionary.dim)
            self.disc = LatentDiscriminator(cfg.latent_ch, cfg.width)
        adapters = make_adapters(self.denoiser, Denoiser.lora_targets, cfg.lora_rank, cfg.lora_scale, seed=cfg.seed)
        apply_lora(self.denoiser, adapters)
        self.ae_opt = torch.optim.Adam(self.ae.parameters(), lr=cfg.ae_lr, betas=tuple(cfg.betas), eps=cfg.eps)
        self.g_opt = _adam(lora_parameters(self.denoiser), cfg)
        self.d_opt = _adam(self.disc.parameters(), cfg)
        self.gen = torch.Generator().manual_seed(cfg.seed)
        self.step = 0
        self.ae_step = 0
        self.g_updates = 0
        self.d_updates = 0
        self.out_dir = Path(cfg.out_dir)
        self.track_grad_masks = False
        self.grad_masks: list[tuple[str, frozenset]] = []
        self._cache = None
        with torch.no_grad():
            self.prompts = torch.cat([self.vre.prompt_batch(to_tensor(self.lq[i:i + 16]))
                                      for i in range(0, len(self.lq), 16)])

    # -- autoencoder pre-fit, then frozen
    def prefit_autoencoder(self, log_writer=None):
        both = np.concatenate([self.hq, self.lq])
        self.ae.train()
        while self.ae_step < self.cfg.ae_prefit_iterations:
            x = to_tensor(both[self.ae_sampler.indices(self.ae_step)])
            rec = self.ae(x)
            loss = (rec - x).abs().mean() + ((rec - x) ** 2).mean()
            self.ae_opt.zero_grad(set_to_none=True)
            loss.backward()
            self.ae_opt.step()
            self.ae_step += 1
            if log_writer is not None:
                log_writer.write(json.dumps({"iteration": self.ae_step, "ae_loss": float(loss.detach())}))
        for p in self.ae.parameters():
            p.requires_grad_(False)
            p.grad = None
        self.ae.eval()
        self._cache = None

    def _latents(self):
        if self._cache is None:
            with torch.no_grad():
                zh = torch.cat([self.ae.encode(to_tensor(self.hq[i:i + 16])) for i in range(0, len(self.hq), 16)])
                zl = torch.cat([self.ae.encode(to_tensor(self.lq[i:i + 16])) for i in range(0, len(self.lq), 16)])
            self._cache = (zh, zl)
        return self._cache

    def _record_mask(self, kind, modules):
        if not self.track_grad_masks:
            return
        names = frozenset(
            f"{prefix}.{n}" for prefix, m in modules.items() for n, p in m.named_parameters()
            if p.grad is not None and bool((p.grad != 0).any())
        )
        self.grad_masks.append((kind, names))

    def train_step(self) -> LossReport:
        cfg = self.cfg
        z_H_all, z_L_all = self._latents()
        idx = torch.from_numpy(self.sampler.indices(self.step))
        I_H = to_tensor(self.hq[idx.numpy()])
        z_H, z_L, prompts = z_H_all[idx], z_L_all[idx], self.prompts[idx]
        watched = {"denoiser": self.denoiser, "disc": self.disc, "ae": self.ae, "vre": self.vre}

        # generator update
        self.disc.requires_grad_(False)
        z_hat = generate(z_L, prompts, self.denoiser, self.gcfg, self.sched)
        I_hat = self.ae.decode(z_hat)
        rep = generator_total(I_H, I_hat, z_H, z_hat, cfg.weights(), self.face, self.feat, self.disc, self.sched,
                              generator=self.gen)
        self.g_opt.zero_grad(set_to_none=True)
        self.d_opt.zero_grad(set_to_none=True)
        rep["total"].backward()
        self._record_mask("G", watched)
        self.g_opt.step()
        self.g_updates += 1

        # discriminator update
        self.disc.requires_grad_(True)
        d_loss = gan_discriminator_loss(z_H, z_hat.detach(), None, self.disc, self.sched, generator=self.gen)
        self.d_opt.zero_grad(set_to_none=True)
        for p in lora_parameters(self.denoiser):
            p.grad = None
        d_loss.backward()
        self._record_mask("D", watched)
        self.d_opt.step()
        self.d_updates += 1

        out = LossReport({k: v.detach() for k, v in rep.items()})
        out["d_loss"] = d_loss.detach()
        return out

    def run(self, on_step=None) -> Path:
        self.out_dir.mkdir(parents=True, exist_ok=True)
        if self.ae_step < self.cfg.ae_prefit_iterations or self.step == 0:
            self.prefit_autoencoder(_LogWriter(self.out_dir / "ae_prefit_log.jsonl", self.ae_step))
        writer = _LogWriter(self.out_dir / "train_log.jsonl", self.step)
        while self.step < self.cfg.iterations:
            report = self.train_step()
            self.step += 1
            _check_finite(report, self, self.out_dir)
            writer.write(report.to_json(iteration=self.step, g_updates=self.g_updates, d_updates=self.d_updates))
            if on_step is not None:
                on_step(self, report)
            if self.step % self.cfg.checkpoint_every == 0 and self.step < self.cfg.iterations:
                self.save(self.out_dir / "osd_last.ckpt")
        final = self.out_dir / "osd.ckpt"
        self.save(final)
        return final

    # -- hashes used by the freeze checks
    def base_hash(self) -> str:
        return ckpt.tensor_hash(base_parameters(self.denoiser))

    def vre_hash(self) -> str:
        return ckpt.tensor_hash(_embedder_tensors(self.vre))

    def restorer(self) -> OneStepRestorer:
        return OneStepRestorer(self.vre, self.denoiser, self.ae, self.gcfg, self.sched)

    # -- persistence
    def save(self, path):
        tensors = {
            **_embedder_tensors(self.vre),
            **ckpt.module_tensors("ae", self.ae),
            **ckpt.module_tensors("denoiser", self.denoiser),
            **ckpt.module_tensors("disc", self.disc),
            "rng.generator": self.gen.get_state().numpy().copy(),
        }
        groups = {}
        for name, opt in (("ae_opt", self.ae_opt), ("g_opt", self.g_opt), ("d_opt", self.d_opt)):
            ot, pg = ckpt.optimizer_tensors(name, opt)
            tensors.update(ot)
            groups[name] = pg
        enc = self.vre.encoder
        manifest = {
            "kind": "osd",
            "config": asdict(self.cfg),
            "schedule": self.sched.to_dict(),
            "T_L": self.gcfg.T_L,
            "lora_rank": self.gcfg.lora_rank,
            "lora_scale": self.gcfg.lora_scale,
            "latent_shape": list(self.gcfg.latent_shape),
            "image_size": self.cfg.image_size,
            "vre": {"dim": enc.dim, "width": enc.conv[0].out_channels, "n_codes": self.vre.dictionary.n_codes},
            "step": self.step,
            "ae_step": self.ae_step,
            "g_updates": self.g_updates,
            "d_updates": self.d_updates,
            "optimizer_groups": groups,
        }
        ckpt.save_archive(path, tensors, manifest)

    @classmethod
    def load(cls, path, hq_images=None) -> "OsdTrainer":
        arrays, manifest = ckpt.load_archive(path)
        cfg, vre = _osd_parts(arrays, manifest)
        self = cls(cfg, hq_images, vre=vre)
        ckpt.load_module("ae", self.ae, arrays)
        ckpt.load_module("denoiser", self.denoiser, arrays)
        ckpt.load_module("disc", self.disc, arrays)
        for name, opt in (("ae_opt", self.ae_opt), ("g_opt", self.g_opt), ("d_opt", self.d_opt)):
            ckpt.load_optimizer(name, opt, arrays, manifest["optimizer_groups"][name])
        self.gen.set_state(torch.from_numpy(arrays["rng.generator"].copy()))
        self.step = manifest["step"]
        self.ae_step = manifest["ae_step"]
        self.g_updates = manifest["g_updates"]
        self.d_updates = manifest["d_updates"]
        if self.ae_step >= cfg.ae_prefit_iterations and self.step > 0:
            for p in self.ae.parameters():
                p.requires_grad_(False)
            self.ae.eval()
        return self


def _osd_parts(arrays, manifest):
    if manifest.get("kind") != "osd":
        raise ckpt.CheckpointError("kind", f"expected 'osd', found {manifest.get('kind')!r}")
    cfg = config_from_dict(manifest["config"])
    for key, want in (("T_L", cfg.T_L), ("lora_rank", cfg.lora_rank), ("lora_scale", cfg.lora_scale),
                      ("image_size", cfg.image_size)):
        if manifest.get(key) != want:
            raise ckpt.CheckpointError(key, f"manifest says {manifest.get(key)!r}, config says {want!r}")
    if manifest.get("schedule") != build_schedule(cfg.T, cfg.beta_start, cfg.beta_end).to_dict():
        raise ckpt.CheckpointError("schedule", "does not match the config's schedule parameters")
    if manifest.get("latent_shape") != list(cfg.generator_config().latent_shape):
        raise ckpt.CheckpointError("latent_shape", f"manifest says {manifest.get('latent_shape')!r}")
    v = manifest.get("vre") or {}
    try:
        branch = VreBranch(v["dim"], v["n_codes"], v["width"], cfg.image_size)
    except KeyError as e:
        raise ckpt.CheckpointError(f"vre.{e.args[0]}", "missing") from None
    emb = branch.embedder()
    ckpt.load_module("vre.encoder", emb.encoder, arrays)
    ckpt.load_module("vre.dictionary", emb.dictionary, arrays)
    for p in emb.parameters():
        p.requires_grad_(False)
    return cfg, emb.eval()


def train_osd(dataset, vre_checkpoint, config: OsdTrainConfig, resume=None, on_step=None) -> Path:
    if resume:
        trainer = OsdTrainer.load(resume, dataset)
    else:
        if vre_checkpoint is not None:
            config.vre_checkpoint = str(vre_checkpoint)
        trainer = OsdTrainer(config, dataset)
    return trainer.run(on_step)


def load_restorer(path) -> OneStepRestorer:
    """Inference bundle from a stage-2 checkpoint (no training state is rebuilt)."""
    arrays, manifest = ckpt.load_archive(path)
    cfg, vre = _osd_parts(arrays, manifest)
    sched = build_schedule(cfg.T, cfg.beta_start, cfg.beta_end)
    gcfg = cfg.generator_config()
    ae = Autoencoder(cfg.latent_ch, cfg.width)
    denoiser = Denoiser(cfg.latent_ch, cfg.width, vre.dictionary.dim)
    apply_lora(denoiser, make_adapters(denoiser, Denoiser.lora_targets, cfg.lora_rank, cfg.lora_scale))
    ckpt.load_module("ae", ae, arrays)
    ckpt.load_module("denoiser", denoiser, arrays)
    for p in ae.parameters():
        p.requires_grad_(False)
    for p in denoiser.parameters():
        p.requires_grad_(False)
    return OneStepRestorer(vre, denoiser, ae, gcfg, sched)
