"""End-to-end rescaling: model assembly, tiled inference, three-stage training, checkpoints."""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn
from PIL import PngImagePlugin, Image as PILImage

from . import __version__
from .codec import ExternalCodecAdapter, ToyCodec, check_divisible
from .config import ConfigError, RunConfig
from .container import load_archive, save_archive, state_checksum, torch_blob, torch_unblob
from .dfrm import DFRM, RescaleLossWeights, rescale_terms
from .diffusion import Enhancer, ExternalDenoiserAdapter, ToyDenoiser, align_timestep, make_schedule
from .imaging import PatchGrid, merge_patches, save_png, to_patches, load_png
from .lora import lora_parameters
from .perceptual import default_metrics
from .diffusion import loss_enh

log = logging.getLogger(__name__)

PNG_KEY = "latent-rescale"


# ---------------------------------------------------------------------------
# model

@dataclass
class TimeStepMap:
    grid: PatchGrid
    t_values: list[float]

    def field(self) -> torch.Tensor:
        """Per-cell time-step, blended with the same weights as the latent merge."""
        ph, pw = self.grid.patch_hw
        patches = [torch.full((ph, pw), t, dtype=torch.float64) for t in self.t_values]
        return merge_patches(patches, self.grid)

    def rows(self) -> list[tuple[int, int, float]]:
        return [(r, c, t) for (r, c), t in zip(self.grid.offsets, self.t_values)]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["row", "col", "t"])
            for r, c, t in self.rows():
                w.writerow([r, c, f"{t:.6f}"])

    def write_heatmap(self, path, T: int = 1000) -> None:
        img = (self.field() / max(T - 1, 1) * 255).round().clamp(0, 255).to(torch.uint8).numpy()
        PILImage.fromarray(img, mode="L").save(path)


class RescalingModel(nn.Module):
    """Frozen codec + DFRM + enhancer, with LoRA deltas on the codec decoder and denoiser."""

    def __init__(self, cfg: RunConfig, codec: nn.Module, denoiser: nn.Module):
        super().__init__()
        m = cfg.model
        self.factor = cfg.factor
        self.codec = codec
        self.sched = make_schedule(cfg.schedule.T, cfg.schedule.beta_min, cfg.schedule.beta_max)
        self.dfrm = DFRM(cfg.factor, m.dfrm_width, m.dfrm_blocks, m.inn_blocks, m.inn_hidden,
                         m.pixel_guidance, m.use_inn)
        self.enhancer = Enhancer(self.sched, denoiser, cfg.t0, m.tpm_width, m.scheduler_width,
                                 m.timestep_mode, m.fixed_timestep)
        for p in self.codec.parameters():
            p.requires_grad_(False)
        for p in denoiser.parameters():
            p.requires_grad_(False)
        if m.lora_rank > 0:
            codec.add_decoder_lora(m.lora_rank)
            self.enhancer.add_lora(m.lora_rank)

    # parameter groups
    def lora_params(self) -> list[nn.Parameter]:
        return lora_parameters(self.codec.decoder) + lora_parameters(self.enhancer.denoiser)

    def enhancement_params(self) -> list[nn.Parameter]:
        return (self.lora_params() + list(self.enhancer.tpm.parameters())
                + list(self.enhancer.scheduler.parameters()))

    def model_hash(self) -> str:
        return state_checksum(self.state_dict())[:16]

    def dfrm_checksum(self) -> str:
        return state_checksum(self.dfrm.state_dict())

    # inference
    def encode(self, x):
        return self.codec.encode(x)

    def down(self, x):
        z = self.codec.encode(x)
        return self.dfrm.downscale(x, z)

    @torch.no_grad()
    def enhance_tiled(self, z_hat: torch.Tensor, p: int, s: int, trace: list | None = None):
        """Per-tile time-step prediction and one-step enhancement, then blended merge."""
        patches, grid = to_patches(z_hat, p, s)
        if trace is not None:
            trace.append(("split", len(patches)))
        outs, ts = [], []
        for i, patch in enumerate(patches):
            z0, t = self.enhancer(patch[None], trace, i)
            outs.append(z0[0])
            ts.append(float(t[0]))
        merged = merge_patches(outs, grid)
        if trace is not None:
            trace.append(("merge", len(outs)))
        return merged, TimeStepMap(grid, ts)

    @torch.no_grad()
    def up(self, y: torch.Tensor, p: int | None = None, s: int | None = None, trace: list | None = None):
        """``y`` is a single ``[3, h, w]`` u8-valued image; returns ``(x_hat, TimeStepMap | None)``."""
        z_hat = self.dfrm.upscale(y)
        if p is None:
            z0, t = self.enhancer(z_hat[None])
            tmap = TimeStepMap(PatchGrid(max(z_hat.shape[-2:]), 1, tuple(z_hat.shape[-2:])), [float(t[0])])
            z0 = z0[0]
        else:
            z0, tmap = self.enhance_tiled(z_hat, p, s, trace)
        x_hat = self.codec.decode(z0)
        if trace is not None:
            trace.append(("decode", None))
        return x_hat, tmap


def build_model(cfg: RunConfig, codec: nn.Module, denoiser: nn.Module) -> RescalingModel:
    torch.manual_seed(cfg.seed)
    return RescalingModel(cfg, codec, denoiser)


def fresh_backends(cfg: RunConfig, codec_widths=(32, 64, 96), denoiser_width: int = 48):
    """Backend shells for loading a checkpoint; external modules are reloaded from their configured files."""
    codec = (ExternalCodecAdapter(cfg.backend.codec_weights, cfg.backend.codec_scale, cfg.backend.codec_shift)
             if cfg.backend.codec == "external" else ToyCodec(codec_widths))
    denoiser = (ExternalDenoiserAdapter(cfg.backend.denoiser_weights, cfg.schedule.T)
                if cfg.backend.denoiser == "external" else ToyDenoiser(cfg.schedule.T, denoiser_width))
    return codec, denoiser


# ---------------------------------------------------------------------------
# LR files with embedded metadata

def lr_metadata(model: RescalingModel, x_shape) -> dict:
    return {"format": PNG_KEY, "version": 1, "factor": model.factor,
            "model_hash": model.model_hash(), "height": int(x_shape[-2]), "width": int(x_shape[-1])}


@torch.no_grad()
def rescale_down(x: torch.Tensor, model: RescalingModel) -> tuple[torch.Tensor, dict]:
    """``x`` in ``[-1, 1]`` -> (u8-valued LR image, metadata)."""
    if x.ndim != 3 or x.shape[0] != 3:
        raise ValueError(f"expected a [3, H, W] image, got {tuple(x.shape)}")
    check_divisible(x, model.factor)
    y, _ = model.down(x)
    return y, lr_metadata(model, x.shape)


def write_lr(y: torch.Tensor, meta: dict, path: str | Path) -> Path:
    """PNG with the metadata in an iTXt chunk, mirrored to ``<path>.json``."""
    path = Path(path)
    info = PngImagePlugin.PngInfo()
    info.add_itxt(PNG_KEY, json.dumps(meta, sort_keys=True))
    save_png(y, path, pnginfo=info)
    sidecar_path(path).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return path


def sidecar_path(png: Path) -> Path:
    return png.with_suffix(".json")


def read_lr(path: str | Path) -> tuple[torch.Tensor, dict]:
    path = Path(path)
    with PILImage.open(path) as im:
        text = im.info.get(PNG_KEY)
    if text is None:
        side = sidecar_path(path)
        if not side.exists():
            raise ConfigError(f"{path} carries no rescaling metadata")
        text = side.read_text()
    return load_png(path), json.loads(text)


@torch.no_grad()
def rescale_up(y: torch.Tensor, meta: dict, model: RescalingModel, cfg: RunConfig,
               trace: list | None = None, tiled: bool = True):
    if meta.get("factor") != model.factor:
        raise ConfigError(f"LR image was made at factor {meta.get('factor')}, model uses {model.factor}")
    if meta.get("model_hash") != model.model_hash():
        raise ConfigError("LR image was produced by a different model")
    h, w = meta["height"], meta["width"]
    if (y.shape[-2] * model.factor, y.shape[-1] * model.factor) != (h, w):
        raise ConfigError(f"LR size {tuple(y.shape[-2:])} does not match {h}x{w} / {model.factor}")
    if tiled:
        return model.up(y, cfg.patch_size, cfg.stride, trace)
    return model.up(y)


# ---------------------------------------------------------------------------
# checkpoints

@dataclass
class StageCheckpoint:
    stage: int
    step: int
    config: dict
    model_state: dict
    optimizer_state: dict | None = None
    rng_state: torch.Tensor | None = None
    meta: dict = field(default_factory=dict)

    @property
    def config_hash(self) -> str:
        return RunConfig.from_dict(self.config).hash()

    def save(self, path: str | Path) -> str:
        meta = dict(self.meta, stage=self.stage, step=self.step, config=self.config,
                    config_hash=self.config_hash, version=__version__)
        blobs = {}
        if self.optimizer_state is not None:
            blobs["optimizer"] = torch_blob(self.optimizer_state)
        if self.rng_state is not None:
            blobs["rng"] = torch_blob(self.rng_state)
        return save_archive(path, self.model_state, meta, blobs)

    @classmethod
    def load(cls, path: str | Path) -> "StageCheckpoint":
        tensors, meta, blobs = load_archive(path)
        opt = torch_unblob(blobs["optimizer"]) if "optimizer" in blobs else None
        rng = torch_unblob(blobs["rng"]) if "rng" in blobs else None
        return cls(meta["stage"], meta["step"], meta["config"], tensors, opt, rng, meta)


def model_from_checkpoint(ckpt: StageCheckpoint) -> tuple[RescalingModel, RunConfig]:
    cfg = RunConfig.from_dict(ckpt.config)
    codec, denoiser = fresh_backends(cfg, tuple(ckpt.meta.get("codec_widths", (32, 64, 96))),
                                     ckpt.meta.get("denoiser_width", 48))
    model = RescalingModel(cfg, codec, denoiser)
    model.load_state_dict(ckpt.model_state)
    model.eval()
    return model, cfg


def load_model(path: str | Path) -> tuple[RescalingModel, RunConfig]:
    return model_from_checkpoint(StageCheckpoint.load(path))


# ---------------------------------------------------------------------------
# training

class LossLog:
    """Step-indexed loss components, one CSV row per logged step."""

    COLUMNS = ["stage", "step", "loss", "rec", "gui", "enh", "mean_t", "val_res", "val_rec", "val_gui"]

    def __init__(self):
        self.rows: list[dict] = []

    def add(self, **row):
        self.rows.append({k: row.get(k, "") for k in self.COLUMNS})

    def write(self, path: str | Path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=self.COLUMNS)
            w.writeheader()
            for row in self.rows:
                w.writerow({k: (f"{v:.6g}" if isinstance(v, float) else v) for k, v in row.items()})


@dataclass
class Corpus:
    """Training/validation images in ``[-1, 1]`` plus their codec latents."""

    x: torch.Tensor
    z: torch.Tensor
    x_val: torch.Tensor
    z_val: torch.Tensor

    @classmethod
    @torch.no_grad()
    def from_images(cls, codec, x: torch.Tensor, x_val: torch.Tensor) -> "Corpus":
        enc = lambda imgs: torch.cat([codec.encode(imgs[i:i + 8]) for i in range(0, len(imgs), 8)])  # noqa: E731
        return cls(x, enc(x), x_val, enc(x_val))


def aligned_crops(gen: torch.Generator, n: int, crop: int, factor: int, *tensors_and_scales):
    """Random crops taken at identical positions from tensors of different resolutions.

    ``tensors_and_scales`` alternates ``tensor, pixels_per_cell``; the crop is
    ``crop`` pixels wide and its origin is a multiple of ``factor`` pixels.
    """
    first = tensors_and_scales[0]
    b, _, h, w = first.shape
    ppc0 = tensors_and_scales[1]
    H, W = h * ppc0, w * ppc0
    idx = torch.randint(0, b, (n,), generator=gen)
    rows = torch.randint(0, (H - crop) // factor + 1, (n,), generator=gen) * factor
    cols = torch.randint(0, (W - crop) // factor + 1, (n,), generator=gen) * factor
    outs = []
    for t, ppc in zip(tensors_and_scales[::2], tensors_and_scales[1::2]):
        c = crop // ppc
        outs.append(torch.stack([t[i, :, r // ppc:r // ppc + c, q // ppc:q // ppc + c]
                                 for i, r, q in zip(idx.tolist(), rows.tolist(), cols.tolist())]))
    return outs


def stage_params(model: RescalingModel, stage: int) -> list[nn.Parameter]:
    if stage == 1:
        return list(model.dfrm.parameters())
    if stage == 2:
        return model.enhancement_params()
    return list(model.dfrm.parameters()) + model.enhancement_params()


def stage_lr(cfg: RunConfig, stage: int) -> float:
    return {1: cfg.train.lr_stage1, 2: cfg.train.lr_stage2, 3: cfg.train.lr_stage3}[stage]


class StageTrainer:
    """Owns the optimizer and RNG for one stage; resumable from a checkpoint."""

    def __init__(self, stage: int, model: RescalingModel, cfg: RunConfig, corpus: Corpus,
                 loss_log: LossLog | None = None, meta: dict | None = None):
        self.stage = stage
        self.model = model
        self.cfg = cfg
        self.corpus = corpus
        self.log = loss_log if loss_log is not None else LossLog()
        self.meta = dict(meta or {})
        self.step = 0
        self.gen = torch.Generator().manual_seed(cfg.seed * 1000 + stage)
        for p in model.parameters():
            p.requires_grad_(False)
        self.params = stage_params(model, stage)
        for p in self.params:
            p.requires_grad_(True)
        self.opt = torch.optim.Adam(self.params, lr=stage_lr(cfg, stage))
        self.perceptual = default_metrics()
        self.weights = RescaleLossWeights(cfg.loss.rec, cfg.loss.gui)
        self._z_hat = None
        if stage == 2:
            self._z_hat = self._frozen_rescaled_latents()

    @torch.no_grad()
    def _frozen_rescaled_latents(self) -> torch.Tensor:
        dfrm = self.model.dfrm
        out = []
        for i in range(0, len(self.corpus.x), 8):
            y, _ = dfrm.downscale(self.corpus.x[i:i + 8], self.corpus.z[i:i + 8])
            out.append(dfrm.upscale(y))
        return torch.cat(out)

    # -- one optimization step -------------------------------------------------
    def compute_loss(self) -> tuple[torch.Tensor, dict]:
        cfg, model = self.cfg, self.model
        n, crop, f = cfg.train.batch_size, cfg.train.crop, cfg.factor
        if self.stage == 1:
            x, z = aligned_crops(self.gen, n, crop, f, self.corpus.x, 1, self.corpus.z, 8)
            terms = rescale_terms(model.dfrm, x, z)
            loss = self.weights.rec * terms["rec"] + self.weights.gui * terms["gui"]
            return loss, {"rec": terms["rec"].item(), "gui": terms["gui"].item()}
        if self.stage == 2:
            x, z_hat = aligned_crops(self.gen, n, crop, f, self.corpus.x, 1, self._z_hat, 8)
            z0, t = model.enhancer(z_hat)
            x_hat = model.codec.decode(z0, clamp=False)
            loss = loss_enh(x_hat, x, self.perceptual, cfg.loss.pec)
            return loss, {"enh": loss.item(), "mean_t": t.mean().item()}
        x, z = aligned_crops(self.gen, n, crop, f, self.corpus.x, 1, self.corpus.z, 8)
        terms = rescale_terms(model.dfrm, x, z, quantize=True)
        z0, t = model.enhancer(terms["z_hat"])
        x_hat = model.codec.decode(z0, clamp=False)
        enh = loss_enh(x_hat, x, self.perceptual, cfg.loss.pec)
        loss = self.weights.rec * terms["rec"] + self.weights.gui * terms["gui"] + enh
        return loss, {"rec": terms["rec"].item(), "gui": terms["gui"].item(),
                      "enh": enh.item(), "mean_t": t.mean().item()}

    def train_step(self) -> float:
        self.model.train()
        loss, parts = self.compute_loss()
        self.opt.zero_grad(set_to_none=True)
        loss.backward()
        self.opt.step()
        self.step += 1
        self.log.add(stage=self.stage, step=self.step, loss=loss.item(), **parts)
        return loss.item()

    @torch.no_grad()
    def validate(self) -> dict[str, float]:
        self.model.eval()
        recs, guis = [], []
        for i in range(0, len(self.corpus.x_val), 8):
            terms = rescale_terms(self.model.dfrm, self.corpus.x_val[i:i + 8], self.corpus.z_val[i:i + 8])
            recs.append(terms["rec"].item())
            guis.append(terms["gui"].item())
        rec, gui = float(np.mean(recs)), float(np.mean(guis))
        res = self.weights.rec * rec + self.weights.gui * gui
        self.log.add(stage=self.stage, step=self.step, val_res=res, val_rec=rec, val_gui=gui)
        return {"res": res, "rec": rec, "gui": gui}

    def run(self, steps: int) -> None:
        for _ in range(steps):
            self.train_step()
            if self.stage == 1 and self.cfg.train.val_every and self.step % self.cfg.train.val_every == 0:
                self.validate()

    # -- checkpointing -------------------------------------------------------
    def checkpoint(self) -> StageCheckpoint:
        meta = dict(self.meta, dfrm_checksum=self.model.dfrm_checksum(),
                    encoder_checksum=self.model.codec.encoder_checksum()
                    if hasattr(self.model.codec, "encoder_checksum") else "")
        state = {k: v.clone() for k, v in self.model.state_dict().items()}
        return StageCheckpoint(self.stage, self.step, self.cfg.to_dict(), state,
                               self.opt.state_dict(), self.gen.get_state(), meta)

    def restore(self, ckpt: StageCheckpoint) -> None:
        if ckpt.stage != self.stage:
            raise ConfigError(f"checkpoint is from stage {ckpt.stage}, trainer runs stage {self.stage}")
        self.model.load_state_dict(ckpt.model_state)
        if ckpt.optimizer_state is not None:
            self.opt.load_state_dict(ckpt.optimizer_state)
        if ckpt.rng_state is not None:
            self.gen.set_state(ckpt.rng_state)
        self.step = ckpt.step
        if self.stage == 2:
            self._z_hat = self._frozen_rescaled_latents()


def backend_meta(model: RescalingModel) -> dict:
    codec = model.codec
    return {"codec_kind": getattr(codec, "kind", "toy"),
            "codec_widths": list(getattr(codec, "widths", (32, 64, 96))),
            "corpus_hash": getattr(codec, "corpus_hash", ""),
            "denoiser_width": getattr(model.enhancer.denoiser, "width", 48)}


def warmstart_tpm(model: RescalingModel, corpus: Corpus, z_hat: torch.Tensor, cfg: RunConfig,
                  gen: torch.Generator) -> list[float]:
    """Regress the time-step predictor onto MSE-aligned steps of training crops."""
    tpm = model.enhancer.tpm
    opt = torch.optim.Adam(tpm.parameters(), lr=1e-3)
    T = model.sched.T
    losses = []
    for _ in range(cfg.train.tpm_warmstart_steps):
        zc, zh = aligned_crops(gen, cfg.train.batch_size, cfg.train.crop, cfg.factor, corpus.z, 8, z_hat, 8)
        target = torch.tensor([align_timestep(float(((a - b) ** 2).mean()), a, model.sched)
                               for a, b in zip(zc, zh)], dtype=torch.float32)
        loss = ((tpm(zh) - target) / (T - 1)).pow(2).mean()
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        losses.append(loss.item())
    return losses


def train_stage1(cfg: RunConfig, corpus: Corpus, model: RescalingModel, loss_log: LossLog | None = None,
                 steps: int | None = None) -> StageCheckpoint:
    trainer = StageTrainer(1, model, cfg, corpus, loss_log, backend_meta(model))
    trainer.validate()
    trainer.run(cfg.train.steps_stage1 if steps is None else steps)
    if not cfg.train.val_every or trainer.step % cfg.train.val_every:
        trainer.validate()
    return trainer.checkpoint()


def train_stage2(cfg: RunConfig, corpus: Corpus, model: RescalingModel, ckpt1: StageCheckpoint,
                 loss_log: LossLog | None = None, steps: int | None = None) -> StageCheckpoint:
    model.load_state_dict(ckpt1.model_state)
    trainer = StageTrainer(2, model, cfg, corpus, loss_log,
                           dict(backend_meta(model), parent_dfrm_checksum=ckpt1.meta["dfrm_checksum"]))
    if cfg.train.tpm_warmstart_steps and cfg.model.timestep_mode == "adaptive":
        warmstart_tpm(model, corpus, trainer._z_hat, cfg, trainer.gen)
    trainer.run(cfg.train.steps_stage2 if steps is None else steps)
    ckpt = trainer.checkpoint()
    if ckpt.meta["dfrm_checksum"] != ckpt1.meta["dfrm_checksum"]:
        raise RuntimeError("stage 2 modified the frozen rescaling module")
    return ckpt


def train_stage3(cfg: RunConfig, corpus: Corpus, model: RescalingModel, ckpt2: StageCheckpoint,
                 loss_log: LossLog | None = None, steps: int | None = None) -> StageCheckpoint:
    model.load_state_dict(ckpt2.model_state)
    trainer = StageTrainer(3, model, cfg, corpus, loss_log, backend_meta(model))
    trainer.run(cfg.train.steps_stage3 if steps is None else steps)
    trainer.validate()
    return trainer.checkpoint()
