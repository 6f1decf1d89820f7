"""Desk-scale training protocol: toy backends, then the three rescaling stages."""
from __future__ import annotations

import dataclasses
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .codec import (CodecTrainConfig, ToyCodec, corpus_hash, get_backend_codec, load_codec, save_codec,
                    train_toy_codec)
from .config import RunConfig
from .corpus import desk_corpus
from .diffusion import (DenoiserTrainConfig, ToyDenoiser, get_backend_denoiser, load_denoiser, make_schedule,
                        pretrain_denoiser, save_denoiser)
from .imaging import bicubic_resize, to_u8_range
from .lora import freeze
from .pipeline import (Corpus, LossLog, RescalingModel, StageCheckpoint, build_model,
                       train_stage1, train_stage2, train_stage3)

log = logging.getLogger(__name__)

DESK_IMAGES = 64
DESK_SIZE = 256
DESK_VAL_IMAGES = 8


@dataclass
class DeskResult:
    factor: int
    model: RescalingModel
    cfg: RunConfig
    checkpoints: dict[int, StageCheckpoint]
    loss_log: LossLog
    timings: dict[str, float] = field(default_factory=dict)

    def val_res_curve(self) -> list[tuple[int, float]]:
        return [(r["step"], r["val_res"]) for r in self.loss_log.rows
                if r["stage"] == 1 and r["val_res"] != ""]


def desk_images(seed: int = 0) -> tuple[torch.Tensor, torch.Tensor]:
    """Training corpus and a disjoint validation set (different crop seed)."""
    return desk_corpus(DESK_IMAGES, DESK_SIZE, seed=seed), desk_corpus(DESK_VAL_IMAGES, DESK_SIZE, seed=seed + 1)


def get_codec(images: torch.Tensor, cfg: RunConfig, cache_dir: Path | None = None) -> ToyCodec:
    """Configured pretrained codec if any, else a toy codec trained on ``images`` (cached by corpus hash)."""
    configured = get_backend_codec(cfg)
    if configured is not None:
        return configured
    key = f"codec-{corpus_hash(images)[:12]}-{cfg.train.codec_steps}-{cfg.seed}.zip"
    if cache_dir is not None and (cache_dir / key).exists():
        return load_codec(cache_dir / key)
    codec = train_toy_codec(images, CodecTrainConfig(steps=cfg.train.codec_steps, seed=cfg.seed))
    if cache_dir is not None:
        cache_dir.mkdir(parents=True, exist_ok=True)
        save_codec(codec, cache_dir / key)
    return codec


def get_denoiser(latents: torch.Tensor, cfg: RunConfig, cache_dir: Path | None = None) -> ToyDenoiser:
    configured = get_backend_denoiser(cfg)
    if configured is not None:
        return configured
    sched = make_schedule(cfg.schedule.T, cfg.schedule.beta_min, cfg.schedule.beta_max)
    dcfg = DenoiserTrainConfig(steps=cfg.train.denoiser_steps, seed=cfg.seed)
    key = f"denoiser-{corpus_hash(latents)[:12]}-{dcfg.steps}-{dcfg.width}-{cfg.seed}-{cfg.schedule.T}.zip"
    if cache_dir is not None and (cache_dir / key).exists():
        return load_denoiser(cache_dir / key)
    net = pretrain_denoiser(latents, sched, dcfg)
    if cache_dir is not None:
        cache_dir.mkdir(parents=True, exist_ok=True)
        save_denoiser(net, cache_dir / key)
    return net


def clone_backends(codec: ToyCodec, denoiser: ToyDenoiser) -> tuple[ToyCodec, ToyDenoiser]:
    """Independent copies so each factor's LoRA adapters start from the same frozen weights."""
    if codec.kind != "toy" or denoiser.kind != "toy":
        return codec, denoiser
    c = ToyCodec(codec.widths)
    c.load_state_dict(codec.state_dict())
    c.corpus_hash = getattr(codec, "corpus_hash", "")
    d = ToyDenoiser(denoiser.T, denoiser.width)
    d.load_state_dict(denoiser.state_dict())
    return freeze(c.eval()), freeze(d.eval())


def run_protocol(cfg: RunConfig, corpus: Corpus, codec: ToyCodec, denoiser: ToyDenoiser) -> DeskResult:
    codec, denoiser = clone_backends(codec, denoiser)
    model = build_model(cfg, codec, denoiser)
    loss_log = LossLog()
    timings = {}
    t = time.perf_counter()
    c1 = train_stage1(cfg, corpus, model, loss_log)
    timings["stage1"] = time.perf_counter() - t
    t = time.perf_counter()
    c2 = train_stage2(cfg, corpus, model, c1, loss_log)
    timings["stage2"] = time.perf_counter() - t
    t = time.perf_counter()
    c3 = train_stage3(cfg, corpus, model, c2, loss_log)
    timings["stage3"] = time.perf_counter() - t
    model.eval()
    return DeskResult(cfg.factor, model, cfg, {1: c1, 2: c2, 3: c3}, loss_log, timings)


def with_factor(cfg: RunConfig, factor: int) -> RunConfig:
    d = cfg.to_dict()
    d["factor"] = factor
    return RunConfig.from_dict(d)


@torch.no_grad()
def roundtrip_u8(model: RescalingModel, x: torch.Tensor, cfg: RunConfig, batch: int = 8) -> torch.Tensor:
    """Full down/quantize/up path over a batch of ``[-1, 1]`` images, returned on 0..255."""
    out = []
    for i in range(0, len(x), batch):
        xb = x[i:i + batch]
        y, _ = model.down(xb)
        for yi in y:
            x_hat, _ = model.up(yi, cfg.patch_size, cfg.stride)
            out.append(to_u8_range(x_hat))
    return torch.stack(out)


@torch.no_grad()
def mean_predicted_t(model: RescalingModel, x: torch.Tensor, batch: int = 8) -> float:
    """Mean time step the predictor assigns to the rescaled latents of ``x``."""
    ts = []
    for i in range(0, len(x), batch):
        z_hat = model.dfrm.upscale(model.down(x[i:i + batch])[0])
        ts.append(model.enhancer.tpm(z_hat))
    return float(torch.cat(ts).mean())


def bicubic_roundtrip_u8(x: torch.Tensor, factor: int) -> torch.Tensor:
    return torch.stack([to_u8_range(bicubic_resize(bicubic_resize(im, 1 / factor), factor)) for im in x])


def summarize(values) -> dict[str, float]:
    a = np.asarray(values, dtype=np.float64)
    return {"mean": float(a.mean()), "min": float(a.min()), "max": float(a.max())}


# Desk-scale preset on top of the library defaults; configs/desk.json mirrors it for the CLI.
DESK_OVERRIDES = {
    "train.lr_stage1": 1e-3,
    "t0": 1,
    "train.tpm_warmstart_steps": 200,
}


def config_for_desk(**overrides) -> RunConfig:
    """Library defaults, then ``DESK_OVERRIDES``, then dotted ``overrides``."""
    d = dataclasses.asdict(RunConfig())
    for dotted, v in {**DESK_OVERRIDES, **overrides}.items():
        node = d
        parts = dotted.split(".")
        for p in parts[:-1]:
            node = node[p]
        node[parts[-1]] = v
    return RunConfig.from_dict(d)


@dataclass
class DeskRun:
    x: torch.Tensor
    x_val: torch.Tensor
    corpus: Corpus
    codec: ToyCodec
    denoiser: ToyDenoiser
    results: dict[int, DeskResult]
    backend_seconds: float


def train_desk(cfg: RunConfig | None = None, factors=(16, 32), cache_dir: str | Path | None = None) -> DeskRun:
    """Backends once, then the three-stage protocol independently at every factor."""
    cfg = cfg or config_for_desk()
    cache = Path(cache_dir) if cache_dir else None
    x, x_val = desk_images(cfg.seed)
    t = time.perf_counter()
    codec = get_codec(x, cfg, cache)
    corpus = Corpus.from_images(codec, x, x_val)
    denoiser = get_denoiser(corpus.z, cfg, cache)
    backend_seconds = time.perf_counter() - t
    results = {}
    for factor in factors:
        results[factor] = run_protocol(with_factor(cfg, factor), corpus, codec, denoiser)
        log.info("factor %d trained: %s", factor, results[factor].timings)
    return DeskRun(x, x_val, corpus, codec, denoiser, results, backend_seconds)
