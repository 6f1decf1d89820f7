"""Latent autoencoder backends mapping images to 4-channel latents at 1/8 scale."""
from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol

import torch
from torch import nn
import torch.nn.functional as F

from .container import load_archive, save_archive, state_checksum
from .lora import attach_lora, freeze

log = logging.getLogger(__name__)

LATENT_CHANNELS = 4
REDUCTION = 8


class CodecBackend(Protocol):
    kind: str
    latent_channels: int
    reduction: int

    def encode(self, x: torch.Tensor) -> torch.Tensor: ...

    def decode(self, z: torch.Tensor, clamp: bool = True) -> torch.Tensor: ...


def check_divisible(x: torch.Tensor, n: int, what: str = "image") -> None:
    h, w = x.shape[-2:]
    if h % n or w % n:
        raise ValueError(f"{what} size {h}x{w} is not divisible by {n}")


class ResBlock(nn.Module):
    def __init__(self, ch: int):
        super().__init__()
        self.conv1 = nn.Conv2d(ch, ch, 3, padding=1)
        self.conv2 = nn.Conv2d(ch, ch, 3, padding=1)

    def forward(self, x):
        return x + self.conv2(F.silu(self.conv1(F.silu(x))))


class Upsample(nn.Module):
    def __init__(self, cin: int, cout: int):
        super().__init__()
        self.conv = nn.Conv2d(cin, cout, 3, padding=1)

    def forward(self, x):
        return self.conv(F.interpolate(x, scale_factor=2, mode="nearest"))


class ToyEncoder(nn.Module):
    """Space-to-depth stem, then stride-2 convs: 1/2 -> 1/4 -> 1/8."""

    def __init__(self, widths=(32, 64, 96)):
        super().__init__()
        c1, c2, c3 = widths
        self.stem = nn.Conv2d(12, c1, 3, padding=1)
        self.res1 = ResBlock(c1)
        self.down2 = nn.Conv2d(c1, c2, 4, stride=2, padding=1)
        self.res2 = ResBlock(c2)
        self.down3 = nn.Conv2d(c2, c3, 4, stride=2, padding=1)
        self.res3 = nn.Sequential(ResBlock(c3), ResBlock(c3))
        self.conv_out = nn.Conv2d(c3, 2 * LATENT_CHANNELS, 3, padding=1)

    def forward(self, x):
        h = self.res1(self.stem(F.pixel_unshuffle(x, 2)))
        h = self.res2(self.down2(F.silu(h)))
        h = self.res3(self.down3(F.silu(h)))
        return self.conv_out(F.silu(h))


class ToyDecoder(nn.Module):
    def __init__(self, widths=(32, 64, 96)):
        super().__init__()
        c1, c2, c3 = widths
        self.conv_in = nn.Conv2d(LATENT_CHANNELS, c3, 3, padding=1)
        self.res3 = nn.Sequential(ResBlock(c3), ResBlock(c3))
        self.up2 = Upsample(c3, c2)
        self.res2 = ResBlock(c2)
        self.up1 = Upsample(c2, c1)
        self.res1 = ResBlock(c1)
        self.conv_out = nn.Conv2d(c1, 12, 3, padding=1)

    def forward(self, z):
        h = self.res3(self.conv_in(z))
        h = self.res2(self.up2(F.silu(h)))
        h = self.res1(self.up1(F.silu(h)))
        return F.pixel_shuffle(self.conv_out(F.silu(h)), 2)


class ToyCodec(nn.Module):
    """Small convolutional VAE. Latents are normalized as ``(mu - shift) * scale``."""

    kind = "toy"
    latent_channels = LATENT_CHANNELS
    reduction = REDUCTION

    def __init__(self, widths=(32, 64, 96)):
        super().__init__()
        self.widths = tuple(widths)
        self.encoder = ToyEncoder(widths)
        self.decoder = ToyDecoder(widths)
        self.register_buffer("shift", torch.zeros(()))
        self.register_buffer("scale", torch.ones(()))

    def moments(self, x):
        mu, logvar = self.encoder(x).chunk(2, dim=1)
        return mu, logvar.clamp(-20.0, 10.0)

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        check_divisible(x, REDUCTION)
        batched = x.ndim == 4
        mu, _ = self.moments(x if batched else x[None])
        z = (mu - self.shift) * self.scale
        return z if batched else z[0]

    def decode(self, z: torch.Tensor, clamp: bool = True) -> torch.Tensor:
        if z.shape[-3] != LATENT_CHANNELS:
            raise ValueError(f"latent must have {LATENT_CHANNELS} channels, got {z.shape[-3]}")
        batched = z.ndim == 4
        out = self.decoder((z if batched else z[None]) / self.scale + self.shift)
        if clamp:
            out = out.clamp(-1.0, 1.0)
        return out if batched else out[0]

    def encoder_checksum(self) -> str:
        return state_checksum(self.encoder.state_dict())

    def add_decoder_lora(self, rank: int):
        return attach_lora(self.decoder, rank)


class ExternalCodecAdapter(nn.Module):
    """Mounts an externally trained autoencoder saved as TorchScript.

    The scripted module must expose ``encode(x) -> mean`` and ``decode(z)``
    operating on raw (unnormalized) latents; ``shift``/``scale`` are the
    normalization constants applied around them.
    """

    kind = "external-adapter"
    latent_channels = LATENT_CHANNELS
    reduction = REDUCTION

    def __init__(self, weights_path: str | Path, scale: float, shift: float = 0.0):
        super().__init__()
        self.module = torch.jit.load(str(weights_path), map_location="cpu")
        freeze(self.module)
        self.register_buffer("shift", torch.tensor(float(shift)))
        self.register_buffer("scale", torch.tensor(float(scale)))

    def encode(self, x):
        check_divisible(x, REDUCTION)
        batched = x.ndim == 4
        z = (self.module.encode(x if batched else x[None]) - self.shift) * self.scale
        return z if batched else z[0]

    def decode(self, z, clamp: bool = True):
        if z.shape[-3] != LATENT_CHANNELS:
            raise ValueError(f"latent must have {LATENT_CHANNELS} channels, got {z.shape[-3]}")
        batched = z.ndim == 4
        out = self.module.decode((z if batched else z[None]) / self.scale + self.shift)
        if clamp:
            out = out.clamp(-1.0, 1.0)
        return out if batched else out[0]

    @property
    def decoder(self) -> nn.Module:
        return self.module

    def add_decoder_lora(self, rank: int):
        # scripted graphs cannot be rewritten in place, so the decoder stays as loaded
        log.warning("external codec: decoder low-rank adaptation is not available, skipping")
        return []


# ---------------------------------------------------------------------------
# training the toy backend

@dataclass
class CodecTrainConfig:
    steps: int = 3000
    batch_size: int = 16
    crop: int = 64
    lr: float = 1e-3
    kl_weight: float = 1e-6
    seed: int = 0
    widths: tuple[int, int, int] = (32, 64, 96)


def random_crops(images: torch.Tensor, n: int, size: int, gen: torch.Generator) -> torch.Tensor:
    b, _, h, w = images.shape
    idx = torch.randint(0, b, (n,), generator=gen)
    rows = torch.randint(0, h - size + 1, (n,), generator=gen)
    cols = torch.randint(0, w - size + 1, (n,), generator=gen)
    flips = torch.rand(n, generator=gen) < 0.5
    crops = []
    for i, r, c, f in zip(idx.tolist(), rows.tolist(), cols.tolist(), flips.tolist()):
        crop = images[i, :, r:r + size, c:c + size]
        crops.append(crop.flip(-1) if f else crop)
    return torch.stack(crops)


def corpus_hash(images: torch.Tensor) -> str:
    return hashlib.sha256(images.detach().cpu().contiguous().numpy().tobytes()).hexdigest()[:16]


def train_toy_codec(images: torch.Tensor, cfg: CodecTrainConfig = CodecTrainConfig(),
                    log_every: int = 500) -> ToyCodec:
    """Fit the toy VAE on ``[B, 3, H, W]`` images in ``[-1, 1]`` and freeze it."""
    torch.manual_seed(cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed)
    codec = ToyCodec(cfg.widths)
    crop = min(cfg.crop, *images.shape[-2:]) // REDUCTION * REDUCTION
    opt = torch.optim.Adam(codec.parameters(), lr=cfg.lr)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, cfg.steps, eta_min=cfg.lr * 0.05)
    for step in range(cfg.steps):
        x = random_crops(images, cfg.batch_size, crop, gen)
        mu, logvar = codec.moments(x)
        noise = torch.randn(mu.shape, generator=gen)
        z = mu + torch.exp(0.5 * logvar) * noise
        rec = codec.decoder(z)
        l1 = (rec - x).abs().mean()
        kl = 0.5 * (mu.pow(2) + logvar.exp() - 1.0 - logvar).mean()
        loss = l1 + cfg.kl_weight * kl
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        sched.step()
        if log_every and step % log_every == 0:
            log.info("codec step %d l1 %.4f kl %.3f", step, l1.item(), kl.item())
    codec.eval()
    with torch.no_grad():
        mus = torch.cat([codec.moments(images[i:i + 8])[0] for i in range(0, len(images), 8)])
        codec.shift.fill_(float(mus.mean()))
        codec.scale.fill_(1.0 / float(mus.std()))
    freeze(codec)
    codec.corpus_hash = corpus_hash(images)
    return codec


def save_codec(codec: ToyCodec, path: str | Path) -> str:
    meta = {"kind": codec.kind, "latent_channels": LATENT_CHANNELS, "reduction": REDUCTION,
            "widths": list(codec.widths), "corpus_hash": getattr(codec, "corpus_hash", "")}
    return save_archive(path, codec.state_dict(), meta)


def load_codec(path: str | Path) -> ToyCodec:
    tensors, meta, _ = load_archive(path)
    if meta.get("kind") != "toy":
        raise ValueError(f"unsupported codec kind {meta.get('kind')!r}")
    codec = ToyCodec(tuple(meta["widths"]))
    codec.load_state_dict(tensors)
    codec.corpus_hash = meta.get("corpus_hash", "")
    codec.eval()
    return freeze(codec)


def get_backend_codec(cfg) -> nn.Module | None:
    """Codec named by ``cfg.backend``, or ``None`` when a toy codec should be trained from scratch."""
    b = cfg.backend
    if b.codec == "external":
        return ExternalCodecAdapter(b.codec_weights, b.codec_scale, b.codec_shift).eval()
    if b.codec == "toy":
        return load_codec(b.codec_weights) if b.codec_weights else None
    raise ValueError(f"unknown codec backend {b.codec!r}")


def psnr_model_range(a: torch.Tensor, b: torch.Tensor) -> float:
    mse = float(((a - b) ** 2).mean())
    return math.inf if mse == 0 else 10 * math.log10(4.0 / mse)
