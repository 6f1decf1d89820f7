"""Decoupled feature rescaling: latent downscaler, invertible feature/pixel converter, latent upscaler."""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn
import torch.nn.functional as F

from .codec import REDUCTION, ResBlock
from .imaging import bicubic_resize, dequantize, quantize_ste, quantize_to_u8

FACTORS = (8, 16, 32)


@dataclass(frozen=True)
class RescaleLossWeights:
    rec: float = 1.0
    gui: float = 1.0

    def __post_init__(self):
        for v in (self.rec, self.gui):
            if not math.isfinite(v) or v < 0:
                raise ValueError(f"loss weights must be finite and non-negative, got {v}")
        if self.rec == 0 and self.gui == 0:
            raise ValueError("loss weights must not both be zero")


# ---------------------------------------------------------------------------
# invertible converter

class AffineCoupling(nn.Module):
    """Keeps channel 0, scale-shifts channels 1:3 conditioned on it."""

    def __init__(self, hidden: int = 32, scale_bound: float = 1.0, zero_init: bool = True):
        super().__init__()
        self.scale_bound = scale_bound
        self.net = nn.Sequential(
            nn.Conv2d(1, hidden, 3, padding=1), nn.SiLU(),
            nn.Conv2d(hidden, hidden, 3, padding=1), nn.SiLU(),
            nn.Conv2d(hidden, 4, 3, padding=1),
        )
        if zero_init:
            nn.init.zeros_(self.net[-1].weight)
            nn.init.zeros_(self.net[-1].bias)

    def params(self, cond):
        raw_s, t = self.net(cond).chunk(2, dim=1)
        return self.scale_bound * torch.tanh(raw_s), t

    def forward(self, v):
        cond, rest = v[:, :1], v[:, 1:]
        s, t = self.params(cond)
        return torch.cat([cond, rest * torch.exp(s) + t], dim=1), s.flatten(1).sum(1)

    def inverse(self, u):
        cond, rest = u[:, :1], u[:, 1:]
        s, t = self.params(cond)
        return torch.cat([cond, (rest - t) * torch.exp(-s)], dim=1)


class InvertibleConverter(nn.Module):
    """``K`` affine couplings, each followed by a cyclic channel permutation."""

    PERM = (2, 0, 1)
    INV_PERM = (1, 2, 0)

    def __init__(self, blocks: int = 8, hidden: int = 32, zero_init: bool = True):
        super().__init__()
        self.blocks = nn.ModuleList(AffineCoupling(hidden, zero_init=zero_init) for _ in range(blocks))

    def forward(self, v, return_logdet: bool = False):
        logdet = torch.zeros(v.shape[0], dtype=v.dtype, device=v.device)
        for block in self.blocks:
            v, ld = block(v)
            v = v[:, self.PERM]
            logdet = logdet + ld
        return (v, logdet) if return_logdet else v

    def inverse(self, u):
        for block in reversed(self.blocks):
            u = block.inverse(u[:, self.INV_PERM])
        return u


# ---------------------------------------------------------------------------
# latent downscaler / upscaler

class LatentDownscaler(nn.Module):
    """Strided residual downsampler on the latent with bicubic pixel guidance.

    Guidance images at every resolution are concatenated to the features and
    fused by a 1x1 convolution.
    """

    def __init__(self, factor: int, width: int = 64, blocks: int = 2, pixel_guidance: bool = True):
        super().__init__()
        self.factor = factor
        self.stages = int(math.log2(factor // REDUCTION))
        self.pixel_guidance = pixel_guidance
        self.head = nn.Conv2d(4, width, 3, padding=1)
        self.body = nn.ModuleList()
        self.down = nn.ModuleList()
        self.fuse = nn.ModuleList()
        for level in range(self.stages + 1):
            self.body.append(nn.Sequential(*[ResBlock(width) for _ in range(blocks)]))
            if pixel_guidance:
                self.fuse.append(nn.Conv2d(width + 3, width, 1))
            if level < self.stages:
                self.down.append(nn.Conv2d(width, width, 4, stride=2, padding=1))
        self.tail = nn.Conv2d(width, 3, 3, padding=1)

    def forward(self, x, z):
        h = self.head(z)
        for level in range(self.stages + 1):
            if self.pixel_guidance:
                g = bicubic_resize(x, 1 / (REDUCTION * 2 ** level))
                h = self.fuse[level](torch.cat([h, g], dim=1))
            h = self.body[level](h)
            if level < self.stages:
                h = self.down[level](F.silu(h))
        return self.tail(F.silu(h))


class LatentUpscaler(nn.Module):
    """Mirror of the downscaler with nearest-neighbour + conv upsampling."""

    def __init__(self, factor: int, width: int = 64, blocks: int = 2):
        super().__init__()
        self.stages = int(math.log2(factor // REDUCTION))
        self.head = nn.Conv2d(3, width, 3, padding=1)
        self.body = nn.ModuleList(nn.Sequential(*[ResBlock(width) for _ in range(blocks)])
                                  for _ in range(self.stages + 1))
        self.up = nn.ModuleList(nn.Conv2d(width, width, 3, padding=1) for _ in range(self.stages))
        self.tail = nn.Conv2d(width, 4, 3, padding=1)

    def forward(self, v):
        h = self.body[0](self.head(v))
        for level in range(self.stages):
            h = self.up[level](F.interpolate(F.silu(h), scale_factor=2, mode="nearest"))
            h = self.body[level + 1](h)
        return self.tail(F.silu(h))


class DFRM(nn.Module):
    def __init__(self, factor: int = 16, width: int = 64, blocks: int = 2, inn_blocks: int = 8,
                 inn_hidden: int = 32, pixel_guidance: bool = True, use_inn: bool = True):
        super().__init__()
        if factor not in FACTORS:
            raise ValueError(f"factor must be one of {FACTORS}, got {factor}")
        self.factor = factor
        self.use_inn = use_inn
        self.encoder = LatentDownscaler(factor, width, blocks, pixel_guidance)
        self.decoder = LatentUpscaler(factor, width, blocks)
        self.inn = InvertibleConverter(inn_blocks, inn_hidden) if use_inn else None

    def check_sizes(self, x, z):
        h, w = x.shape[-2:]
        if h % self.factor or w % self.factor:
            raise ValueError(f"image size {h}x{w} is not divisible by factor {self.factor}")
        if tuple(z.shape[-2:]) != (h // REDUCTION, w // REDUCTION):
            raise ValueError(f"latent {tuple(z.shape[-2:])} does not match image {h}x{w}")

    def inn_forward(self, v):
        return self.inn(v) if self.inn is not None else v

    def inn_inverse(self, u):
        return self.inn.inverse(u) if self.inn is not None else u

    def compact(self, x, z):
        """``z_lr = G_e(x, z)``; accepts single or batched inputs."""
        self.check_sizes(x, z)
        batched = z.ndim == 4
        out = self.encoder(x if batched else x[None], z if batched else z[None])
        return out if batched else out[0]

    def downscale(self, x, z):
        """Returns ``(y, z_lr)`` with ``y`` holding integer values 0..255."""
        z_lr = self.compact(x, z)
        u = self._batched(self.inn_forward, z_lr)
        return quantize_to_u8(u), z_lr

    def upscale(self, y):
        """``z_hat = G_d(F^-1(dequantize(y)))``."""
        if y.shape[-3] != 3:
            raise ValueError(f"LR image must have 3 channels, got {tuple(y.shape)}")
        return self._batched(lambda t: self.decoder(self.inn_inverse(t)), dequantize(y))

    @staticmethod
    def _batched(fn, t):
        return fn(t) if t.ndim == 4 else fn(t[None])[0]


# ---------------------------------------------------------------------------
# losses

def rescale_terms(dfrm: DFRM, x, z, quantize: bool = False) -> dict[str, torch.Tensor]:
    """Per-element mean L1 terms of the two reconstruction chains and the guidance loss.

    With ``quantize`` the second chain passes through a straight-through
    8-bit quantizer between the converter and its inverse.
    """
    z_lr = dfrm.compact(x, z)
    u = DFRM._batched(dfrm.inn_forward, z_lr)
    u_q = quantize_ste(u) if quantize else u
    direct = DFRM._batched(dfrm.decoder, z_lr)
    through = DFRM._batched(lambda t: dfrm.decoder(dfrm.inn_inverse(t)), u_q)
    target = bicubic_resize(x, 1 / dfrm.factor)
    rec_direct = (direct - z).abs().mean()
    rec_through = (through - z).abs().mean()
    return {"rec_direct": rec_direct, "rec_through": rec_through, "z_hat": through,
            "rec": rec_direct + rec_through, "gui": (u - target).abs().mean()}


def loss_rec(dfrm: DFRM, x, z, quantize: bool = False) -> torch.Tensor:
    return rescale_terms(dfrm, x, z, quantize)["rec"]


def loss_gui(dfrm: DFRM, x, z) -> torch.Tensor:
    z_lr = dfrm.compact(x, z)
    u = DFRM._batched(dfrm.inn_forward, z_lr)
    return (u - bicubic_resize(x, 1 / dfrm.factor)).abs().mean()


def loss_res(dfrm: DFRM, x, z, weights: RescaleLossWeights = RescaleLossWeights(),
             quantize: bool = False) -> torch.Tensor:
    terms = rescale_terms(dfrm, x, z, quantize)
    return weights.rec * terms["rec"] + weights.gui * terms["gui"]


@torch.no_grad()
def chain_gap(dfrm: DFRM, x, z) -> dict[str, float]:
    """Mean L1 of the un-quantized chain versus the inference chain through ``y``."""
    y, z_lr = dfrm.downscale(x, z)
    clean = DFRM._batched(dfrm.decoder, z_lr)
    quantized = dfrm.upscale(y)
    e1 = float((clean - z).abs().mean())
    e2 = float((quantized - z).abs().mean())
    return {"chain1": e1, "chain2": e2, "gap": e2 - e1}
