"""One-step latent enhancement: noise schedule, denoiser, time-step predictor and hybrid scheduler."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from .container import load_archive, save_archive
from .lora import attach_lora, freeze

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# schedule

@dataclass(frozen=True)
class NoiseSchedule:
    betas: np.ndarray
    alpha_bars: np.ndarray

    @property
    def T(self) -> int:
        return len(self.betas)

    def check_t(self, t) -> None:
        lo, hi = (float(t.detach().min()), float(t.detach().max())) if torch.is_tensor(t) else (t, t)
        if not (0 <= lo and hi <= self.T - 1) or math.isnan(lo) or math.isnan(hi):
            raise ValueError(f"time-step {t} outside [0, {self.T - 1}]")

    def alpha_bar(self, t, like: torch.Tensor) -> torch.Tensor:
        """``alpha_bar`` at integer ``t`` (int or int tensor), broadcastable against ``like``."""
        table = torch.as_tensor(self.alpha_bars, dtype=like.dtype, device=like.device)
        if torch.is_tensor(t):
            return table[t.long()].reshape(-1, *([1] * (like.ndim - 1)))
        return table[int(t)]


def make_schedule(T: int = 1000, beta_min: float = 1e-4, beta_max: float = 0.02) -> NoiseSchedule:
    """Linear beta schedule and its cumulative signal retention."""
    if T < 1:
        raise ValueError("T must be positive")
    betas = np.linspace(beta_min, beta_max, T, dtype=np.float64)
    if np.any(betas <= 0) or np.any(betas >= 1):
        raise ValueError("betas must lie strictly inside (0, 1)")
    return NoiseSchedule(betas, np.cumprod(1.0 - betas))


def denoise_with_alpha_bar(z_hat, eps, alpha_bar):
    return (z_hat - torch.sqrt(1 - alpha_bar) * eps) / torch.sqrt(alpha_bar)


def denoise_fixed(z_hat: torch.Tensor, eps: torch.Tensor, t, sched: NoiseSchedule) -> torch.Tensor:
    """Single deterministic denoising step at integer ``t``."""
    if torch.is_tensor(t) and t.is_floating_point() or isinstance(t, float) and not float(t).is_integer():
        raise ValueError("the fixed scheduler needs an integer time-step")
    sched.check_t(t)
    ab = sched.alpha_bar(t, z_hat)
    if not torch.is_tensor(ab):
        ab = torch.tensor(ab)
    return denoise_with_alpha_bar(z_hat, eps, ab)


def add_noise(z, eps, t, sched: NoiseSchedule):
    ab = sched.alpha_bar(t, z)
    return torch.sqrt(ab) * z + torch.sqrt(1 - ab) * eps


def diffusion_mse(z: torch.Tensor, t: int, sched: NoiseSchedule) -> float:
    """Expected MSE between ``sqrt(ab) z + sqrt(1-ab) eps`` and ``z`` over Gaussian ``eps``."""
    ab = float(sched.alpha_bars[t])
    return (1 - math.sqrt(ab)) ** 2 * float((z.double() ** 2).mean()) + (1 - ab)


def diffusion_mse_curve(z: torch.Tensor, sched: NoiseSchedule) -> np.ndarray:
    ab = sched.alpha_bars
    return (1 - np.sqrt(ab)) ** 2 * float((z.double() ** 2).mean()) + (1 - ab)


def align_timestep(rescale_mse: float, z: torch.Tensor, sched: NoiseSchedule) -> int:
    """Smallest ``t`` whose diffusion MSE reaches ``rescale_mse`` (``T-1`` if none)."""
    curve = diffusion_mse_curve(z, sched)
    hits = np.nonzero(curve >= rescale_mse)[0]
    return int(hits[0]) if len(hits) else sched.T - 1


# ---------------------------------------------------------------------------
# time embedding

def sinusoidal_table(T: int, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    args = torch.arange(T, dtype=torch.float64)[:, None] * freqs[None]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=1).float()


class TimeEmbedding(nn.Module):
    """Sinusoidal embedding at integer steps, linearly interpolated for real ``t``."""

    def __init__(self, T: int, dim: int = 64, out_dim: int = 128):
        super().__init__()
        self.T = T
        self.register_buffer("table", sinusoidal_table(T, dim), persistent=False)
        self.mlp = nn.Sequential(nn.Linear(dim, out_dim), nn.SiLU(), nn.Linear(out_dim, out_dim))

    def interpolate(self, t: torch.Tensor) -> torch.Tensor:
        t = t.to(self.table.dtype).clamp(0, self.T - 1)
        lo = torch.floor(t).detach()
        hi = (lo + 1).clamp(max=self.T - 1)
        frac = (t - lo)[:, None]
        return (1 - frac) * self.table[lo.long()] + frac * self.table[hi.long()]

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        return self.mlp(self.interpolate(t))


def _as_batch_t(t, batch: int, like: torch.Tensor) -> torch.Tensor:
    if not torch.is_tensor(t):
        t = torch.tensor(float(t))
    t = t.to(like.dtype)
    return t.expand(batch) if t.ndim == 0 else t


# ---------------------------------------------------------------------------
# denoiser

class TimeResBlock(nn.Module):
    def __init__(self, ch: int, temb: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(8, ch)
        self.conv1 = nn.Conv2d(ch, ch, 3, padding=1)
        self.proj = nn.Linear(temb, ch)
        self.norm2 = nn.GroupNorm(8, ch)
        self.conv2 = nn.Conv2d(ch, ch, 3, padding=1)

    def forward(self, x, emb):
        h = self.conv1(F.silu(self.norm1(x))) + self.proj(emb)[:, :, None, None]
        return x + self.conv2(F.silu(self.norm2(h)))


class ToyDenoiser(nn.Module):
    """Two-level residual U-Net predicting noise from a latent and a real-valued step."""

    kind = "toy"

    def __init__(self, T: int = 1000, width: int = 48):
        super().__init__()
        self.T = T
        self.width = width
        temb = 4 * width
        self.time = TimeEmbedding(T, 64, temb)
        self.conv_in = nn.Conv2d(4, width, 3, padding=1)
        self.enc1 = TimeResBlock(width, temb)
        self.down = nn.Conv2d(width, 2 * width, 4, stride=2, padding=1)
        self.enc2 = TimeResBlock(2 * width, temb)
        self.mid = TimeResBlock(2 * width, temb)
        self.up = nn.Conv2d(2 * width, width, 3, padding=1)
        self.merge = nn.Conv2d(2 * width, width, 1)
        self.dec1 = TimeResBlock(width, temb)
        self.conv_out = nn.Conv2d(width, 4, 3, padding=1)

    def forward(self, z: torch.Tensor, t) -> torch.Tensor:
        h0, w0 = z.shape[-2:]
        pad = (0, w0 % 2, 0, h0 % 2)
        if any(pad):
            z = F.pad(z, pad, mode="replicate")
        emb = self.time(_as_batch_t(t, z.shape[0], z))
        h1 = self.enc1(self.conv_in(z), emb)
        h2 = self.mid(self.enc2(self.down(F.silu(h1)), emb), emb)
        u = self.up(F.interpolate(F.silu(h2), scale_factor=2, mode="nearest"))
        h = self.dec1(self.merge(torch.cat([u, h1], dim=1)), emb)
        out = self.conv_out(F.silu(h))
        return out[..., :h0, :w0]


@dataclass
class DenoiserTrainConfig:
    steps: int = 1500
    batch_size: int = 16
    crop: int = 16
    lr: float = 1e-3
    width: int = 48
    seed: int = 0


def pretrain_denoiser(latents: torch.Tensor, sched: NoiseSchedule,
                      cfg: DenoiserTrainConfig = DenoiserTrainConfig(), log_every: int = 500) -> ToyDenoiser:
    """Standard noise-prediction training on ``[B, 4, h, w]`` latents; returns a frozen model."""
    from .codec import random_crops

    torch.manual_seed(cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed)
    net = ToyDenoiser(sched.T, cfg.width)
    crop = min(cfg.crop, *latents.shape[-2:])
    opt = torch.optim.Adam(net.parameters(), lr=cfg.lr)
    lr_sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, cfg.steps, eta_min=cfg.lr * 0.05)
    for step in range(cfg.steps):
        z = random_crops(latents, cfg.batch_size, crop, gen)
        t = torch.randint(0, sched.T, (cfg.batch_size,), generator=gen)
        eps = torch.randn(z.shape, generator=gen)
        loss = F.mse_loss(net(add_noise(z, eps, t, sched), t.float()), eps)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        lr_sched.step()
        if log_every and step % log_every == 0:
            log.info("denoiser step %d mse %.4f", step, loss.item())
    net.eval()
    return freeze(net)


def save_denoiser(net: ToyDenoiser, path) -> str:
    return save_archive(path, net.state_dict(), {"kind": "toy-denoiser", "T": net.T, "width": net.width})


def load_denoiser(path) -> ToyDenoiser:
    tensors, meta, _ = load_archive(path)
    if meta.get("kind") != "toy-denoiser":
        raise ValueError(f"unsupported denoiser kind {meta.get('kind')!r}")
    net = ToyDenoiser(meta.get("T", 1000), meta["width"])
    net.load_state_dict(tensors)
    net.eval()
    return freeze(net)


class ExternalDenoiserAdapter(nn.Module):
    """TorchScript noise predictor with signature ``forward(z, t) -> eps`` (``t`` a float tensor of shape [B])."""

    kind = "external-adapter"

    def __init__(self, weights_path, T: int = 1000):
        super().__init__()
        self.T = T
        self.module = freeze(torch.jit.load(str(weights_path), map_location="cpu"))

    def forward(self, z: torch.Tensor, t) -> torch.Tensor:
        return self.module(z, _as_batch_t(t, z.shape[0], z))


def get_backend_denoiser(cfg) -> nn.Module | None:
    """Denoiser named by ``cfg.backend``, or ``None`` when a toy one should be pretrained."""
    b = cfg.backend
    if b.denoiser == "external":
        return ExternalDenoiserAdapter(b.denoiser_weights, cfg.schedule.T).eval()
    if b.denoiser == "toy":
        return load_denoiser(b.denoiser_weights) if b.denoiser_weights else None
    raise ValueError(f"unknown denoiser backend {b.denoiser!r}")


# ---------------------------------------------------------------------------
# time-step prediction and hybrid scheduler

class TimestepPredictor(nn.Module):
    """Four stride-2 convs, global average pool, two-layer head, ``(T-1) * sigmoid``."""

    def __init__(self, T: int = 1000, width: int = 32):
        super().__init__()
        self.T = T
        chans = [4, width, 2 * width, 2 * width, 2 * width]
        self.convs = nn.ModuleList(nn.Conv2d(chans[i], chans[i + 1], 3, stride=2, padding=1)
                                   for i in range(4))
        self.head = nn.Sequential(nn.Linear(chans[-1], chans[-1]), nn.SiLU(), nn.Linear(chans[-1], 1))

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        h = z
        for conv in self.convs:
            h = F.silu(conv(h))
        logit = self.head(h.mean(dim=(-2, -1)))[:, 0]
        logit = torch.nan_to_num(logit, nan=0.0, posinf=50.0, neginf=-50.0)
        return (self.T - 1) * torch.sigmoid(logit)


def predict_timestep(z_hat: torch.Tensor, tpm: TimestepPredictor) -> torch.Tensor:
    batched = z_hat.ndim == 4
    t = tpm(z_hat if batched else z_hat[None])
    return t if batched else t[0]


class LearnedScheduler(nn.Module):
    """Conv net over ``(z_hat, eps)`` modulated by the step embedding; final conv starts at zero."""

    def __init__(self, T: int = 1000, width: int = 32):
        super().__init__()
        self.time = TimeEmbedding(T, 64, 2 * width)
        self.conv1 = nn.Conv2d(8, width, 3, padding=1)
        self.conv2 = nn.Conv2d(width, width, 3, padding=1)
        self.zero_conv = nn.Conv2d(width, 4, 3, padding=1)
        nn.init.zeros_(self.zero_conv.weight)
        nn.init.zeros_(self.zero_conv.bias)

    def forward(self, z_hat, eps, t):
        scale, shift = self.time(_as_batch_t(t, z_hat.shape[0], z_hat)).chunk(2, dim=1)
        h = F.silu(self.conv1(torch.cat([z_hat, eps], dim=1)))
        h = h * (1 + scale[:, :, None, None]) + shift[:, :, None, None]
        return self.zero_conv(F.silu(self.conv2(h)))


class HybridScheduler(nn.Module):
    """Closed-form step at the preset ``t0`` plus a learned correction at the predicted ``t``."""

    def __init__(self, sched: NoiseSchedule, t0: int = 999, width: int = 32):
        super().__init__()
        if not 0 <= t0 < sched.T:
            raise ValueError(f"t0={t0} outside [0, {sched.T - 1}]")
        self.sched = sched
        self.t0 = int(t0)
        self.learned = LearnedScheduler(sched.T, width)

    def forward(self, z_hat, eps, t):
        self.sched.check_t(t)
        batched = z_hat.ndim == 4
        if not batched:
            z_hat, eps = z_hat[None], eps[None]
        out = denoise_fixed(z_hat, eps, self.t0, self.sched) + self.learned(z_hat, eps, t)
        return out if batched else out[0]


def denoise_hybrid(z_hat, eps, t, scheduler: HybridScheduler):
    return scheduler(z_hat, eps, t)


class Enhancer(nn.Module):
    """TPM -> noise prediction -> scheduler, or a plain fixed-step pass in ``fixed`` mode."""

    def __init__(self, sched: NoiseSchedule, denoiser: nn.Module, t0: int = 999,
                 tpm_width: int = 32, scheduler_width: int = 32,
                 mode: str = "adaptive", fixed_t: int = 999):
        super().__init__()
        if mode not in ("adaptive", "fixed"):
            raise ValueError(f"unknown timestep mode {mode!r}")
        self.sched = sched
        self.mode = mode
        self.fixed_t = int(fixed_t)
        self.denoiser = denoiser
        self.tpm = TimestepPredictor(sched.T, tpm_width)
        self.scheduler = HybridScheduler(sched, t0, scheduler_width)

    def add_lora(self, rank: int):
        return attach_lora(self.denoiser, rank)

    def forward(self, z_hat: torch.Tensor, trace: list | None = None, tag=None):
        """Returns ``(z0, t)`` for ``[B, 4, h, w]`` latents."""
        if self.mode == "fixed":
            t = torch.full((z_hat.shape[0],), float(self.fixed_t), dtype=z_hat.dtype)
            if trace is not None:
                trace.append(("tpm", tag))
            eps = self.denoiser(z_hat, t)
            if trace is not None:
                trace.append(("eps", tag))
            out = denoise_fixed(z_hat, eps, self.fixed_t, self.sched)
        else:
            t = self.tpm(z_hat)
            if trace is not None:
                trace.append(("tpm", tag))
            eps = self.denoiser(z_hat, t)
            if trace is not None:
                trace.append(("eps", tag))
            out = self.scheduler(z_hat, eps, t)
        if trace is not None:
            trace.append(("ts", tag))
        return out, t


def enhance(z_hat: torch.Tensor, enhancer: Enhancer) -> torch.Tensor:
    batched = z_hat.ndim == 4
    out, _ = enhancer(z_hat if batched else z_hat[None])
    return out if batched else out[0]


# ---------------------------------------------------------------------------
# enhancement loss

def loss_enh(x_hat: torch.Tensor, x: torch.Tensor,
             perceptual: Sequence[Callable[[torch.Tensor, torch.Tensor], torch.Tensor]] = (),
             lambda_pec: float = 1.0) -> torch.Tensor:
    """Mean L1 plus ``lambda_pec`` times the sum of the perceptual metrics."""
    loss = (x_hat - x).abs().mean()
    if lambda_pec and perceptual:
        loss = loss + lambda_pec * sum(metric(x_hat, x) for metric in perceptual)
    return loss
