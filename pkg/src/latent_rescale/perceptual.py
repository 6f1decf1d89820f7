"""Differentiable stand-ins for learned perceptual distances.

Any callable ``metric(x_hat, x) -> scalar tensor`` with a ``name`` attribute
can be mounted in place of these (e.g. a wrapper around a pretrained LPIPS).
"""
from __future__ import annotations

from typing import Protocol

import torch
import torch.nn.functional as F


class PerceptualMetric(Protocol):
    name: str

    def __call__(self, x_hat: torch.Tensor, x: torch.Tensor) -> torch.Tensor: ...


def _batched(t: torch.Tensor) -> torch.Tensor:
    return t if t.ndim == 4 else t[None]


class GradientMagnitudeL1:
    """L1 between image-gradient magnitudes, averaged over a few dyadic scales."""

    name = "gradmag"

    def __init__(self, scales=(1, 2, 4), eps: float = 1e-6):
        self.scales = tuple(scales)
        self.eps = eps

    def magnitude(self, img):
        gx = img[..., :, 1:] - img[..., :, :-1]
        gy = img[..., 1:, :] - img[..., :-1, :]
        return torch.sqrt(gx[..., :-1, :] ** 2 + gy[..., :, :-1] ** 2 + self.eps)

    def __call__(self, x_hat, x):
        x_hat, x = _batched(x_hat), _batched(x)
        total = 0.0
        for s in self.scales:
            a = F.avg_pool2d(x_hat, s) if s > 1 else x_hat
            b = F.avg_pool2d(x, s) if s > 1 else x
            total = total + (self.magnitude(a) - self.magnitude(b)).abs().mean()
        return total / len(self.scales)


class StructureDissimilarity:
    """``1 - mean((2 cov + c) / (var_a + var_b + c))`` over box windows, per channel."""

    name = "structure"

    def __init__(self, window: int = 7, c: float = (0.03 * 2) ** 2):
        self.window = window
        self.c = c

    def __call__(self, x_hat, x):
        a, b = _batched(x_hat), _batched(x)
        pool = lambda t: F.avg_pool2d(t, self.window, stride=1)  # noqa: E731
        mu_a, mu_b = pool(a), pool(b)
        var_a = pool(a * a) - mu_a * mu_a
        var_b = pool(b * b) - mu_b * mu_b
        cov = pool(a * b) - mu_a * mu_b
        score = (2 * cov + self.c) / (var_a + var_b + self.c)
        return 1 - score.mean()


def default_metrics() -> list[PerceptualMetric]:
    return [GradientMagnitudeL1(), StructureDissimilarity()]
