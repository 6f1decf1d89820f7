"""Low-rank adaptation deltas for frozen convolutions."""
from __future__ import annotations

import torch
from torch import nn


class LoRAConv2d(nn.Module):
    """``base(x) + scale * up(down(x))`` with ``base`` frozen and ``up`` zero-initialized."""

    def __init__(self, base: nn.Conv2d, rank: int, alpha: float | None = None):
        super().__init__()
        self.base = base
        for p in self.base.parameters():
            p.requires_grad_(False)
        self.rank = rank
        self.scale = (alpha if alpha is not None else rank) / rank
        self.down = nn.Conv2d(base.in_channels, rank, base.kernel_size, base.stride,
                              base.padding, bias=False, padding_mode=base.padding_mode)
        self.up = nn.Conv2d(rank, base.out_channels, 1, bias=False)
        nn.init.kaiming_uniform_(self.down.weight, a=5 ** 0.5)
        nn.init.zeros_(self.up.weight)

    def forward(self, x):
        return self.base(x) + self.scale * self.up(self.down(x))

    def merged_weight(self) -> torch.Tensor:
        delta = torch.einsum("or,rikl->oikl", self.up.weight[:, :, 0, 0], self.down.weight)
        return self.base.weight + self.scale * delta


def attach_lora(module: nn.Module, rank: int) -> list[LoRAConv2d]:
    """Wrap every ``nn.Conv2d`` under ``module`` in place; returns the wrappers."""
    wrapped = []
    for name, child in list(module.named_children()):
        if isinstance(child, LoRAConv2d):
            wrapped.append(child)
        elif isinstance(child, nn.Conv2d):
            lora = LoRAConv2d(child, rank)
            setattr(module, name, lora)
            wrapped.append(lora)
        else:
            wrapped.extend(attach_lora(child, rank))
    return wrapped


def lora_parameters(module: nn.Module) -> list[nn.Parameter]:
    params = []
    for m in module.modules():
        if isinstance(m, LoRAConv2d):
            params.extend([m.down.weight, m.up.weight])
    return params


def freeze(module: nn.Module) -> nn.Module:
    for p in module.parameters():
        p.requires_grad_(False)
    return module

