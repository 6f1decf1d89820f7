"""Pixel-domain primitives: resampling, 8-bit quantization, patch tiling, PNG io.

Images are float tensors shaped ``[3, H, W]`` (or batched ``[B, 3, H, W]``).
Model-facing images live in ``[-1, 1]``; encoded LR images hold integer
values in ``[0, 255]``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from functools import lru_cache
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from PIL import Image as PILImage

MODEL_RANGE = (-1.0, 1.0)
U8_RANGE = (0.0, 255.0)


@dataclass
class Image:
    """A 3-channel image tensor with a declared value interval."""

    data: torch.Tensor
    value_range: tuple[float, float] = MODEL_RANGE

    def __post_init__(self):
        if self.data.ndim != 3 or self.data.shape[0] != 3:
            raise ValueError(f"expected [3, H, W] image, got {tuple(self.data.shape)}")
        if self.data.shape[1] < 1 or self.data.shape[2] < 1:
            raise ValueError("image must have positive height and width")
        lo, hi = self.value_range
        if self.data.numel() and (self.data.min() < lo or self.data.max() > hi):
            raise ValueError(f"values outside declared range {self.value_range}")

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]


# ---------------------------------------------------------------------------
# bicubic resampling

def cubic_kernel(x: np.ndarray, a: float = -0.5) -> np.ndarray:
    x = np.abs(x)
    x2, x3 = x * x, x * x * x
    near = (a + 2) * x3 - (a + 3) * x2 + 1
    far = a * x3 - 5 * a * x2 + 8 * a * x - 4 * a
    return np.where(x <= 1, near, np.where(x < 2, far, 0.0))


def mirror_index(i: np.ndarray, n: int) -> np.ndarray:
    """Half-sample symmetric reflection of integer indices into ``[0, n)``."""
    period = 2 * n
    i = np.mod(i, period)
    return np.where(i < n, i, period - 1 - i)


@lru_cache(maxsize=256)
def resize_weights(in_size: int, out_size: int, scale: float, a: float = -0.5) -> np.ndarray:
    """Dense ``[out_size, in_size]`` interpolation matrix for one axis.

    When shrinking, the kernel is widened by ``1/scale`` (antialiasing, as in
    MATLAB's ``imresize``). Rows are normalized to sum to one.
    """
    kscale = min(scale, 1.0)
    support = 2.0 / kscale
    centers = (np.arange(out_size) + 0.5) / scale - 0.5
    left = np.floor(centers - support).astype(np.int64)
    taps = int(math.ceil(2 * support)) + 2
    idx = left[:, None] + np.arange(taps)[None, :]
    w = cubic_kernel((centers[:, None] - idx) * kscale, a) * kscale
    w = w / w.sum(axis=1, keepdims=True)
    mat = np.zeros((out_size, in_size), dtype=np.float64)
    src = mirror_index(idx, in_size)
    rows = np.repeat(np.arange(out_size), taps)
    np.add.at(mat, (rows, src.ravel()), w.ravel())
    mat.setflags(write=False)
    return mat


def _out_size(n: int, factor) -> int:
    if isinstance(factor, (int, Fraction)):
        return math.floor(n * factor)
    # tolerate float factors such as 1/16 that are not exactly representable
    return math.floor(n * float(factor) + 1e-9)


def bicubic_resize(img: torch.Tensor, factor, value_range: tuple[float, float] | None = MODEL_RANGE) -> torch.Tensor:
    """Resize ``[..., H, W]`` by ``factor`` with a Catmull-Rom cubic (a=-0.5).

    Output size is ``floor(H*factor) x floor(W*factor)``. Borders use
    half-sample symmetric reflection. The result is clamped to
    ``value_range`` unless it is ``None``. Differentiable w.r.t. ``img``.
    """
    scale = float(factor)
    if not math.isfinite(scale) or scale <= 0:
        raise ValueError(f"resize factor must be positive, got {factor!r}")
    h, w = img.shape[-2:]
    oh, ow = _out_size(h, factor), _out_size(w, factor)
    if oh < 1 or ow < 1:
        raise ValueError(f"resize of {h}x{w} by {factor} gives an empty image")
    if scale == 1.0:
        return img.clone()
    wh = torch.tensor(resize_weights(h, oh, scale), dtype=img.dtype, device=img.device)
    ww = torch.tensor(resize_weights(w, ow, scale), dtype=img.dtype, device=img.device)
    out = torch.matmul(torch.matmul(wh, img), ww.transpose(0, 1))
    if value_range is not None:
        out = out.clamp(*value_range)
    return out


# ---------------------------------------------------------------------------
# quantization

def quantize_to_u8(v: torch.Tensor) -> torch.Tensor:
    """Map ``[-1, 1]`` to integers ``0..255`` (half-away-from-zero rounding).

    Returned as a float tensor holding integral values.
    """
    scaled = (v.clamp(-1.0, 1.0) + 1.0) / 2.0 * 255.0
    # all scaled values are >= 0, so floor(x + 0.5) is half-away-from-zero
    return torch.floor(scaled + 0.5)


def dequantize(q: torch.Tensor) -> torch.Tensor:
    return q / 255.0 * 2.0 - 1.0


def quantize_ste(v: torch.Tensor) -> torch.Tensor:
    """Quantize-dequantize with a straight-through (identity) gradient."""
    return v + (dequantize(quantize_to_u8(v)) - v).detach()


# ---------------------------------------------------------------------------
# patch tiling

def patch_offsets(length: int, p: int, s: int) -> list[int]:
    if length <= p:
        return [0]
    return list(range(0, length - p, s)) + [length - p]


@dataclass
class PatchGrid:
    patch_size: int
    stride: int
    shape: tuple[int, int]
    offsets: list[tuple[int, int]] = field(default_factory=list)

    def __post_init__(self):
        if self.patch_size < 1 or self.stride < 1:
            raise ValueError("patch size and stride must be positive")
        if self.stride > self.patch_size:
            raise ValueError("stride must not exceed patch size")
        if not self.offsets:
            h, w = self.shape
            self.offsets = [(r, c) for r in patch_offsets(h, self.patch_size, self.stride)
                            for c in patch_offsets(w, self.patch_size, self.stride)]

    @property
    def patch_hw(self) -> tuple[int, int]:
        return min(self.patch_size, self.shape[0]), min(self.patch_size, self.shape[1])

    def __len__(self) -> int:
        return len(self.offsets)

    def slices(self, i: int) -> tuple[slice, slice]:
        r, c = self.offsets[i]
        ph, pw = self.patch_hw
        return slice(r, r + ph), slice(c, c + pw)


def to_patches(t: torch.Tensor, p: int, s: int) -> tuple[list[torch.Tensor], PatchGrid]:
    """Split ``[..., H, W]`` into overlapping ``p x p`` tiles advancing by ``s``.

    The final tile on each axis is clamped to end at the border.
    """
    if p < 1 or s < 1 or s > p:
        raise ValueError(f"invalid patch size/stride ({p}, {s})")
    grid = PatchGrid(p, s, tuple(t.shape[-2:]))
    patches = []
    for i in range(len(grid)):
        rs, cs = grid.slices(i)
        patches.append(t[..., rs, cs])
    return patches, grid


def blend_window(ph: int, pw: int, dtype=torch.float64) -> torch.Tensor:
    """Strictly positive 2-D raised-cosine window."""
    def axis(n):
        i = torch.arange(n, dtype=dtype)
        return torch.sin(math.pi * (i + 0.5) / n) ** 2
    return axis(ph)[:, None] * axis(pw)[None, :]


def merge_weights(grid: PatchGrid) -> list[torch.Tensor]:
    """Per-patch blending weights, normalized to sum to one at every cell."""
    ph, pw = grid.patch_hw
    win = blend_window(ph, pw)
    total = torch.zeros(grid.shape, dtype=torch.float64)
    for i in range(len(grid)):
        rs, cs = grid.slices(i)
        total[rs, cs] += win
    weights = []
    for i in range(len(grid)):
        rs, cs = grid.slices(i)
        weights.append(win / total[rs, cs])
    return weights


def merge_patches(patches: Sequence[torch.Tensor], grid: PatchGrid) -> torch.Tensor:
    if len(patches) != len(grid):
        raise ValueError(f"got {len(patches)} patches for a grid of {len(grid)}")
    ph, pw = grid.patch_hw
    for p in patches:
        if tuple(p.shape[-2:]) != (ph, pw):
            raise ValueError(f"patch shape {tuple(p.shape[-2:])} != grid patch {(ph, pw)}")
    if len(grid) == 1:
        return patches[0]
    lead = patches[0].shape[:-2]
    out = torch.zeros(*lead, *grid.shape, dtype=torch.float64, device=patches[0].device)
    for i, (patch, w) in enumerate(zip(patches, merge_weights(grid))):
        rs, cs = grid.slices(i)
        out[..., rs, cs] += patch.to(torch.float64) * w.to(patch.device)
    return out.to(patches[0].dtype)


# ---------------------------------------------------------------------------
# file io

def load_png(path: str | Path) -> torch.Tensor:
    """Read an 8-bit RGB file as a ``[3, H, W]`` float tensor in ``[0, 255]``."""
    with PILImage.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
    return torch.from_numpy(arr.copy()).permute(2, 0, 1).to(torch.float32)


def u8_to_pil(img: torch.Tensor) -> PILImage.Image:
    arr = img.detach().round().clamp(0, 255).to(torch.uint8).permute(1, 2, 0).cpu().numpy()
    return PILImage.fromarray(arr, mode="RGB")


def save_png(img: torch.Tensor, path: str | Path, pnginfo=None) -> None:
    u8_to_pil(img).save(path, format="PNG", pnginfo=pnginfo, optimize=False, compress_level=9)


def to_model_range(u8: torch.Tensor) -> torch.Tensor:
    return u8 / 127.5 - 1.0


def to_u8_range(img: torch.Tensor) -> torch.Tensor:
    return ((img.clamp(-1, 1) + 1.0) * 127.5).round()
