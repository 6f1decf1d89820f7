"""Deterministic desk-scale image corpus.

Crops of the photographs bundled with scikit-image, randomly rescaled,
flipped and tinted. Training and held-out splits draw from disjoint seeds.
"""
from __future__ import annotations

from functools import lru_cache
from pathlib import Path

import numpy as np
import torch

from .imaging import bicubic_resize, load_png, to_model_range

SOURCES = ("astronaut", "coffee", "chelsea", "rocket", "immunohistochemistry",
           "hubble_deep_field", "retina", "colorwheel", "cat", "camera",
           "coins", "moon", "brick")
# single-channel sources get a random color tint
GRAYSCALE = {"camera", "coins", "moon", "brick"}


@lru_cache(maxsize=None)
def _source(name: str) -> torch.Tensor:
    import skimage.data

    arr = getattr(skimage.data, name)()
    if arr.ndim == 2:
        arr = np.repeat(arr[..., None], 3, axis=2)
    arr = arr[..., :3]
    return torch.from_numpy(np.ascontiguousarray(arr)).permute(2, 0, 1).float()


def desk_corpus(n: int, size: int = 256, seed: int = 0,
                scale_range: tuple[float, float] = (0.6, 1.0)) -> torch.Tensor:
    """``[n, 3, size, size]`` images in ``[-1, 1]``."""
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        name = SOURCES[rng.integers(len(SOURCES))]
        src = _source(name)
        h, w = src.shape[1:]
        lo = max(scale_range[0], (size + 2) / min(h, w))
        scale = rng.uniform(lo, max(lo, scale_range[1]))
        img = bicubic_resize(src, scale, value_range=(0.0, 255.0)) if abs(scale - 1) > 1e-6 else src
        h, w = img.shape[1:]
        r = int(rng.integers(0, h - size + 1))
        c = int(rng.integers(0, w - size + 1))
        crop = img[:, r:r + size, c:c + size]
        if rng.random() < 0.5:
            crop = crop.flip(-1)
        if name in GRAYSCALE:
            tint = torch.as_tensor(rng.uniform(0.7, 1.0, size=3), dtype=torch.float32)[:, None, None]
            crop = crop * tint
        out.append(to_model_range(crop.round().clamp(0, 255)))
    return torch.stack(out)


def load_folder(folder: str | Path, size: int | None = None) -> torch.Tensor:
    """Load every PNG/JPEG in ``folder`` (sorted) as model-range images, center-cropped to ``size``."""
    paths = sorted(p for p in Path(folder).iterdir() if p.suffix.lower() in {".png", ".jpg", ".jpeg"})
    if not paths:
        raise FileNotFoundError(f"no images in {folder}")
    imgs = []
    for p in paths:
        img = load_png(p)
        if size is not None:
            h, w = img.shape[1:]
            if h < size or w < size:
                raise ValueError(f"{p} is smaller than {size}x{size}")
            r, c = (h - size) // 2, (w - size) // 2
            img = img[:, r:r + size, c:c + size]
        imgs.append(to_model_range(img))
    return torch.stack(imgs)
