"""Metrics, bit-rate accounting and the JPEG rate-distortion harness."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from PIL import Image as PILImage

from .imaging import u8_to_pil

PSNR_CAP = 99.0
METRIC_CHANNEL = "Y-BT601"
Y_WEIGHTS = (0.299, 0.587, 0.114)


def _u8_array(img) -> np.ndarray:
    """``[3, H, W]`` tensor/array on the 0..255 scale -> float64 ``[3, H, W]``."""
    if torch.is_tensor(img):
        img = img.detach().cpu().numpy()
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise ValueError(f"expected [3, H, W], got {arr.shape}")
    return arr


def luma(img) -> np.ndarray:
    r, g, b = _u8_array(img)
    return Y_WEIGHTS[0] * r + Y_WEIGHTS[1] * g + Y_WEIGHTS[2] * b


def psnr(a, b, channel: str = "y") -> float:
    """PSNR in dB with peak 255; ``inf`` for identical inputs."""
    if channel == "y":
        da, db = luma(a), luma(b)
    else:
        da, db = _u8_array(a), _u8_array(b)
    if da.shape != db.shape:
        raise ValueError("images differ in shape")
    mse = float(np.mean((da - db) ** 2))
    if mse == 0:
        return math.inf
    return 10 * math.log10(255.0 ** 2 / mse)


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    ax = np.arange(size) - (size - 1) / 2
    g = np.exp(-(ax ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    n = len(g)
    h, w = img.shape
    rows = sum(g[k] * img[k:h - n + 1 + k, :] for k in range(n))
    return sum(g[k] * rows[:, k:w - n + 1 + k] for k in range(n))


def ssim(a, b, size: int = 11, sigma: float = 1.5) -> float:
    """Mean SSIM over the valid-window map of the luminance channel."""
    x, y = luma(a), luma(b)
    if x.shape != y.shape:
        raise ValueError("images differ in shape")
    if min(x.shape) < size:
        raise ValueError(f"images must be at least {size}x{size}")
    c1, c2 = (0.01 * 255) ** 2, (0.03 * 255) ** 2
    g = gaussian_window(size, sigma)
    mx, my = _filter_valid(x, g), _filter_valid(y, g)
    sxx = _filter_valid(x * x, g) - mx * mx
    syy = _filter_valid(y * y, g) - my * my
    sxy = _filter_valid(x * y, g) - mx * my
    num = (2 * mx * my + c1) * (2 * sxy + c2)
    den = (mx * mx + my * my + c1) * (sxx + syy + c2)
    return float(np.mean(num / den))


def bpp(nbytes: int, hr_dims: tuple[int, int]) -> float:
    h, w = hr_dims
    return nbytes * 8 / (h * w)


def bpp_of_file(path: str | Path, hr_dims: tuple[int, int]) -> float:
    return bpp(Path(path).stat().st_size, hr_dims)


def png_bytes(img_u8: torch.Tensor) -> bytes:
    buf = io.BytesIO()
    u8_to_pil(img_u8).save(buf, format="PNG", optimize=True)
    return buf.getvalue()


def jpeg_roundtrip(img_u8: torch.Tensor, quality: int) -> tuple[bytes, torch.Tensor]:
    if not 1 <= quality <= 100:
        raise ValueError("JPEG quality must be in 1..100")
    buf = io.BytesIO()
    u8_to_pil(img_u8).save(buf, format="JPEG", quality=int(quality), subsampling=2, optimize=False)
    data = buf.getvalue()
    with PILImage.open(io.BytesIO(data)) as im:
        dec = np.asarray(im.convert("RGB"), dtype=np.uint8)
    return data, torch.from_numpy(dec.copy()).permute(2, 0, 1).float()


# ---------------------------------------------------------------------------
# reports

@dataclass
class MetricReport:
    records: list[dict] = field(default_factory=list)
    config_hash: str = ""
    extra_columns: tuple[str, ...] = ()

    BASE_COLUMNS = ("id", "psnr", "psnr_inf", "ssim", "bpp")

    def add(self, image_id: str, x_hat_u8, x_u8, bpp_value: float, **extra: float) -> dict:
        p = psnr(x_hat_u8, x_u8)
        rec = {"id": image_id, "psnr": p, "ssim": ssim(x_hat_u8, x_u8), "bpp": bpp_value, **extra}
        self.records.append(rec)
        for k in extra:
            if k not in self.extra_columns:
                self.extra_columns = self.extra_columns + (k,)
        return rec

    def mean(self, key: str) -> float:
        """Mean of a column; infinite PSNRs are averaged at the CSV cap."""
        vals = [min(r[key], PSNR_CAP) if key == "psnr" else r[key] for r in self.records if key in r]
        return float(np.mean(vals)) if vals else math.nan

    @property
    def columns(self) -> list[str]:
        return [*self.BASE_COLUMNS, *self.extra_columns, "channel", "config_hash"]

    def rows(self) -> list[list]:
        out = []
        for r in self.records:
            inf = math.isinf(r["psnr"])
            row = [r["id"], f"{PSNR_CAP if inf else r['psnr']:.6f}", int(inf), f"{r['ssim']:.6f}", f"{r['bpp']:.6f}"]
            row += [f"{r[k]:.6f}" if k in r else "" for k in self.extra_columns]
            out.append(row + [METRIC_CHANNEL, self.config_hash])
        means = ["mean", f"{self.mean('psnr'):.6f}", 0, f"{self.mean('ssim'):.6f}", f"{self.mean('bpp'):.6f}"]
        means += [f"{self.mean(k):.6f}" for k in self.extra_columns]
        return out + [means + [METRIC_CHANNEL, self.config_hash]]

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(self.columns)
            w.writerows(self.rows())


@dataclass(frozen=True)
class RDPoint:
    codec: str
    image_id: str
    setting: int       # JPEG quality, or the rescaling factor for the model
    bpp: float
    psnr: float
    ssim: float


RD_COLUMNS = ("codec", "image_id", "setting", "bpp", "psnr", "psnr_inf", "ssim", "channel")


def rd_sweep_jpeg(images: Sequence[torch.Tensor], qualities: Sequence[int],
                  ids: Sequence[str] | None = None) -> list[RDPoint]:
    """JPEG encode/decode every u8 image at every quality; bpp is per HR pixel."""
    ids = list(ids) if ids is not None else [f"img{i:03d}" for i in range(len(images))]
    points = []
    for img_id, img in zip(ids, images):
        for q in qualities:
            data, dec = jpeg_roundtrip(img, q)
            points.append(RDPoint("jpeg", img_id, int(q), bpp(len(data), img.shape[-2:]),
                                  psnr(dec, img), ssim(dec, img)))
    return points


def write_rd_csv(points: Sequence[RDPoint], path: str | Path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(RD_COLUMNS)
        for p in points:
            inf = math.isinf(p.psnr)
            w.writerow([p.codec, p.image_id, p.setting, f"{p.bpp:.6f}",
                        f"{PSNR_CAP if inf else p.psnr:.6f}", int(inf), f"{p.ssim:.6f}", METRIC_CHANNEL])


def read_rd_csv(path: str | Path) -> list[dict]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def plot_rd(points: Sequence[RDPoint], path: str | Path, metric: str = "psnr") -> list[str]:
    """Mean quality versus mean bpp per (codec, setting), one series per codec; returns the series labels."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 4))
    labels = []
    for codec in sorted({p.codec for p in points}):
        settings = sorted({p.setting for p in points if p.codec == codec})
        xs, ys = [], []
        for s in settings:
            sel = [p for p in points if p.codec == codec and p.setting == s]
            xs.append(np.mean([p.bpp for p in sel]))
            ys.append(np.mean([min(getattr(p, metric), PSNR_CAP) for p in sel]))
        order = np.argsort(xs)
        style = "o-" if len(xs) > 1 else "*"
        ax.plot(np.array(xs)[order], np.array(ys)[order], style, label=codec, markersize=8 if len(xs) > 1 else 14)
        labels.append(codec)
    ax.set_xlabel("bits per HR pixel")
    ax.set_ylabel(f"{metric.upper()} ({METRIC_CHANNEL})")
    ax.grid(alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None} if str(path).endswith(".png") else None)
    plt.close(fig)
    return labels


# ---------------------------------------------------------------------------
# model evaluation and ablations

ABLATIONS = ("fixed-timestep", "no-pixel-guidance", "no-inn", "patch-size")


def model_rd_points(model, images: torch.Tensor, cfg, ids: Sequence[str] | None = None,
                    reports: MetricReport | None = None) -> list[RDPoint]:
    """Rescale ``[-1, 1]`` images through the model; bpp counts the LR PNG without metadata."""
    from .imaging import to_u8_range
    from .pipeline import rescale_down, rescale_up

    ids = list(ids) if ids is not None else [f"img{i:03d}" for i in range(len(images))]
    points = []
    for img_id, x in zip(ids, images):
        y, meta = rescale_down(x, model)
        x_hat, _ = rescale_up(y, meta, model, cfg)
        x_u8, xh_u8 = to_u8_range(x), to_u8_range(x_hat)
        rate = bpp(len(png_bytes(y)), x.shape[-2:])
        points.append(RDPoint(f"model-x{model.factor}", img_id, model.factor, rate,
                              psnr(xh_u8, x_u8), ssim(xh_u8, x_u8)))
        if reports is not None:
            reports.add(img_id, xh_u8, x_u8, rate)
    return points


def evaluate_model(model, images: torch.Tensor, cfg, ids: Sequence[str] | None = None) -> MetricReport:
    report = MetricReport(config_hash=cfg.hash())
    model_rd_points(model, images, cfg, ids, report)
    return report


def run_ablation(kind: str, cfg, images: torch.Tensor, val_images: torch.Tensor, codec, denoiser,
                 base_model=None, patch_sizes: Sequence[int] = (16, 24, 32)) -> dict[str, MetricReport]:
    """Train (or re-evaluate) one ablation family; returns a report per variant.

    ``fixed-timestep`` trains with the time step pinned to 1 and to 999,
    ``no-pixel-guidance``/``no-inn`` retrain without that component, and
    ``patch-size`` re-runs inference of ``base_model`` (trained with ``cfg``
    when not given) at each patch size with stride ``2p/3``.
    """
    from .config import RunConfig
    from .desk import run_protocol
    from .pipeline import Corpus

    if kind not in ABLATIONS:
        raise ValueError(f"unknown ablation {kind!r}; choose from {', '.join(ABLATIONS)}")
    corpus = Corpus.from_images(codec, images, val_images)

    def variant(**model_overrides) -> RunConfig:
        d = cfg.to_dict()
        d["model"].update(model_overrides)
        return RunConfig.from_dict(d)

    if kind == "patch-size":
        if base_model is None:
            base_model = run_protocol(cfg, corpus, codec, denoiser).model
        reports = {}
        for p in patch_sizes:
            d = cfg.to_dict()
            d["patch_size"], d["stride"] = int(p), max(1, int(round(2 * p / 3)))
            pcfg = RunConfig.from_dict(d)
            reports[f"p{p}"] = evaluate_model(base_model, images, pcfg)
        return reports
    if kind == "fixed-timestep":
        variants = {f"t{t}": variant(timestep_mode="fixed", fixed_timestep=t) for t in (1, 999)}
    elif kind == "no-pixel-guidance":
        variants = {"full": cfg, "no-pixel-guidance": variant(pixel_guidance=False)}
    else:
        variants = {"full": cfg, "no-inn": variant(use_inn=False)}
    return {name: evaluate_model(run_protocol(vcfg, corpus, codec, denoiser).model, images, vcfg)
            for name, vcfg in variants.items()}
