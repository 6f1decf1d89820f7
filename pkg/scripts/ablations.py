"""Desk-scale ablations: fixed time step, no pixel guidance, no INN, patch size.

Usage: python3 scripts/ablations.py [--kinds fixed-timestep,no-inn] [--out ablations] [--cache DIR]

Each kind retrains the three-stage protocol per variant (patch-size only
re-runs inference) and prints mean PSNR/SSIM on the training images.
"""
import argparse
import logging
from pathlib import Path

from latent_rescale.bench import ABLATIONS, run_ablation
from latent_rescale.config import parse_override
from latent_rescale.desk import config_for_desk, desk_images, get_codec, get_denoiser
from latent_rescale.pipeline import Corpus


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--kinds", default=",".join(ABLATIONS))
    ap.add_argument("--out", default="ablations")
    ap.add_argument("--cache", default=".desk-cache")
    ap.add_argument("--patch-sizes", default="4,8,16")
    ap.add_argument("--set", action="append", default=[])
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    cfg = config_for_desk(**dict(parse_override(s) for s in args.set))
    x, x_val = desk_images(cfg.seed)
    codec = get_codec(x, cfg, Path(args.cache))
    denoiser = get_denoiser(Corpus.from_images(codec, x, x_val).z, cfg, Path(args.cache))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    patch_sizes = [int(p) for p in args.patch_sizes.split(",")]
    for kind in args.kinds.split(","):
        reports = run_ablation(kind, cfg, x, x_val, codec, denoiser, patch_sizes=patch_sizes)
        for name, rep in reports.items():
            rep.write_csv(out / f"{kind}-{name}.csv")
            print(f"{kind:>18} {name:>18}  psnr {rep.mean('psnr'):.3f}  ssim {rep.mean('ssim'):.4f}", flush=True)


if __name__ == "__main__":
    main()
