"""JPEG rate-distortion sweep on desk images with model points at N=16 and N=32.

Usage: python3 scripts/rd_sweep.py [--out rd] [--cache DIR] [--limit 10] [--set key=value ...]

Trains the desk protocol at each factor (reusing cached backends), then writes
rd.csv, rd.png (PSNR) and rd_ssim.png into --out.
"""
import argparse
import logging
from pathlib import Path

from latent_rescale.bench import model_rd_points, plot_rd, rd_sweep_jpeg, write_rd_csv
from latent_rescale.config import parse_override
from latent_rescale.desk import config_for_desk, train_desk
from latent_rescale.imaging import to_u8_range


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="rd")
    ap.add_argument("--cache", default=".desk-cache")
    ap.add_argument("--factors", default="16,32")
    ap.add_argument("--limit", type=int, default=10)
    ap.add_argument("--qualities", default="5,10,20,30,50,70,90")
    ap.add_argument("--set", action="append", default=[])
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    cfg = config_for_desk(**dict(parse_override(s) for s in args.set))
    run = train_desk(cfg, tuple(int(f) for f in args.factors.split(",")), args.cache)
    images = run.x[:args.limit]
    ids = [f"desk{i:02d}" for i in range(len(images))]
    points = rd_sweep_jpeg([to_u8_range(im) for im in images], [int(q) for q in args.qualities.split(",")], ids)
    for res in run.results.values():
        points += model_rd_points(res.model, images, res.cfg, ids)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_rd_csv(points, out / "rd.csv")
    plot_rd(points, out / "rd.png")
    plot_rd(points, out / "rd_ssim.png", metric="ssim")
    for codec in sorted({p.codec for p in points}):
        sel = [p for p in points if p.codec == codec]
        by_setting = sorted({p.setting for p in sel})
        for s in by_setting:
            row = [p for p in sel if p.setting == s]
            print(f"{codec:>10} {s:>4}  bpp {sum(p.bpp for p in row) / len(row):.4f}  "
                  f"psnr {sum(min(p.psnr, 99.0) for p in row) / len(row):.2f}  "
                  f"ssim {sum(p.ssim for p in row) / len(row):.4f}")


if __name__ == "__main__":
    main()
