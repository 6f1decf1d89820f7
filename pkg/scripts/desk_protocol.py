"""Run the desk-scale protocol at N=16 and N=32 and report the training diagnostics.

Usage: python3 scripts/desk_protocol.py [--cache DIR] [--set key=value ...]
"""
import argparse
import json
import logging
import time
from pathlib import Path

import numpy as np

from latent_rescale.bench import psnr
from latent_rescale.config import parse_override
from latent_rescale.desk import (Corpus, bicubic_roundtrip_u8, config_for_desk, desk_images, get_codec,
                                 get_denoiser, mean_predicted_t, roundtrip_u8, run_protocol, with_factor)
from latent_rescale.imaging import to_u8_range


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--cache", default=".desk-cache")
    ap.add_argument("--factors", default="16,32")
    ap.add_argument("--set", action="append", default=[])
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    overrides = dict(parse_override(s) for s in args.set)
    cfg = config_for_desk(**overrides)
    cache = Path(args.cache)
    x, x_val = desk_images(cfg.seed)
    t = time.perf_counter()
    codec = get_codec(x, cfg, cache)
    corpus = Corpus.from_images(codec, x, x_val)
    denoiser = get_denoiser(corpus.z, cfg, cache)
    print(f"backends ready in {time.perf_counter() - t:.0f}s")
    x_u8 = to_u8_range(x)
    results = {}
    for factor in map(int, args.factors.split(",")):
        fcfg = with_factor(cfg, factor)
        res = run_protocol(fcfg, corpus, codec, denoiser)
        print(factor, "timings", res.timings, flush=True)
        curve = res.val_res_curve()
        x_hat = roundtrip_u8(res.model, x, fcfg)
        ours = np.mean([psnr(a, b) for a, b in zip(x_hat, x_u8)])
        bic = np.mean([psnr(a, b) for a, b in zip(bicubic_roundtrip_u8(x, factor), x_u8)])
        mt = mean_predicted_t(res.model, x)
        results[factor] = {"val_res_ratio": curve[-1][1] / curve[0][1], "psnr": ours, "bicubic": bic,
                           "mean_t": mt, "timings": res.timings}
        print(factor, json.dumps(results[factor]))
        last = [r for r in res.loss_log.rows if r["stage"] == 2][-5:]
        print("stage2 tail", last)
    print(json.dumps(results, indent=1, default=float))


if __name__ == "__main__":
    main()
