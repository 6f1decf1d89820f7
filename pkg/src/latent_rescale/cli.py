"""Command-line entry point: ``latent-rescale VERB [options]``.

Exit codes: 0 success, 1 validation error (bad flags, config, files), 2 runtime failure.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import subprocess
import sys
from pathlib import Path

import torch

from . import __version__
from .config import ConfigError, RunConfig, describe_keys, load_config, parse_override
from .container import CheckpointError

log = logging.getLogger("latent_rescale")

VERBS = ("train", "down", "up", "roundtrip", "bench", "ablate", "inspect")
DEVICE_ENV = "LATENT_RESCALE_DEVICE"


class UsageError(ConfigError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _help_epilog() -> str:
    lines = ["config keys (set with --set key=value or in the --config JSON file):"]
    lines += [f"  {k} = {json.dumps(v)}" for k, v in describe_keys()]
    lines.append(f"environment: {DEVICE_ENV} selects the torch device (default cpu)")
    return "\n".join(lines)


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="dotted-key config override, repeatable")
    common.add_argument("--factor", type=int, help="rescaling factor (8, 16 or 32)")
    common.add_argument("--patch-size", type=int, help="tile size in latent cells")
    common.add_argument("--stride", type=int, help="tile stride in latent cells")
    common.add_argument("--t0", type=int, help="preset step of the hybrid scheduler")
    common.add_argument("--seed", type=int)
    common.add_argument("--checkpoint", help="stage checkpoint archive")
    common.add_argument("--out-dir", help="output directory (default: next to the input)")
    common.add_argument("--timestep-map", action="store_true", help="also write per-tile time steps")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="latent-rescale", description="Latent-space extreme image rescaling.",
                     epilog=_help_epilog(), formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="verb", metavar="VERB", parser_class=_Parser)
    sub.required = True
    helps = {
        "train": "run the three-stage protocol on a folder or the built-in desk corpus",
        "down": "image -> LR PNG with embedded metadata (+ .json sidecar)",
        "up": "LR PNG -> reconstructed image",
        "roundtrip": "down then up, reporting PSNR/SSIM",
        "bench": "metric report and JPEG rate-distortion sweep",
        "ablate": "train and evaluate one ablation family",
        "inspect": "describe a checkpoint, optionally the tile time-step map of an image",
    }
    for verb in VERBS:
        p = sub.add_parser(verb, parents=[common], help=helps[verb], description=helps[verb],
                           epilog=_help_epilog(), formatter_class=argparse.RawDescriptionHelpFormatter)
        if verb in ("down", "up", "roundtrip"):
            p.add_argument("inputs", nargs="+")
        elif verb == "inspect":
            p.add_argument("inputs", nargs="*")
        if verb in ("train", "bench", "ablate"):
            p.add_argument("--images", help="folder of training/evaluation images (default: desk corpus)")
            p.add_argument("--size", type=int, default=256, help="center-crop size for --images")
            p.add_argument("--cache", help="directory caching the pretrained toy backends")
        if verb == "bench":
            p.add_argument("--qualities", default="10,20,30,50,70,90", help="JPEG quality levels")
            p.add_argument("--limit", type=int, default=10, help="number of images to evaluate")
        if verb == "ablate":
            p.add_argument("--kind", required=True, help="fixed-timestep, no-pixel-guidance, no-inn or patch-size")
            p.add_argument("--patch-sizes", default="16,24,32")
    return parser


# ---------------------------------------------------------------------------
# helpers

def resolve_config(args) -> RunConfig:
    """Config file and flags, layered over the checkpoint's own config when one is given.

    Settings fixed at training time (factor, model, schedule) that disagree
    with the checkpoint are rejected when the model is loaded.
    """
    overrides = dict(parse_override(s) for s in args.set)
    for flag, key in (("factor", "factor"), ("patch_size", "patch_size"), ("stride", "stride"),
                      ("t0", "t0"), ("seed", "seed"), ("checkpoint", "checkpoint")):
        value = getattr(args, flag)
        if value is not None:
            overrides[key] = value
    cfg = load_config(args.config, overrides)
    if cfg.checkpoint and args.verb != "train":
        from .pipeline import StageCheckpoint

        ckpt = StageCheckpoint.load(require_file(cfg.checkpoint, "checkpoint"))
        cfg = load_config(args.config, overrides, base=ckpt.config)
    return cfg


def device() -> torch.device:
    name = os.environ.get(DEVICE_ENV, "cpu")
    try:
        dev = torch.device(name)
    except RuntimeError as e:
        raise ConfigError(f"{DEVICE_ENV}={name!r}: {e}") from None
    if dev.type == "cuda" and not torch.cuda.is_available():
        raise ConfigError(f"{DEVICE_ENV}={name!r} but CUDA is not available")
    return dev


def file_sha256(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def version_string() -> str:
    """``git describe`` of the source tree when available, else the package version."""
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"], cwd=Path(__file__).parent,
                             capture_output=True, text=True, timeout=5)
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+g{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def write_manifest(out_dir: Path, verb: str, cfg: RunConfig, inputs: list[Path], outputs: list[Path],
                   extra: dict | None = None) -> Path:
    checkpoints = {}
    if cfg.checkpoint:
        checkpoints[cfg.checkpoint] = file_sha256(Path(cfg.checkpoint))
    manifest = {
        "verb": verb,
        "version": version_string(),
        "seed": cfg.seed,
        "config_hash": cfg.hash(),
        "config": cfg.to_dict(),
        "checkpoints": checkpoints,
        "inputs": {str(p): file_sha256(p) for p in inputs if Path(p).is_file()},
        "outputs": {str(p): file_sha256(p) for p in outputs if Path(p).is_file()},
        **(extra or {}),
    }
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / f"{verb}.manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def require_file(path: str | Path, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"{what} not found: {p}")
    return p


def load_checkpoint_model(cfg: RunConfig):
    from .pipeline import load_model

    if not cfg.checkpoint:
        raise ConfigError("a checkpoint is required (--checkpoint or checkpoint in the config)")
    model, ckpt_cfg = load_model(require_file(cfg.checkpoint, "checkpoint"))
    for key in ("factor", "t0", "model", "schedule"):
        if getattr(cfg, key) != getattr(ckpt_cfg, key):
            raise ConfigError(f"{key} differs from the checkpoint's training config")
    return model.to(device())


def load_input_image(path: Path) -> torch.Tensor:
    from .imaging import load_png, to_model_range

    try:
        return to_model_range(load_png(path))
    except OSError as e:
        raise ConfigError(f"cannot read image {path}: {e}") from None


def out_dir_for(args, path: Path) -> Path:
    return Path(args.out_dir) if args.out_dir else path.parent


def lr_name(path: Path) -> str:
    return f"{path.stem}.lr.png"


def up_name(path: Path) -> str:
    stem = path.stem[:-3] if path.stem.endswith(".lr") else path.stem
    return f"{stem}.up.png"


def write_timestep_map(tmap, out_dir: Path, stem: str, T: int) -> list[Path]:
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path, png_path = out_dir / f"{stem}.tmap.csv", out_dir / f"{stem}.tmap.png"
    tmap.write_csv(csv_path)
    tmap.write_heatmap(png_path, T)
    return [csv_path, png_path]


def load_images(args, cfg: RunConfig):
    """Training/evaluation images plus a held-out split."""
    from .corpus import load_folder
    from .desk import desk_images

    if args.images:
        folder = Path(args.images)
        if not folder.is_dir():
            raise ConfigError(f"image folder not found: {folder}")
        x = load_folder(folder, args.size)
        n_val = max(1, len(x) // 8)
        return x[n_val:] if len(x) > 1 else x, x[:n_val]
    return desk_images(cfg.seed)


# ---------------------------------------------------------------------------
# verbs

def cmd_down(args, cfg):
    from .pipeline import rescale_down, write_lr

    model = load_checkpoint_model(cfg)
    outputs, inputs = [], []
    for name in args.inputs:
        path = require_file(name, "input image")
        x = load_input_image(path).to(device())
        if x.shape[-2] % cfg.factor or x.shape[-1] % cfg.factor:
            raise ConfigError(f"{path}: size {x.shape[-2]}x{x.shape[-1]} is not divisible by {cfg.factor}")
        y, meta = rescale_down(x, model)
        out_dir = out_dir_for(args, path)
        out_dir.mkdir(parents=True, exist_ok=True)
        out = write_lr(y.cpu(), meta, out_dir / lr_name(path))
        inputs.append(path)
        outputs += [out, out.with_suffix(".json")]
        print(f"{path} -> {out} ({y.shape[-2]}x{y.shape[-1]})")
    write_manifest(out_dir_for(args, inputs[0]), "down", cfg, inputs, outputs)


def cmd_up(args, cfg):
    from .imaging import save_png, to_u8_range
    from .pipeline import read_lr, rescale_up

    model = load_checkpoint_model(cfg)
    outputs, inputs = [], []
    for name in args.inputs:
        path = require_file(name, "LR image")
        y, meta = read_lr(path)
        x_hat, tmap = rescale_up(y.to(device()), meta, model, cfg)
        out_dir = out_dir_for(args, path)
        out_dir.mkdir(parents=True, exist_ok=True)
        out = out_dir / up_name(path)
        save_png(to_u8_range(x_hat).cpu(), out)
        inputs.append(path)
        outputs.append(out)
        if args.timestep_map:
            outputs += write_timestep_map(tmap, out_dir, out.stem, cfg.schedule.T)
        print(f"{path} -> {out}")
    write_manifest(out_dir_for(args, inputs[0]), "up", cfg, inputs, outputs)


def cmd_roundtrip(args, cfg):
    from .bench import MetricReport, bpp, png_bytes
    from .imaging import save_png, to_u8_range
    from .pipeline import read_lr, rescale_down, rescale_up, write_lr

    model = load_checkpoint_model(cfg)
    report = MetricReport(config_hash=cfg.hash())
    outputs, inputs = [], []
    for name in args.inputs:
        path = require_file(name, "input image")
        x = load_input_image(path).to(device())
        if x.shape[-2] % cfg.factor or x.shape[-1] % cfg.factor:
            raise ConfigError(f"{path}: size {x.shape[-2]}x{x.shape[-1]} is not divisible by {cfg.factor}")
        out_dir = out_dir_for(args, path)
        out_dir.mkdir(parents=True, exist_ok=True)
        y, meta = rescale_down(x, model)
        lr = write_lr(y.cpu(), meta, out_dir / lr_name(path))
        # decode from the file, exactly as ``up`` would
        y_file, meta_file = read_lr(lr)
        x_hat, tmap = rescale_up(y_file.to(device()), meta_file, model, cfg)
        up = out_dir / up_name(lr)
        x_hat_u8 = to_u8_range(x_hat).cpu()
        save_png(x_hat_u8, up)
        rec = report.add(path.stem, x_hat_u8, to_u8_range(x).cpu(), bpp(len(png_bytes(y.cpu())), x.shape[-2:]))
        inputs.append(path)
        outputs += [lr, lr.with_suffix(".json"), up]
        if args.timestep_map:
            outputs += write_timestep_map(tmap, out_dir, up.stem, cfg.schedule.T)
        print(f"{path}: psnr {rec['psnr']:.3f} dB ssim {rec['ssim']:.4f} bpp {rec['bpp']:.4f}")
    out_dir = out_dir_for(args, inputs[0])
    report.write_csv(out_dir / "roundtrip.csv")
    outputs.append(out_dir / "roundtrip.csv")
    write_manifest(out_dir, "roundtrip", cfg, inputs, outputs)


def cmd_train(args, cfg):
    from .desk import clone_backends, get_codec, get_denoiser
    from .pipeline import Corpus, LossLog, build_model, train_stage1, train_stage2, train_stage3

    out_dir = Path(args.out_dir or "run")
    out_dir.mkdir(parents=True, exist_ok=True)
    x, x_val = load_images(args, cfg)
    if min(x.shape[-2:]) < cfg.train.crop:
        raise ConfigError(f"images ({x.shape[-1]} px) are smaller than train.crop={cfg.train.crop}")
    cache = Path(args.cache) if args.cache else out_dir / "backends"
    codec = get_codec(x, cfg, cache)
    corpus = Corpus.from_images(codec, x, x_val)
    denoiser = get_denoiser(corpus.z, cfg, cache)
    model = build_model(cfg, *clone_backends(codec, denoiser))
    losses = LossLog()
    c1 = train_stage1(cfg, corpus, model, losses)
    c1.save(out_dir / "stage1.zip")
    c2 = train_stage2(cfg, corpus, model, c1, losses)
    c2.save(out_dir / "stage2.zip")
    c3 = train_stage3(cfg, corpus, model, c2, losses)
    c3.save(out_dir / "stage3.zip")
    losses.write(out_dir / "losses.csv")
    outputs = [out_dir / f"stage{i}.zip" for i in (1, 2, 3)] + [out_dir / "losses.csv"]
    write_manifest(out_dir, "train", cfg, [], outputs,
                   {"stage_checkpoints": {p.name: file_sha256(p) for p in outputs[:3]}})
    print(f"checkpoints written to {out_dir}")


def cmd_bench(args, cfg):
    from .bench import MetricReport, model_rd_points, plot_rd, rd_sweep_jpeg, write_rd_csv
    from .imaging import to_u8_range

    model = load_checkpoint_model(cfg)
    x, _ = load_images(args, cfg)
    x = x[:args.limit]
    ids = [f"img{i:03d}" for i in range(len(x))]
    try:
        qualities = [int(q) for q in args.qualities.split(",")]
    except ValueError:
        raise ConfigError(f"--qualities must be comma-separated integers, got {args.qualities!r}") from None
    out_dir = Path(args.out_dir or "bench")
    out_dir.mkdir(parents=True, exist_ok=True)
    report = MetricReport(config_hash=cfg.hash())
    points = rd_sweep_jpeg([to_u8_range(im) for im in x], qualities, ids)
    points += model_rd_points(model, x.to(device()), cfg, ids, report)
    write_rd_csv(points, out_dir / "rd.csv")
    plot_rd(points, out_dir / "rd.png")
    report.write_csv(out_dir / "metrics.csv")
    outputs = [out_dir / "rd.csv", out_dir / "rd.png", out_dir / "metrics.csv"]
    write_manifest(out_dir, "bench", cfg, [], outputs)
    print(f"model: psnr {report.mean('psnr'):.3f} dB ssim {report.mean('ssim'):.4f} "
          f"bpp {report.mean('bpp'):.4f}; outputs in {out_dir}")


def cmd_ablate(args, cfg):
    from .bench import ABLATIONS, run_ablation
    from .desk import get_codec, get_denoiser
    from .pipeline import Corpus

    if args.kind not in ABLATIONS:
        raise ConfigError(f"unknown ablation {args.kind!r}; choose from {', '.join(ABLATIONS)}")
    try:
        patch_sizes = [int(p) for p in args.patch_sizes.split(",")]
    except ValueError:
        raise ConfigError("--patch-sizes must be comma-separated integers") from None
    out_dir = Path(args.out_dir or "ablate")
    out_dir.mkdir(parents=True, exist_ok=True)
    x, x_val = load_images(args, cfg)
    cache = Path(args.cache) if args.cache else out_dir / "backends"
    codec = get_codec(x, cfg, cache)
    denoiser = get_denoiser(Corpus.from_images(codec, x, x_val).z, cfg, cache)
    base = load_checkpoint_model(cfg) if (args.kind == "patch-size" and cfg.checkpoint) else None
    reports = run_ablation(args.kind, cfg, x, x_val, codec, denoiser, base, patch_sizes)
    outputs = []
    for name, rep in reports.items():
        path = out_dir / f"{args.kind}-{name}.csv"
        rep.write_csv(path)
        outputs.append(path)
        print(f"{args.kind}/{name}: psnr {rep.mean('psnr'):.3f} dB ssim {rep.mean('ssim'):.4f}")
    write_manifest(out_dir, "ablate", cfg, [], outputs, {"kind": args.kind})


def cmd_inspect(args, cfg):
    from .imaging import PatchGrid
    from .pipeline import StageCheckpoint, rescale_down, rescale_up, read_lr

    info = {}
    if cfg.checkpoint:
        ckpt = StageCheckpoint.load(require_file(cfg.checkpoint, "checkpoint"))
        info = {"stage": ckpt.stage, "step": ckpt.step, "config_hash": ckpt.config_hash,
                "checksum": ckpt.meta.get("checksum"), "dfrm_checksum": ckpt.meta.get("dfrm_checksum"),
                "parameters": int(sum(t.numel() for t in ckpt.model_state.values()))}
        print(json.dumps(info, indent=2, sort_keys=True))
    outputs, inputs = [], []
    if args.inputs:
        model = load_checkpoint_model(cfg)
        for name in args.inputs:
            path = require_file(name, "image")
            if path.name.endswith(".lr.png"):
                y, meta = read_lr(path)
            else:
                y, meta = rescale_down(load_input_image(path).to(device()), model)
            _, tmap = rescale_up(y.to(device()), meta, model, cfg)
            grid = tmap.grid
            expected = PatchGrid(cfg.patch_size, cfg.stride, grid.shape).offsets
            print(f"{path}: latent {grid.shape[0]}x{grid.shape[1]}, {len(grid)} tiles, "
                  f"offsets match grid: {grid.offsets == expected}")
            for r, c, t in tmap.rows():
                print(f"  tile ({r:3d},{c:3d}) t={t:.2f}")
            inputs.append(path)
            if args.timestep_map:
                outputs += write_timestep_map(tmap, out_dir_for(args, path), path.stem, cfg.schedule.T)
    elif not cfg.checkpoint:
        raise ConfigError("inspect needs --checkpoint and/or input images")
    out_dir = Path(args.out_dir) if args.out_dir else (inputs[0].parent if inputs else Path("."))
    write_manifest(out_dir, "inspect", cfg, inputs, outputs, {"checkpoint_info": info})


COMMANDS = {"train": cmd_train, "down": cmd_down, "up": cmd_up, "roundtrip": cmd_roundtrip,
            "bench": cmd_bench, "ablate": cmd_ablate, "inspect": cmd_inspect}


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(message)s")
        cfg = resolve_config(args)
        device()
        COMMANDS[args.verb](args, cfg)
        return 0
    except SystemExit as e:          # --help / --version
        return int(e.code or 0)
    except (ConfigError, CheckpointError, FileNotFoundError) as e:
        print(f"error: {e}".replace("\n", " "), file=sys.stderr)
        return 1
    except Exception as e:  # noqa: BLE001
        print(f"runtime failure: {type(e).__name__}: {e}".replace("\n", " "), file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
