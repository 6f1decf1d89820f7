import json

import numpy as np
import pytest
import torch
from PIL import Image

from helpers import tiny_checkpoint
from latent_rescale.bench import psnr
from latent_rescale.cli import main
from latent_rescale.config import describe_keys
from latent_rescale.imaging import PatchGrid, load_png, save_png


@pytest.fixture(scope="module")
def ckpt(tmp_path_factory):
    path = tmp_path_factory.mktemp("cli") / "tiny.zip"
    tiny_checkpoint(path)
    return path


@pytest.fixture
def image(tmp_path):
    rng = np.random.default_rng(0)
    yy, xx = np.mgrid[0:128, 0:96]
    arr = np.stack([(xx * 2) % 256, (yy * 2) % 256, (xx + yy) % 256]) + rng.integers(0, 8, (3, 128, 96))
    path = tmp_path / "in.png"
    save_png(torch.from_numpy(np.clip(arr, 0, 255)).float(), path)
    return path


def test_help_lists_every_config_key(capsys):
    assert main(["down", "--help"]) == 0
    out = capsys.readouterr().out
    for key, default in describe_keys():
        assert f"{key} = {json.dumps(default)}" in out


@pytest.mark.parametrize("argv", [
    ["frobnicate"], ["down"], ["down", "--bogus", "x.png"], ["down", "--factor", "12", "x.png"],
    ["down", "--set", "model.nope=1", "x.png"], ["down", "x.png"],
    ["down", "--checkpoint", "missing.zip", "x.png"], ["ablate", "--kind", "nothing"],
])
def test_validation_errors_exit_1_with_one_line(argv, capsys):
    assert main(argv) == 1
    err = capsys.readouterr().err
    assert err.count("\n") == 1 and err.startswith("error:")


def test_runtime_failure_exits_2(ckpt, tmp_path, capsys, monkeypatch):
    import latent_rescale.pipeline as pipeline

    def boom(*a, **k):
        raise RuntimeError("simulated")
    monkeypatch.setattr(pipeline, "rescale_down", boom)
    save_png(torch.zeros(3, 64, 64), tmp_path / "z.png")
    assert main(["down", "--checkpoint", str(ckpt), str(tmp_path / "z.png")]) == 2
    assert "simulated" in capsys.readouterr().err


def test_down_writes_lr_and_sidecar(ckpt, image):
    assert main(["down", "--checkpoint", str(ckpt), str(image)]) == 0
    lr = image.parent / "in.lr.png"
    assert Image.open(lr).size == (96 // 16, 128 // 16)
    meta = json.loads((image.parent / "in.lr.json").read_text())
    assert meta["factor"] == 16 and meta["height"] == 128
    manifest = json.loads((image.parent / "down.manifest.json").read_text())
    assert manifest["seed"] == 0 and str(ckpt) in manifest["checkpoints"] and manifest["version"]


def test_factor_mismatch_with_checkpoint(ckpt, image):
    assert main(["down", "--checkpoint", str(ckpt), "--factor", "32", str(image)]) == 1


def test_roundtrip_equals_down_then_up(ckpt, image, tmp_path, capsys):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["roundtrip", "--checkpoint", str(ckpt), "--out-dir", str(a), str(image)]) == 0
    assert "psnr" in capsys.readouterr().out
    assert main(["down", "--checkpoint", str(ckpt), "--out-dir", str(b), str(image)]) == 0
    assert main(["up", "--checkpoint", str(ckpt), "--out-dir", str(b), str(b / "in.lr.png")]) == 0
    assert (a / "in.up.png").read_bytes() == (b / "in.up.png").read_bytes()
    x, x_hat = load_png(image), load_png(b / "in.up.png")
    report = (a / "roundtrip.csv").read_text().splitlines()
    assert float(report[1].split(",")[1]) == pytest.approx(psnr(x_hat, x), abs=1e-5)


def test_commands_are_idempotent(ckpt, image, tmp_path):
    out = tmp_path / "o"
    argv = ["roundtrip", "--checkpoint", str(ckpt), "--out-dir", str(out), "--timestep-map", str(image)]
    assert main(argv) == 0
    first = {p.name: p.read_bytes() for p in out.iterdir()}
    assert main(argv) == 0
    assert {p.name: p.read_bytes() for p in out.iterdir()} == first


def test_inspect_timestep_map_matches_grid(ckpt, image, tmp_path, capsys):
    out = tmp_path / "i"
    argv = ["inspect", "--checkpoint", str(ckpt), "--patch-size", "6", "--stride", "4",
            "--timestep-map", "--out-dir", str(out), str(image)]
    assert main(argv) == 0
    assert "offsets match grid: True" in capsys.readouterr().out
    rows = (out / "in.tmap.csv").read_text().splitlines()[1:]
    offsets = [tuple(map(int, r.split(",")[:2])) for r in rows]
    assert offsets == PatchGrid(6, 4, (16, 12)).offsets
    heat = Image.open(out / "in.tmap.png")
    assert heat.size == (12, 16)


def test_inspect_checkpoint_only(ckpt, tmp_path, capsys):
    assert main(["inspect", "--checkpoint", str(ckpt), "--out-dir", str(tmp_path)]) == 0
    info = json.loads(capsys.readouterr().out)
    assert info["stage"] == 3 and (tmp_path / "inspect.manifest.json").exists()


def test_bench_outputs(ckpt, tmp_path, monkeypatch):
    import latent_rescale.desk as desk

    monkeypatch.setattr(desk, "desk_images", lambda seed=0: (torch.rand(3, 3, 64, 64) * 2 - 1,
                                                             torch.rand(1, 3, 64, 64) * 2 - 1))
    out = tmp_path / "b"
    assert main(["bench", "--checkpoint", str(ckpt), "--out-dir", str(out), "--qualities", "20,80"]) == 0
    rows = (out / "rd.csv").read_text().splitlines()
    assert len(rows) == 1 + 3 * 2 + 3
    assert (out / "rd.png").exists() and (out / "metrics.csv").exists()
