"""Config parsing, checkpoint archives, LoRA wrappers and the desk corpus."""
import json
import zipfile

import pytest
import torch
from hypothesis import given, strategies as st
from torch import nn

from latent_rescale.config import ConfigError, RunConfig, describe_keys, load_config, parse_override
from latent_rescale.container import CheckpointError, load_archive, save_archive, state_checksum
from latent_rescale.corpus import desk_corpus, load_folder
from latent_rescale.imaging import save_png
from latent_rescale.lora import LoRAConv2d, attach_lora, freeze, lora_parameters


# -- config -------------------------------------------------------------------

def test_config_defaults_roundtrip_and_hash():
    cfg = RunConfig()
    again = RunConfig.from_dict(json.loads(json.dumps(cfg.to_dict())))
    assert again == cfg and again.hash() == cfg.hash()
    assert load_config(None, {"factor": "32"}).hash() != cfg.hash()


def test_config_file_and_overrides(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"factor": 32, "model": {"lora_rank": 2}}))
    cfg = load_config(path, {"model.use_inn": "false", "train.lr_stage1": "3e-4", "stride": 32})
    assert cfg.factor == 32 and cfg.model.lora_rank == 2 and cfg.model.use_inn is False
    assert cfg.train.lr_stage1 == 3e-4 and cfg.stride == 32


@given(st.floats(1e-8, 1.0), st.integers(0, 2 ** 31), st.sampled_from([8, 16, 32]), st.booleans())
def test_string_overrides_roundtrip(lr, seed, factor, flag):
    cfg = load_config(None, {"train.lr_stage2": repr(lr), "seed": str(seed), "factor": str(factor),
                             "model.use_inn": str(flag).lower()})
    assert (cfg.train.lr_stage2, cfg.seed, cfg.factor, cfg.model.use_inn) == (lr, seed, factor, flag)
    assert RunConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))).hash() == cfg.hash()


@pytest.mark.parametrize("overrides", [
    {"factor": 12}, {"nope": 1}, {"model.nope": 1}, {"factor": "abc"}, {"model.use_inn": "maybe"},
    {"stride": 200}, {"t0": 1000}, {"loss.rec": -1}, {"model.timestep_mode": "other"},
    {"factor.x": 1}, {"seed": 1.5},
])
def test_config_rejects_bad_values(overrides):
    with pytest.raises(ConfigError):
        load_config(None, overrides)


def test_config_file_errors(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.json")
    bad = tmp_path / "bad.json"
    bad.write_text("{")
    with pytest.raises(ConfigError):
        load_config(bad)


def test_parse_override_and_describe():
    assert parse_override("model.lora_rank = 8") == ("model.lora_rank", "8")
    with pytest.raises(ConfigError):
        parse_override("novalue")
    keys = dict(describe_keys())
    assert keys["factor"] == 16 and keys["model.inn_blocks"] == 8 and "train.steps_stage3" in keys


# -- container ----------------------------------------------------------------

def test_archive_roundtrip_and_determinism(tmp_path):
    tensors = {"a": torch.randn(3, 4), "b.c": torch.arange(5), "h": torch.randn(2).half()}
    c1 = save_archive(tmp_path / "x.zip", tensors, {"k": 1}, {"blob": b"\x00\x01"})
    c2 = save_archive(tmp_path / "y.zip", tensors, {"k": 1}, {"blob": b"\x00\x01"})
    assert c1 == c2 == state_checksum(tensors)
    assert (tmp_path / "x.zip").read_bytes() == (tmp_path / "y.zip").read_bytes()
    loaded, meta, blobs = load_archive(tmp_path / "x.zip")
    assert all(torch.equal(loaded[k], tensors[k]) and loaded[k].dtype == tensors[k].dtype for k in tensors)
    assert meta["k"] == 1 and meta["checksum"] == c1 and blobs == {"blob": b"\x00\x01"}
    assert not list(tmp_path.glob("*.tmp"))


def test_archive_detects_corruption(tmp_path):
    path = tmp_path / "x.zip"
    save_archive(path, {"a": torch.zeros(4)}, {})
    with zipfile.ZipFile(path) as zf:
        items = {n: zf.read(n) for n in zf.namelist()}
    manifest = json.loads(items["manifest.json"])
    manifest["checksum"] = "0" * 64
    items["manifest.json"] = json.dumps(manifest).encode()
    with zipfile.ZipFile(path, "w") as zf:
        for n, data in items.items():
            zf.writestr(n, data)
    with pytest.raises(CheckpointError):
        load_archive(path)
    (tmp_path / "junk.zip").write_bytes(b"not a zip")
    with pytest.raises(CheckpointError):
        load_archive(tmp_path / "junk.zip")


# -- lora ---------------------------------------------------------------------

def test_lora_starts_as_identity_and_merges():
    torch.manual_seed(0)
    net = nn.Sequential(nn.Conv2d(3, 8, 3, padding=1), nn.SiLU(), nn.Sequential(nn.Conv2d(8, 4, 1)))
    x = torch.randn(2, 3, 6, 6)
    before = net(x)
    wrappers = attach_lora(net, 2)
    assert len(wrappers) == 2 and torch.equal(net(x), before)
    assert len(attach_lora(net, 2)) == 2  # idempotent
    assert len(lora_parameters(net)) == 4
    freeze(net)
    for p in lora_parameters(net):
        p.requires_grad_(True)
    with torch.no_grad():
        wrappers[0].up.weight.normal_()
    lora = wrappers[0]
    merged = nn.functional.conv2d(x, lora.merged_weight(), lora.base.bias, padding=1)
    assert torch.allclose(lora(x), merged, atol=1e-5)
    trainable = [p for p in net.parameters() if p.requires_grad]
    assert len(trainable) == 4 and isinstance(net[0], LoRAConv2d)


# -- corpus -------------------------------------------------------------------

def test_desk_corpus_is_deterministic_and_in_range():
    a = desk_corpus(4, 64, seed=3)
    b = desk_corpus(4, 64, seed=3)
    assert a.shape == (4, 3, 64, 64) and torch.equal(a, b)
    assert a.min() >= -1 and a.max() <= 1
    assert not torch.equal(a, desk_corpus(4, 64, seed=4))
    # values sit on the 8-bit grid
    u8 = (a + 1) * 127.5
    assert torch.allclose(u8, u8.round(), atol=1e-4)


def test_load_folder(tmp_path):
    for i in range(2):
        save_png(torch.full((3, 20, 24), float(i * 100)), tmp_path / f"{i}.png")
    imgs = load_folder(tmp_path, 16)
    assert imgs.shape == (2, 3, 16, 16)
    with pytest.raises(ValueError):
        load_folder(tmp_path, 32)
    with pytest.raises(FileNotFoundError):
        load_folder(tmp_path / "x" if (tmp_path / "x").mkdir() is None else tmp_path)
