import pytest
import torch
from hypothesis import given, strategies as st

from helpers import export_codec
from latent_rescale.codec import (ExternalCodecAdapter, ToyCodec, get_backend_codec, load_codec, psnr_model_range,
                                  save_codec)
from latent_rescale.config import ConfigError, RunConfig
from latent_rescale.container import load_archive
from latent_rescale.corpus import desk_corpus
from latent_rescale.desk import desk_images, get_codec


@pytest.fixture(scope="module")
def codec():
    torch.manual_seed(0)
    return ToyCodec((8, 16, 16)).eval()


@pytest.mark.parametrize("hw, latent", [((64, 64), (4, 8, 8)), ((256, 512), (4, 32, 64))])
def test_encode_shapes(codec, hw, latent):
    with torch.no_grad():
        z = codec.encode(torch.zeros(3, *hw))
    assert tuple(z.shape) == latent


def test_decode_shape_and_zero_latent(codec):
    with torch.no_grad():
        x = codec.decode(torch.zeros(4, 8, 8))
    assert tuple(x.shape) == (3, 64, 64)
    assert torch.isfinite(x).all() and x.abs().max() <= 1


@pytest.mark.parametrize("shape", [(3, 60, 64), (3, 64, 12)])
def test_encode_rejects_indivisible(codec, shape):
    with pytest.raises(ValueError):
        codec.encode(torch.zeros(shape))


def test_decode_rejects_channel_count(codec):
    with pytest.raises(ValueError):
        codec.decode(torch.zeros(3, 8, 8))


@given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 100))
def test_shape_bijection_and_determinism(codec, h, w, seed):
    x = torch.rand(1, 3, 8 * h, 8 * w, generator=torch.Generator().manual_seed(seed)) * 2 - 1
    with torch.no_grad():
        z1, z2 = codec.encode(x), codec.encode(x)
        assert torch.equal(z1, z2)
        assert codec.decode(z1).shape == x.shape


def test_save_load_roundtrip(codec, tmp_path):
    codec.corpus_hash = "abc"
    save_codec(codec, tmp_path / "c.zip")
    _, meta, _ = load_archive(tmp_path / "c.zip")
    assert meta["kind"] == "toy" and meta["latent_channels"] == 4 and meta["reduction"] == 8
    assert meta["corpus_hash"] == "abc"
    loaded = load_codec(tmp_path / "c.zip")
    x = torch.rand(1, 3, 32, 32) * 2 - 1
    with torch.no_grad():
        assert torch.equal(loaded.encode(x), codec.encode(x))
    assert not any(p.requires_grad for p in loaded.parameters())


def test_external_adapter_matches_toy(codec, tmp_path):
    export_codec(codec, tmp_path / "vae.pt")
    adapter = ExternalCodecAdapter(tmp_path / "vae.pt", scale=float(codec.scale), shift=float(codec.shift))
    x = torch.rand(2, 3, 32, 32) * 2 - 1
    with torch.no_grad():
        assert torch.allclose(adapter.encode(x), codec.encode(x), atol=1e-6)
        z = codec.encode(x)
        assert torch.allclose(adapter.decode(z), codec.decode(z), atol=1e-6)
    with pytest.raises(ValueError):
        adapter.encode(torch.zeros(1, 3, 30, 32))


@pytest.mark.parametrize("backend", [{"codec": "nonsense"}, {"codec": "external"}, {"codec_scale": 0.0}])
def test_backend_config_validation(backend):
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"backend": backend})


def test_backend_selection_from_config(codec, tmp_path):
    assert get_backend_codec(RunConfig()) is None
    save_codec(codec, tmp_path / "c.zip")
    loaded = get_backend_codec(RunConfig.from_dict({"backend": {"codec_weights": str(tmp_path / "c.zip")}}))
    assert isinstance(loaded, ToyCodec)
    export_codec(codec, tmp_path / "vae.pt")
    ext = get_backend_codec(RunConfig.from_dict({"backend": {"codec": "external",
                                                             "codec_weights": str(tmp_path / "vae.pt")}}))
    assert isinstance(ext, ExternalCodecAdapter) and ext.add_decoder_lora(2) == []


# -- trained toy backend ----------------------------------------------------------

@pytest.fixture(scope="module")
def trained_codec(desk_cache):
    x, _ = desk_images(0)
    return get_codec(x, RunConfig(), desk_cache)


def test_trained_codec_psnr_on_held_out_patches(trained_codec):
    held_out = desk_corpus(16, 64, seed=1234)
    with torch.no_grad():
        x_hat = trained_codec.decode(trained_codec.encode(held_out))
    values = [psnr_model_range(a, b) for a, b in zip(x_hat, held_out)]
    mean = sum(values) / len(values)
    print(f"toy codec held-out PSNR {mean:.2f} dB")
    assert mean >= 25


def test_trained_decoder_lipschitz_probe(trained_codec):
    x = desk_corpus(4, 64, seed=99)
    gen = torch.Generator().manual_seed(0)
    with torch.no_grad():
        z = trained_codec.encode(x)
        base = trained_codec.decode(z)
        for _ in range(5):
            delta = (torch.rand(z.shape, generator=gen) * 2 - 1) * 1e-6
            assert (trained_codec.decode(z + delta) - base).abs().max() < 1e-3
