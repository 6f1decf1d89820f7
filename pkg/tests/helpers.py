"""Tiny model configurations shared by the test modules."""
import torch

from latent_rescale.config import RunConfig
from latent_rescale.pipeline import Corpus, build_model, fresh_backends, train_stage1, train_stage2, train_stage3


def tiny_config(**top) -> RunConfig:
    d = RunConfig().to_dict()
    d["model"].update(dfrm_width=8, dfrm_blocks=1, inn_blocks=2, inn_hidden=8, tpm_width=8,
                      scheduler_width=8, lora_rank=2)
    d["train"].update(batch_size=2, crop=64, val_every=5)
    d.update(top)
    return RunConfig.from_dict(d)


def tiny_model(cfg):
    codec, den = fresh_backends(cfg, codec_widths=(8, 16, 16), denoiser_width=8)
    return build_model(cfg, codec, den)


def tiny_checkpoint(path, steps=3, **top):
    torch.manual_seed(0)
    cfg = tiny_config(**top)
    x = torch.rand(4, 3, 64, 64) * 2 - 1
    model = tiny_model(cfg)
    corpus = Corpus.from_images(model.codec, x, x[:2])
    c1 = train_stage1(cfg, corpus, model, steps=steps)
    c2 = train_stage2(cfg, corpus, model, c1, steps=steps)
    c3 = train_stage3(cfg, corpus, model, c2, steps=steps)
    c3.save(path)
    return cfg


class ScriptableCodec(torch.nn.Module):
    """Exposes a toy codec's raw encode/decode for TorchScript export (see ``export_codec``)."""

    def __init__(self, inner):
        super().__init__()
        self.inner = inner

    def encode(self, x):
        return self.inner.encoder(x).chunk(2, dim=1)[0]

    def decode(self, z):
        return self.inner.decoder(z)

    def forward(self, x):
        return self.decode(self.encode(x))


def export_codec(codec, path):
    x = torch.zeros(1, 3, 64, 64)
    z = torch.zeros(1, 4, 8, 8)
    torch.jit.trace_module(ScriptableCodec(codec), {"forward": x, "encode": x, "decode": z}).save(str(path))


def export_backends(folder, codec_widths=(8, 16, 16), denoiser_width=8, T=1000):
    """Random toy backends saved as TorchScript files; returns their paths."""
    from latent_rescale.codec import ToyCodec
    from latent_rescale.diffusion import ToyDenoiser

    torch.manual_seed(1)
    codec_path, den_path = folder / "codec.pt", folder / "denoiser.pt"
    export_codec(ToyCodec(codec_widths).eval(), codec_path)
    den = ToyDenoiser(T, denoiser_width).eval()
    torch.jit.trace(den, (torch.zeros(1, 4, 8, 8), torch.zeros(1))).save(str(den_path))
    return codec_path, den_path
