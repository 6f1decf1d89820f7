import math

import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st

from latent_rescale.imaging import (Image, PatchGrid, bicubic_resize, blend_window, cubic_kernel,
                                    dequantize, load_png, merge_patches, merge_weights, patch_offsets,
                                    quantize_ste, quantize_to_u8, save_png, to_patches)


def naive_resize_1d(signal, out_size, scale, a=-0.5):
    """Direct per-sample evaluation of the antialiased cubic with symmetric borders."""
    n = len(signal)
    k = min(scale, 1.0)

    def kern(x):
        x = abs(x)
        if x <= 1:
            return (a + 2) * x ** 3 - (a + 3) * x ** 2 + 1
        if x < 2:
            return a * x ** 3 - 5 * a * x ** 2 + 8 * a * x - 4 * a
        return 0.0

    def reflect(i):
        while i < 0 or i >= n:
            i = -i - 1 if i < 0 else 2 * n - 1 - i
        return i

    out = []
    for o in range(out_size):
        c = (o + 0.5) / scale - 0.5
        lo, hi = math.floor(c - 2 / k) - 1, math.ceil(c + 2 / k) + 1
        ws = [(kern((c - j) * k), reflect(j)) for j in range(lo, hi + 1)]
        total = sum(w for w, _ in ws)
        out.append(sum(w * signal[j] for w, j in ws) / total)
    return np.array(out)


def test_cubic_kernel_interpolates():
    x = np.array([0.0, 1.0, 2.0, -1.0, 3.0])
    assert np.allclose(cubic_kernel(x), [1, 0, 0, 0, 0])
    # partition of unity at any fractional offset
    for f in np.linspace(0, 1, 7):
        assert math.isclose(cubic_kernel(np.array([f + 1, f, f - 1, f - 2])).sum(), 1.0, abs_tol=1e-12)


@pytest.mark.parametrize("factor", [1 / 2, 1 / 4, 1 / 16, 2, 4])
def test_bicubic_matches_naive_separable(factor):
    rng = np.random.default_rng(0)
    img = rng.uniform(-1, 1, (3, 32, 48))
    out = bicubic_resize(torch.from_numpy(img), factor, value_range=None).numpy()
    oh, ow = int(32 * factor), int(48 * factor)
    assert out.shape == (3, oh, ow)
    ref = np.empty((3, oh, ow))
    for ch in range(3):
        rows = np.stack([naive_resize_1d(img[ch, :, j], oh, factor) for j in range(48)], axis=1)
        ref[ch] = np.stack([naive_resize_1d(rows[i], ow, factor) for i in range(oh)])
    assert np.abs(out - ref).max() < 1e-12


def test_bicubic_factor_one_is_copy_and_constant_preserved():
    x = torch.rand(3, 16, 16) * 2 - 1
    y = bicubic_resize(x, 1)
    assert torch.equal(x, y) and y.data_ptr() != x.data_ptr()
    c = torch.full((3, 64, 64), 0.3, dtype=torch.float64)
    assert torch.allclose(bicubic_resize(c, 1 / 16), torch.full((3, 4, 4), 0.3, dtype=torch.float64))


def test_bicubic_rejects_bad_factor():
    with pytest.raises(ValueError):
        bicubic_resize(torch.zeros(3, 8, 8), 0)
    with pytest.raises(ValueError):
        bicubic_resize(torch.zeros(3, 8, 8), 1 / 16)


def test_bicubic_batched_and_differentiable():
    x = torch.rand(2, 3, 32, 32, requires_grad=True)
    y = bicubic_resize(x, 1 / 4)
    assert y.shape == (2, 3, 8, 8)
    y.sum().backward()
    assert x.grad is not None and torch.isfinite(x.grad).all()


def test_image_validation():
    Image(torch.zeros(3, 4, 4))
    with pytest.raises(ValueError):
        Image(torch.zeros(1, 4, 4))
    with pytest.raises(ValueError):
        Image(torch.full((3, 4, 4), 2.0))


@given(st.floats(-1.5, 1.5, allow_nan=False))
def test_quantize_range_and_roundtrip_error(v):
    q = quantize_to_u8(torch.tensor([v], dtype=torch.float64))
    assert 0 <= q.item() <= 255 and q.item() == int(q.item())
    if -1 <= v <= 1:
        assert abs(dequantize(q).item() - v) <= 1 / 255 + 1e-12


def test_quantize_rounds_half_up_and_is_idempotent():
    # 0 maps exactly onto the tie 127.5
    v = torch.tensor([-1.0, 0.0, 1.0], dtype=torch.float64)
    assert quantize_to_u8(v).tolist() == [0.0, 128.0, 255.0]
    q = torch.arange(256, dtype=torch.float64)
    assert torch.equal(quantize_to_u8(dequantize(q)), q)


def test_quantize_ste_gradient_is_identity():
    v = torch.linspace(-1, 1, 11, requires_grad=True)
    quantize_ste(v).sum().backward()
    assert torch.equal(v.grad, torch.ones(11))


@given(st.integers(1, 80), st.integers(1, 40), st.integers(1, 40))
def test_patch_offsets_cover(length, p, s):
    if s > p:
        s, p = p, s
    offs = patch_offsets(length, p, s)
    covered = np.zeros(length, bool)
    for o in offs:
        covered[o:o + p] = True
    assert covered.all()
    assert offs[0] == 0 and offs == sorted(set(offs))
    assert all(o + min(p, length) <= length for o in offs)


@given(st.integers(1, 40), st.integers(1, 40), st.integers(1, 24), st.integers(1, 24))
def test_merge_weights_partition_of_unity(h, w, p, s):
    if s > p:
        s, p = p, s
    grid = PatchGrid(p, s, (h, w))
    total = torch.zeros(h, w, dtype=torch.float64)
    for i, wt in enumerate(merge_weights(grid)):
        rs, cs = grid.slices(i)
        total[rs, cs] += wt
    assert (total - 1).abs().max() < 1e-9


@given(st.integers(4, 40), st.integers(4, 40), st.integers(2, 16), st.integers(1, 16))
def test_split_merge_reconstructs(h, w, p, s):
    s = min(s, p)
    t = torch.randn(4, h, w, dtype=torch.float64)
    patches, grid = to_patches(t, p, s)
    assert torch.allclose(merge_patches(patches, grid), t, atol=1e-12)


def test_single_patch_merge_is_identity():
    t = torch.randn(4, 10, 12)
    patches, grid = to_patches(t, 16, 8)
    assert len(grid) == 1
    assert torch.equal(merge_patches(patches, grid), t)


def test_window_positive():
    assert (blend_window(7, 5) > 0).all()


def test_patch_validation():
    with pytest.raises(ValueError):
        to_patches(torch.zeros(4, 8, 8), 4, 5)
    patches, grid = to_patches(torch.zeros(4, 8, 8), 4, 2)
    with pytest.raises(ValueError):
        merge_patches(patches[:-1], grid)


def test_png_roundtrip(tmp_path):
    img = torch.randint(0, 256, (3, 9, 7)).float()
    save_png(img, tmp_path / "a.png")
    assert torch.equal(load_png(tmp_path / "a.png"), img)
