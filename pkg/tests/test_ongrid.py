import math
import struct

import numpy as np
import pytest

from npprov import tensor as T
from npprov.offgrid import SIGMA_FLOOR
from npprov.ongrid import (IDX_MAGIC, MaskedImage, OnGridArchitecture, OnGridModel, load_idx_images,
                           ongrid_loss, ongrid_mean, ongrid_variance, sample_mask, self_correlation,
                           write_idx_images)
from npprov.taskgen import ParseError


@pytest.fixture(scope="module")
def model():
    return OnGridModel.create(seed=2)


def image(seed=0, h=28, w=28):
    return np.random.default_rng(seed).uniform(0, 1, (1, h, w))


def test_mask_counts_and_determinism():
    n = 28 * 28
    for i in range(200):
        m = sample_mask(28, 28, i, seed=1)
        assert m.shape == (1, 28, 28)
        assert set(np.unique(m)) <= {0.0, 1.0}
        assert math.ceil(n / 100) <= m.sum() <= n // 2
    assert np.array_equal(sample_mask(28, 28, 5, 1), sample_mask(28, 28, 5, 1))
    assert not np.array_equal(sample_mask(28, 28, 5, 1), sample_mask(28, 28, 6, 1))


def test_mask_reveal_frequency_uniform():
    h = w = 8
    n = h * w
    draws = np.stack([sample_mask(h, w, i) for i in range(10_000)])[:, 0]
    counts = draws.sum(axis=(1, 2))
    freq = draws.mean(axis=0)
    expected = counts.mean() / n
    sd = np.sqrt(expected * (1 - expected) / len(draws))
    assert np.all(np.abs(freq - expected) < 3 * sd)


def test_masked_image_validation():
    with pytest.raises(ValueError):
        MaskedImage(np.zeros((1, 4, 4)), np.zeros((1, 4, 5)))
    with pytest.raises(ValueError):
        MaskedImage(np.zeros((1, 4, 4)), np.full((1, 4, 4), 0.5))


def test_mean_shape_and_variance_floor(model):
    img = MaskedImage(image(), sample_mask(28, 28, 0))
    mu, recon = ongrid_mean(img, model.tensors())
    assert mu.shape == (1, 28, 28)
    assert recon.data >= 0
    sigma = ongrid_variance(img.mask, model.tensors())
    assert sigma.shape == (1, 28, 28)
    assert np.all(sigma.data > SIGMA_FLOOR)


def test_variance_ignores_pixel_values(model):
    mask = sample_mask(28, 28, 3)
    a = model.forward(image(1)[None], mask[None])[1].data
    b = model.forward(10 * image(2)[None] - 4, mask[None])[1].data
    assert a.tobytes() == b.tobytes()
    assert a[0].tobytes() == model.predict_std(mask).astype(a.dtype).tobytes()


def test_empty_mask_gives_constant_sigma_interior(model):
    sigma = model.predict_std(np.zeros((1, 192, 192)))[0]
    # away from the zero-padded border every pixel sees the same input
    interior = sigma[80:112, 80:112]
    np.testing.assert_allclose(interior, interior[0, 0], rtol=0, atol=1e-12)


def test_all_revealed_zero_cnn_gives_constant_mean():
    m = OnGridModel.create(seed=0)
    for k in m.params:
        if k.startswith("unet") or k.startswith("psi_mu"):
            m.params[k] = np.zeros_like(m.params[k])
    m.params["psi_mu.b"][:] = 0.25
    mu, _, _ = m.predict(MaskedImage(image(), np.ones((1, 28, 28))))
    np.testing.assert_array_equal(mu, 0.25)


def hand_params():
    # 1x1 convs written as 3x3 filters with only the centre tap set.
    def centre(values):
        values = np.asarray(values, dtype=np.float64)
        w = np.zeros(values.shape + (3, 3))
        w[..., 1, 1] = values
        return w

    arch = OnGridArchitecture(self_channels=1, cross_channels=1, unet_base=2, unet_out_channels=1,
                              target_channels=1)
    m = OnGridModel.create(seed=0, arch=arch)
    p = {k: np.zeros_like(v) for k, v in m.params.items()}
    p["psi_E.w"], p["psi_E.b"] = centre([[2.0]]), np.array([0.5])
    p["psi_D.w"], p["psi_D.b"] = centre([[0.5]]), np.array([-0.25])
    p["psi.w"], p["psi.b"] = centre([[1.0, 3.0]]), np.array([0.1])
    p["psi_mu.w"], p["psi_mu.b"] = np.array([[1.0, -1.0, 0.0]]), np.array([0.2])
    p["psi_ss.w"], p["psi_ss.b"] = np.array([[0.5]]), np.array([0.0])
    p["psi_sigma.w"], p["psi_sigma.b"] = np.array([[0.0, 1.0, 0.0, 2.0]]), np.array([0.0])
    m.params = p
    return m


def test_toy_hand_values():
    m = hand_params()
    values = np.array([[[0.1, 0.2, 0.3, 0.4], [0.5, 0.6, 0.7, 0.8],
                        [0.9, 1.0, 0.0, 0.1], [0.2, 0.3, 0.4, 0.5]]])
    mask = np.zeros((1, 4, 4))
    mask[0, 0, 0] = mask[0, 2, 3] = 1.0
    mu, recon = ongrid_mean(MaskedImage(values, mask), m.tensors())
    h_self = 2 * mask + 0.5
    h_cross = mask + 3 * mask * values + 0.1
    # the UNet is all zeros, so CNN([h_self, h_cross]) = [h_self, h_cross, 0]
    np.testing.assert_allclose(mu.data, h_self - h_cross + 0.2, rtol=1e-13)
    rec = 0.5 * h_self - 0.25
    assert recon.data == pytest.approx(np.mean((mask - rec) ** 2), rel=1e-13)
    sigma = ongrid_variance(mask, m.tensors()).data
    z = (mask + 3 * mask + 0.1) + 2 * 0.5
    np.testing.assert_allclose(sigma, SIGMA_FLOOR + np.log1p(np.exp(z)), rtol=1e-13)


def test_loss_examples():
    v = image(4)
    loss = ongrid_loss(v, T.Tensor(v), T.Tensor(np.ones_like(v)), T.Tensor(np.array(0.0)))
    assert loss.data == pytest.approx(0.918939, abs=1e-6)
    loss = ongrid_loss(v, T.Tensor(v), T.Tensor(np.ones_like(v)), T.Tensor(np.array(0.3)))
    assert loss.data == pytest.approx(0.918939 + 0.3, abs=1e-6)
    # 2x2 hand case
    v = np.array([[[0.0, 1.0], [0.5, 0.5]]])
    mu = np.array([[[0.0, 0.0], [0.5, 1.0]]])
    sd = np.array([[[1.0, 2.0], [1.0, 0.5]]])
    terms = [0.5 * np.log(2 * np.pi) + np.log(s) + 0.5 * ((a - b) / s) ** 2
             for a, b, s in zip(v.ravel(), mu.ravel(), sd.ravel())]
    got = ongrid_loss(v, T.Tensor(mu), T.Tensor(sd), T.Tensor(np.array(0.0))).data
    assert got == pytest.approx(np.mean(terms), rel=1e-13)


def test_stride_one_stages_shift_by_two_pixels(model):
    # The single-layer encoders are stride 1, so a 2-pixel shift commutes with them exactly.
    mask = sample_mask(32, 32, 9)
    shifted = np.roll(mask, 2, axis=-1)
    h, _ = self_correlation(mask[None], model.tensors())
    hs, _ = self_correlation(shifted[None], model.tensors())
    np.testing.assert_allclose(hs.data[..., 4:-4], np.roll(h.data, 2, axis=-1)[..., 4:-4], atol=1e-12)


def test_full_pipeline_equivariant_to_unet_stride_shifts(model):
    # The strided UNet commutes with shifts by multiples of 2**levels (16 px).
    rng = np.random.default_rng(0)
    size = 96
    values = rng.uniform(0, 1, (1, 1, size, size))
    mask = (rng.uniform(size=(1, 1, size, size)) < 0.3).astype(float)
    mu, sigma, _ = model.forward(values, mask)
    rolled = model.forward(np.roll(values, 16, -1), np.roll(mask, 16, -1))
    inner = slice(40, 56)
    np.testing.assert_allclose(rolled[0].data[..., inner, inner], np.roll(mu.data, 16, -1)[..., inner, inner],
                               atol=1e-4)
    np.testing.assert_allclose(rolled[1].data[..., inner, inner], np.roll(sigma.data, 16, -1)[..., inner, inner],
                               atol=1e-4)


def test_gradient_check_small_image():
    arch = OnGridArchitecture(self_channels=2, cross_channels=2, unet_base=2, unet_out_channels=2,
                              target_channels=2)
    m = OnGridModel.create(seed=1, arch=arch)
    values = image(5, 8, 8)[None]
    mask = sample_mask(8, 8, 1)[None]
    for name in ("psi_E.w", "psi.b", "unet.down2.w", "psi_sigma.w", "psi_ss.b"):
        base = m.params[name]

        def fn(v, name=name):
            params = m.tensors()
            params[name] = v
            return m.loss(values, mask, params)

        assert T.grad_check(fn, base) < 1e-6, name


def write_raw_idx(path, magic, dims, payload):
    path.write_bytes(struct.pack(">I", magic) + struct.pack(f">{len(dims)}I", *dims) + payload)


def test_idx_roundtrip_and_scaling(tmp_path):
    imgs = np.zeros((2, 28, 28))
    imgs[0, 0, 0] = 1.0
    imgs[1, 5, 7] = 128 / 255
    write_idx_images(imgs, tmp_path / "a.idx")
    back = load_idx_images(tmp_path / "a.idx")
    assert back.shape == (2, 1, 28, 28)
    assert back[0, 0, 0, 0] == 1.0
    assert back[1, 0, 5, 7] == pytest.approx(128 / 255)


def test_idx_against_independent_parser(tmp_path):
    rng = np.random.default_rng(0)
    raw = rng.integers(0, 256, size=(3, 28, 28), dtype=np.uint8)
    write_raw_idx(tmp_path / "b.idx", IDX_MAGIC, (3, 28, 28), raw.tobytes())
    # second parser: read the header by hand, checksum the first image
    blob = (tmp_path / "b.idx").read_bytes()
    first = list(blob[16:16 + 784])
    ours = load_idx_images(tmp_path / "b.idx")[0, 0]
    assert int(round(ours.sum() * 255)) == sum(first)


def test_idx_errors(tmp_path):
    write_raw_idx(tmp_path / "m.idx", 0x00000801, (1, 2, 2), bytes(4))
    with pytest.raises(ParseError, match="offset 0"):
        load_idx_images(tmp_path / "m.idx")
    write_raw_idx(tmp_path / "t.idx", IDX_MAGIC, (2, 2, 2), bytes(5))
    with pytest.raises(ParseError, match="truncated"):
        load_idx_images(tmp_path / "t.idx")
    (tmp_path / "h.idx").write_bytes(struct.pack(">I", IDX_MAGIC) + bytes(3))
    with pytest.raises(ParseError, match="truncated"):
        load_idx_images(tmp_path / "h.idx")
    write_raw_idx(tmp_path / "x.idx", IDX_MAGIC, (1, 2, 2), bytes(6))
    with pytest.raises(ParseError, match="trailing"):
        load_idx_images(tmp_path / "x.idx")
