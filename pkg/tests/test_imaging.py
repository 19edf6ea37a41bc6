import io
import math

import numpy as np
import pytest
from PIL import Image

from hime.diffops import bicubic_resize
from hime.imaging import (
    corrmap_render, corrmap_visualize, load_image, make_lr, psnr, save_image, ssim, to_uint8,
)
from hime.losses import correlation_map
from hime.tensor import FormatError, ShapeError


@pytest.fixture
def rng():
    return np.random.default_rng(2)


def random_8bit(rng, c=3, h=9, w=7):
    return rng.integers(0, 256, (1, c, h, w)) / 255.0


@pytest.mark.parametrize("suffix, c", [(".png", 3), (".png", 1), (".ppm", 3), (".pgm", 1)])
def test_round_trip_lossless(tmp_path, rng, suffix, c):
    t = random_8bit(rng, c)
    save_image(t, tmp_path / f"x{suffix}")
    np.testing.assert_array_equal(load_image(tmp_path / f"x{suffix}"), t)


def test_clamp_and_rounding():
    t = np.array([1.2, -0.3, 0.5, 127.5 / 255]).reshape(1, 1, 1, 4)
    np.testing.assert_array_equal(to_uint8(t).ravel(), [255, 0, 128, 128])


def test_sixteen_bit_png_rejected(tmp_path):
    Image.fromarray(np.full((4, 4), 40000, np.uint16)).save(tmp_path / "deep.png")
    with pytest.raises(FormatError):
        load_image(tmp_path / "deep.png")


def test_garbage_file_rejected(tmp_path):
    (tmp_path / "junk.png").write_bytes(b"not an image at all")
    with pytest.raises(FormatError, match="header"):
        load_image(tmp_path / "junk.png")


def test_unknown_suffix(tmp_path, rng):
    with pytest.raises(FormatError):
        save_image(random_8bit(rng), tmp_path / "x.tiff")


def test_psnr_values(rng):
    a = rng.uniform(0, 1, (1, 3, 8, 8))
    assert psnr(a, a) == math.inf
    b = np.zeros((1, 1, 10, 10))
    c = np.full((1, 1, 10, 10), 0.1)  # MSE 0.01
    assert psnr(b, c) == pytest.approx(20.0, abs=1e-12)
    d = rng.uniform(0, 1, a.shape)
    assert psnr(a, d) == psnr(d, a)


def test_ssim_values(rng):
    a = rng.uniform(0, 1, (1, 3, 16, 16))
    b = rng.uniform(0, 1, a.shape)
    assert ssim(a, a) == pytest.approx(1.0, abs=1e-12)
    assert ssim(a, 1 - a) < 1.0
    assert ssim(a, b) == pytest.approx(ssim(b, a), abs=1e-15)
    assert -1.0 <= ssim(a, b) <= 1.0


def test_metric_shape_mismatch():
    with pytest.raises(ShapeError):
        psnr(np.zeros((1, 1, 4, 4)), np.zeros((1, 1, 4, 5)))


def band_limited(size=64, seed=0):
    r = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size] / size
    img = np.full((3, size, size), 0.5)
    for _ in range(4):
        fy, fx = r.uniform(0, 2, 2)
        img += 0.08 * r.uniform(0.5, 1, (3, 1, 1)) * np.sin(2 * np.pi * (fy * yy + fx * xx) + r.uniform(0, 6))
    return img[None]


def test_make_lr_shape_and_constant():
    assert make_lr(np.zeros((1, 3, 64, 64)), 4).shape == (1, 3, 16, 16)
    np.testing.assert_allclose(make_lr(np.full((1, 3, 64, 64), 0.3), 4), 0.3, atol=1e-14)


def test_make_lr_round_trip_band_limited():
    hr = band_limited()
    back = bicubic_resize(make_lr(hr, 4), 4)[0]
    # edge clamping aside, a smooth image survives the round trip
    assert psnr(back[:, :, 8:-8, 8:-8], hr[:, :, 8:-8, 8:-8]) > 35.0


def test_make_lr_indivisible():
    with pytest.raises(ShapeError):
        make_lr(np.zeros((1, 3, 10, 12)), 4)


def test_zero_map_renders_uniform():
    rgb = corrmap_render(np.zeros((1, 9, 5, 6)))
    assert rgb.shape == (5, 6, 3)
    assert (rgb == rgb[0, 0]).all()


def test_constant_image_gives_uniform_file(tmp_path):
    m, _ = correlation_map(np.full((1, 3, 8, 8), 0.4), 3, 1)
    corrmap_visualize(m, tmp_path / "c.png")
    px = np.asarray(Image.open(tmp_path / "c.png"))
    assert (px == px[0, 0]).all()


def mean_abs_laplacian(img):
    g = img.astype(float).mean(axis=2)
    lap = g[1:-1, 2:] + g[1:-1, :-2] + g[2:, 1:-1] + g[:-2, 1:-1] - 4 * g[1:-1, 1:-1]
    return np.abs(lap).mean()


def test_larger_window_renders_smoother(tmp_path, rng):
    img = rng.uniform(0, 1, (1, 3, 32, 32))
    small = corrmap_visualize(correlation_map(img, 3, 1)[0], tmp_path / "k3.png")
    large = corrmap_visualize(correlation_map(img, 7, 1)[0], tmp_path / "k7.png")
    assert (tmp_path / "k3.png").read_bytes() != (tmp_path / "k7.png").read_bytes()
    assert mean_abs_laplacian(large) < mean_abs_laplacian(small)


def test_png_is_valid(tmp_path, rng):
    rgb = corrmap_visualize(correlation_map(rng.uniform(0, 1, (1, 1, 6, 6)), 3, 1)[0], tmp_path / "m.png")
    back = np.asarray(Image.open(io.BytesIO((tmp_path / "m.png").read_bytes())))
    np.testing.assert_array_equal(back, rgb)
