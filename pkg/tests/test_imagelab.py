import colorsys

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sefdet import imagelab
from sefdet.validation import InputError


def _rand_img(rng, h=16, w=16, channels=3):
    shape = (h, w, 3) if channels == 3 else (h, w)
    return rng.random(shape).astype(np.float32)


# ---------------------------------------------------------------------------
# color
# ---------------------------------------------------------------------------

def test_grayscale_pure_channels():
    img = np.zeros((2, 2, 3), np.float32)
    img[:, :, 0] = 1.0
    assert np.allclose(imagelab.to_grayscale(img), 0.299)
    img = np.zeros((2, 2, 3), np.float32)
    img[:, :, 1] = 1.0
    assert np.allclose(imagelab.to_grayscale(img), 0.587)


def test_grayscale_requires_rgb():
    with pytest.raises(InputError):
        imagelab.to_grayscale(np.zeros((4, 4)))


def test_saturation_matches_colorsys(rng):
    img = _rand_img(rng, 5, 7)
    got = imagelab.rgb_to_hsv_saturation(img)
    for i in range(5):
        for j in range(7):
            r, g, b = (float(v) for v in img[i, j])
            _, s, _ = colorsys.rgb_to_hsv(r, g, b)
            assert abs(float(got[i, j]) - s) < 1e-6


def test_saturation_black_is_zero():
    assert imagelab.rgb_to_hsv_saturation(np.zeros((2, 2, 3))).max() == 0.0


# ---------------------------------------------------------------------------
# resampling
# ---------------------------------------------------------------------------

def test_resize_identity_when_same_size(rng):
    img = _rand_img(rng)
    assert np.array_equal(imagelab.resize_bicubic(img, 16, 16), img)
    assert np.array_equal(imagelab.resize_bilinear(img, 16, 16), img)


def test_bicubic_linear_precision():
    # Catmull-Rom reproduces linear functions exactly away from clamped edges
    ramp = np.linspace(0.1, 0.9, 32)[:, None] * np.ones((1, 32))
    up = imagelab.resize_bicubic(ramp, 64, 32).astype(np.float64)
    x = (np.arange(64) + 0.5) * 0.5 - 0.5
    expect = 0.1 + (0.9 - 0.1) * x / 31.0
    assert np.allclose(up[4:-4, 5], expect[4:-4], atol=1e-6)


def test_bilinear_downsample_2x_averages_pairs(rng):
    # output sample at (i+0.5)*2-0.5 = 2i+0.5 sits midway between inputs 2i, 2i+1
    col = rng.random((8, 1)).astype(np.float32)
    img = np.repeat(col, 6, axis=1)
    down = imagelab.resize_bilinear(img, 4, 6)
    expect = 0.5 * (col[0::2, 0] + col[1::2, 0])
    assert np.allclose(down[:, 2], expect, atol=1e-6)


def test_resize_constant_stays_constant():
    img = np.full((16, 16, 3), 0.37, np.float32)
    for fn in (imagelab.resize_bicubic, imagelab.resize_bilinear):
        out = fn(img, 11, 23)
        assert out.shape == (11, 23, 3)
        assert np.allclose(out, 0.37, atol=1e-6)


def test_resize_rejects_empty_target():
    with pytest.raises(InputError):
        imagelab.resize_bicubic(np.zeros((8, 8)), 0, 8)


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def test_convolve2d_hand_case():
    img = np.array([[1, 2], [3, 4]], np.float32) / 10.0
    out = imagelab.convolve2d(img, [[0, 1, 0], [1, 0, 1], [0, 1, 0]])
    # replicate padding: out[0,0] = top(1) + left(1) + right(2) + bottom(3)
    assert np.isclose(out[0, 0], (1 + 1 + 2 + 3) / 10.0)
    assert np.isclose(out[1, 1], (2 + 3 + 4 + 4) / 10.0)


def test_convolve2d_is_convolution_not_correlation():
    img = np.zeros((5, 5), np.float32)
    img[2, 2] = 1.0
    kernel = np.zeros((3, 3))
    kernel[0, 1] = 1.0  # kernel offset (-1, 0)
    out = imagelab.convolve2d(img, kernel)
    # an impulse reproduces the kernel unflipped; correlation would flip it
    assert out[1, 2] == 1.0 and out[3, 2] == 0.0


def test_convolve2d_rejects_even_kernel():
    with pytest.raises(InputError):
        imagelab.convolve2d(np.zeros((4, 4)), np.ones((2, 3)))


def test_gaussian_kernel_formula():
    w = imagelab.gaussian_kernel1d(3)
    sigma = 0.8  # 0.3*((3-1)/2 - 1) + 0.8
    raw = np.exp(-np.array([1.0, 0.0, 1.0]) / (2 * sigma * sigma))
    assert np.allclose(w, raw / raw.sum())
    assert np.isclose(w.sum(), 1.0)
    assert w[0] == w[2]


def test_gaussian_kernel_rejects_unsupported_size():
    with pytest.raises(InputError):
        imagelab.gaussian_kernel1d(4)


def test_blur_matches_outer_product_kernel(rng):
    # separable path must agree with full 2D convolution of the outer product
    img = rng.random((12, 12)).astype(np.float32)
    sep = imagelab.gaussian_blur(img, 5)
    w = imagelab.gaussian_kernel1d(5)
    full = imagelab.convolve2d(img, np.outer(w, w))
    assert np.allclose(sep, np.clip(full, 0, 1), atol=1e-6)


def test_blur_preserves_constant():
    img = np.full((10, 10, 3), 0.6, np.float32)
    assert np.allclose(imagelab.gaussian_blur(img, 9), 0.6, atol=1e-6)


# ---------------------------------------------------------------------------
# codecs
# ---------------------------------------------------------------------------

def test_jpeg_roundtrip_deterministic(rng):
    img = _rand_img(rng, 24, 24)
    a = imagelab.jpeg_roundtrip(img, 50)
    b = imagelab.jpeg_roundtrip(img, 50)
    assert np.array_equal(a, b)
    assert a.shape == img.shape and a.dtype == np.float32


def test_jpeg_quality_ordering(rng):
    img = _rand_img(rng, 32, 32)
    err_hi = np.mean((imagelab.jpeg_roundtrip(img, 95) - img) ** 2)
    err_lo = np.mean((imagelab.jpeg_roundtrip(img, 10) - img) ** 2)
    assert err_hi < err_lo


def test_jpeg_rejects_bad_quality():
    img = np.zeros((8, 8, 3), np.float32)
    for q in (0, 101):
        with pytest.raises(InputError):
            imagelab.jpeg_roundtrip(img, q)


# ---------------------------------------------------------------------------
# frequency domain
# ---------------------------------------------------------------------------

def test_power_spectrum_parseval(rng):
    img = rng.random((8, 10)).astype(np.float32)
    power = imagelab.fft_power_spectrum(img)
    lhs = power.sum()
    rhs = img.size * np.sum(img.astype(np.float64) ** 2)
    assert np.isclose(lhs, rhs, rtol=1e-10)


def test_power_spectrum_dc_centered():
    img = np.full((8, 8), 0.5, np.float32)
    power = imagelab.fft_power_spectrum(img)
    assert np.isclose(power[4, 4], (0.5 * 64) ** 2)
    power[4, 4] = 0.0
    assert np.allclose(power, 0.0, atol=1e-9)


# ---------------------------------------------------------------------------
# 8-bit I/O
# ---------------------------------------------------------------------------

@given(st.integers(0, 255))
@settings(max_examples=30, deadline=None)
def test_uint8_roundtrip_exact_on_grid(k):
    img = np.full((2, 2), k / 255.0, np.float32)
    assert imagelab.to_uint8(img)[0, 0] == k
    assert imagelab.from_uint8(np.uint8(k) * np.ones((2, 2), np.uint8))[0, 0] == np.float32(k / 255.0)


def test_to_uint8_rounds_half_up():
    assert imagelab.to_uint8(np.array([[0.5 / 255.0]]))[0, 0] == 1


def test_save_load_png_roundtrip(tmp_path, rng):
    img = imagelab.from_uint8(rng.integers(0, 256, (9, 7, 3), dtype=np.uint8))
    path = tmp_path / "x.png"
    imagelab.save_image(path, img)
    assert np.array_equal(imagelab.load_image(path), img)


def test_save_load_grayscale(tmp_path, rng):
    img = imagelab.from_uint8(rng.integers(0, 256, (5, 5), dtype=np.uint8))
    path = tmp_path / "g.png"
    imagelab.save_image(path, img)
    assert np.array_equal(imagelab.load_image(path), img)


def test_load_palette_png_expands_to_rgb(tmp_path):
    from PIL import Image
    pal = Image.new("P", (4, 4), color=3)
    path = tmp_path / "p.png"
    pal.save(path)
    out = imagelab.load_image(path)
    assert out.shape == (4, 4, 3)
