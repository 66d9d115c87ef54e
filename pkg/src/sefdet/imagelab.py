"""Pixel-level primitives: color transforms, resampling, convolution,
frequency transforms, and lossy-codec round trips.

Images are numpy float32 arrays shaped (H, W) or (H, W, 3) with samples in
[0, 1]. Every function here is pure and deterministic: identical input and
parameters produce bit-identical output.
"""
from __future__ import annotations

import io

import numpy as np
from PIL import Image as _PILImage
from scipy import ndimage

from .validation import InputError, check_image

GRAY_WEIGHTS = (0.299, 0.587, 0.114)
BLUR_KERNEL_SIZES = (3, 5, 7, 9)


# ---------------------------------------------------------------------------
# color
# ---------------------------------------------------------------------------

def to_grayscale(img) -> np.ndarray:
    """Luma projection: 0.299 R + 0.587 G + 0.114 B."""
    img = check_image(img, channels=3)
    r, g, b = GRAY_WEIGHTS
    out = r * img[:, :, 0] + g * img[:, :, 1] + b * img[:, :, 2]
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def rgb_to_hsv_saturation(img) -> np.ndarray:
    """Per-pixel HSV saturation S = (max - min) / max, with S = 0 when max = 0."""
    img = check_image(img, channels=3)
    cmax = img.max(axis=2)
    cmin = img.min(axis=2)
    out = np.zeros_like(cmax)
    np.divide(cmax - cmin, cmax, out=out, where=cmax > 0)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


# ---------------------------------------------------------------------------
# resampling
# ---------------------------------------------------------------------------

def _catmull_rom_weights(t: np.ndarray) -> list[np.ndarray]:
    # Cubic convolution with a = -0.5, taps at offsets -1, 0, 1, 2.
    w0 = ((-0.5 * t + 1.0) * t - 0.5) * t
    w1 = (1.5 * t - 2.5) * t * t + 1.0
    w2 = ((-1.5 * t + 2.0) * t + 0.5) * t
    w3 = (0.5 * t - 0.5) * t * t
    return [w0, w1, w2, w3]


def _linear_weights(t: np.ndarray) -> list[np.ndarray]:
    return [1.0 - t, t]


_KERNELS = {"cubic": (_catmull_rom_weights, 1), "linear": (_linear_weights, 0)}


def _resample_axis(arr: np.ndarray, out_n: int, axis: int, kind: str) -> np.ndarray:
    weight_fn, first_tap = _KERNELS[kind]
    arr = np.moveaxis(arr, axis, 0)
    in_n = arr.shape[0]
    # center-aligned sample positions in source coordinates
    x = (np.arange(out_n, dtype=np.float64) + 0.5) * (in_n / out_n) - 0.5
    base = np.floor(x).astype(np.int64)
    weights = weight_fn(x - base)
    shape = (out_n,) + (1,) * (arr.ndim - 1)
    out = np.zeros((out_n,) + arr.shape[1:], dtype=np.float64)
    for k, w in enumerate(weights):
        idx = np.clip(base - first_tap + k, 0, in_n - 1)
        out += w.reshape(shape) * arr[idx]
    return np.moveaxis(out, 0, axis)


def _resize(img, out_h: int, out_w: int, kind: str) -> np.ndarray:
    img = check_image(img)
    if out_h < 1 or out_w < 1:
        raise InputError(f"target dimensions must be positive, got {out_h}x{out_w}")
    out = _resample_axis(img.astype(np.float64), out_h, 0, kind)
    out = _resample_axis(out, out_w, 1, kind)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def resize_bicubic(img, out_h: int, out_w: int) -> np.ndarray:
    """Catmull-Rom bicubic resize (a = -0.5), edge-clamped, clamped to [0, 1].

    Interpolating, not area-averaging: downsampling deliberately aliases
    content above the target Nyquist rate, matching the classical bicubic
    degradation operator.
    """
    return _resize(img, out_h, out_w, "cubic")


def resize_bilinear(img, out_h: int, out_w: int) -> np.ndarray:
    """Center-aligned bilinear resize, edge-clamped."""
    return _resize(img, out_h, out_w, "linear")


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def convolve2d(img, kernel) -> np.ndarray:
    """True 2D convolution of a single-channel image with replicate padding.

    Output is NOT clamped; gradient kernels legitimately produce negative
    responses.
    """
    img = check_image(img, channels=1)
    kernel = np.asarray(kernel, dtype=np.float64)
    if kernel.ndim != 2 or kernel.shape[0] % 2 == 0 or kernel.shape[1] % 2 == 0:
        raise InputError(f"kernel must be 2D with odd sides, got shape {kernel.shape}")
    return ndimage.convolve(img.astype(np.float64), kernel, mode="nearest")


def gaussian_sigma(kernel_size: int) -> float:
    """Sigma convention tied to kernel size: 0.3 * ((size - 1)/2 - 1) + 0.8."""
    return 0.3 * ((kernel_size - 1) * 0.5 - 1.0) + 0.8


def gaussian_kernel1d(kernel_size: int) -> np.ndarray:
    if kernel_size not in BLUR_KERNEL_SIZES:
        raise InputError(f"kernel_size must be in {BLUR_KERNEL_SIZES}, got {kernel_size}")
    sigma = gaussian_sigma(kernel_size)
    half = (kernel_size - 1) // 2
    x = np.arange(-half, half + 1, dtype=np.float64)
    w = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return w / w.sum()


def gaussian_blur(img, kernel_size: int) -> np.ndarray:
    """Separable normalized Gaussian blur with replicate padding, per channel."""
    img = check_image(img)
    w = gaussian_kernel1d(kernel_size)
    out = img.astype(np.float64)
    if out.ndim == 2:
        out = ndimage.convolve1d(out, w, axis=0, mode="nearest")
        out = ndimage.convolve1d(out, w, axis=1, mode="nearest")
    else:
        for axis in (0, 1):
            out = ndimage.convolve1d(out, w, axis=axis, mode="nearest")
    return np.clip(out, 0.0, 1.0).astype(np.float32)


# ---------------------------------------------------------------------------
# codecs
# ---------------------------------------------------------------------------

def jpeg_roundtrip(img, quality: int) -> np.ndarray:
    """Encode to baseline JPEG at the given quality and decode back.

    Chroma subsampling is 4:2:0 below quality 90 and 4:4:4 at or above, the
    common encoder convention.
    """
    img = check_image(img, channels=3)
    quality = int(quality)
    if not 1 <= quality <= 100:
        raise InputError(f"quality must be in [1, 100], got {quality}")
    subsampling = 2 if quality < 90 else 0
    buf = io.BytesIO()
    _PILImage.fromarray(to_uint8(img)).save(
        buf, format="JPEG", quality=quality, subsampling=subsampling)
    decoded = _PILImage.open(io.BytesIO(buf.getvalue()))
    return from_uint8(np.asarray(decoded))


# ---------------------------------------------------------------------------
# frequency domain
# ---------------------------------------------------------------------------

def fft_power_spectrum(img) -> np.ndarray:
    """Magnitude-squared 2D DFT of a single-channel image, zero-frequency centered."""
    img = check_image(img, channels=1)
    spec = np.fft.fftshift(np.fft.fft2(img.astype(np.float64)))
    return (spec.real ** 2 + spec.imag ** 2)


# ---------------------------------------------------------------------------
# 8-bit I/O
# ---------------------------------------------------------------------------

def to_uint8(img: np.ndarray) -> np.ndarray:
    # half-up, not banker's rounding: 0.5/255 maps to 1
    scaled = np.asarray(img, dtype=np.float64) * 255.0
    return np.clip(np.floor(scaled + 0.5), 0, 255).astype(np.uint8)


def from_uint8(arr: np.ndarray) -> np.ndarray:
    return (np.asarray(arr, dtype=np.float32) / np.float32(255.0))


def save_image(path, img) -> None:
    """Persist as 8-bit PNG (grayscale for 2D input, RGB for 3-channel)."""
    arr = to_uint8(check_image(img))
    mode = "L" if arr.ndim == 2 else "RGB"
    _PILImage.fromarray(arr, mode=mode).save(path, format="PNG")


def load_image(path) -> np.ndarray:
    """Load an 8-bit PNG/JPEG into float32 [0, 1]; palettes expand to RGB."""
    with _PILImage.open(path) as im:
        if im.mode not in ("L", "RGB"):
            im = im.convert("RGB")
        arr = np.asarray(im)
    return from_uint8(arr)
