"""The eight forensic image statistics, corpus aggregation, and radar-score
normalization.

Conventions (config knobs where noted, since the source definitions leave them
open): high-frequency cutoff at half the Nyquist radius; GLCM with 256 gray
levels at offset (0, 1), symmetric; edge pixels at Sobel magnitude above
mean + std; block-boundary gradients from backward first differences so a
blocky image scores exactly 1. Sharpness and edge statistics run on a 0..255
grayscale, matching the conventional magnitude of Laplacian-variance numbers.
"""
from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from . import imagelab
from .validation import InputError, check_image, check_same_shape

LAPLACIAN = np.array([[0, 1, 0], [1, -4, 1], [0, 1, 0]], dtype=np.float64)
SOBEL_X = np.array([[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]], dtype=np.float64)
SOBEL_Y = SOBEL_X.T

METRIC_NAMES = ("mse", "psnr", "hf_ratio", "sharpness", "saturation",
                "tex_entropy", "edge_skew", "dct_blockiness")


@dataclass(frozen=True)
class MetricProfile:
    mse: float = 0.0
    psnr: float = 100.0
    hf_ratio: float = 0.0
    sharpness: float = 0.0
    saturation: float = 0.0
    tex_entropy: float = 0.0
    edge_skew: float = 0.0
    dct_blockiness: float = 0.0

    def as_dict(self) -> dict[str, float]:
        return {f.name: float(getattr(self, f.name)) for f in fields(self)}


@dataclass(frozen=True)
class RadarScores:
    scores: dict[str, float]
    alpha: float = 1.2

    def as_dict(self) -> dict[str, float]:
        return dict(self.scores)


def _gray(img) -> np.ndarray:
    img = check_image(img)
    if img.ndim == 3:
        return imagelab.to_grayscale(img).astype(np.float64)
    return img.astype(np.float64)


# ---------------------------------------------------------------------------
# paired metrics
# ---------------------------------------------------------------------------

def mse(a, b) -> float:
    a = check_image(a, name="a")
    b = check_image(b, name="b")
    check_same_shape(a, b)
    d = a.astype(np.float64) - b.astype(np.float64)
    return float(np.mean(d * d))


PSNR_CAP = 100.0
PSNR_MSE_FLOOR = 1e-10


def psnr(a, b) -> float:
    """10*log10(1/mse) for unit-range pixels, capped at 100 when mse < 1e-10."""
    m = mse(a, b)
    if m < PSNR_MSE_FLOOR:
        return PSNR_CAP
    return float(10.0 * np.log10(1.0 / m))


# ---------------------------------------------------------------------------
# unary metrics
# ---------------------------------------------------------------------------

def hf_ratio(img, cutoff: float = 0.5) -> float:
    """Fraction of non-DC spectral power above `cutoff` of the Nyquist radius.

    Radial frequency uses index distance min(i, N-i) per axis, normalized by
    min(H, W)/2; a constant image returns 0 (the 0/0 convention).
    """
    g = _gray(img)
    h, w = g.shape
    power = np.abs(np.fft.fft2(g)) ** 2
    fy = np.minimum(np.arange(h), h - np.arange(h)).astype(np.float64)
    fx = np.minimum(np.arange(w), w - np.arange(w)).astype(np.float64)
    radius = np.sqrt(fy[:, None] ** 2 + fx[None, :] ** 2) / (min(h, w) / 2.0)
    nondc = np.ones_like(power, dtype=bool)
    nondc[0, 0] = False
    total = float(power[nondc].sum())
    if total <= 0.0:
        return 0.0
    high = float(power[nondc & (radius > cutoff)].sum())
    return high / total


def sharpness(img) -> float:
    """Population variance of the 3x3 Laplacian response on 0..255 grayscale."""
    g = _gray(img) * 255.0
    from scipy import ndimage
    resp = ndimage.convolve(g, LAPLACIAN, mode="nearest")
    return float(resp.var())


def saturation_mean(img) -> float:
    img = check_image(img, channels=3)
    return float(imagelab.rgb_to_hsv_saturation(img).mean())


def glcm(img, levels: int = 256, offset: tuple[int, int] = (0, 1)) -> np.ndarray:
    """Symmetric gray-level co-occurrence probability matrix."""
    g = _gray(img)
    q = np.clip(np.rint(g * (levels - 1)), 0, levels - 1).astype(np.int64)
    dy, dx = offset
    if dy or dx:
        a = q[max(0, -dy):q.shape[0] - max(0, dy), max(0, -dx):q.shape[1] - max(0, dx)]
        b = q[max(0, dy):q.shape[0] + min(0, dy), max(0, dx):q.shape[1] + min(0, dx)]
    else:
        raise InputError("offset must be nonzero")
    counts = np.bincount((a * levels + b).ravel(), minlength=levels * levels)
    mat = counts.reshape(levels, levels).astype(np.float64)
    mat = mat + mat.T  # symmetric pairing
    return mat / mat.sum()


def tex_entropy(img, levels: int = 256, offset: tuple[int, int] = (0, 1)) -> float:
    p = glcm(img, levels=levels, offset=offset)
    nz = p[p > 0]
    return float(-(nz * np.log2(nz)).sum())


def fisher_skew(values: np.ndarray) -> float:
    """g1 = m3 / m2^(3/2) over a sample; 0 when fewer than 3 values or m2 = 0."""
    v = np.asarray(values, dtype=np.float64).ravel()
    if v.size < 3:
        return 0.0
    d = v - v.mean()
    m2 = float(np.mean(d * d))
    if m2 <= 0.0:
        return 0.0
    m3 = float(np.mean(d * d * d))
    return m3 / m2 ** 1.5


def _sobel_magnitude(g255: np.ndarray) -> np.ndarray:
    from scipy import ndimage
    gx = ndimage.convolve(g255, SOBEL_X, mode="nearest")
    gy = ndimage.convolve(g255, SOBEL_Y, mode="nearest")
    return np.hypot(gx, gy)


def edge_skew(img) -> float:
    """Fisher skewness of Sobel gradient magnitudes at edge pixels.

    Edge pixels are those with magnitude above mean + std of the magnitude
    map (0..255 grayscale).
    """
    g = _gray(img) * 255.0
    mag = _sobel_magnitude(g)
    thr = mag.mean() + mag.std()
    edges = mag[mag > thr]
    return fisher_skew(edges)


def dct_blockiness(img, gradient: str = "diff") -> float:
    """Gradient energy on 8x8 block boundaries over total gradient energy.

    Boundary pixels sit at row/col indices = 0 (mod 8), image borders
    excluded. The default gradient is the backward first difference, which
    lands all of a block-constant image's energy exactly on the boundaries
    (ratio 1); gradient="sobel" uses Sobel magnitude instead.
    """
    g = _gray(img)
    h, w = g.shape
    if h % 8 or w % 8:
        raise InputError(f"dims must be multiples of 8, got {h}x{w}")
    if gradient == "diff":
        energy = np.zeros((h, w))
        dy = g[1:, :] - g[:-1, :]
        dx = g[:, 1:] - g[:, :-1]
        energy[1:, :] += dy * dy
        energy[:, 1:] += dx * dx
    elif gradient == "sobel":
        m = _sobel_magnitude(g)
        energy = m * m
    else:
        raise InputError(f"gradient must be 'diff' or 'sobel', got {gradient!r}")
    total = float(energy.sum())
    if total <= 0.0:
        return 0.0
    rows = np.arange(8, h, 8)
    cols = np.arange(8, w, 8)
    boundary = np.zeros((h, w), dtype=bool)
    boundary[rows, :] = True
    boundary[:, cols] = True
    return float(energy[boundary].sum()) / total


# ---------------------------------------------------------------------------
# aggregation and normalization
# ---------------------------------------------------------------------------

def image_profile(img, reference=None) -> MetricProfile:
    """All eight metrics for one image (mse/psnr against `reference` if given)."""
    img = check_image(img, channels=3)
    if reference is not None:
        m = mse(img, reference)
        p = psnr(img, reference)
    else:
        m, p = 0.0, PSNR_CAP
    return MetricProfile(
        mse=m, psnr=p, hf_ratio=hf_ratio(img), sharpness=sharpness(img),
        saturation=saturation_mean(img), tex_entropy=tex_entropy(img),
        edge_skew=edge_skew(img), dct_blockiness=dct_blockiness(img))


def corpus_profile(images, reference=None, psnr_mode: str = "per_image") -> MetricProfile:
    """Arithmetic mean of per-image metrics over a corpus.

    psnr_mode="per_image" (default) averages each image's PSNR; "global"
    computes PSNR from the corpus-mean MSE instead. The two disagree on any
    corpus with varying per-image MSE.
    """
    images = list(images)
    if not images:
        raise InputError("empty corpus")
    if psnr_mode not in ("per_image", "global"):
        raise InputError(f"psnr_mode must be per_image or global, got {psnr_mode!r}")
    refs = list(reference) if reference is not None else [None] * len(images)
    if len(refs) != len(images):
        raise InputError(f"{len(images)} images but {len(refs)} references")
    acc = {name: 0.0 for name in METRIC_NAMES}
    for img, ref in zip(images, refs):
        prof = image_profile(img, ref)
        for name in METRIC_NAMES:
            acc[name] += getattr(prof, name)
    out = {name: acc[name] / len(images) for name in METRIC_NAMES}
    if psnr_mode == "global" and reference is not None:
        m = out["mse"]
        out["psnr"] = PSNR_CAP if m < PSNR_MSE_FLOOR else float(10.0 * np.log10(1.0 / m))
    return MetricProfile(**out)


def radar_scores(real_ref: MetricProfile, vae: MetricProfile, gan: MetricProfile,
                 alpha: float = 1.2) -> tuple[RadarScores, RadarScores]:
    """Per-metric proximity s = 1 - |v - r| / (alpha * d), d = max over candidates.

    The farther candidate on each metric scores exactly 1 - 1/alpha; a
    candidate equal to the reference scores exactly 1. When both candidates
    sit on the reference (d = 0) both score 1 by convention.
    """
    if not alpha > 1.0:
        raise InputError(f"alpha must be > 1, got {alpha}")
    out_v: dict[str, float] = {}
    out_g: dict[str, float] = {}
    for name in METRIC_NAMES:
        r = getattr(real_ref, name)
        dv = abs(getattr(vae, name) - r)
        dg = abs(getattr(gan, name) - r)
        d = max(dv, dg)
        if d == 0.0:
            out_v[name] = 1.0
            out_g[name] = 1.0
        else:
            # dv == d must give exactly 1 - 1/alpha; dv/(alpha*d) can be an
            # ulp off from 1/alpha, so the extreme candidate is special-cased
            out_v[name] = 1.0 - (1.0 / alpha if dv == d else dv / (alpha * d))
            out_g[name] = 1.0 - (1.0 / alpha if dg == d else dg / (alpha * d))
    return RadarScores(out_v, alpha), RadarScores(out_g, alpha)
