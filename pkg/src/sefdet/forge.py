"""Aligned training data: procedural anchor images, two artifact-complementary
fake simulators, mask-aware forgery augmentation, and dataset building.

The two simulators stand in for generative reconstruction pipelines and are
engineered so their artifact signatures are disjoint:

* VAE_SIM: 8x average-pool to a coarse latent, uniform quantization, bilinear
  upsampling, mild blur. Residual is low-amplitude and low-frequency; all fine
  texture is destroyed.
* GAN_SIM: interpolating 4x bicubic downsample (which aliases fine texture
  into mid-frequency lumps), two stride-2 transposed convolutions with
  deliberately uneven overlap (period-2 checkerboard modulation), a mild
  unsharp pass, and desaturation. The blue channel's overlap imbalance has
  the opposite sign, so the checkerboard is chromatic.

Both families destroy the anchors' luma grain, a cue any detector can share.
What makes joint training genuinely conflicted is high-frequency chroma:
anchors carry i.i.d. red-minus-blue grain, VAE_SIM's blur erases it, and
GAN_SIM's chromatic checkerboard overshoots it, so reals sit strictly between
the families on that axis and the gradient a chroma-energy feature receives
from one family points against the gradient from the other.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import imagelab
from .validation import GenerationError, InputError, check_image, check_same_shape

VAE_SIM = "VAE_SIM"
GAN_SIM = "GAN_SIM"
DOMAINS = (VAE_SIM, GAN_SIM)

FOREGROUND = "FOREGROUND"
BACKGROUND = "BACKGROUND"

GENERATOR_VERSION = "sefdet-forge-1"

# procedural anchor composition (calibrated against the metric orderings)
GRAIN_SIGMA = 0.030          # broadband pixel grain, luma only
CHROMA_GRAIN_SIGMA = 0.012   # broadband red-minus-blue grain
MID_TEXTURE_AMP = 0.085      # 3-6 px value noise, aliased by GAN_SIM's downsample
COARSE_AMP = 0.24            # large-scale fbm driving VAE_SIM crease sharpness
SHAPE_FEATHER = 1.4          # px, soft shape edges (keeps step edges out of fakes)

# GAN_SIM knobs
CHECKER_UNEVENNESS = 0.02    # per-stage transposed-conv overlap imbalance
CHECKER_CHROMA = 2.0         # blue-channel imbalance is -CHECKER_CHROMA times this
UNSHARP_AMOUNT = 0.6
SAT_SCALE = 0.84

# VAE_SIM knobs
QUANT_BITS = 6


# ---------------------------------------------------------------------------
# procedural anchors
# ---------------------------------------------------------------------------

def _value_noise(rng: np.random.Generator, h: int, w: int, cells: int) -> np.ndarray:
    """Smoothstep-interpolated lattice noise in [0, 1], shape (h, w)."""
    lattice = rng.random((cells + 1, cells + 1))
    ys = np.linspace(0.0, cells, h, endpoint=False) + 0.5 * cells / h
    xs = np.linspace(0.0, cells, w, endpoint=False) + 0.5 * cells / w
    yi = np.minimum(ys.astype(np.int64), cells - 1)
    xi = np.minimum(xs.astype(np.int64), cells - 1)
    ty = ys - yi
    tx = xs - xi
    ty = ty * ty * (3.0 - 2.0 * ty)
    tx = tx * tx * (3.0 - 2.0 * tx)
    a = lattice[np.ix_(yi, xi)]
    b = lattice[np.ix_(yi, xi + 1)]
    c = lattice[np.ix_(yi + 1, xi)]
    d = lattice[np.ix_(yi + 1, xi + 1)]
    top = a + (b - a) * tx[None, :]
    bot = c + (d - c) * tx[None, :]
    return top + (bot - top) * ty[:, None]


def _fbm(rng: np.random.Generator, h: int, w: int, base_cells: int,
         octaves: int, gain: float = 0.55) -> np.ndarray:
    total = np.zeros((h, w))
    amp = 1.0
    norm = 0.0
    cells = base_cells
    for _ in range(octaves):
        total += amp * _value_noise(rng, h, w, cells)
        norm += amp
        amp *= gain
        cells = min(cells * 2, min(h, w) // 2)
    return total / norm


def _shape_alpha(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    """Feathered coverage in [0, 1] for one random rectangle or ellipse."""
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    cy = rng.uniform(0.15, 0.85) * h
    cx = rng.uniform(0.15, 0.85) * w
    ry = rng.uniform(0.10, 0.32) * h
    rx = rng.uniform(0.10, 0.32) * w
    if rng.random() < 0.5:
        # signed distance to an axis-aligned rectangle
        dist = np.maximum(np.abs(yy - cy) - ry, np.abs(xx - cx) - rx)
    else:
        # approximate ellipse distance via the scaled radial overshoot
        r = np.sqrt(((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2)
        dist = (r - 1.0) * min(rx, ry)
    t = np.clip(0.5 - dist / SHAPE_FEATHER, 0.0, 1.0)
    return t * t * (3.0 - 2.0 * t)


def gen_procedural_real(seed: int, h: int, w: int) -> np.ndarray:
    """Deterministic anchor image: color gradient + coarse fbm + 2..6 feathered
    shapes + mid-scale texture + broadband grain.

    The grain and mid-scale texture guarantee non-degenerate Laplacian variance
    and a high-frequency ratio strictly above both simulators' outputs.
    """
    if h % 8 or w % 8:
        raise InputError(f"dims must be multiples of 8, got {h}x{w}")
    if h < 32 or w < 32:
        raise InputError(f"dims must be at least 32, got {h}x{w}")
    rng = np.random.default_rng(np.random.SeedSequence((int(seed), 0xA11C)))

    c0 = rng.uniform(0.15, 0.85, size=3)
    c1 = rng.uniform(0.15, 0.85, size=3)
    theta = rng.uniform(0.0, 2.0 * np.pi)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    proj = (np.cos(theta) * xx / w + np.sin(theta) * yy / h)
    tgrad = (proj - proj.min()) / max(proj.max() - proj.min(), 1e-9)
    img = c0[None, None, :] + (c1 - c0)[None, None, :] * tgrad[:, :, None]

    coarse = _fbm(rng, h, w, base_cells=rng.integers(3, 6), octaves=3) - 0.5
    img += COARSE_AMP * coarse[:, :, None]

    n_shapes = rng.integers(2, 7)
    for _ in range(n_shapes):
        alpha = _shape_alpha(rng, h, w)
        color = rng.uniform(0.1, 0.9, size=3)
        img = img * (1.0 - alpha[:, :, None]) + color[None, None, :] * alpha[:, :, None]

    mid = _value_noise(rng, h, w, max(h, w) // 4) - 0.5
    mid += 0.6 * (_value_noise(rng, h, w, max(h, w) // 3) - 0.5)
    img += MID_TEXTURE_AMP * mid[:, :, None]

    grain = rng.normal(0.0, GRAIN_SIGMA, size=(h, w))
    img += grain[:, :, None]

    # anti-correlated red/blue grain: zero-mean in luma, pure chroma noise
    chroma = rng.normal(0.0, CHROMA_GRAIN_SIGMA, size=(h, w))
    img[:, :, 0] += chroma
    img[:, :, 2] -= chroma

    return np.clip(img, 0.0, 1.0).astype(np.float32)


# ---------------------------------------------------------------------------
# artifact simulators
# ---------------------------------------------------------------------------

def _check_aligned(img, name: str) -> np.ndarray:
    img = check_image(img, channels=3, multiple_of=8, name=name)
    if img.shape[0] < 8 or img.shape[1] < 8:
        raise InputError(f"{name}: dims must be at least 8x8")
    return img


def simulate_vae_artifact(img, quant_bits: int = QUANT_BITS) -> np.ndarray:
    """Latent-compression artifact family: smooth, homogeneous, low-frequency."""
    img = _check_aligned(img, "img")
    h, w = img.shape[:2]
    latent = img.reshape(h // 8, 8, w // 8, 8, 3).mean(axis=(1, 3))
    levels = float(2 ** quant_bits - 1)
    latent = np.round(latent * levels) / levels
    up = imagelab.resize_bilinear(latent, h, w)
    return imagelab.gaussian_blur(up, 3)


def _tconv_axis_up2(arr: np.ndarray, axis: int, unevenness) -> np.ndarray:
    """Stride-2 transposed convolution along one axis with a 3-tap kernel.

    Kernel taps are ((1-u)/2, 1+u, (1-u)/2): even output positions sum two
    edge taps (gain 1-u), odd positions get the center tap (gain 1+u), so a
    constant input gains a period-2 modulation of relative amplitude u.
    unevenness may be a scalar or per-channel (broadcast over the last axis).
    """
    arr = np.moveaxis(arr, axis, 0)
    u = np.asarray(unevenness, dtype=arr.dtype)
    edge = (1.0 - u) * 0.5
    center = 1.0 + u
    prev = np.concatenate([arr[:1], arr[:-1]], axis=0)  # replicate at the border
    even = edge * arr + edge * prev
    odd = center * arr
    out = np.empty((arr.shape[0] * 2,) + arr.shape[1:], dtype=arr.dtype)
    out[0::2] = even
    out[1::2] = odd
    return np.moveaxis(out, 0, axis)


def simulate_gan_artifact(img, unevenness: float = CHECKER_UNEVENNESS,
                          checker_chroma: float = CHECKER_CHROMA,
                          unsharp_amount: float = UNSHARP_AMOUNT,
                          sat_scale: float = SAT_SCALE) -> np.ndarray:
    """Upsampling artifact family: chromatic checkerboard plus desaturation."""
    img = _check_aligned(img, "img")
    h, w = img.shape[:2]
    low = imagelab.resize_bicubic(img, h // 4, w // 4).astype(np.float64)
    # opposite-sign blue imbalance makes the checkerboard a chroma pattern
    u = unevenness * np.array([1.0, 1.0, -checker_chroma])
    up = low
    for _ in range(2):
        up = _tconv_axis_up2(up, 0, u)
        up = _tconv_axis_up2(up, 1, u)
    up = np.clip(up, 0.0, 1.0)
    blurred = imagelab.gaussian_blur(up.astype(np.float32), 3).astype(np.float64)
    up = np.clip(up + unsharp_amount * (up - blurred), 0.0, 1.0)
    # scale HSV saturation by sat_scale, preserving hue and value
    cmax = up.max(axis=2, keepdims=True)
    out = cmax - sat_scale * (cmax - up)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


# ---------------------------------------------------------------------------
# masks and region compositing
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MaskSpec:
    kind: str = FOREGROUND
    seed: int = 0
    coverage_range: tuple[float, float] = (0.3, 0.7)

    def __post_init__(self):
        if self.kind not in (FOREGROUND, BACKGROUND):
            raise InputError(f"mask kind must be FOREGROUND or BACKGROUND, got {self.kind!r}")
        lo, hi = self.coverage_range
        if not (0.0 <= lo < hi <= 1.0):
            raise InputError(f"bad coverage range {self.coverage_range}")


MASK_MAX_RETRIES = 64


def gen_mask(spec: MaskSpec, h: int, w: int) -> np.ndarray:
    """Binary uint8 mask from a union of 1..4 random rectangles/ellipses.

    The shape union's coverage must land in spec.coverage_range; shapes are
    resampled up to 64 times before giving up. BACKGROUND returns the
    complement of the same shape union, so FOREGROUND and BACKGROUND with one
    seed are exact complements.
    """
    if h < 1 or w < 1:
        raise InputError(f"bad mask dims {h}x{w}")
    for attempt in range(MASK_MAX_RETRIES):
        rng = np.random.default_rng(np.random.SeedSequence((int(spec.seed), 0x3A5C, attempt)))
        union = np.zeros((h, w), dtype=bool)
        for _ in range(int(rng.integers(1, 5))):
            union |= _shape_alpha(rng, h, w) >= 0.5
        cov = float(union.mean())
        lo, hi = spec.coverage_range
        if lo <= cov <= hi:
            mask = union if spec.kind == FOREGROUND else ~union
            return mask.astype(np.uint8)
    raise GenerationError(
        f"mask coverage {spec.coverage_range} unsatisfiable after {MASK_MAX_RETRIES} tries")


def apply_mask_aug(fake, real, mask) -> np.ndarray:
    """Composite M*fake + (1-M)*real by exact pixel selection (no blending)."""
    fake = check_image(fake, channels=3, name="fake")
    real = check_image(real, channels=3, name="real")
    mask = np.asarray(mask)
    check_same_shape(fake, real, ("fake", "real"))
    if mask.shape != fake.shape[:2]:
        raise InputError(f"mask shape {mask.shape} does not match image {fake.shape[:2]}")
    return np.where(mask.astype(bool)[:, :, None], fake, real)


# ---------------------------------------------------------------------------
# dataset building
# ---------------------------------------------------------------------------

@dataclass
class ManifestEntry:
    index: int
    seed: int
    height: int
    width: int
    real: str
    fake_vae: str
    fake_gan: str
    mask: str | None = None

    def to_record(self) -> dict:
        return {
            "record": "entry", "index": self.index, "seed": self.seed,
            "height": self.height, "width": self.width, "real": self.real,
            "fake_vae": self.fake_vae, "fake_gan": self.fake_gan, "mask": self.mask,
        }


@dataclass
class DatasetManifest:
    root: Path
    entries: list[ManifestEntry]
    generator_version: str = GENERATOR_VERSION
    dataset_seed: int = 0
    aug_prob: float = 0.5

    @property
    def seed_range(self) -> tuple[int, int]:
        seeds = [e.seed for e in self.entries]
        return (min(seeds), max(seeds))

    @property
    def image_size(self) -> tuple[int, int]:
        sizes = {(e.height, e.width) for e in self.entries}
        if len(sizes) != 1:
            raise InputError(f"manifest mixes image sizes: {sorted(sizes)}")
        return sizes.pop()

    def path(self, rel: str) -> Path:
        return Path(self.root) / rel

    def save(self, path=None) -> Path:
        path = Path(path) if path else Path(self.root) / "manifest.jsonl"
        header = {
            "record": "header", "generator_version": self.generator_version,
            "dataset_seed": self.dataset_seed, "aug_prob": self.aug_prob,
            "n": len(self.entries),
        }
        rows = [header] + [e.to_record() for e in self.entries]
        from .records import write_records
        write_records(path, rows)
        return path


def load_manifest(path) -> DatasetManifest:
    from .records import read_records
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.jsonl"
    rows = read_records(path)
    if not rows or rows[0].get("record") != "header":
        raise InputError(f"{path}: missing manifest header record")
    header = rows[0]
    entries = [
        ManifestEntry(index=r["index"], seed=r["seed"], height=r["height"],
                      width=r["width"], real=r["real"], fake_vae=r["fake_vae"],
                      fake_gan=r["fake_gan"], mask=r.get("mask"))
        for r in rows[1:]
    ]
    man = DatasetManifest(root=path.parent, entries=entries,
                          generator_version=header["generator_version"],
                          dataset_seed=header["dataset_seed"],
                          aug_prob=header["aug_prob"])
    _check_alignment(man)
    return man


def _check_alignment(man: DatasetManifest) -> None:
    for e in man.entries:
        if e.height % 8 or e.width % 8:
            raise InputError(f"entry {e.index}: dims {e.height}x{e.width} not multiples of 8")
        for rel in (e.real, e.fake_vae, e.fake_gan) + ((e.mask,) if e.mask else ()):
            if not man.path(rel).exists():
                raise InputError(f"entry {e.index}: missing file {rel}")


def build_dataset(n: int, h: int, w: int, seed: int, out_dir,
                  aug_prob: float = 0.5) -> DatasetManifest:
    """Generate n aligned (real, fake_vae, fake_gan[, mask]) quadruples on disk.

    Entry i's anchor seed is ``seed + i`` (a literal range, so train/test
    disjointness is checkable from manifests alone). With probability
    aug_prob an entry gets a random FOREGROUND/BACKGROUND mask and both its
    stored fakes are the mask-aware composites of fake and real.
    """
    if n < 1:
        raise InputError(f"n must be >= 1, got {n}")
    if not 0.0 <= aug_prob <= 1.0:
        raise InputError(f"aug_prob must be in [0, 1], got {aug_prob}")
    out_dir = Path(out_dir)
    for sub in ("real", "fake_vae", "fake_gan", "mask"):
        (out_dir / sub).mkdir(parents=True, exist_ok=True)

    entries = []
    for i in range(n):
        entry_seed = int(seed) + i
        real = gen_procedural_real(entry_seed, h, w)
        fakes = {
            "fake_vae": simulate_vae_artifact(real),
            "fake_gan": simulate_gan_artifact(real),
        }
        aug_rng = np.random.default_rng(np.random.SeedSequence((entry_seed, 0xA06)))
        mask_rel = None
        if aug_rng.random() < aug_prob:
            kind = FOREGROUND if aug_rng.random() < 0.5 else BACKGROUND
            mask = gen_mask(MaskSpec(kind=kind, seed=entry_seed), h, w)
            mask_rel = f"mask/{i:05d}.png"
            imagelab.save_image(out_dir / mask_rel, mask.astype(np.float32))
            for key in fakes:
                fakes[key] = apply_mask_aug(fakes[key], real, mask)

        paths = {"real": f"real/{i:05d}.png"}
        imagelab.save_image(out_dir / paths["real"], real)
        for key, img in fakes.items():
            paths[key] = f"{key}/{i:05d}.png"
            imagelab.save_image(out_dir / paths[key], img)

        entries.append(ManifestEntry(
            index=i, seed=entry_seed, height=h, width=w, real=paths["real"],
            fake_vae=paths["fake_vae"], fake_gan=paths["fake_gan"], mask=mask_rel))

    man = DatasetManifest(root=out_dir, entries=entries, dataset_seed=int(seed),
                          aug_prob=aug_prob)
    man.save()
    return man


class ManifestImages:
    """Lazy image cache over a manifest; arrays are float32 in [0, 1]."""

    KINDS = ("real", "fake_vae", "fake_gan", "mask")

    def __init__(self, manifest: DatasetManifest):
        self.manifest = manifest
        self._cache: dict[tuple[int, str], np.ndarray] = {}

    def __len__(self):
        return len(self.manifest.entries)

    def get(self, index: int, kind: str) -> np.ndarray:
        key = (index, kind)
        if key not in self._cache:
            if kind not in self.KINDS:
                raise InputError(f"unknown image kind {kind!r}")
            entry = self.manifest.entries[index]
            rel = getattr(entry, kind)
            if rel is None:
                raise InputError(f"entry {index} has no {kind}")
            self._cache[key] = imagelab.load_image(self.manifest.path(rel))
        return self._cache[key]
