"""Evaluation harness: balanced accuracy at a fixed threshold, the four-way
robustness perturbation suite, per-source held-out scoring, and the
multi-seed paradigm comparison.

Scoring convention throughout: the positive class is "fake", scores are
logistic outputs in [0, 1], and an image is called fake when its score
exceeds the threshold.
"""
from __future__ import annotations

import statistics
from dataclasses import dataclass

import numpy as np

from . import imagelab
from .config import TrainConfig
from .train import _load_dataset, train_expert, train_mixed_baseline, train_sef
from .validation import InputError

PARADIGMS = ("expert_vae", "expert_gan", "mixed", "sef")
DOMAINS = ("vae", "gan")
EVAL_BATCH = 64


def balanced_accuracy(scores, labels, threshold: float = 0.5) -> float:
    """Mean of true-positive and true-negative rates, in percent."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel()
    if scores.shape != labels.shape:
        raise InputError(f"scores {scores.shape} vs labels {labels.shape}")
    pos = labels > 0.5
    n_pos = int(pos.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise InputError("both classes must be present to balance accuracy")
    pred = scores > threshold
    tpr = float(pred[pos].sum()) / n_pos
    tnr = float((~pred[~pos]).sum()) / n_neg
    return 50.0 * (tpr + tnr)


# ---------------------------------------------------------------------------
# perturbations
# ---------------------------------------------------------------------------

def sample_blur_kernel(rng) -> int:
    return int(imagelab.BLUR_KERNEL_SIZES[rng.integers(0, len(imagelab.BLUR_KERNEL_SIZES))])


def sample_crop_pct(rng) -> float:
    return float(rng.uniform(5.0, 20.0))


def sample_jpeg_quality(rng) -> int:
    return int(rng.integers(10, 76))


def sample_noise_var(rng) -> float:
    return float(rng.uniform(5.0, 20.0))


@dataclass(frozen=True)
class PerturbationSpec:
    blur: bool = False
    crop: bool = False
    jpeg: bool = False
    noise: bool = False
    p: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.p <= 1.0:
            raise InputError(f"application probability must be in [0, 1], "
                             f"got {self.p}")

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(n for n in ("blur", "crop", "jpeg", "noise")
                     if getattr(self, n))

    @classmethod
    def from_names(cls, text: str, p: float = 0.5, seed: int = 0) -> "PerturbationSpec":
        text = (text or "none").strip().lower()
        if text == "all":
            return cls(blur=True, crop=True, jpeg=True, noise=True, p=p, seed=seed)
        if text == "none":
            return cls(p=p, seed=seed)
        flags = {}
        for name in text.split(","):
            name = name.strip()
            if name not in ("blur", "crop", "jpeg", "noise"):
                raise InputError(f"unknown perturbation {name!r}")
            flags[name] = True
        return cls(p=p, seed=seed, **flags)


def apply_perturbations(img, spec: PerturbationSpec, rng) -> np.ndarray:
    """Apply the enabled perturbations in the order blur, crop, jpeg, noise,
    each independently with probability spec.p. Disabled stages draw nothing
    from rng, so an all-off spec returns the input bitwise unchanged."""
    out = np.asarray(img, dtype=np.float32)
    if spec.blur and rng.random() < spec.p:
        out = imagelab.gaussian_blur(out, sample_blur_kernel(rng))
    if spec.crop and rng.random() < spec.p:
        h, w = out.shape[:2]
        ph = sample_crop_pct(rng)
        pw = sample_crop_pct(rng)
        nh = max(1, int(round(h * (1.0 - ph / 100.0))))
        nw = max(1, int(round(w * (1.0 - pw / 100.0))))
        top = (h - nh) // 2
        left = (w - nw) // 2
        out = imagelab.resize_bicubic(out[top:top + nh, left:left + nw], h, w)
        out = np.clip(out, 0.0, 1.0).astype(np.float32)
    if spec.jpeg and rng.random() < spec.p:
        out = imagelab.jpeg_roundtrip(out, sample_jpeg_quality(rng))
    if spec.noise and rng.random() < spec.p:
        sigma = float(np.sqrt(sample_noise_var(rng))) / 255.0
        noisy = out + rng.normal(0.0, sigma, out.shape)
        out = np.clip(noisy, 0.0, 1.0).astype(np.float32)
    return out


def center_crop(img, res: int) -> np.ndarray:
    h, w = img.shape[:2]
    if h < res or w < res:
        raise InputError(f"image {h}x{w} smaller than crop {res}")
    top = (h - res) // 2
    left = (w - res) // 2
    return img[top:top + res, left:left + res]


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EvalResult:
    domain: str
    tp: int
    tn: int
    fp: int
    fn: int
    threshold: float
    perturbations: tuple[str, ...] = ()

    @property
    def tpr(self) -> float:
        return self.tp / max(self.tp + self.fn, 1)

    @property
    def tnr(self) -> float:
        return self.tn / max(self.tn + self.fp, 1)

    @property
    def balanced_accuracy(self) -> float:
        return 50.0 * (self.tpr + self.tnr)

    def to_record(self) -> dict:
        return {"record": "eval", "domain": self.domain,
                "balanced_accuracy": round(self.balanced_accuracy, 4),
                "tp": self.tp, "tn": self.tn, "fp": self.fp, "fn": self.fn,
                "threshold": self.threshold,
                "perturbations": list(self.perturbations)}


def _check_disjoint(model_meta: dict, manifest) -> None:
    rng_train = model_meta.get("train_seed_range")
    if not rng_train:
        return
    lo_tr, hi_tr = int(rng_train[0]), int(rng_train[1])
    lo_te, hi_te = manifest.seed_range
    if max(lo_tr, lo_te) <= min(hi_tr, hi_te):
        raise InputError(
            f"test anchor seeds [{lo_te}, {hi_te}] overlap the training "
            f"range [{lo_tr}, {hi_tr}]; evaluation would leak training content")


def _batched_scores(model, images: np.ndarray) -> np.ndarray:
    out = np.empty(len(images), dtype=np.float64)
    for a in range(0, len(images), EVAL_BATCH):
        out[a:a + EVAL_BATCH] = model.scores(images[a:a + EVAL_BATCH])
    return out


def evaluate(model, dataset, spec: PerturbationSpec | None = None) -> dict[str, EvalResult]:
    """Score a detector on a held-out dataset, per forgery source.

    Perturbations (if any) are applied at the stored image size, then every
    image is center-cropped to the model's resolution. Real images are scored
    once and shared by both per-source results. Deterministic given (model,
    dataset, spec): the perturbation stream is seeded from spec.seed alone.
    """
    spec = spec or PerturbationSpec()
    manifest, images = _load_dataset(dataset)
    _check_disjoint(model.meta, manifest)
    res = model.dims.resolution
    rng = np.random.default_rng(np.random.SeedSequence((spec.seed, 0xE7A1)))
    n = len(manifest.entries)
    stacks = {kind: np.empty((n, res, res, 3), dtype=np.float32)
              for kind in ("real", "fake_vae", "fake_gan")}
    for i in range(n):
        for kind in ("real", "fake_vae", "fake_gan"):
            img = apply_perturbations(images.get(i, kind), spec, rng)
            stacks[kind][i] = center_crop(img, res)
    threshold = float(model.meta.get("threshold", 0.5))
    pred = {kind: _batched_scores(model, stacks[kind]) > threshold
            for kind in stacks}
    tn = int((~pred["real"]).sum())
    fp = int(pred["real"].sum())
    results = {}
    for domain, kind in (("vae", "fake_vae"), ("gan", "fake_gan")):
        tp = int(pred[kind].sum())
        fn = n - tp
        results[domain] = EvalResult(domain=domain, tp=tp, tn=tn, fp=fp, fn=fn,
                                     threshold=threshold,
                                     perturbations=spec.names)
    return results


# ---------------------------------------------------------------------------
# paradigm comparison
# ---------------------------------------------------------------------------

@dataclass
class ComparisonTable:
    seeds: tuple[int, ...]
    rows: list[dict]
    medians: dict

    def to_records(self) -> list[dict]:
        header = {"record": "comparison_header", "seeds": list(self.seeds),
                  "paradigms": list(PARADIGMS), "domains": list(DOMAINS)}
        med = {"record": "comparison_medians", "medians": self.medians}
        return [header] + list(self.rows) + [med]

    def format_table(self) -> str:
        lines = []
        lines.append(f"{'seed':>6}  {'paradigm':<11}" +
                     "".join(f"{d:>8}" for d in DOMAINS) + f"{'mean':>8}")
        for seed in self.seeds:
            for paradigm in PARADIGMS:
                vals = {r["domain"]: r["balanced_accuracy"] for r in self.rows
                        if r["seed"] == seed and r["paradigm"] == paradigm}
                mean = sum(vals[d] for d in DOMAINS) / len(DOMAINS)
                lines.append(f"{seed:>6}  {paradigm:<11}" +
                             "".join(f"{vals[d]:>8.2f}" for d in DOMAINS) +
                             f"{mean:>8.2f}")
        lines.append("")
        lines.append(f"{'median':>6}  {'paradigm':<11}" +
                     "".join(f"{d:>8}" for d in DOMAINS) + f"{'mean':>8}")
        for paradigm in PARADIGMS:
            m = self.medians[paradigm]
            lines.append(f"{'':>6}  {paradigm:<11}" +
                         "".join(f"{m[d]:>8.2f}" for d in DOMAINS) +
                         f"{m['mean']:>8.2f}")
        return "\n".join(lines)


def run_paradigm_comparison(cfg: TrainConfig, train_dataset, test_dataset,
                            seeds, log=None) -> ComparisonTable:
    """Train all four paradigms per seed and evaluate each on both held-out
    sources. Emits per-seed rows and per-paradigm medians; asserts nothing."""
    seeds = tuple(int(s) for s in seeds)
    if len(seeds) < 3:
        raise InputError(f"need at least 3 seeds for medians, got {len(seeds)}")
    rows: list[dict] = []
    per_seed_means: dict[str, list[float]] = {p: [] for p in PARADIGMS}
    for seed in seeds:
        cfg_s = cfg.replace(seed=seed)
        ev, _ = train_expert(cfg_s, train_dataset, "vae", log=log)
        eg, _ = train_expert(cfg_s, train_dataset, "gan", log=log)
        mx, _ = train_mixed_baseline(cfg_s, train_dataset, log=log)
        sf, _ = train_sef(cfg_s, train_dataset, ev, eg, log=log)
        for paradigm, model in (("expert_vae", ev), ("expert_gan", eg),
                                ("mixed", mx), ("sef", sf)):
            spec = PerturbationSpec(seed=seed)
            res = evaluate(model, test_dataset, spec)
            bas = []
            for domain in DOMAINS:
                ba = res[domain].balanced_accuracy
                bas.append(ba)
                rows.append({"record": "comparison_row", "seed": seed,
                             "paradigm": paradigm, "domain": domain,
                             "balanced_accuracy": round(ba, 4)})
            per_seed_means[paradigm].append(sum(bas) / len(bas))
            if log:
                log(f"[compare] seed {seed} {paradigm}: " +
                    " ".join(f"{d}={b:.2f}" for d, b in zip(DOMAINS, bas)))
    medians = {}
    for paradigm in PARADIGMS:
        med = {}
        for domain in DOMAINS:
            vals = [r["balanced_accuracy"] for r in rows
                    if r["paradigm"] == paradigm and r["domain"] == domain]
            med[domain] = float(statistics.median(vals))
        med["mean"] = float(statistics.median(per_seed_means[paradigm]))
        medians[paradigm] = med
    return ComparisonTable(seeds=seeds, rows=rows, medians=medians)
