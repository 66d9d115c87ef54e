"""Two-stage detector training.

Stage 1 trains one LoRA adapter set and linear head per forgery source on
the frozen backbone (a single-source run is the lambda = 1 or lambda = 0
special case of the mixed-source baseline, and shares its batch stream, so
degenerate mixtures reproduce the corresponding single-source run exactly).
Stage 2 composes two stage-1 adapter sets, trains a gate and fusion head at
the base rate, and fine-tunes only the last unfreeze_k blocks' adapters at a
damped rate gamma * lr. Blocks below the unfreeze point never receive
gradients, so their adapters stay bitwise identical.

Batches draw from three independent seeded streams (entry choice, source
choice, crop offsets) so changing one sampling policy cannot shift another.
"""
from __future__ import annotations

import time
from pathlib import Path

import numpy as np

from .checkpoint import Checkpoint, checkpoint_from_expert, checkpoint_from_sef, \
    model_from_checkpoint
from .config import TrainConfig
from .forge import DatasetManifest, ManifestImages, load_manifest
from .model import ExpertModel, ModelDims, SefModel, features_backward, \
    features_forward, head_backward, head_forward, init_backbone, init_gate, \
    init_head, init_lora, params_hash, sef_backward, sef_forward, sigmoid
from .validation import InputError, StateError, TrainingDiverged

STREAM_STAGE1 = 0x57A6E1
STREAM_STAGE2 = 0x57A6E2

LABEL_REAL = 0.0
LABEL_FAKE = 1.0


# ---------------------------------------------------------------------------
# loss and schedule
# ---------------------------------------------------------------------------

def balanced_bce(logits, labels):
    """Class-balanced binary cross-entropy from logits.

    Each sample is weighted n / (2 n_class) for its class counted within this
    batch, so both classes contribute half the total weight regardless of how
    unbalanced the batch is; a single-class batch reduces to the plain mean.
    Returns (loss, dloss/dlogits).
    """
    logits = np.asarray(logits)
    labels = np.asarray(labels, dtype=logits.dtype)
    if logits.shape != labels.shape:
        raise InputError(f"logits {logits.shape} vs labels {labels.shape}")
    n = labels.size
    if n == 0:
        raise InputError("empty batch")
    n1 = float(labels.sum())
    n0 = n - n1
    w1 = n / (2.0 * n1) if n1 > 0 else 0.0
    w0 = n / (2.0 * n0) if n0 > 0 else 0.0
    wts = np.where(labels > 0.5, w1, w0).astype(logits.dtype)
    per = np.logaddexp(0.0, logits) - logits * labels
    total = float(wts.sum())
    loss = float((wts * per).sum() / total)
    dlogits = wts * (sigmoid(logits).astype(logits.dtype) - labels) / total
    return loss, dlogits


def batch_weights(labels):
    """The per-sample weights balanced_bce uses, for split-batch accumulation."""
    labels = np.asarray(labels, dtype=np.float32)
    n = labels.size
    n1 = float(labels.sum())
    n0 = n - n1
    w1 = n / (2.0 * n1) if n1 > 0 else 0.0
    w0 = n / (2.0 * n0) if n0 > 0 else 0.0
    return np.where(labels > 0.5, w1, w0).astype(np.float32)


def cosine_lr(step: int, total: int, lr0: float) -> float:
    if total <= 0:
        raise InputError("schedule length must be positive")
    frac = min(max(step, 0), total) / total
    return lr0 * 0.5 * (1.0 + float(np.cos(np.pi * frac)))


class Adam:
    def __init__(self, shapes: dict[str, np.ndarray], beta1=0.9, beta2=0.999,
                 eps=1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in shapes.items()}
        self.v = {k: np.zeros_like(v) for k, v in shapes.items()}

    def step(self, params: dict, grads: dict, lr) -> None:
        """Apply one update. lr is a float or a name -> rate mapping; a zero
        rate leaves the parameter bitwise untouched."""
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name, g in grads.items():
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            rate = lr[name] if isinstance(lr, dict) else lr
            if rate == 0.0:
                continue
            params[name] -= rate * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


# ---------------------------------------------------------------------------
# batch streams
# ---------------------------------------------------------------------------

def _load_dataset(dataset):
    if isinstance(dataset, DatasetManifest):
        return dataset, ManifestImages(dataset)
    if isinstance(dataset, (str, Path)):
        manifest = load_manifest(dataset)
        return manifest, ManifestImages(manifest)
    raise InputError(f"dataset must be a directory path or manifest, got "
                     f"{type(dataset).__name__}")


def _crop(img, dy: int, dx: int, res: int):
    return img[dy:dy + res, dx:dx + res]


def _stream_rngs(seed: int, stage_tag: int):
    entries = np.random.default_rng(np.random.SeedSequence((seed, stage_tag, 1)))
    source = np.random.default_rng(np.random.SeedSequence((seed, stage_tag, 2)))
    crop = np.random.default_rng(np.random.SeedSequence((seed, stage_tag, 3)))
    return entries, source, crop


def stage1_batches(cfg: TrainConfig, manifest: DatasetManifest,
                   images: ManifestImages, lam: float):
    """Yield (xb, yb) forever as aligned pairs.

    Each drawn entry contributes its real image and one fake of the same
    entry at the same crop; the fake comes from the first source with
    probability lam, else the second. Pairing matters: content is identical
    within a pair, so the only separating signal is the artifact itself.
    One yielded batch covers a full optimizer step (stage1_batch *
    grad_accum samples); the training loop splits it into micro-batches.
    """
    n = len(manifest.entries)
    if n == 0:
        raise InputError("dataset has no entries")
    res = cfg.resolution
    h, w = manifest.image_size
    if h < res or w < res:
        raise InputError(f"dataset images {h}x{w} are smaller than "
                         f"resolution {res}")
    rng_e, rng_s, rng_c = _stream_rngs(cfg.seed, STREAM_STAGE1)
    pairs = max(1, cfg.stage1_batch * cfg.grad_accum // 2)
    while True:
        idx = rng_e.integers(0, n, size=pairs)
        u_src = rng_s.random(pairs)
        offs = rng_c.integers(0, [h - res + 1, w - res + 1], size=(pairs, 2))
        xb = np.empty((2 * pairs, res, res, 3), dtype=np.float32)
        yb = np.empty(2 * pairs, dtype=np.float32)
        for j in range(pairs):
            e = int(idx[j])
            dy, dx = int(offs[j, 0]), int(offs[j, 1])
            kind = "fake_vae" if u_src[j] < lam else "fake_gan"
            xb[2 * j] = _crop(images.get(e, "real"), dy, dx, res)
            yb[2 * j] = LABEL_REAL
            xb[2 * j + 1] = _crop(images.get(e, kind), dy, dx, res)
            yb[2 * j + 1] = LABEL_FAKE
        yield xb, yb


def make_sef_batch(manifest: DatasetManifest, images: ManifestImages,
                   rng_entries, rng_crop, batch_size: int, resolution: int):
    """One fusion-stage batch of aligned triples.

    batch_size // 3 distinct entries each contribute their real image and
    both fake renderings, cropped identically, so every triple stays pixel
    aligned. The total is 3 * (batch_size // 3) samples.
    """
    k = batch_size // 3
    if k < 1:
        raise InputError(f"batch_size {batch_size} leaves no room for a triple")
    n = len(manifest.entries)
    if n < k:
        raise InputError(f"need at least {k} dataset entries for batch_size "
                         f"{batch_size}, have {n}")
    res = resolution
    h, w = manifest.image_size
    if h < res or w < res:
        raise InputError(f"dataset images {h}x{w} are smaller than "
                         f"resolution {res}")
    idx = rng_entries.choice(n, size=k, replace=False)
    offs = rng_crop.integers(0, [h - res + 1, w - res + 1], size=(k, 2))
    xb = np.empty((3 * k, res, res, 3), dtype=np.float32)
    yb = np.empty(3 * k, dtype=np.float32)
    for j in range(k):
        dy, dx = int(offs[j, 0]), int(offs[j, 1])
        e = int(idx[j])
        xb[3 * j] = _crop(images.get(e, "real"), dy, dx, res)
        yb[3 * j] = LABEL_REAL
        xb[3 * j + 1] = _crop(images.get(e, "fake_vae"), dy, dx, res)
        yb[3 * j + 1] = LABEL_FAKE
        xb[3 * j + 2] = _crop(images.get(e, "fake_gan"), dy, dx, res)
        yb[3 * j + 2] = LABEL_FAKE
    return xb, yb


def _chunks(total: int, parts: int):
    edges = np.linspace(0, total, parts + 1).astype(int)
    return [(int(a), int(b)) for a, b in zip(edges[:-1], edges[1:]) if b > a]


# ---------------------------------------------------------------------------
# stage 1
# ---------------------------------------------------------------------------

def _base_meta(cfg: TrainConfig, manifest: DatasetManifest, backbone) -> dict:
    lo, hi = manifest.seed_range
    return {
        "backbone_seed": cfg.backbone_seed,
        "backbone_hash": params_hash(backbone),
        "config_hash": cfg.config_hash(),
        "config": cfg.to_dict(),
        "train_seed_range": [lo, hi],
        "threshold": cfg.threshold,
    }


def _train_single_source(cfg: TrainConfig, dataset, lam: float, kind: str,
                         domain: str, log=None):
    """Shared stage-1 loop for single-source experts and mixed baselines."""
    manifest, images = _load_dataset(dataset)
    dims = ModelDims.from_config(cfg)
    backbone = init_backbone(dims, cfg.backbone_seed)
    lora = init_lora(dims, cfg.seed)
    head = init_head(dims, cfg.seed, std=cfg.head_init_std)
    trainable = {**lora, **head}
    opt = Adam(trainable, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    need = set(trainable)
    batches = stage1_batches(cfg, manifest, images, lam)
    records = []
    t0 = time.time()
    for it in range(cfg.stage1_iters):
        xb, yb = next(batches)
        lr = cosine_lr(it, cfg.stage1_iters, cfg.lr)
        wts = batch_weights(yb)
        total_w = float(wts.sum())
        agg: dict[str, np.ndarray] = {}
        loss_sum = 0.0
        for a, b in _chunks(len(yb), cfg.grad_accum):
            f, cache = features_forward(backbone, lora, xb[a:b], dims)
            logits = head_forward(head, f)
            per = np.logaddexp(0.0, logits) - logits * yb[a:b]
            loss_sum += float((wts[a:b] * per).sum())
            dlogits = wts[a:b] * (sigmoid(logits).astype(np.float32)
                                  - yb[a:b]) / total_w
            grads: dict[str, np.ndarray] = {}
            df = head_backward(dlogits, f, head, need, grads)
            features_backward(df, cache, backbone, lora, dims, need, grads)
            for name, g in grads.items():
                if name in agg:
                    agg[name] += g
                else:
                    agg[name] = g
        loss = loss_sum / total_w
        if not np.isfinite(loss):
            raise TrainingDiverged(f"loss became {loss} at iteration {it}")
        merged = {**lora, **head}
        opt.step(merged, agg, lr)
        for name in lora:
            lora[name] = merged[name]
        for name in head:
            head[name] = merged[name]
        if it % 50 == 0 or it == cfg.stage1_iters - 1:
            rec = {"iter": it, "loss": round(loss, 6), "lr": lr}
            records.append(rec)
            if log:
                log(f"[{kind}:{domain}] iter {it}/{cfg.stage1_iters} "
                    f"loss {loss:.4f} lr {lr:.2e}")
    if log:
        log(f"[{kind}:{domain}] done in {time.time() - t0:.1f}s")
    # wall-clock stays out of meta so repeated runs serialize bit-identically
    meta = _base_meta(cfg, manifest, backbone)
    meta.update({"kind": kind, "domain": domain, "mix_lambda": lam,
                 "iterations": cfg.stage1_iters})
    model = ExpertModel(backbone, lora, head, dims, meta=meta)
    return model, records


def train_expert(cfg: TrainConfig, dataset, domain: str, log=None):
    """Train one single-source expert ("vae" or "gan") on the frozen backbone."""
    if domain not in ("vae", "gan"):
        raise InputError(f"unknown forgery source {domain!r}")
    lam = 1.0 if domain == "vae" else 0.0
    return _train_single_source(cfg, dataset, lam, "expert", domain, log=log)


def train_mixed_baseline(cfg: TrainConfig, dataset, log=None):
    """Train one adapter set on a mixture of both forgery sources."""
    return _train_single_source(cfg, dataset, cfg.mix_lambda, "mixed", "both",
                                log=log)


# ---------------------------------------------------------------------------
# stage 2
# ---------------------------------------------------------------------------

def _as_expert(obj) -> ExpertModel:
    if isinstance(obj, ExpertModel):
        return obj
    if isinstance(obj, (str, Path)):
        model = model_from_checkpoint(Checkpoint.load(obj), obj)
        if not isinstance(model, ExpertModel):
            raise StateError(f"{obj} is not a stage-1 expert checkpoint")
        return model
    raise InputError(f"expected an expert model or checkpoint path, got "
                     f"{type(obj).__name__}")


def train_sef(cfg: TrainConfig, dataset, expert_vae, expert_gan, log=None):
    """Fuse two stage-1 experts: train gate and fusion head at lr, fine-tune
    only the last unfreeze_k blocks' adapters at gamma * lr."""
    ev = _as_expert(expert_vae)
    eg = _as_expert(expert_gan)
    manifest, images = _load_dataset(dataset)
    dims = ModelDims.from_config(cfg)
    backbone = init_backbone(dims, cfg.backbone_seed)
    bh = params_hash(backbone)
    for name, ex in (("first", ev), ("second", eg)):
        if ex.dims != dims:
            raise StateError(f"{name} expert dims {ex.dims} do not match the "
                             f"requested configuration {dims}")
        eh = ex.meta.get("backbone_hash", params_hash(ex.backbone))
        if eh != bh:
            raise StateError(f"{name} expert was trained on backbone {eh}, "
                             f"expected {bh}")
    lora_v = {k: v.copy() for k, v in ev.lora.items()}
    lora_s = {k: v.copy() for k, v in eg.lora.items()}
    gate = init_gate(dims, cfg.seed)

    k = cfg.unfreeze_k if cfg.gamma > 0.0 else 0
    stop_block = dims.blocks - k
    need = set(gate)
    for i in range(stop_block, dims.blocks):
        for proj in ("q", "v"):
            for part in ("a", "b"):
                need.add(f"ev.blk{i}.{proj}.{part}")
                need.add(f"es.blk{i}.{proj}.{part}")
    flat = {**gate,
            **{"ev." + name: arr for name, arr in lora_v.items()},
            **{"es." + name: arr for name, arr in lora_s.items()}}
    opt = Adam({name: flat[name] for name in need},
               cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)

    rng_e = np.random.default_rng(np.random.SeedSequence((cfg.seed, STREAM_STAGE2, 1)))
    rng_c = np.random.default_rng(np.random.SeedSequence((cfg.seed, STREAM_STAGE2, 3)))
    records = []
    t0 = time.time()
    for it in range(cfg.stage2_iters):
        xb, yb = make_sef_batch(manifest, images, rng_e, rng_c,
                                cfg.stage2_batch * cfg.grad_accum,
                                cfg.resolution)
        lr = cosine_lr(it, cfg.stage2_iters, cfg.lr)
        lr_map = {name: (cfg.gamma * lr if name.startswith(("ev.", "es."))
                         else lr) for name in need}
        wts = batch_weights(yb)
        total_w = float(wts.sum())
        agg: dict[str, np.ndarray] = {}
        loss_sum = 0.0
        gate_sum = 0.0
        for a, b in _chunks(len(yb), cfg.grad_accum):
            fwd = sef_forward(backbone, lora_v, lora_s, gate, xb[a:b], dims,
                              keep_from=stop_block)
            logits, w = fwd[0], fwd[1]
            gate_sum += float(w.sum())
            per = np.logaddexp(0.0, logits) - logits * yb[a:b]
            loss_sum += float((wts[a:b] * per).sum())
            dlogits = wts[a:b] * (sigmoid(logits).astype(np.float32)
                                  - yb[a:b]) / total_w
            grads = sef_backward(dlogits, fwd, backbone, lora_v, lora_s, gate,
                                 dims, need, stop_block=stop_block)
            for name, g in grads.items():
                if name in agg:
                    agg[name] += g
                else:
                    agg[name] = g
        loss = loss_sum / total_w
        if not np.isfinite(loss):
            raise TrainingDiverged(f"loss became {loss} at iteration {it}")
        opt.step(flat, agg, lr_map)
        for name in lora_v:
            lora_v[name] = flat["ev." + name]
        for name in lora_s:
            lora_s[name] = flat["es." + name]
        for name in gate:
            gate[name] = flat[name]
        if it % 50 == 0 or it == cfg.stage2_iters - 1:
            rec = {"iter": it, "loss": round(loss, 6), "lr": lr,
                   "gate_mean": round(gate_sum / len(yb), 4)}
            records.append(rec)
            if log:
                log(f"[sef] iter {it}/{cfg.stage2_iters} loss {loss:.4f} "
                    f"gate {rec['gate_mean']:.3f} lr {lr:.2e}")
    if log:
        log(f"[sef] done in {time.time() - t0:.1f}s")
    meta = _base_meta(cfg, manifest, backbone)
    meta.update({"kind": "sef", "domains": ["vae", "gan"],
                 "iterations": cfg.stage2_iters,
                 "stage1_iterations": [ev.meta.get("iterations"),
                                       eg.meta.get("iterations")]})
    model = SefModel(backbone, lora_v, lora_s, gate, dims, meta=meta)
    return model, records


def save_checkpoint(model, path) -> None:
    if isinstance(model, ExpertModel):
        checkpoint_from_expert(model).save(path)
    else:
        checkpoint_from_sef(model).save(path)
