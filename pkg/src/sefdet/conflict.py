"""Gradient-conflict analysis for joint training on both forgery sources.

A mixed-configuration model (one adapter set, one head) is probed during
training: at every step the per-source balanced-BCE gradients are computed
independently on batches that share their real half, their cosine is recorded
before the optimizer update, and the update itself uses the lambda-weighted
mixture of the two gradients. Inner products and squared norms are kept per
parameter group (one group per transformer block, plus the head) so the total
cosine can be re-derived from the stored pieces.

The Taylor diagnostic checks the first-order story directly: under a plain
SGD step of size eta on the mixed gradient, the change in the first source's
loss should match -eta*lam*||g1||^2 - eta*(1-lam)*<g1, g2>. It runs in
float64 so measured loss deltas at eta = 1e-5 sit far above rounding noise.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .config import TrainConfig
from .model import ExpertModel, ModelDims, features_backward, features_forward, \
    head_backward, head_forward, init_backbone, init_head, init_lora
from .train import Adam, _load_dataset, balanced_bce, cosine_lr
from .validation import InputError, StateError

STREAM_PROBE = 0xC0F17
STREAM_TAYLOR = 0x7A7108

NORM_FLOOR = 1e-12


def cosine(u, v) -> float:
    """Cosine similarity; 0 when either vector's norm is below 1e-12."""
    u = np.asarray(u, dtype=np.float64).ravel()
    v = np.asarray(v, dtype=np.float64).ravel()
    if u.shape != v.shape:
        raise InputError(f"vector lengths differ: {u.size} vs {v.size}")
    nu = float(np.linalg.norm(u))
    nv = float(np.linalg.norm(v))
    if nu < NORM_FLOOR or nv < NORM_FLOOR:
        return 0.0
    c = float(np.dot(u, v) / (nu * nv))
    # rounding can push identical vectors a hair past 1
    return min(1.0, max(-1.0, c))


def _scope_names(lora: dict, head: dict, scope: str) -> set[str]:
    if scope == "lora+head":
        return set(lora) | set(head)
    if scope == "lora":
        return set(lora)
    raise InputError(f"unknown conflict scope {scope!r}")


def _loss_and_grads(model: ExpertModel, xb, yb, need: set):
    f, cache = features_forward(model.backbone, model.lora, xb, model.dims)
    logits = head_forward(model.head, f)
    loss, dlogits = balanced_bce(logits, yb)
    grads: dict[str, np.ndarray] = {}
    df = head_backward(dlogits, f, model.head, need, grads)
    features_backward(df, cache, model.backbone, model.lora, model.dims,
                      need, grads)
    return loss, grads


def _flatten(grads: dict) -> np.ndarray:
    return np.concatenate([np.asarray(grads[k], dtype=np.float32).ravel()
                           for k in sorted(grads)])


def per_source_gradients(model: ExpertModel, real_batch, fake_vae_batch,
                         fake_gan_batch, scope: str = "lora+head"):
    """Per-source gradients of a mixed-configuration model.

    Each source's gradient comes from its own balanced-BCE loss on
    (real_batch + that source's fakes); the real half is shared. Returns two
    flattened float32 vectors over the identical trainable set, in sorted
    parameter-name order. Model parameters are not modified.
    """
    real_batch = np.asarray(real_batch, dtype=np.float32)
    need = _scope_names(model.lora, model.head, scope)

    def batch(fakes):
        fakes = np.asarray(fakes, dtype=np.float32)
        xb = np.concatenate([real_batch, fakes], axis=0)
        yb = np.concatenate([np.zeros(len(real_batch), np.float32),
                             np.ones(len(fakes), np.float32)])
        return xb, yb

    _, gv = _loss_and_grads(model, *batch(fake_vae_batch), need)
    _, gg = _loss_and_grads(model, *batch(fake_gan_batch), need)
    if set(gv) != set(gg):
        raise StateError("per-source gradients cover different trainable sets")
    return _flatten(gv), _flatten(gg)


# ---------------------------------------------------------------------------
# conflict probe
# ---------------------------------------------------------------------------

def _group_of(name: str) -> str:
    return name.split(".", 1)[0] if name.startswith("blk") else "head"


def _group_stats(gv: dict, gg: dict, groups: tuple[str, ...]):
    ips = np.zeros(len(groups))
    nv = np.zeros(len(groups))
    ng = np.zeros(len(groups))
    order = {g: i for i, g in enumerate(groups)}
    for name in gv:
        a = np.asarray(gv[name], dtype=np.float64).ravel()
        b = np.asarray(gg[name], dtype=np.float64).ravel()
        gi = order[_group_of(name)]
        ips[gi] += float(np.dot(a, b))
        nv[gi] += float(np.dot(a, a))
        ng[gi] += float(np.dot(b, b))
    return ips, nv, ng


def _cos_from_stats(ip: float, sq1: float, sq2: float) -> float:
    if sq1 < NORM_FLOOR ** 2 or sq2 < NORM_FLOOR ** 2:
        return 0.0
    c = ip / np.sqrt(sq1 * sq2)
    return float(min(1.0, max(-1.0, c)))


@dataclass
class ConflictReport:
    iterations: int
    batch_size: int
    scope: str
    group_names: tuple[str, ...]
    cosines: np.ndarray
    per_layer_cosines: np.ndarray
    group_ips: np.ndarray
    group_sqnorms_vae: np.ndarray
    group_sqnorms_gan: np.ndarray
    losses_vae: np.ndarray = field(default_factory=lambda: np.zeros(0))
    losses_gan: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def conflict_fraction(self) -> float:
        return float(np.mean(self.cosines < 0.0))

    @property
    def mean_cosine(self) -> float:
        return float(np.mean(self.cosines))

    @property
    def mean_abs_cosine(self) -> float:
        return float(np.mean(np.abs(self.cosines)))

    @property
    def std_cosine(self) -> float:
        return float(np.std(self.cosines))

    def to_records(self) -> list[dict]:
        rows = [{
            "record": "conflict_summary", "iterations": self.iterations,
            "batch_size": self.batch_size, "scope": self.scope,
            "mean_cosine": round(self.mean_cosine, 6),
            "std_cosine": round(self.std_cosine, 6),
            "mean_abs_cosine": round(self.mean_abs_cosine, 6),
            "conflict_fraction": round(self.conflict_fraction, 6),
            "groups": list(self.group_names),
        }]
        for t in range(self.iterations):
            rows.append({
                "record": "conflict_iter", "iter": t,
                "cosine": round(float(self.cosines[t]), 6),
                "per_layer": [round(float(c), 6)
                              for c in self.per_layer_cosines[t]],
                "loss_vae": round(float(self.losses_vae[t]), 6),
                "loss_gan": round(float(self.losses_gan[t]), 6),
            })
        return rows


def _probe_batches(manifest, images, resolution: int, per_source: int,
                   rng_e, rng_c):
    """One step's probe batches: k entries' reals plus both aligned fakes.

    Both sources' fake halves are the reconstructions of the real half's own
    entries at identical crops. Content then cancels pairwise inside each
    per-source gradient, so the cosine reflects artifact structure rather
    than which images happened to be drawn.
    """
    n = len(manifest.entries)
    h, w = manifest.image_size
    if h < resolution or w < resolution:
        raise InputError(f"dataset images {h}x{w} smaller than resolution "
                         f"{resolution}")
    k = per_source // 2
    idx = rng_e.integers(0, n, size=k)
    offs = rng_c.integers(0, [h - resolution + 1, w - resolution + 1],
                          size=(k, 2))
    res = resolution
    xr = np.empty((k, res, res, 3), dtype=np.float32)
    xv = np.empty((k, res, res, 3), dtype=np.float32)
    xg = np.empty((k, res, res, 3), dtype=np.float32)
    for j in range(k):
        dy, dx = int(offs[j, 0]), int(offs[j, 1])
        e = int(idx[j])
        sl = (slice(dy, dy + res), slice(dx, dx + res))
        xr[j] = images.get(e, "real")[sl]
        xv[j] = images.get(e, "fake_vae")[sl]
        xg[j] = images.get(e, "fake_gan")[sl]
    return xr, xv, xg


def run_conflict_probe(cfg: TrainConfig, dataset, iters: int = 50,
                       probe_batch: int = 8, log=None) -> ConflictReport:
    """Probe the opening of mixed training.

    Starts from fresh adapters and head, and for `iters` steps computes both
    per-source gradients on shared-real batches of `probe_batch` each,
    records total and per-block cosines, then applies the lambda-weighted
    mixed gradient with the stage-1 optimizer and schedule.
    """
    if iters < 1:
        raise InputError(f"iters must be >= 1, got {iters}")
    if probe_batch < 2 or probe_batch % 2:
        raise InputError(f"probe batch must be even and >= 2, got {probe_batch}")
    manifest, images = _load_dataset(dataset)
    dims = ModelDims.from_config(cfg)
    backbone = init_backbone(dims, cfg.backbone_seed)
    lora = init_lora(dims, cfg.seed)
    head = init_head(dims, cfg.seed, std=cfg.head_init_std)
    model = ExpertModel(backbone, lora, head, dims)
    need = _scope_names(lora, head, cfg.conflict_scope)
    trainable = {k: v for k, v in {**lora, **head}.items() if k in need}
    opt = Adam(trainable, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    rng_e = np.random.default_rng(np.random.SeedSequence((cfg.seed, STREAM_PROBE, 1)))
    rng_c = np.random.default_rng(np.random.SeedSequence((cfg.seed, STREAM_PROBE, 3)))
    groups = tuple(f"blk{i}" for i in range(dims.blocks)) + ("head",)
    lam = cfg.mix_lambda

    T = iters
    L = dims.blocks
    cosines = np.zeros(T)
    per_layer = np.zeros((T, L))
    ips = np.zeros((T, len(groups)))
    nv = np.zeros((T, len(groups)))
    ng = np.zeros((T, len(groups)))
    lv = np.zeros(T)
    lg = np.zeros(T)
    for t in range(T):
        xr, xv, xg = _probe_batches(manifest, images, cfg.resolution,
                                    probe_batch, rng_e, rng_c)
        yb = np.concatenate([np.zeros(len(xr), np.float32),
                             np.ones(len(xv), np.float32)])
        loss_v, gv = _loss_and_grads(model, np.concatenate([xr, xv]), yb, need)
        loss_g, gg = _loss_and_grads(model, np.concatenate([xr, xg]), yb, need)
        ips[t], nv[t], ng[t] = _group_stats(gv, gg, groups)
        cosines[t] = _cos_from_stats(ips[t].sum(), nv[t].sum(), ng[t].sum())
        for i in range(L):
            per_layer[t, i] = _cos_from_stats(ips[t, i], nv[t, i], ng[t, i])
        lv[t] = loss_v
        lg[t] = loss_g
        mixed = {k: lam * gv[k] + (1.0 - lam) * gg[k] for k in gv}
        opt.step(trainable, mixed, cosine_lr(t, cfg.stage1_iters, cfg.lr))
        if log and (t % 10 == 0 or t == T - 1):
            log(f"[conflict] iter {t}/{T} cosine {cosines[t]:+.3f} "
                f"loss_v {loss_v:.4f} loss_g {loss_g:.4f}")
    return ConflictReport(
        iterations=T, batch_size=probe_batch, scope=cfg.conflict_scope,
        group_names=groups, cosines=cosines, per_layer_cosines=per_layer,
        group_ips=ips, group_sqnorms_vae=nv, group_sqnorms_gan=ng,
        losses_vae=lv, losses_gan=lg)


# ---------------------------------------------------------------------------
# Taylor diagnostic
# ---------------------------------------------------------------------------

@dataclass
class TaylorDiagnostic:
    eta: float
    lam: float
    predicted: np.ndarray
    measured: np.ndarray

    @property
    def sign_agreement(self) -> float:
        return float(np.mean(np.sign(self.predicted) == np.sign(self.measured)))

    @property
    def correlation(self) -> float:
        p, m = self.predicted, self.measured
        if np.allclose(p, m):
            return 1.0
        if p.std() == 0.0 or m.std() == 0.0:
            return 0.0
        return float(np.corrcoef(p, m)[0, 1])

    def to_records(self) -> list[dict]:
        rows = [{"record": "taylor_summary", "eta": self.eta, "lam": self.lam,
                 "steps": int(self.predicted.size),
                 "sign_agreement": round(self.sign_agreement, 6),
                 "correlation": round(self.correlation, 6)}]
        for t in range(self.predicted.size):
            rows.append({"record": "taylor_step", "iter": t,
                         "predicted": float(self.predicted[t]),
                         "measured": float(self.measured[t])})
        return rows


def taylor_diagnostic(cfg: TrainConfig, dataset, steps: int = 50,
                      eta: float = 1e-5, log=None) -> TaylorDiagnostic:
    """First-order check of the mixed update's effect on one source's loss.

    At each step, with both per-source gradients in hand, predict
    dL1 = -eta*lam*||g1||^2 - eta*(1-lam)*<g1,g2>, apply the plain SGD step
    theta -= eta*(lam*g1 + (1-lam)*g2), and measure L1 after minus before on
    the same batch. Everything runs in float64.
    """
    if steps < 1:
        raise InputError(f"steps must be >= 1, got {steps}")
    if eta < 0:
        raise InputError(f"eta must be >= 0, got {eta}")
    manifest, images = _load_dataset(dataset)
    dims = ModelDims.from_config(cfg)
    backbone = {k: v.astype(np.float64)
                for k, v in init_backbone(dims, cfg.backbone_seed).items()}
    lora = {k: v.astype(np.float64)
            for k, v in init_lora(dims, cfg.seed).items()}
    head = {k: v.astype(np.float64)
            for k, v in init_head(dims, cfg.seed, std=cfg.head_init_std).items()}
    model = ExpertModel(backbone, lora, head, dims)
    need = _scope_names(lora, head, cfg.conflict_scope)
    rng_e = np.random.default_rng(np.random.SeedSequence((cfg.seed, STREAM_TAYLOR, 1)))
    rng_c = np.random.default_rng(np.random.SeedSequence((cfg.seed, STREAM_TAYLOR, 3)))
    lam = cfg.mix_lambda

    def loss_vae_only(xb, yb):
        f, _ = features_forward(model.backbone, model.lora,
                                xb.astype(np.float64), dims,
                                keep_from=dims.blocks)
        loss, _ = balanced_bce(head_forward(model.head, f), yb.astype(np.float64))
        return loss

    predicted = np.zeros(steps)
    measured = np.zeros(steps)
    for t in range(steps):
        xr, xv, xg = _probe_batches(manifest, images, cfg.resolution, 8,
                                    rng_e, rng_c)
        yb = np.concatenate([np.zeros(len(xr)), np.ones(len(xv))])
        xb_v = np.concatenate([xr, xv]).astype(np.float64)
        xb_g = np.concatenate([xr, xg]).astype(np.float64)
        loss_v, gv = _loss_and_grads(model, xb_v, yb, need)
        _, gg = _loss_and_grads(model, xb_g, yb, need)
        sq = sum(float(np.dot(gv[k].ravel(), gv[k].ravel())) for k in gv)
        ip = sum(float(np.dot(gv[k].ravel(), gg[k].ravel())) for k in gv)
        predicted[t] = -eta * lam * sq - eta * (1.0 - lam) * ip
        for k in need:
            tgt = model.lora if k in model.lora else model.head
            tgt[k] = tgt[k] - eta * (lam * gv[k] + (1.0 - lam) * gg[k])
        measured[t] = loss_vae_only(xb_v, yb) - loss_v
        if log and (t % 10 == 0 or t == steps - 1):
            log(f"[taylor] step {t}/{steps} predicted {predicted[t]:+.3e} "
                f"measured {measured[t]:+.3e}")
    return TaylorDiagnostic(eta=eta, lam=lam, predicted=predicted,
                            measured=measured)
