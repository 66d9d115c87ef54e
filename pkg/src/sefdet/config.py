"""Training configuration: hyperparameters, validation, hashing, overrides."""
from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass

from .validation import InputError

# Fixed seed for the shared frozen backbone. Kept independent of the training
# seed so every run (any paradigm, any seed) shares one backbone, the way a
# single pretrained foundation model would be shared.
BACKBONE_SEED = 1000003


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    gamma: float = 0.1
    unfreeze_k: int = 4
    stage1_iters: int = 2000
    stage1_batch: int = 16
    stage2_iters: int = 1000
    stage2_batch: int = 32
    grad_accum: int = 4
    lora_rank: int = 8
    lora_alpha: float = 1.0
    mix_lambda: float = 0.5
    seed: int = 0
    resolution: int = 64
    patch_size: int = 8
    embed_dim: int = 64
    num_heads: int = 4
    num_blocks: int = 8
    mlp_hidden: int = 128
    gate_hidden: int = 32
    head_init_std: float = 0.02
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    threshold: float = 0.5
    backbone_seed: int = BACKBONE_SEED
    conflict_scope: str = "lora+head"

    def __post_init__(self):
        if not 0.0 <= self.gamma <= 1.0:
            raise InputError(f"gamma must be in [0, 1], got {self.gamma}")
        if not 0 <= self.unfreeze_k <= self.num_blocks:
            raise InputError(
                f"unfreeze_k must be in [0, {self.num_blocks}], got {self.unfreeze_k}")
        if not 0.0 <= self.mix_lambda <= 1.0:
            raise InputError(f"mix_lambda must be in [0, 1], got {self.mix_lambda}")
        for name in ("stage1_iters", "stage1_batch", "stage2_iters", "stage2_batch",
                     "grad_accum", "lora_rank", "resolution", "patch_size",
                     "embed_dim", "num_heads", "num_blocks", "mlp_hidden",
                     "gate_hidden"):
            if getattr(self, name) < 1:
                raise InputError(f"{name} must be positive")
        if self.lr <= 0:
            raise InputError(f"lr must be positive, got {self.lr}")
        if self.resolution % self.patch_size:
            raise InputError(
                f"resolution {self.resolution} not divisible by patch {self.patch_size}")
        if self.embed_dim % self.num_heads:
            raise InputError(
                f"embed_dim {self.embed_dim} not divisible by heads {self.num_heads}")
        if self.conflict_scope not in ("lora+head", "lora"):
            raise InputError(f"conflict_scope must be 'lora+head' or 'lora'")

    def replace(self, **kw) -> "TrainConfig":
        return dataclasses.replace(self, **kw)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def config_hash(self) -> str:
        text = ",".join(f"{k}={v}" for k, v in sorted(self.to_dict().items()))
        return hashlib.sha256(text.encode()).hexdigest()[:16]

    @classmethod
    def from_overrides(cls, base: "TrainConfig | None" = None,
                       overrides: dict | None = None) -> "TrainConfig":
        """Apply string-valued overrides (from config files or --set flags)."""
        cfg = base or cls()
        if not overrides:
            return cfg
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        casts = {"int": int, "float": float, "str": str}
        kw = {}
        for key, value in overrides.items():
            if key not in types:
                raise InputError(f"unknown config key {key!r}")
            if isinstance(value, str):
                try:
                    kw[key] = casts.get(types[key], str)(value)
                except ValueError as exc:
                    raise InputError(f"bad value for {key}: {value!r}") from exc
            else:
                kw[key] = value
        return cfg.replace(**kw)
