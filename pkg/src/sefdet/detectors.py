"""Estimator-style wrappers around the training and simulation pipelines.

Detectors follow the scikit-learn contract: constructor arguments are stored
verbatim, fit() trains and sets trailing-underscore attributes, predict()
maps image batches to {0 (real), 1 (fake)}. fit() takes a dataset directory
(or loaded manifest) rather than an (X, y) pair, since training consumes
aligned triples with their sampling streams, not a flat design matrix.
Prediction-side methods take image arrays shaped (N, H, W, 3) in [0, 1]; a
single (H, W, 3) image is treated as a batch of one.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .config import TrainConfig
from .evalbench import PerturbationSpec, apply_perturbations
from .forge import simulate_gan_artifact, simulate_vae_artifact
from .train import train_expert, train_mixed_baseline, train_sef
from .validation import check_batch_images


class _DetectorBase(ClassifierMixin, BaseEstimator):
    def _config(self) -> TrainConfig:
        raise NotImplementedError

    def _train(self, cfg: TrainConfig, dataset):
        raise NotImplementedError

    def fit(self, X, y=None):
        """Train on a dataset directory or manifest; y is ignored (labels are
        implied by the dataset layout)."""
        cfg = self._config()
        self.model_, self.history_ = self._train(cfg, X)
        self.config_ = cfg
        self.classes_ = np.array([0, 1])
        return self

    def decision_function(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        xb = check_batch_images(X, self.model_.dims.resolution)
        return self.model_.logits(xb)

    def predict_proba(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        xb = check_batch_images(X, self.model_.dims.resolution)
        s = self.model_.scores(xb)
        return np.column_stack([1.0 - s, s])

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        xb = check_batch_images(X, self.model_.dims.resolution)
        thr = float(self.model_.meta.get("threshold", self.threshold))
        return (self.model_.scores(xb) > thr).astype(int)


class ExpertDetector(_DetectorBase):
    """Single-source detector: LoRA adapters and a linear head trained on one
    forgery family over the frozen backbone."""

    def __init__(self, domain: str = "vae", seed: int = 0, lr: float = 1e-4,
                 iters: int = 2000, batch_size: int = 16, resolution: int = 64,
                 threshold: float = 0.5):
        self.domain = domain
        self.seed = seed
        self.lr = lr
        self.iters = iters
        self.batch_size = batch_size
        self.resolution = resolution
        self.threshold = threshold

    def _config(self) -> TrainConfig:
        return TrainConfig(seed=self.seed, lr=self.lr, stage1_iters=self.iters,
                           stage1_batch=self.batch_size,
                           resolution=self.resolution, threshold=self.threshold)

    def _train(self, cfg, dataset):
        return train_expert(cfg, dataset, self.domain)


class MixedDetector(_DetectorBase):
    """Joint-training baseline: one adapter set on a mixture of both forgery
    families (mix_lambda is the probability a fake comes from the first)."""

    def __init__(self, mix_lambda: float = 0.5, seed: int = 0, lr: float = 1e-4,
                 iters: int = 2000, batch_size: int = 16, resolution: int = 64,
                 threshold: float = 0.5):
        self.mix_lambda = mix_lambda
        self.seed = seed
        self.lr = lr
        self.iters = iters
        self.batch_size = batch_size
        self.resolution = resolution
        self.threshold = threshold

    def _config(self) -> TrainConfig:
        return TrainConfig(seed=self.seed, lr=self.lr, stage1_iters=self.iters,
                           stage1_batch=self.batch_size,
                           mix_lambda=self.mix_lambda,
                           resolution=self.resolution, threshold=self.threshold)

    def _train(self, cfg, dataset):
        return train_mixed_baseline(cfg, dataset)


class SefDetector(_DetectorBase):
    """Two-stage detector: independent per-source experts, then gated convex
    fusion with the last unfreeze_k blocks' adapters fine-tuned at gamma*lr."""

    def __init__(self, seed: int = 0, lr: float = 1e-4, gamma: float = 0.1,
                 unfreeze_k: int = 4, stage1_iters: int = 2000,
                 stage2_iters: int = 1000, batch_size: int = 16,
                 resolution: int = 64, threshold: float = 0.5):
        self.seed = seed
        self.lr = lr
        self.gamma = gamma
        self.unfreeze_k = unfreeze_k
        self.stage1_iters = stage1_iters
        self.stage2_iters = stage2_iters
        self.batch_size = batch_size
        self.resolution = resolution
        self.threshold = threshold

    def _config(self) -> TrainConfig:
        # stage 2 interleaves real/vae/gan, so its batch rounds up to a
        # multiple of 3
        s2 = 3 * max(1, (self.batch_size + 2) // 3)
        return TrainConfig(seed=self.seed, lr=self.lr, gamma=self.gamma,
                           unfreeze_k=self.unfreeze_k,
                           stage1_iters=self.stage1_iters,
                           stage2_iters=self.stage2_iters,
                           stage1_batch=self.batch_size, stage2_batch=s2,
                           resolution=self.resolution, threshold=self.threshold)

    def _train(self, cfg, dataset):
        ev, hist_v = train_expert(cfg, dataset, "vae")
        eg, hist_g = train_expert(cfg, dataset, "gan")
        model, hist_f = train_sef(cfg, dataset, ev, eg)
        self.expert_vae_ = ev
        self.expert_gan_ = eg
        return model, {"expert_vae": hist_v, "expert_gan": hist_g,
                       "fusion": hist_f}

    def gate_weights(self, X) -> np.ndarray:
        """Per-sample routing weight w in (0, 1); w near 0 favors the first
        expert's features."""
        check_is_fitted(self, "model_")
        xb = check_batch_images(X, self.model_.dims.resolution)
        return self.model_.forward(xb)[1]


class _PerImageTransform(TransformerMixin, BaseEstimator):
    def fit(self, X, y=None):
        return self

    def _apply_one(self, img: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def transform(self, X) -> np.ndarray:
        arr = np.asarray(X, dtype=np.float32)
        single = arr.ndim == 3
        xb = check_batch_images(arr)
        out = np.stack([self._apply_one(img) for img in xb])
        return out[0] if single else out


class VaeArtifactTransform(_PerImageTransform):
    """Renders images through the reconstruction-style simulator (coarse
    latent, quantization, smooth upsampling)."""

    def _apply_one(self, img):
        return simulate_vae_artifact(img)


class GanArtifactTransform(_PerImageTransform):
    """Renders images through the upsampling-stack simulator (aliased
    downsample, uneven transposed convolutions, unsharp, desaturation)."""

    def _apply_one(self, img):
        return simulate_gan_artifact(img)


class PerturbationTransform(_PerImageTransform):
    """Applies the robustness perturbation suite per image. The stream is
    re-seeded every transform() call, so equal inputs give equal outputs."""

    def __init__(self, perturbations: str = "all", p: float = 0.5, seed: int = 0):
        self.perturbations = perturbations
        self.p = p
        self.seed = seed

    def transform(self, X) -> np.ndarray:
        spec = PerturbationSpec.from_names(self.perturbations, p=self.p,
                                           seed=self.seed)
        rng = np.random.default_rng(np.random.SeedSequence((self.seed, 0x9E47)))
        arr = np.asarray(X, dtype=np.float32)
        single = arr.ndim == 3
        xb = check_batch_images(arr)
        out = np.stack([apply_perturbations(img, spec, rng) for img in xb])
        return out[0] if single else out
