"""Desk-scale forgery-source detection bench.

Self-contained pipeline: procedurally generated aligned datasets with two
artifact-complementary fake simulators, LoRA experts over a frozen
transformer backbone, gated convex fusion, gradient-conflict analysis, and a
forensic-metric toolkit. Everything is deterministic given a seed.
"""

__version__ = "0.1.0"

from .checkpoint import Checkpoint, load_model, save_model
from .config import BACKBONE_SEED, TrainConfig
from .conflict import ConflictReport, TaylorDiagnostic, cosine, \
    per_source_gradients, run_conflict_probe, taylor_diagnostic
from .detectors import ExpertDetector, GanArtifactTransform, MixedDetector, \
    PerturbationTransform, SefDetector, VaeArtifactTransform
from .evalbench import EvalResult, PerturbationSpec, apply_perturbations, \
    balanced_accuracy, evaluate, run_paradigm_comparison
from .forge import MaskSpec, apply_mask_aug, build_dataset, gen_mask, \
    gen_procedural_real, load_manifest, simulate_gan_artifact, \
    simulate_vae_artifact
from .metrics import MetricProfile, RadarScores, corpus_profile, image_profile, \
    radar_scores
from .model import ExpertModel, ModelDims, SefModel, gradient_check
from .train import balanced_bce, cosine_lr, train_expert, train_mixed_baseline, \
    train_sef
from .validation import FormatError, GenerationError, InputError, StateError, \
    TrainingDiverged

__all__ = [
    "BACKBONE_SEED", "Checkpoint", "ConflictReport", "EvalResult",
    "ExpertDetector", "ExpertModel", "FormatError", "GanArtifactTransform",
    "GenerationError", "InputError", "MaskSpec", "MetricProfile",
    "MixedDetector", "ModelDims", "PerturbationSpec", "PerturbationTransform",
    "RadarScores", "SefDetector", "SefModel", "StateError", "TaylorDiagnostic",
    "TrainConfig", "TrainingDiverged", "VaeArtifactTransform",
    "apply_mask_aug", "apply_perturbations", "balanced_accuracy",
    "balanced_bce", "build_dataset", "corpus_profile", "cosine", "cosine_lr",
    "evaluate", "gen_mask", "gen_procedural_real", "gradient_check",
    "image_profile", "load_manifest", "load_model", "per_source_gradients",
    "radar_scores", "run_conflict_probe", "run_paradigm_comparison",
    "save_model", "simulate_gan_artifact", "simulate_vae_artifact",
    "taylor_diagnostic", "train_expert", "train_mixed_baseline", "train_sef",
    "__version__",
]
