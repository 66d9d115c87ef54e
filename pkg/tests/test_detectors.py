import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError
from sklearn.pipeline import make_pipeline

from sefdet.detectors import (ExpertDetector, GanArtifactTransform,
                              MixedDetector, PerturbationTransform,
                              SefDetector, VaeArtifactTransform)
from sefdet.forge import simulate_gan_artifact, simulate_vae_artifact
from sefdet.validation import InputError


def small_expert(**kw):
    args = dict(domain="vae", seed=3, lr=1e-3, iters=8, batch_size=8)
    args.update(kw)
    return ExpertDetector(**args)


def test_get_params_roundtrip():
    det = small_expert()
    assert det.get_params()["domain"] == "vae"
    other = clone(det)
    assert other.get_params() == det.get_params()


def test_predict_before_fit_raises():
    with pytest.raises(NotFittedError):
        small_expert().predict(np.zeros((1, 64, 64, 3), dtype=np.float32))


def test_expert_fit_predict(dataset_dir, rng):
    det = small_expert().fit(dataset_dir)
    assert det.model_.meta["kind"] == "expert"
    assert np.array_equal(det.classes_, [0, 1])
    xb = rng.random((4, 64, 64, 3)).astype(np.float32)
    pred = det.predict(xb)
    assert pred.shape == (4,)
    assert set(np.unique(pred)) <= {0, 1}
    proba = det.predict_proba(xb)
    assert proba.shape == (4, 2)
    assert np.allclose(proba.sum(axis=1), 1.0)
    # decision_function agrees in sign with the probability split
    df = det.decision_function(xb)
    assert np.array_equal(df > 0.0, proba[:, 1] > 0.5)


def test_predict_rejects_wrong_resolution(dataset_dir, rng):
    det = small_expert().fit(dataset_dir)
    with pytest.raises(InputError):
        det.predict(rng.random((2, 32, 32, 3)).astype(np.float32))


def test_single_image_treated_as_batch(dataset_dir, rng):
    det = small_expert().fit(dataset_dir)
    one = rng.random((64, 64, 3)).astype(np.float32)
    assert det.predict(one).shape == (1,)


def test_mixed_detector_config(dataset_dir):
    det = MixedDetector(mix_lambda=0.25, seed=3, lr=1e-3, iters=8,
                        batch_size=8).fit(dataset_dir)
    assert det.config_.mix_lambda == 0.25
    assert det.model_.meta["kind"] == "mixed"


def test_sef_detector_exposes_towers(dataset_dir, rng):
    det = SefDetector(seed=3, lr=1e-3, stage1_iters=8, stage2_iters=4,
                      batch_size=6).fit(dataset_dir)
    assert det.config_.stage2_batch == 6
    assert det.model_.meta["kind"] == "sef"
    assert det.expert_vae_.meta["domain"] == "vae"
    assert det.expert_gan_.meta["domain"] == "gan"
    assert set(det.history_) == {"expert_vae", "expert_gan", "fusion"}
    xb = rng.random((3, 64, 64, 3)).astype(np.float32)
    w = det.gate_weights(xb)
    assert w.shape == (3,)
    assert np.all((w > 0.0) & (w < 1.0))


def test_artifact_transforms_match_simulators(rng):
    xb = rng.random((2, 32, 32, 3)).astype(np.float32)
    out_v = VaeArtifactTransform().fit_transform(xb)
    assert np.array_equal(out_v[0], simulate_vae_artifact(xb[0]))
    out_g = GanArtifactTransform().transform(xb)
    assert np.array_equal(out_g[1], simulate_gan_artifact(xb[1]))
    one = VaeArtifactTransform().transform(xb[0])
    assert one.shape == (32, 32, 3)


def test_perturbation_transform_deterministic(rng):
    xb = rng.random((3, 24, 24, 3)).astype(np.float32)
    t = PerturbationTransform(perturbations="noise", p=1.0, seed=7)
    a = t.transform(xb)
    b = t.transform(xb)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, xb)
    off = PerturbationTransform(perturbations="none").transform(xb)
    assert np.array_equal(off, xb)


def test_transform_pipeline_composes(rng):
    xb = rng.random((2, 32, 32, 3)).astype(np.float32)
    pipe = make_pipeline(VaeArtifactTransform(), PerturbationTransform("none"))
    out = pipe.fit_transform(xb)
    assert out.shape == xb.shape
