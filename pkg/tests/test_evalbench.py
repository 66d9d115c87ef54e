import numpy as np
import pytest

from sefdet import imagelab
from sefdet.evalbench import (ComparisonTable, EvalResult, PerturbationSpec,
                              apply_perturbations, balanced_accuracy,
                              center_crop, evaluate, run_paradigm_comparison,
                              sample_blur_kernel, sample_crop_pct,
                              sample_jpeg_quality, sample_noise_var)
from sefdet.validation import InputError

from test_model import make_expert


def test_balanced_accuracy_hand_cases():
    assert balanced_accuracy([0.9, 0.4, 0.6, 0.2], [1, 0, 1, 0]) == 100.0
    assert balanced_accuracy([0.9, 0.6, 0.4, 0.2], [1, 0, 1, 0]) == 50.0
    # a score exactly at the threshold counts as a negative call
    assert balanced_accuracy([0.5, 0.7], [0, 1]) == 100.0
    assert balanced_accuracy([0.5, 0.7], [1, 0]) == 0.0


def test_balanced_accuracy_validation():
    with pytest.raises(InputError):
        balanced_accuracy([0.9, 0.1], [1, 1])
    with pytest.raises(InputError):
        balanced_accuracy([0.9], [1, 0])


def test_sampler_ranges(rng):
    kernels = {sample_blur_kernel(rng) for _ in range(200)}
    assert kernels == set(imagelab.BLUR_KERNEL_SIZES)
    crops = [sample_crop_pct(rng) for _ in range(200)]
    assert all(5.0 <= c < 20.0 for c in crops)
    quals = [sample_jpeg_quality(rng) for _ in range(200)]
    assert all(isinstance(q, int) and 10 <= q <= 75 for q in quals)
    noises = [sample_noise_var(rng) for _ in range(200)]
    assert all(5.0 <= v < 20.0 for v in noises)


def test_spec_names_and_from_names():
    assert PerturbationSpec().names == ()
    assert PerturbationSpec.from_names("all").names == ("blur", "crop", "jpeg", "noise")
    assert PerturbationSpec.from_names("none").names == ()
    assert PerturbationSpec.from_names("jpeg, blur").names == ("blur", "jpeg")
    with pytest.raises(InputError):
        PerturbationSpec.from_names("ringing")
    with pytest.raises(InputError):
        PerturbationSpec(p=1.5)


def test_all_off_is_bitwise_noop_and_draws_nothing(rng):
    x = rng.random((24, 24, 3)).astype(np.float32)
    stream = np.random.default_rng(99)
    out = apply_perturbations(x, PerturbationSpec(), stream)
    assert out.dtype == np.float32
    assert np.array_equal(out, x)
    assert stream.random() == np.random.default_rng(99).random()


def test_blur_stage_matches_manual_mirror(rng):
    x = rng.random((24, 24, 3)).astype(np.float32)
    spec = PerturbationSpec(blur=True, p=1.0)
    out = apply_perturbations(x, spec, np.random.default_rng(5))
    mirror = np.random.default_rng(5)
    assert mirror.random() < 1.0  # the gate draw
    want = imagelab.gaussian_blur(x, sample_blur_kernel(mirror))
    assert np.array_equal(out, want)


def test_crop_stage_keeps_shape(rng):
    x = rng.random((32, 32, 3)).astype(np.float32)
    out = apply_perturbations(x, PerturbationSpec(crop=True, p=1.0),
                              np.random.default_rng(0))
    assert out.shape == x.shape
    assert not np.array_equal(out, x)


def test_noise_stage_clips(rng):
    x = np.ones((16, 16, 3), dtype=np.float32)
    out = apply_perturbations(x, PerturbationSpec(noise=True, p=1.0),
                              np.random.default_rng(0))
    assert out.max() <= 1.0 and out.min() >= 0.0
    assert not np.array_equal(out, x)


def test_center_crop_oracle():
    img = np.arange(36, dtype=np.float32).reshape(6, 6)
    out = center_crop(img, 4)
    assert np.array_equal(out, img[1:5, 1:5])
    with pytest.raises(InputError):
        center_crop(img, 8)


def test_eval_result_properties():
    r = EvalResult(domain="vae", tp=8, tn=6, fp=2, fn=2,
                   threshold=0.5, perturbations=("blur",))
    assert r.tpr == 0.8
    assert r.tnr == 0.75
    assert r.balanced_accuracy == pytest.approx(77.5)
    rec = r.to_record()
    assert rec["record"] == "eval"
    assert rec["balanced_accuracy"] == 77.5
    assert rec["perturbations"] == ["blur"]


def test_evaluate_shares_real_scores(test_dataset_dir):
    model = make_expert(seed=0, perturb_lora=True)
    res = evaluate(model, test_dataset_dir)
    assert set(res) == {"vae", "gan"}
    assert res["vae"].tn == res["gan"].tn
    assert res["vae"].fp == res["gan"].fp
    n = res["vae"].tp + res["vae"].fn
    assert n == res["vae"].tn + res["vae"].fp == 6


def test_evaluate_deterministic(test_dataset_dir):
    model = make_expert(seed=1, perturb_lora=True)
    spec = PerturbationSpec(noise=True, jpeg=True, seed=4)
    a = evaluate(model, test_dataset_dir, spec)
    b = evaluate(model, test_dataset_dir, spec)
    assert a["vae"].to_record() == b["vae"].to_record()
    assert a["gan"].to_record() == b["gan"].to_record()
    assert a["vae"].perturbations == ("jpeg", "noise")


def test_evaluate_rejects_seed_overlap(dataset_dir, test_dataset_dir):
    model = make_expert(seed=0)
    model.meta["train_seed_range"] = [7000, 7009]
    with pytest.raises(InputError, match="leak"):
        evaluate(model, dataset_dir)
    evaluate(model, test_dataset_dir)  # disjoint seeds pass


def test_comparison_needs_three_seeds(tiny_cfg, dataset_dir, test_dataset_dir):
    with pytest.raises(InputError):
        run_paradigm_comparison(tiny_cfg, dataset_dir, test_dataset_dir, (1, 2))


def test_comparison_table_structure(tiny_cfg, dataset_dir, test_dataset_dir):
    cfg = tiny_cfg.replace(stage1_iters=6, stage2_iters=4)
    table = run_paradigm_comparison(cfg, dataset_dir, test_dataset_dir,
                                    (1, 2, 3))
    assert table.seeds == (1, 2, 3)
    assert len(table.rows) == 3 * 4 * 2
    for paradigm in ("expert_vae", "expert_gan", "mixed", "sef"):
        med = table.medians[paradigm]
        assert set(med) == {"vae", "gan", "mean"}
        assert 0.0 <= med["mean"] <= 100.0
    recs = table.to_records()
    assert recs[0]["record"] == "comparison_header"
    assert recs[-1]["record"] == "comparison_medians"
    assert len(recs) == len(table.rows) + 2
    text = table.format_table()
    assert "paradigm" in text and "median" in text
    assert len(text.splitlines()) == 1 + 12 + 2 + 4


def test_comparison_table_formatting_is_stable():
    rows = [{"record": "comparison_row", "seed": s, "paradigm": p,
             "domain": d, "balanced_accuracy": 70.0}
            for s in (1, 2, 3)
            for p in ("expert_vae", "expert_gan", "mixed", "sef")
            for d in ("vae", "gan")]
    medians = {p: {"vae": 70.0, "gan": 70.0, "mean": 70.0}
               for p in ("expert_vae", "expert_gan", "mixed", "sef")}
    table = ComparisonTable(seeds=(1, 2, 3), rows=rows, medians=medians)
    text = table.format_table()
    assert text.count("70.00") == 12 * 3 + 4 * 3
