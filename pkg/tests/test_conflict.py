import numpy as np
import pytest

from sefdet.conflict import (ConflictReport, TaylorDiagnostic, _cos_from_stats,
                             cosine, per_source_gradients, run_conflict_probe,
                             taylor_diagnostic)
from sefdet.model import params_hash
from sefdet.validation import InputError

from test_model import batch, make_expert


def test_cosine_hand_values():
    assert cosine([1.0, 0.0], [2.0, 0.0]) == 1.0
    assert cosine([1.0, 0.0], [-3.0, 0.0]) == -1.0
    assert cosine([1.0, 0.0], [0.0, 5.0]) == 0.0
    assert cosine([0.0, 0.0], [1.0, 1.0]) == 0.0  # degenerate norm convention
    with pytest.raises(InputError):
        cosine([1.0, 2.0], [1.0, 2.0, 3.0])


def test_cos_from_stats_clamps():
    assert _cos_from_stats(2.0, 1.0, 1.0) == 1.0
    assert _cos_from_stats(0.0, 0.0, 1.0) == 0.0


def test_per_source_gradients_scope_and_purity(rng):
    model = make_expert(seed=0, perturb_lora=True)
    xr, xv, xg = batch(rng, 2), batch(rng, 2), batch(rng, 2)
    before = params_hash({**model.lora, **model.head})
    gv, gg = per_source_gradients(model, xr, xv, xg)
    assert params_hash({**model.lora, **model.head}) == before
    assert gv.shape == gg.shape and gv.ndim == 1
    lora_only, _ = per_source_gradients(model, xr, xv, xg, scope="lora")
    head_size = model.head["head.w"].size + 1
    assert lora_only.size == gv.size - head_size
    with pytest.raises(InputError):
        per_source_gradients(model, xr, xv, xg, scope="everything")


def test_identical_fakes_give_identical_gradients(rng):
    model = make_expert(seed=1, perturb_lora=True)
    xr, xf = batch(rng, 2), batch(rng, 2)
    gv, gg = per_source_gradients(model, xr, xf, xf)
    assert np.array_equal(gv, gg)
    assert cosine(gv, gg) == 1.0


def test_conflict_report_fractions():
    cos = np.array([-0.5, 0.2, 0.3, -0.1])
    rep = ConflictReport(iterations=4, batch_size=8, scope="lora+head",
                         group_names=("blk0", "head"), cosines=cos,
                         per_layer_cosines=np.zeros((4, 1)),
                         group_ips=np.zeros((4, 2)),
                         group_sqnorms_vae=np.zeros((4, 2)),
                         group_sqnorms_gan=np.zeros((4, 2)),
                         losses_vae=np.zeros(4), losses_gan=np.zeros(4))
    assert rep.conflict_fraction == 0.5
    assert rep.mean_cosine == pytest.approx(-0.025)
    assert rep.mean_abs_cosine == pytest.approx(0.275)


def test_probe_validation(dataset_dir, tiny_cfg):
    with pytest.raises(InputError):
        run_conflict_probe(tiny_cfg, dataset_dir, iters=0)
    with pytest.raises(InputError):
        run_conflict_probe(tiny_cfg, dataset_dir, probe_batch=5)


def test_probe_smoke_and_stored_pieces(dataset_dir, tiny_cfg):
    rep = run_conflict_probe(tiny_cfg, dataset_dir, iters=3, probe_batch=4)
    blocks = 8
    assert rep.cosines.shape == (3,)
    assert rep.per_layer_cosines.shape == (3, blocks)
    assert rep.group_names == tuple(f"blk{i}" for i in range(blocks)) + ("head",)
    assert np.all(np.abs(rep.cosines) <= 1.0)
    assert np.all(np.isfinite(rep.losses_vae))
    # the total cosine must be re-derivable from the stored group pieces
    for t in range(3):
        want = _cos_from_stats(rep.group_ips[t].sum(),
                               rep.group_sqnorms_vae[t].sum(),
                               rep.group_sqnorms_gan[t].sum())
        assert rep.cosines[t] == pytest.approx(want, abs=1e-6)
    rows = rep.to_records()
    assert rows[0]["record"] == "conflict_summary"
    assert len(rows) == 4


def test_probe_deterministic(dataset_dir, tiny_cfg):
    a = run_conflict_probe(tiny_cfg, dataset_dir, iters=2, probe_batch=4)
    b = run_conflict_probe(tiny_cfg, dataset_dir, iters=2, probe_batch=4)
    assert np.array_equal(a.cosines, b.cosines)
    assert np.array_equal(a.group_ips, b.group_ips)


def test_taylor_zero_step_changes_nothing(dataset_dir, tiny_cfg):
    diag = taylor_diagnostic(tiny_cfg, dataset_dir, steps=2, eta=0.0)
    assert np.all(diag.predicted == 0.0)
    assert np.all(diag.measured == 0.0)
    assert diag.sign_agreement == 1.0
    assert diag.correlation == 1.0


def test_taylor_first_order_matches_at_small_step(dataset_dir, tiny_cfg):
    diag = taylor_diagnostic(tiny_cfg, dataset_dir, steps=3, eta=1e-5)
    assert np.allclose(diag.predicted, diag.measured, rtol=0.2)
    rows = diag.to_records()
    assert rows[0]["record"] == "taylor_summary"
    assert len(rows) == 4


def test_taylor_pure_first_source_prediction(dataset_dir, tiny_cfg):
    # lam = 1 reduces the prediction to -eta * ||g1||^2, never positive
    cfg = tiny_cfg.replace(mix_lambda=1.0)
    diag = taylor_diagnostic(cfg, dataset_dir, steps=3, eta=1e-5)
    assert np.all(diag.predicted <= 0.0)
    assert np.all(diag.measured < 0.0)


def test_taylor_validation(dataset_dir, tiny_cfg):
    with pytest.raises(InputError):
        taylor_diagnostic(tiny_cfg, dataset_dir, steps=0)
    with pytest.raises(InputError):
        taylor_diagnostic(tiny_cfg, dataset_dir, eta=-1e-5)


def test_taylor_correlation_edge_cases():
    d = TaylorDiagnostic(eta=1e-5, lam=0.5, predicted=np.array([1.0, 2.0]),
                         measured=np.array([1.0, 2.0]))
    assert d.correlation == 1.0
    d2 = TaylorDiagnostic(eta=1e-5, lam=0.5, predicted=np.array([1.0, 1.0]),
                          measured=np.array([1.0, 2.0]))
    assert d2.correlation == 0.0
