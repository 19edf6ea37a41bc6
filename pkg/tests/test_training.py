import csv
import io

import numpy as np
import pytest

from hime.model import HimeConfig, load_checkpoint
from hime.tensor import ConfigurationError, ParameterError, Registry
from hime.training import (
    AdamState, SynthSpec, adam_step, collate, estimate_flows, holdout_batch, log_to_csv, make_sample,
    render_texture, similarity_warp, synth_dataset, train_toy,
)


def tiny_cfg(**kw):
    return HimeConfig.toy(**{**dict(c_f=8, k_l=1, k_h=1, k_r=1, n_refs=2), **kw})


def tiny_spec(**kw):
    return SynthSpec(**{**dict(size=32, n_refs=2), **kw})


def test_adam_zero_grad_keeps_params():
    reg = Registry()
    p = reg.add("w", np.array([[[[1.0, -2.0]]]]))
    state = adam_step(reg, AdamState(lr=0.1))
    np.testing.assert_array_equal(p.value.ravel(), [1.0, -2.0])
    assert state.t == 1


def test_adam_first_step_is_lr_sign():
    reg = Registry()
    p = reg.add("w", np.zeros((1, 1, 1, 3)))
    p.grad[...] = [[[[3.0, -1e-3, 50.0]]]]
    adam_step(reg, AdamState(lr=1e-2))
    np.testing.assert_allclose(p.value.ravel(), [-1e-2, 1e-2, -1e-2], rtol=1e-2)
    assert not p.grad.any()


def test_adam_first_step_ignores_gradient_scale():
    steps = []
    for scale in (1.0, 10.0):
        reg = Registry()
        p = reg.add("w", np.zeros((1, 1, 2, 2)))
        p.grad[...] = scale * np.array([0.3, -2.0, 1e-2, 5.0]).reshape(1, 1, 2, 2)
        adam_step(reg, AdamState(lr=1e-3))
        steps.append(p.value.copy())
    np.testing.assert_allclose(steps[1], steps[0], rtol=0.02)


def test_adam_minimises_quadratic():
    reg = Registry()
    p = reg.add("w", np.zeros((1, 1, 1, 1)))
    state = AdamState(lr=0.1)
    for _ in range(500):
        p.grad[...] = 2 * (p.value - 3.0)
        adam_step(reg, state)
    assert abs(p.value.item() - 3.0) < 0.05


def test_adam_nan_names_parameter():
    reg = Registry()
    reg.add("ok", np.zeros((1, 1, 1, 1)))
    bad = reg.add("recon.final.weight", np.zeros((1, 1, 1, 1)))
    bad.grad[...] = np.nan
    with pytest.raises(FloatingPointError, match="recon.final.weight"):
        adam_step(reg, AdamState())


def test_texture_range_and_determinism():
    a = render_texture(np.random.default_rng(1), 32)
    b = render_texture(np.random.default_rng(1), 32)
    assert a.shape == (1, 3, 32, 32)
    assert a.min() >= 0 and a.max() <= 1
    np.testing.assert_array_equal(a, b)


def test_similarity_warp_identity():
    img = render_texture(np.random.default_rng(0), 16)
    np.testing.assert_allclose(similarity_warp(img, 0.0, 1.0, 0.0, 0.0), img, atol=1e-12)


def test_similarity_warp_integer_translation():
    img = render_texture(np.random.default_rng(0), 16)
    out = similarity_warp(img, 0.0, 1.0, 2.0, -1.0)
    # out(p) = img(p - (ty, tx)) inside the frame
    np.testing.assert_allclose(out[..., 2:14, 2:14], img[..., 0:12, 3:15], atol=1e-12)


def test_refs_differ_from_target():
    s = make_sample(tiny_spec(), 0)
    assert len(s.refs) == 2
    for r in s.refs:
        assert np.abs(r - s.hr).mean() > 0
    assert s.lr.shape == (1, 3, 8, 8)


def test_snapped_translation_is_whole_lr_pixels():
    spec = tiny_spec(max_rotate=0.0, scale_range=(1.0, 1.0), n_refs=4)
    s = make_sample(spec, 3)
    inner = slice(4, 28)
    for ref in s.refs:
        # out(p) = hr(p - t) for some t on the 4-pixel grid
        hits = [(ty, tx) for ty in (-4, 0, 4) for tx in (-4, 0, 4)
                if np.allclose(ref[..., inner, inner], s.hr[..., 4 - ty:28 - ty, 4 - tx:28 - tx], atol=1e-12)]
        assert len(hits) == 1


def test_same_seed_same_stream():
    a = list(synth_dataset(tiny_spec(count=3)))
    b = list(synth_dataset(tiny_spec(count=3)))
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x.hr, y.hr)
        for r, q in zip(x.refs, y.refs):
            np.testing.assert_array_equal(r, q)


def test_even_flip_reverts_bit_exactly():
    plain = tiny_spec(flip_mode="none")
    even = tiny_spec(flip_mode="even")
    flipped = [i for i in range(20) if make_sample(even, i).flip == "all"]
    assert flipped
    for i in flipped[:3]:
        a, b = make_sample(plain, i), make_sample(even, i)
        np.testing.assert_array_equal(b.lr[..., ::-1], a.lr)
        np.testing.assert_array_equal(b.hr[..., ::-1], a.hr)
        for r, q in zip(b.refs, a.refs):
            np.testing.assert_array_equal(r[..., ::-1], q)


def test_uneven_flip_never_flips_both():
    flips = {make_sample(tiny_spec(flip_mode="uneven"), i).flip for i in range(40)}
    assert flips <= {"", "target", "refs"}
    assert {"target", "refs"} <= flips


@pytest.mark.parametrize("kw", [dict(size=30), dict(max_rotate=-1), dict(scale_range=(0, 1)), dict(flip_mode="odd")])
def test_spec_validation(kw):
    with pytest.raises(ParameterError):
        tiny_spec(**kw)


def test_estimate_flows_shapes():
    lr, _, refs = collate(list(synth_dataset(tiny_spec(count=2))))
    flows = estimate_flows(lr, refs, 4)
    assert len(flows) == 2 and flows[0].shape == (2, 2, 8, 8)


def test_holdout_disjoint_from_training():
    spec = tiny_spec()
    hold = holdout_batch(spec, 2)
    train = collate(list(synth_dataset(tiny_spec(count=2))))
    assert not np.array_equal(hold[1], train[1])


def test_zero_learning_rate_constant_loss():
    # a two-sample training set and batch 2: every step sees the same batch
    res = train_toy(tiny_cfg(), tiny_spec(count=2), 4, lr=0.0, batch=2, holdout=2)
    totals = [r["total"] for r in res.log]
    assert len(set(totals)) == 1


def test_same_seed_identical_logs():
    a = train_toy(tiny_cfg(), tiny_spec(), 4, lr=1e-3, batch=2, holdout=2, eval_every=2)
    b = train_toy(tiny_cfg(), tiny_spec(), 4, lr=1e-3, batch=2, holdout=2, eval_every=2)
    assert a.csv_text() == b.csv_text()
    rows = list(csv.DictReader(io.StringIO(a.csv_text())))
    assert [r["iter"] for r in rows] == ["1", "2", "3", "4"]
    assert rows[0]["psnr_holdout"] == "" and rows[1]["psnr_holdout"] != ""


def test_different_aggregation_changes_log():
    a = train_toy(tiny_cfg(cofa_mode="cofa"), tiny_spec(), 3, lr=1e-3, batch=2, holdout=2)
    b = train_toy(tiny_cfg(cofa_mode="average"), tiny_spec(), 3, lr=1e-3, batch=2, holdout=2)
    assert a.csv_text() != b.csv_text()


def test_outputs_written(tmp_path):
    train_toy(tiny_cfg(), tiny_spec(), 2, lr=1e-3, batch=2, holdout=2, out_dir=tmp_path, sample_every=1)
    names = {p.name for p in tmp_path.iterdir()}
    assert {"checkpoint.hmc", "log.csv", "iter000002_sr.png", "iter000002_bicubic.png", "iter000002_gt.png"} <= names
    assert not any(n.endswith(".tmp") for n in names)
    m = load_checkpoint(tmp_path / "checkpoint.hmc")
    assert m.cfg == tiny_cfg()


@pytest.mark.parametrize("loss", ["rec+cor", "p"])
def test_loss_presets_train(loss):
    res = train_toy(tiny_cfg(), tiny_spec(), 2, loss=loss, lr=1e-3, batch=2, holdout=2)
    assert res.log[-1]["l_cor"] > 0
    if loss == "p":
        assert res.log[-1]["l_per"] is not None


def test_large_mode_trains_with_block_matching():
    res = train_toy(tiny_cfg(rfa_mode="large"), tiny_spec(), 2, lr=1e-3, batch=2, holdout=2)
    assert np.isfinite(res.holdout["psnr"])


def test_reference_free_baseline():
    res = train_toy(tiny_cfg(n_refs=0), tiny_spec(), 2, lr=1e-3, batch=2, holdout=2)
    assert np.isfinite(res.holdout["psnr"])


def test_model_wants_more_refs_than_data():
    with pytest.raises(ConfigurationError):
        train_toy(tiny_cfg(n_refs=3), tiny_spec(n_refs=2), 1)


def test_csv_inf_and_blank():
    text = log_to_csv([{"iter": 1, "l_rec": 0.5, "l_cor": None, "l_per": None, "total": 0.5,
                        "psnr_holdout": float("inf")}])
    assert text.splitlines() == ["iter,l_rec,l_cor,l_per,total,psnr_holdout", "1,0.5,,,0.5,inf"]
