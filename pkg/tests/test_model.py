import numpy as np
import pytest

from hime.diffops import bicubic_resize
from hime.model import (
    HimeConfig, checkpoint_dumps, checkpoint_loads, extract_lr, extract_ref, hime_forward,
    load_checkpoint, model_init, reconstruct, save_checkpoint,
)
from hime.tensor import ConfigurationError, FormatError, ShapeError


@pytest.fixture(scope="module")
def toy():
    return model_init(HimeConfig.toy(), dtype=np.float64)


@pytest.fixture
def rng():
    return np.random.default_rng(5)


def zero_prefix(model, prefix):
    for p in model.registry:
        if p.id.startswith(prefix):
            p.value[...] = 0.0


def test_same_seed_bit_identical():
    a, b = model_init(HimeConfig.toy(seed=4)), model_init(HimeConfig.toy(seed=4))
    assert a.registry.ids() == b.registry.ids()
    for pa in a.registry:
        assert pa.value.tobytes() == b.registry[pa.id].value.tobytes()


def test_different_seed_differs():
    a, b = model_init(HimeConfig.toy(seed=1)), model_init(HimeConfig.toy(seed=2))
    assert not np.array_equal(a.registry["lr_extract.conv0.weight"].value,
                              b.registry["lr_extract.conv0.weight"].value)


def test_toy_registry_fresh(toy):
    assert len(toy.registry) > 0
    assert all(not p.grad.any() for p in toy.registry)
    assert all(not p.value.any() for p in toy.registry if p.id.endswith(".bias"))


def test_param_count_grows_with_reconstructor_depth():
    counts = [model_init(HimeConfig.toy(k_r=k)).registry.count() for k in (0, 1, 2, 4)]
    assert counts == sorted(set(counts))


@pytest.mark.parametrize("kw, match", [({"s": 3}, "scale"), ({"c_f": 0}, "c_f"),
                                       ({"rfa_mode": "wide"}, "rfa_mode"), ({"cofa_mode": "sum"}, "cofa_mode")])
def test_config_validation(kw, match):
    with pytest.raises(ConfigurationError, match=match):
        HimeConfig.toy(**kw)


def test_extract_lr_shape(toy, rng):
    f, _ = extract_lr(toy, rng.uniform(0, 1, (1, 3, 16, 16)))
    assert f.shape == (1, 16, 16, 16)


def test_extract_lr_zero_weights_zero_features(rng):
    m = model_init(HimeConfig.toy(), dtype=np.float64)
    zero_prefix(m, "lr_extract.")
    f, _ = extract_lr(m, rng.uniform(0, 1, (1, 3, 8, 8)))
    assert not f.any()


def test_extract_ref_shape(toy, rng):
    f, _ = extract_ref(toy, rng.uniform(0, 1, (1, 3, 64, 64)))
    assert f.shape == (1, 16, 16, 16)


def test_extract_ref_indivisible(toy):
    with pytest.raises(ShapeError):
        extract_ref(toy, np.zeros((1, 3, 30, 32)))


@pytest.mark.parametrize("s", [2, 4, 8])
def test_reconstruct_scales(s, rng):
    m = model_init(HimeConfig.toy(s=s, k_r=1), dtype=np.float64)
    out, _ = reconstruct(m, rng.standard_normal((1, 16, 3, 5)))
    assert out.shape == (1, 3, 3 * s, 5 * s)


def test_reconstruct_icnr_blocks_constant(rng):
    # with no residual blocks the first upsampler sees the raw input; a
    # spatially constant feature gives constant 2x2 blocks at the interior
    m = model_init(HimeConfig.toy(s=2, k_r=0), dtype=np.float64)
    m.registry["recon.final.weight"].value[...] = 0.0
    m.registry["recon.final.weight"].value[:, :, 1, 1] = np.random.default_rng(0).standard_normal((3, 16))
    out, _ = reconstruct(m, np.ones((1, 16, 6, 6)))
    blocks = out.reshape(1, 3, 6, 2, 6, 2)
    assert np.ptp(blocks, axis=(3, 5)).max() < 1e-12


def test_forward_shape_contract(toy, rng):
    lr = rng.uniform(0, 1, (1, 3, 16, 16))
    refs = [rng.uniform(0, 1, (1, 3, 64, 64)) for _ in range(3)]
    sr, back = hime_forward(toy, lr, refs)
    assert sr.shape == (1, 3, 64, 64)
    toy.registry.zero_grad()
    assert back(np.ones_like(sr)).shape == lr.shape
    toy.registry.zero_grad()


def test_zero_reconstructor_is_bicubic(rng):
    m = model_init(HimeConfig.toy(), dtype=np.float64)
    zero_prefix(m, "recon.")
    lr = rng.uniform(0, 1, (1, 3, 8, 8))
    sr, _ = hime_forward(m, lr, [rng.uniform(0, 1, (1, 3, 32, 32))])
    np.testing.assert_array_equal(sr, bicubic_resize(lr, 4)[0])


def test_references_change_output(toy, rng):
    lr = rng.uniform(0, 1, (1, 3, 8, 8))
    refs = [rng.uniform(0, 1, (1, 3, 32, 32)) for _ in range(3)]
    with_refs, _ = hime_forward(toy, lr, refs)
    without, _ = hime_forward(toy, lr, [])
    assert np.abs(with_refs - without).max() > 1e-6


@pytest.mark.parametrize("n_set", [1, 2, 5])
def test_any_reference_count(toy, rng, n_set):
    lr = rng.uniform(0, 1, (2, 3, 8, 8))
    sr, _ = hime_forward(toy, lr, [rng.uniform(0, 1, (2, 3, 32, 32)) for _ in range(n_set)])
    assert sr.shape == (2, 3, 32, 32)


@pytest.mark.parametrize("agg", ["average", "maxpool"])
def test_baseline_aggregation_runs(agg, rng):
    m = model_init(HimeConfig.toy(cofa_mode=agg), dtype=np.float64)
    sr, _ = hime_forward(m, rng.uniform(0, 1, (1, 3, 8, 8)), [rng.uniform(0, 1, (1, 3, 32, 32))] * 2)
    assert np.isfinite(sr).all()


def test_large_mode_needs_flows(rng):
    m = model_init(HimeConfig.toy(rfa_mode="large"), dtype=np.float64)
    lr = rng.uniform(0, 1, (1, 3, 8, 8))
    refs = [rng.uniform(0, 1, (1, 3, 32, 32))] * 2
    with pytest.raises(ConfigurationError):
        hime_forward(m, lr, refs)
    sr, _ = hime_forward(m, lr, refs, [np.zeros((1, 2, 8, 8))] * 2)
    assert sr.shape == (1, 3, 32, 32)


def test_reference_size_mismatch(toy, rng):
    with pytest.raises(ShapeError):
        hime_forward(toy, rng.uniform(0, 1, (1, 3, 8, 8)), [rng.uniform(0, 1, (1, 3, 64, 64))])


def test_checkpoint_round_trip_bit_exact(tmp_path):
    m = model_init(HimeConfig.toy(seed=9, rfa_mode="conv"))
    save_checkpoint(tmp_path / "m.hmc", m)
    back = load_checkpoint(tmp_path / "m.hmc")
    assert back.cfg == m.cfg
    assert sorted(back.registry.ids()) == sorted(m.registry.ids())
    for p in m.registry:
        q = back.registry[p.id].value
        assert q.dtype == p.value.dtype and q.tobytes() == p.value.tobytes()
    assert checkpoint_dumps(back) == checkpoint_dumps(m)


def test_checkpoint_header():
    buf = checkpoint_dumps(model_init(HimeConfig.toy()))
    assert buf[:4] == b"HMC1"
    n = int.from_bytes(buf[4:8], "little")
    assert b'"c_f":16' in buf[8:8 + n]


def test_checkpoint_rejects_garbage():
    with pytest.raises(FormatError):
        checkpoint_loads(b"HTF1" + bytes(20))
