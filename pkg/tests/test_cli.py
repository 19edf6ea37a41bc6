import json
import subprocess
import sys

import numpy as np
import pytest

from hime.cli import main
from hime.diffops import bicubic_resize
from hime.imaging import load_image, save_image, to_uint8
from hime.model import HimeConfig, model_init, save_checkpoint
from hime.tensor import load_htf

TINY = ["--c-f", "8", "--k-l", "1", "--k-h", "1", "--k-r", "1", "--size", "32", "--batch", "2"]


@pytest.fixture(scope="module")
def images(tmp_path_factory):
    d = tmp_path_factory.mktemp("img")
    rng = np.random.default_rng(0)
    paths = {}
    for name, shape in [("lr", (1, 3, 8, 8)), ("gt", (1, 3, 32, 32)), ("big", (1, 3, 24, 24))]:
        paths[name] = d / f"{name}.png"
        save_image(rng.uniform(0, 1, shape), paths[name])
    for i in range(5):
        paths[f"ref{i}"] = d / f"ref{i}.png"
        save_image(rng.uniform(0, 1, (1, 3, 32, 32)), paths[f"ref{i}"])
    return paths


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert main(["train", "--iters", "2", "--out", str(out), "--refs", "3", *TINY]) == 0
    return out


def test_corrmap_writes_files(images, tmp_path, capsys):
    code = main(["corrmap", "--input", str(images["big"]), "--k", "1", "--out", str(tmp_path / "m.png"),
                 "--raw", str(tmp_path / "m.htf")])
    assert code == 0
    assert (tmp_path / "m.png").exists()
    assert load_htf(tmp_path / "m.htf").shape == (1, 1, 24, 24)


def test_corrmap_even_k_is_usage_error(images, tmp_path, capsys):
    assert main(["corrmap", "--input", str(images["big"]), "--k", "4", "--out", str(tmp_path / "m.png")]) == 2
    assert "odd" in capsys.readouterr().err


def test_gradcheck_single_op(capsys):
    assert main(["gradcheck", "--op", "deformable_conv"]) == 0
    rows = [l for l in capsys.readouterr().out.splitlines()[1:] if l.strip()]
    assert len(rows) == 1 and rows[0].startswith("deformable_conv")


def test_gradcheck_impossible_tolerance_fails(capsys):
    assert main(["gradcheck", "--op", "activation", "--tolerance", "1e-12"]) == 1
    assert "FAIL" in capsys.readouterr().out


def test_gradcheck_unknown_op(capsys):
    assert main(["gradcheck", "--op", "fft"]) == 2
    err = capsys.readouterr().err
    assert "conv2d" in err and "fft" in err


def test_train_writes_outputs(trained):
    names = {p.name for p in trained.iterdir()}
    assert {"checkpoint.hmc", "log.csv", "iter000002_sr.png"} <= names


def test_train_config_file_and_flag_precedence(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"iters": 1, "refs": 0, "c_f": 8, "k_l": 1, "k_h": 1, "k_r": 1,
                               "size": 32, "batch": 1, "out": str(tmp_path / "a")}))
    assert main(["train", "--config", str(cfg)]) == 0
    assert (tmp_path / "a" / "log.csv").read_text().count("\n") == 2
    assert main(["train", "--config", str(cfg), "--iters", "2", "--out", str(tmp_path / "b")]) == 0
    assert (tmp_path / "b" / "log.csv").read_text().count("\n") == 3


@pytest.mark.parametrize("content", ['{"bogus": 1}', '[1, 2]', '{"rfa": "huge"}', "not json"])
def test_train_bad_config(tmp_path, content):
    cfg = tmp_path / "c.json"
    cfg.write_text(content)
    assert main(["train", "--config", str(cfg)]) == 2


def test_train_unknown_flag():
    assert main(["train", "--iters", "1", "--momentum", "0.9"]) == 2


def test_train_large_without_flow_source(tmp_path):
    assert main(["train", "--rfa", "large", "--flow-source", "none", "--out", str(tmp_path)]) == 2


def test_train_same_seed_same_log(tmp_path):
    for name in ("a", "b"):
        assert main(["train", "--iters", "2", "--out", str(tmp_path / name), "--refs", "1", *TINY]) == 0
    assert (tmp_path / "a" / "log.csv").read_bytes() == (tmp_path / "b" / "log.csv").read_bytes()


@pytest.mark.parametrize("n_refs", [1, 5])
def test_infer_any_reference_count(trained, images, tmp_path, n_refs):
    refs = [str(images[f"ref{i}"]) for i in range(n_refs)]
    out = tmp_path / "sr.png"
    assert main(["infer", "--checkpoint", str(trained / "checkpoint.hmc"), "--lr", str(images["lr"]),
                 "--ref", *refs, "--out", str(out), "--gt", str(images["gt"])]) == 0
    assert load_image(out).shape == (1, 3, 32, 32)


def test_infer_zero_weights_is_bicubic(images, tmp_path):
    m = model_init(HimeConfig.toy(c_f=8, k_l=1, k_h=1, k_r=1))
    for p in m.registry:
        p.value[...] = 0.0
    save_checkpoint(tmp_path / "zero.hmc", m)
    assert main(["infer", "--checkpoint", str(tmp_path / "zero.hmc"), "--lr", str(images["lr"]),
                 "--ref", str(images["ref0"]), "--out", str(tmp_path / "sr.png")]) == 0
    lr = load_image(images["lr"])
    expected = to_uint8(bicubic_resize(lr, 4)[0])
    np.testing.assert_array_equal(to_uint8(load_image(tmp_path / "sr.png")), expected)


def test_infer_missing_checkpoint(images, tmp_path):
    assert main(["infer", "--checkpoint", str(tmp_path / "none.hmc"), "--lr", str(images["lr"]),
                 "--out", str(tmp_path / "sr.png")]) == 2


def test_infer_flow_count_mismatch(images, tmp_path):
    save_checkpoint(tmp_path / "large.hmc", model_init(HimeConfig.toy(c_f=8, k_l=1, k_h=1, k_r=1, rfa_mode="large")))
    flow = tmp_path / "f.htf"
    from hime.tensor import save_htf
    save_htf(flow, np.zeros((1, 2, 8, 8)))
    assert main(["infer", "--checkpoint", str(tmp_path / "large.hmc"), "--lr", str(images["lr"]),
                 "--ref", str(images["ref0"]), str(images["ref1"]), "--flow", str(flow),
                 "--out", str(tmp_path / "sr.png")]) == 2
    assert main(["infer", "--checkpoint", str(tmp_path / "large.hmc"), "--lr", str(images["lr"]),
                 "--ref", str(images["ref0"]), "--flow", str(flow), "--out", str(tmp_path / "sr.png")]) == 0


def test_metrics_identical(images, capsys):
    assert main(["metrics", "--a", str(images["gt"]), "--b", str(images["gt"])]) == 0
    out = capsys.readouterr().out.split()
    assert out[:2] == ["psnr", "inf"] and float(out[3]) == 1.0


def test_metrics_size_mismatch(images):
    assert main(["metrics", "--a", str(images["gt"]), "--b", str(images["big"])]) == 2


def test_flow_self_is_zero(images, tmp_path):
    assert main(["flow", "--src", str(images["big"]), "--dst", str(images["big"]), "--out", str(tmp_path / "f.htf")]) == 0
    f = load_htf(tmp_path / "f.htf")
    assert f.shape == (1, 2, 24, 24) and not f.any()


def test_flow_shifted_pair(tmp_path):
    rng = np.random.default_rng(1)
    big = rng.uniform(0, 1, (1, 3, 40, 40))
    save_image(big[:, :, 4:36, 4:36], tmp_path / "src.png")
    save_image(big[:, :, 6:38, 5:37], tmp_path / "dst.png")  # dst(p) = src(p + (2, 1))
    assert main(["flow", "--src", str(tmp_path / "src.png"), "--dst", str(tmp_path / "dst.png"),
                 "--out", str(tmp_path / "f.htf"), "--radius", "3"]) == 0
    f = load_htf(tmp_path / "f.htf")
    vals, counts = np.unique(f[0, 0], return_counts=True)
    assert vals[counts.argmax()] == 2
    vals, counts = np.unique(f[0, 1], return_counts=True)
    assert vals[counts.argmax()] == 1


def test_help_lists_defaults():
    for cmd in ("corrmap", "gradcheck", "train", "infer", "metrics", "flow"):
        out = subprocess.run([sys.executable, "-m", "hime", cmd, "--help"], capture_output=True, text=True)
        assert out.returncode == 0
        assert "default" in out.stdout
