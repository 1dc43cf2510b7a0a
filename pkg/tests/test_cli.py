import json
import os

import numpy as np
import pytest

from rfscope.cli import main
from rfscope.imageio import read_field_csv, write_field_csv
from rfscope.micro import TrainLog
from rfscope.netspec import format_spec, parse_spec
from rfscope.weights import save_weights

from helpers import make_graph, randomize_parameters

CONV_ONLY = "name c\ninput 2 17 17\nconv 3 2 1 4\nrelu\nconv 5 2 2 3 bias\nconv 1 1 0 2\n"
WITH_POOL = "name p\ninput 2 17 17\nconv 3 1 1 4\nmaxpool 3 2 1 @pool\n"
NO_MATCH = "name n\ninput 2 17 17\nconv 3 1 1 4\nconv 4 2 1 2\n"

TINY_MICRO = {
    "spec": "tiny.spec",
    "variants": ["baseline", "padded"],
    "seeds": 2,
    "threshold": 0.9,
    "dataset": {"image_size": [16, 16], "patch_size": 8, "train_per_class": 8, "test_per_class": 4, "templates_per_split": 3},
    "train": {"epochs": 2, "batch_size": 8},
}
TINY_SPEC = "name tiny\ninput 3 16 16\nconv 3 2 1 4\nbn\nrelu\ngap\nfc 2 bias\n"


def run(*argv):
    return main([str(a) for a in argv])


def write(path, text):
    path.write_text(text)
    return path


def tree(directory):
    out = {}
    for root, _, files in os.walk(directory):
        for f in files:
            full = os.path.join(root, f)
            with open(full, "rb") as fh:
                out[os.path.relpath(full, directory)] = fh.read()
    return out


@pytest.fixture
def micro_config(tmp_path):
    write(tmp_path / "tiny.spec", TINY_SPEC)
    cfg = dict(TINY_MICRO, spec=str(tmp_path / "tiny.spec"))
    return write(tmp_path / "micro.json", json.dumps(cfg))


# --- trf ----------------------------------------------------------------------------

def test_trf_resnet18(tmp_path, capsys):
    assert run("trf", "--spec", "resnet18", "--out", tmp_path) == 0
    assert " 435 " in capsys.readouterr().out
    report = json.loads((tmp_path / "trf.json").read_text())
    assert report["nodes"]["layer4.1.relu"]["rf_size"] == [435, 435]


def test_trf_three_convs(tmp_path, capsys):
    assert run("trf", "--spec", "three_conv", "--node", "conv3", "--out", tmp_path) == 0
    assert json.loads((tmp_path / "trf.json").read_text())["nodes"]["conv3"]["rf_size"] == [7, 7]


def test_trf_bad_spec_exits_2_with_line(tmp_path, capsys):
    bad = write(tmp_path / "bad.spec", "name b\ninput 3 8 8\nconv 3 1 1 4\nconv 3 x 1 4\n")
    assert run("trf", "--spec", bad, "--out", tmp_path / "o") == 2
    assert "line 4" in capsys.readouterr().err


def test_unknown_node_is_runtime_error(tmp_path):
    assert run("trf", "--spec", "three_conv", "--node", "nope", "--out", tmp_path) == 1


# --- erf, fit, imbalance ----------------------------------------------------------------

def test_erf_synthetic_output(tmp_path):
    assert run("erf", "--spec", "toy_resnet", "--synthetic", 8, "--target", "output", "--out", tmp_path) == 0
    values = read_field_csv(tmp_path / "erf.csv")
    assert values.shape == (64, 64) and values.min() >= 0
    for name in ("erf.pgm", "erf.json", "manifest.json"):
        assert (tmp_path / name).exists()


def test_erf_node_target_and_weights(tmp_path):
    spec = write(tmp_path / "c.spec", CONV_ONLY)
    save_weights(make_graph(CONV_ONLY, seed=3)).save(tmp_path / "w.rfsw")
    out = tmp_path / "o"
    assert run("erf", "--spec", spec, "--weights", tmp_path / "w.rfsw", "--synthetic", 4, "--target", "conv2", "--out", out) == 0
    meta = json.loads((out / "erf.json").read_text())
    assert meta["target"]["node"] == "conv2"
    manifest = json.loads((out / "manifest.json").read_text())
    assert set(manifest["inputs"]) == {"spec", "weights"}


def test_erf_is_byte_deterministic(tmp_path):
    args = ("erf", "--spec", "toy_resnet", "--synthetic", 4, "--class", 1)
    assert run(*args, "--out", tmp_path / "a") == 0
    assert run(*args, "--out", tmp_path / "b") == 0
    assert (tmp_path / "a" / "erf.csv").read_bytes() == (tmp_path / "b" / "erf.csv").read_bytes()


def test_erf_images_directory_errors(tmp_path, capsys):
    from rfscope.imageio import write_ppm

    d = tmp_path / "imgs"
    d.mkdir()
    write_ppm(d / "a.ppm", np.zeros((16, 16, 3), np.uint8))
    write_ppm(d / "b.ppm", np.zeros((8, 8, 3), np.uint8))
    assert run("erf", "--spec", "toy_resnet", "--images", d, "--out", tmp_path / "o") == 1
    assert "b.ppm" in capsys.readouterr().err


def test_fit_gaussian_csv(tmp_path):
    y, x = np.mgrid[0:60, 0:60]
    write_field_csv(tmp_path / "g.csv", np.exp(-((x - 30.0) ** 2 + (y - 28.0) ** 2) / (2 * 7.0**2)))
    assert run("fit", "--erf", tmp_path / "g.csv", "--out", tmp_path / "o") == 0
    fit = json.loads((tmp_path / "o" / "fit.json").read_text())
    assert fit["sigma_x"] == pytest.approx(7.0, rel=1e-3)
    assert fit["sigma_y"] == pytest.approx(7.0, rel=1e-3)


def test_constant_csv(tmp_path):
    write_field_csv(tmp_path / "c.csv", np.full((6, 6), 2.0))
    assert run("fit", "--erf", tmp_path / "c.csv", "--out", tmp_path / "f") == 1
    assert run("imbalance", "--erf", tmp_path / "c.csv", "--out", tmp_path / "i") == 0
    report = json.loads((tmp_path / "i" / "imbalance.json").read_text())
    assert report == {"l1": 0.0, "l2": 0.0, "normalized": False}


def test_checkerboard_csv(tmp_path):
    y, x = np.mgrid[0:16, 0:16]
    write_field_csv(tmp_path / "k.csv", ((x + y) % 2).astype(float))
    assert run("imbalance", "--erf", tmp_path / "k.csv", "--out", tmp_path / "i") == 0
    assert json.loads((tmp_path / "i" / "imbalance.json").read_text())["l1"] == 1.0


def test_malformed_csv_is_usage_error(tmp_path):
    write(tmp_path / "m.csv", "1,2\n3\n")
    assert run("fit", "--erf", tmp_path / "m.csv", "--out", tmp_path / "o") == 2


# --- pad ----------------------------------------------------------------------------

def test_pad_conv_only_is_equivalent(tmp_path):
    spec = write(tmp_path / "c.spec", CONV_ONLY)
    g = randomize_parameters(make_graph(CONV_ONLY, seed=1), np.random.default_rng(1))
    save_weights(g).save(tmp_path / "w.rfsw")
    assert run("pad", "--spec", spec, "--weights", tmp_path / "w.rfsw", "--out", tmp_path / "o") == 0
    report = json.loads((tmp_path / "o" / "padded_report.json").read_text())
    assert report["layers_modified"] == 2
    assert report["max_output_deviation"] <= 1e-12
    assert all(entry["max_deviation"] <= 1e-12 for entry in report["layers"])
    padded = parse_spec((tmp_path / "o" / "padded.spec").read_text())
    assert [layer.kernel for layer in padded.walk()][0] == 4


def test_pad_flags_pools(tmp_path, capsys):
    spec = write(tmp_path / "p.spec", WITH_POOL)
    assert run("pad", "--spec", spec, "--out", tmp_path / "o") == 0
    report = json.loads((tmp_path / "o" / "padded_report.json").read_text())
    assert report["layers"] == [
        {"name": "pool", "op": "maxpool", "max_deviation": report["layers"][0]["max_deviation"], "note": "non-equivalent replacement"}
    ]
    assert "non-equivalent replacement" in capsys.readouterr().out


def test_pad_without_matches_is_identity(tmp_path, capsys):
    spec = write(tmp_path / "n.spec", format_spec(parse_spec(NO_MATCH)))
    save_weights(make_graph(NO_MATCH, seed=2)).save(tmp_path / "w.rfsw")
    assert run("pad", "--spec", spec, "--weights", tmp_path / "w.rfsw", "--out", tmp_path / "o") == 0
    assert "0 layers modified" in capsys.readouterr().out
    assert (tmp_path / "o" / "padded.spec").read_bytes() == spec.read_bytes()
    assert (tmp_path / "o" / "padded.rfsw").read_bytes() == (tmp_path / "w.rfsw").read_bytes()


def test_pad_rejects_corrupt_weights(tmp_path):
    spec = write(tmp_path / "c.spec", CONV_ONLY)
    (tmp_path / "w.rfsw").write_bytes(b"NOPE")
    assert run("pad", "--spec", spec, "--weights", tmp_path / "w.rfsw", "--out", tmp_path / "o") == 2


# --- coverage -------------------------------------------------------------------------

def test_coverage_checkerboard(tmp_path):
    spec = write(tmp_path / "s.spec", "name s\ninput 1 40 40\nconv 3 2 1 1\n")
    assert run("coverage", "--spec", spec, "--out", tmp_path / "a") == 0
    assert not json.loads((tmp_path / "a" / "coverage.json").read_text())["interior_uniform"]
    spec = write(tmp_path / "e.spec", "name e\ninput 1 40 40\nconv 4 2 1 1\n")
    assert run("coverage", "--spec", spec, "--method", "gradient", "--out", tmp_path / "b") == 0
    assert json.loads((tmp_path / "b" / "coverage.json").read_text())["interior_uniform"]


# --- micro ----------------------------------------------------------------------------

def test_micro_smoke(tmp_path, micro_config, capsys):
    assert run("micro", "--config", micro_config, "--epochs", 1, "--out", tmp_path / "o") == 0
    out = tmp_path / "o"
    summary = json.loads((out / "summary.json").read_text())
    assert summary["seeds"] == [1, 2]
    assert set(summary["variants"]) == {"baseline", "padded"}
    for variant in ("baseline", "padded"):
        log = TrainLog.from_csv(out / f"{variant}_seed1.csv")
        assert [r.epoch for r in log.records] == [1]
        assert summary["variants"][variant]["median"] == 1.0
    assert "median" in capsys.readouterr().out


def test_micro_is_deterministic(tmp_path, micro_config):
    for d in ("a", "b"):
        assert run("micro", "--config", micro_config, "--seeds", 1, "--out", tmp_path / d) == 0
    assert tree(tmp_path / "a") == tree(tmp_path / "b")


def test_micro_bad_config(tmp_path):
    write(tmp_path / "bad.json", "{not json")
    assert run("micro", "--config", tmp_path / "bad.json", "--out", tmp_path / "o") == 2
    write(tmp_path / "short.json", json.dumps({"spec": "toy_resnet"}))
    assert run("micro", "--config", tmp_path / "short.json", "--out", tmp_path / "o") == 2
    write(tmp_path / "typo.json", json.dumps({**TINY_MICRO, "spec": "toy_resnet", "train": {"epoch": 3}}))
    assert run("micro", "--config", tmp_path / "typo.json", "--out", tmp_path / "o") == 2


def test_bundled_micro_config_loads():
    from rfscope.cli import load_micro_config

    cfg, _ = load_micro_config("micro_desk.json")
    assert cfg["seeds"] == 5 and cfg["variants"] == ["baseline", "padded"]


# --- manifests and exit codes ------------------------------------------------------------

def test_usage_errors_exit_2(tmp_path):
    assert run("trf") == 2
    assert run("nosuch") == 2
    assert run("erf", "--spec", "toy_resnet", "--out", tmp_path) == 2
    assert run("erf", "--spec", "toy_resnet", "--synthetic", 0, "--out", tmp_path) == 2


def test_missing_files_exit_1(tmp_path):
    assert run("trf", "--spec", tmp_path / "none.spec", "--out", tmp_path / "o") == 1
    assert run("fit", "--erf", tmp_path / "none.csv", "--out", tmp_path / "o") == 1
    assert run("rerun", tmp_path / "none.json") == 1


def test_manifest_contents(tmp_path):
    assert run("trf", "--spec", "resnet34", "--seed", 7, "--out", tmp_path) == 0
    m = json.loads((tmp_path / "manifest.json").read_text())
    assert m["subcommand"] == "trf"
    assert m["seed"] == 7
    assert m["argv"] == ["trf", "--spec", "resnet34", "--seed", "7"]
    assert m["outputs"] == ["trf.json"]
    assert len(m["inputs"]["spec"]["sha256"]) == 64


def test_rerun_reproduces_bytes(tmp_path):
    spec = write(tmp_path / "c.spec", CONV_ONLY)
    assert run("pad", "--spec", spec, "--seed", 3, "--out", tmp_path / "a") == 0
    assert run("rerun", tmp_path / "a" / "manifest.json", "--out", tmp_path / "b") == 0
    assert tree(tmp_path / "a") == tree(tmp_path / "b")
