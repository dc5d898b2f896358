import csv
import json
from collections import Counter

import numpy as np
import pytest

from fourcropnet import tensor_core as tc
from fourcropnet.cli import main
from fourcropnet.data import generate_synthetic_dataset

from test_train import corrupted_conv_backward

TRAIN_ARGS = ["--epochs", "2", "--batch-size", "16", "--input-size", "32", "--seed", "3"]


@pytest.fixture(scope="module")
def run_dir(synth_root, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert main(["train", "--data", str(synth_root), "--out", str(out), *TRAIN_ARGS]) == 0
    return out


def test_make_synth(tmp_path, capsys):
    out = tmp_path / "s"
    assert main(["make-synth", "--num-classes", "3", "--per-class", "10", "--size", "16", "--out", str(out)]) == 0
    dirs = sorted(p for p in out.iterdir() if p.is_dir())
    assert len(dirs) == 3
    assert all(len(list(d.glob("*.png"))) == 10 for d in dirs)
    assert "wrote 30 images" in capsys.readouterr().out


def test_train_artifacts(run_dir):
    for name in ("effective_config.json", "split.csv", "curves.csv", "model.fcn", "last.fcn"):
        assert (run_dir / name).is_file(), name
    rows = (run_dir / "curves.csv").read_text().splitlines()
    assert len(rows) == 1 + 2
    cfg = json.loads((run_dir / "effective_config.json").read_text())
    assert cfg["model.num_classes"] == 15 and cfg["model.input_size"] == 32


def test_train_rerun_is_byte_identical(run_dir, synth_root, tmp_path):
    assert main(["train", "--data", str(synth_root), "--out", str(tmp_path), *TRAIN_ARGS]) == 0
    for name in ("curves.csv", "split.csv", "model.fcn"):
        assert (tmp_path / name).read_bytes() == (run_dir / name).read_bytes(), name


def test_missing_data_root(tmp_path, capsys):
    missing = tmp_path / "nowhere"
    assert main(["train", "--data", str(missing), "--out", str(tmp_path)]) == 3
    assert str(missing) in capsys.readouterr().err


def test_zero_epochs(synth_root, tmp_path):
    assert main(["train", "--data", str(synth_root), "--out", str(tmp_path), "--epochs", "0"]) == 2


def test_unknown_config_key(synth_root, tmp_path):
    assert main(["train", "--data", str(synth_root), "--set", "model.depth=9"]) == 2


def test_config_file(synth_root, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"train.epochs": 1, "model.input_size": 16, "train.batch_size": 32}))
    assert main(["train", "--config", str(cfg), "--data", str(synth_root), "--out", str(tmp_path)]) == 0
    assert len((tmp_path / "curves.csv").read_text().splitlines()) == 2


def test_eval(run_dir, synth_root, tmp_path):
    assert main(["eval", "--checkpoint", str(run_dir / "model.fcn"), "--data", str(synth_root),
                 "--out", str(tmp_path)]) == 0
    with open(run_dir / "split.csv") as fh:
        expected = Counter(int(r["class_index"]) for r in csv.DictReader(fh) if r["partition"] == "test")
    with open(tmp_path / "confusion.csv") as fh:
        rows = list(csv.reader(fh))[1:]
    assert len(rows) == 15
    assert {k: sum(map(int, r[1:])) for k, r in enumerate(rows)} == dict(expected)
    metrics = json.loads((tmp_path / "metrics.json").read_text())
    # 20 images per class split 16/2/2
    assert metrics["total"] == sum(expected.values()) == 30
    assert len(list(tmp_path.glob("roc_*.csv"))) == 15


def test_eval_class_mismatch(run_dir, tmp_path, capsys):
    other = tmp_path / "four"
    generate_synthetic_dataset(4, 10, 0, other, size=16)
    assert main(["eval", "--checkpoint", str(run_dir / "model.fcn"), "--data", str(other),
                 "--out", str(tmp_path)]) == 2
    assert "num_classes" in capsys.readouterr().err


def test_predict(run_dir, synth_root, capsys):
    image = next(iter(sorted(synth_root.glob("*/*.png"))))
    args = ["predict", "--checkpoint", str(run_dir / "model.fcn"), str(image)]
    assert main(args) == 0
    first = capsys.readouterr().out
    name, conf = first.strip().split("\t")
    assert name.startswith("synth_")
    assert 1 / 15 < float(conf) < 1
    assert main(args) == 0
    assert capsys.readouterr().out == first


def test_predict_unreadable(run_dir, tmp_path):
    bad = tmp_path / "x.png"
    bad.write_bytes(b"not an image")
    assert main(["predict", "--checkpoint", str(run_dir / "model.fcn"), str(bad)]) == 3


def test_summary(capsys):
    assert main(["summary"]) == 0
    text = capsys.readouterr().out
    for shape in ("(112,112,32)", "(56,56,64)", "(28,28,128)"):
        assert shape in text
    assert "377,935" in text and "26,035,279" in text
    assert "6.5 million" in text


def test_gradcheck(capsys):
    assert main(["gradcheck"]) == 0
    out = capsys.readouterr().out
    for kind in ("Conv2D", "BatchNorm", "Dense", "SEBlock", "ProjectionConv2D"):
        assert kind in out
    assert out.strip().endswith("PASS")


def test_gradcheck_fault_injection(monkeypatch, capsys):
    monkeypatch.setattr(tc, "conv2d_backward", corrupted_conv_backward(tc.conv2d_backward))
    assert main(["gradcheck", "--set", "gradcheck.input_size=16"]) == 5
    err = capsys.readouterr().err
    assert "worst offender" in err and "(Conv2D)" in err


def test_dtype_restored_after_f64():
    main(["summary", "--f64", "--set", "model.input_size=16"])
    assert tc.get_dtype() == np.float32
