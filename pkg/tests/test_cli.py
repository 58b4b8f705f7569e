import json
import re

import numpy as np
import pytest

from corpus import write_corpus
from leukonet.checkpoint import save_checkpoint
from leukonet.cli import main
from leukonet.config import TrainConfig
from leukonet.data import CLASS_NAMES, load_dataset, write_ppm
from leukonet.models import build_custom_cnn
from leukonet.synthetic import make_image
from leukonet.tensor import Rng

REPORT_FILES = {"confusion_matrix.csv", "classification_report.csv", "summary.json",
                *(f"roc_class_{n}.csv" for n in CLASS_NAMES)}


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture
def packed(tmp_path, capsys):
    corpus = write_corpus(tmp_path / "corpus", [14, 10, 12, 10], size=40, seed=3)
    code, _, err = run(capsys, "prep", "--input-dir", corpus, "--output", tmp_path / "all.alld", "--size", 32)
    assert code == 0, err
    return tmp_path


def test_full_chain(packed, capsys):
    t = packed
    code, out, err = run(capsys, "split", "--input", t / "all.alld", "--train", 0.8, "--val", 0.1,
                         "--test", 0.1, "--seed", 7, "--out-prefix", t / "p")
    assert code == 0, err
    counts = {k: load_dataset(t / f"p_{k}.alld").class_counts() for k in ("train", "val", "test")}
    assert counts["train"] == [11, 8, 10, 8]
    code, _, err = run(capsys, "balance", "--input", t / "p_train.alld", "--output", t / "bal.alld",
                       "--k", 5, "--seed", 7)
    assert code == 0, err
    assert load_dataset(t / "bal.alld").class_counts() == [11, 11, 11, 11]
    (t / "cfg.json").write_text(json.dumps({"model": "mobilenetv2", "epochs": 2, "input_size": 32,
                                            "width_multiplier": 0.25}))
    code, _, err = run(capsys, "train", "--config", t / "cfg.json", "--data", t / "bal.alld",
                       "--val", t / "p_val.alld", "--out", t / "m.alck", "--log", t / "log.csv")
    assert code == 0, err
    log = (t / "log.csv").read_text().splitlines()
    assert log[0] == "epoch,train_loss,train_acc,val_loss,val_acc" and len(log) == 3
    code, out, err = run(capsys, "eval", "--model", t / "m.alck", "--data", t / "p_test.alld",
                         "--report", t / "rep")
    assert code == 0, err
    assert {p.name for p in (t / "rep").iterdir()} == REPORT_FILES
    summary = json.loads((t / "rep" / "summary.json").read_text())
    assert summary["samples"] == len(load_dataset(t / "p_test.alld"))
    write_ppm(t / "one.ppm", make_image(2, 50, Rng(1)))
    code, out, err = run(capsys, "predict", "--model", t / "m.alck", "--image", t / "one.ppm")
    assert code == 0, err
    assert re.fullmatch(r"(Benign|Early|Pre|Pro)( \d\.\d{6}){4}\n", out)


def test_training_is_deterministic(packed, capsys):
    t = packed
    (t / "cfg.json").write_text('{"epochs": 2, "input_size": 32, "seed": 5}')
    blobs = []
    for i in range(2):
        code, _, err = run(capsys, "train", "--config", t / "cfg.json", "--data", t / "all.alld",
                           "--out", t / f"m{i}.alck", "--log", t / f"l{i}.csv")
        assert code == 0, err
        blobs.append(((t / f"m{i}.alck").read_bytes(), (t / f"l{i}.csv").read_bytes()))
    assert blobs[0] == blobs[1]


def test_predict_confident_checkpoint(tmp_path, capsys):
    model = build_custom_cnn(16, 4, Rng(0))
    model.params["output"]["w"][:] = 0
    model.params["output"]["b"][:] = [0, 0, 0, 20]
    save_checkpoint(model, TrainConfig(input_size=16), tmp_path / "m.alck", CLASS_NAMES)
    write_ppm(tmp_path / "x.ppm", make_image(0, 16, Rng(0)))
    code, out, _ = run(capsys, "predict", "--model", tmp_path / "m.alck", "--image", tmp_path / "x.ppm")
    assert code == 0
    assert out == "Pro 0.000000 0.000000 0.000000 1.000000\n"


def test_split_fractions_must_sum_to_one(packed, capsys):
    code, _, err = run(capsys, "split", "--input", packed / "all.alld", "--train", 0.7, "--val", 0.1,
                       "--test", 0.1, "--out-prefix", packed / "p")
    assert code == 1
    assert err.startswith("error: ") and err.count("\n") == 1
    assert not list(packed.glob("p_*"))


@pytest.mark.parametrize("argv", [[], ["bogus"], ["prep"], ["model"], ["split", "--input"]])
def test_usage_errors(capsys, argv):
    code, _, err = run(capsys, *argv)
    assert code == 1 and err.startswith("error: ")


def test_unknown_config_key_is_usage_error(tmp_path, packed, capsys):
    (tmp_path / "bad.json").write_text('{"epohcs": 5}')
    code, _, err = run(capsys, "train", "--config", tmp_path / "bad.json", "--data", packed / "all.alld",
                       "--out", tmp_path / "m.alck")
    assert code == 1 and "epohcs" in err
    assert not (tmp_path / "m.alck").exists()


def test_data_errors_exit_2(tmp_path, packed, capsys):
    (tmp_path / "junk.alck").write_bytes(b"nope")
    code, _, err = run(capsys, "eval", "--model", tmp_path / "junk.alck", "--data", packed / "all.alld",
                       "--report", tmp_path / "rep")
    assert code == 2 and "junk.alck" in err
    assert not (tmp_path / "rep").exists()
    code, _, err = run(capsys, "balance", "--input", tmp_path / "missing.alld", "--output", tmp_path / "o.alld")
    assert code == 2 and "missing.alld" in err
    (tmp_path / "cfg.json").write_text('{"input_size": 64}')
    code, _, err = run(capsys, "train", "--config", tmp_path / "cfg.json", "--data", packed / "all.alld",
                       "--out", tmp_path / "m.alck")
    assert code == 2 and not (tmp_path / "m.alck").exists()


def test_eval_report_regeneration_is_byte_identical(packed, capsys):
    t = packed
    model = build_custom_cnn(32, 4, Rng(1))
    save_checkpoint(model, TrainConfig(input_size=32), t / "m.alck", CLASS_NAMES)
    for d in ("r1", "r2"):
        assert run(capsys, "eval", "--model", t / "m.alck", "--data", t / "all.alld", "--report", t / d)[0] == 0
    for name in REPORT_FILES:
        assert (t / "r1" / name).read_bytes() == (t / "r2" / name).read_bytes()


def test_model_describe(tmp_path, capsys):
    code, out, _ = run(capsys, "model", "describe")
    assert code == 0 and "12,938,948" in out
    (tmp_path / "c.json").write_text('{"model": "mobilenetv2", "input_size": 32, "width_multiplier": 0.25}')
    code, out, _ = run(capsys, "model", "describe", "--config", tmp_path / "c.json")
    assert code == 0 and "block17" in out


def test_module_entry_point(tmp_path):
    import subprocess
    import sys
    res = subprocess.run([sys.executable, "-m", "leukonet", "split"], capture_output=True, text=True)
    assert res.returncode == 1 and res.stderr.startswith("error: ")
