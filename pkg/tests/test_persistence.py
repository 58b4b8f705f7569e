import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from leukonet.checkpoint import CheckpointError, decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint
from leukonet.config import ConfigError, TrainConfig, config_from_dict, parse_config
from leukonet.models import build_model, freeze_backbone
from leukonet.tensor import Rng


def write_json(tmp_path, text, name="c.json"):
    p = tmp_path / name
    p.write_text(text)
    return p


# --- config -----------------------------------------------------------------

def test_defaults(tmp_path):
    cfg = parse_config(write_json(tmp_path, "{}"))
    assert (cfg.epochs, cfg.batch_size, cfg.learning_rate, cfg.optimizer) == (150, 16, 0.0001, "adam")
    assert (cfg.input_size, cfg.width_multiplier, cfg.head_hidden, cfg.smote_k) == (224, 1.0, 128, 5)
    assert cfg.freeze_backbone is False


def test_overrides(tmp_path):
    cfg = parse_config(write_json(tmp_path, '{"epochs": 2, "input_size": 32, "width_multiplier": 0.25}'))
    assert (cfg.epochs, cfg.input_size, cfg.width_multiplier) == (2, 32, 0.25)
    assert parse_config(write_json(tmp_path, '{"learning_rate": 1}')).learning_rate == 1.0


@pytest.mark.parametrize("text, msg", [
    ('{"epohcs": 5}', "epohcs"),
    ('{"epochs": 0}', "epochs"),
    ('{"learning_rate": -1e-3}', "learning_rate"),
    ('{"batch_size": 2.5}', "batch_size"),
    ('{"model": "vgg16"}', "model"),
    ('{"optimizer": "sgd"}', "optimizer"),
    ('{"freeze_backbone": 1}', "freeze_backbone"),
    ("[1, 2]", "object"),
])
def test_config_errors(tmp_path, text, msg):
    with pytest.raises(ConfigError, match=msg):
        parse_config(write_json(tmp_path, text))


def test_parse_error_has_line_context(tmp_path):
    with pytest.raises(ConfigError, match="line 3"):
        parse_config(write_json(tmp_path, '{\n  "epochs": 2,\n  oops\n}'))


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigError):
        parse_config(tmp_path / "nope.json")


# --- checkpoint -------------------------------------------------------------

SMALL = {"custom": dict(model="custom", input_size=16),
         "mobilenetv2": dict(model="mobilenetv2", input_size=32, width_multiplier=0.25, head_hidden=16)}


def small_model(kind, seed):
    cfg = TrainConfig(**SMALL[kind])
    model = build_model(cfg.model, cfg.input_size, 4, cfg.width_multiplier, cfg.head_hidden, Rng(seed))
    return model, cfg


@pytest.mark.parametrize("kind", ["custom", "mobilenetv2"])
def test_roundtrip_forward_identical(tmp_path, kind):
    model, cfg = small_model(kind, 1)
    path = tmp_path / "m.alck"
    save_checkpoint(model, cfg, path, ("Benign", "Early", "Pre", "Pro"))
    loaded, cfg2, names = load_checkpoint(path)
    assert cfg2 == cfg and names == ("Benign", "Early", "Pre", "Pro")
    x = Rng(2).uniform(0, 1, (2, cfg.input_size, cfg.input_size, 3))
    assert model.forward(x)[0].tobytes() == loaded.forward(x)[0].tobytes()
    assert encode_checkpoint(loaded, cfg2, names) == path.read_bytes()


@settings(max_examples=100, deadline=None)
@given(st.sampled_from(["custom", "mobilenetv2"]), st.integers(0, 2**40))
def test_roundtrip_bit_exact(kind, seed):
    model, cfg = small_model(kind, seed)
    blob = encode_checkpoint(model, cfg, ("a", "b", "c", "d"))
    loaded, _, _ = decode_checkpoint(blob)
    for (n1, a, _), (n2, b, _) in zip(model.named_tensors(), loaded.named_tensors()):
        assert n1 == n2 and a.tobytes() == b.tobytes()
    assert encode_checkpoint(loaded, cfg, ("a", "b", "c", "d")) == blob


def test_truncated_checkpoint(tmp_path):
    model, cfg = small_model("custom", 0)
    blob = encode_checkpoint(model, cfg, ("a", "b", "c", "d"))
    with pytest.raises(CheckpointError, match="truncated"):
        decode_checkpoint(blob[:-1])


@pytest.mark.parametrize("mutate, msg", [
    (lambda b: b"ALCX" + b[4:], "magic"),
    (lambda b: b[:4] + (7).to_bytes(4, "little") + b[8:], "version"),
    (lambda b: b[:8] + bytes([9]) + b[9:], "kind"),
    (lambda b: b + b"\0", "trailing"),
])
def test_corrupt_checkpoint(mutate, msg):
    model, cfg = small_model("custom", 0)
    with pytest.raises(CheckpointError, match=msg):
        decode_checkpoint(mutate(encode_checkpoint(model, cfg, ("a", "b", "c", "d"))))


def test_architecture_mismatch(tmp_path):
    model, cfg = small_model("mobilenetv2", 0)
    path = tmp_path / "m.alck"
    save_checkpoint(model, cfg, path)
    want = TrainConfig(model="mobilenetv2", input_size=32, width_multiplier=1.0, head_hidden=16)
    with pytest.raises(CheckpointError, match="architecture"):
        load_checkpoint(path, expect=want)
    load_checkpoint(path, expect=cfg)


def test_header_layout():
    model, cfg = small_model("mobilenetv2", 0)
    blob = encode_checkpoint(model, cfg, ("a", "b", "c", "d"))
    assert blob[:4] == b"ALCK" and blob[4:8] == (1).to_bytes(4, "little") and blob[8] == 1
    n = int.from_bytes(blob[9:13], "little")
    doc = json.loads(blob[13:13 + n])
    assert doc["config"]["width_multiplier"] == 0.25 and doc["class_names"] == ["a", "b", "c", "d"]


def test_frozen_flag_restored(tmp_path):
    model, _ = small_model("mobilenetv2", 0)
    cfg = TrainConfig(**SMALL["mobilenetv2"], freeze_backbone=True)
    freeze_backbone(model)
    save_checkpoint(model, cfg, tmp_path / "m.alck")
    loaded, _, _ = load_checkpoint(tmp_path / "m.alck")
    assert loaded.frozen == model.frozen


def test_missing_file(tmp_path):
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "none.alck")


def test_config_from_dict_roundtrip():
    cfg = TrainConfig(model="mobilenetv2", epochs=3, seed=0)
    assert config_from_dict(cfg.to_dict()) == cfg
