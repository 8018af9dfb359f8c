import json

import pytest

from orbit_restore.config import RunConfig, load_run_config, parse_run_config, write_resolved
from orbit_restore.errors import ConfigError
from orbit_restore.training import Phase


def test_defaults_roundtrip(tmp_path):
    cfg = RunConfig()
    path = write_resolved(cfg, tmp_path)
    again = load_run_config(path)
    assert again.to_dict() == cfg.to_dict()


def test_nested_coercion():
    cfg = parse_run_config({
        "model": {"pretrained": False, "width": 0.25},
        "train": {"phases": [{"image_size": 32, "epochs": 2}]},
        "loss": {"layer_weights": [0.5, 0.5, 0.0], "extractor_weights": "random"},
        "degrade": {"seed": 5, "noise": {"sigma_range": [0.01, 0.02]}},
    })
    assert cfg.model.width == 0.25
    assert cfg.train.phases == [Phase(image_size=32, epochs=2)]
    assert cfg.loss.layer_weights == (0.5, 0.5, 0.0)
    assert cfg.degrade.noise.sigma_range == (0.01, 0.02)
    # the training loop sees the top-level loss section
    assert cfg.train.loss is cfg.loss


def test_int_accepted_for_float():
    assert parse_run_config({"model": {"pretrained": False, "width": 1}}).model.width == 1.0


@pytest.mark.parametrize("data", [
    {"modle": {}},
    {"model": {"widht": 1.0}},
    {"train": {"phases": [{"image_size": 32, "epochs": 1, "lr": 1}]}},
    {"train": {"loss": {}}},
    {"version": 2},
    {"model": {"pretrained": "yes"}},
    {"train": {"seed": 1.5}},
    {"loss": {"layer_weights": "high"}},
    {"model": {"pretrained": False, "width": -1.0}},
])
def test_rejected(data):
    with pytest.raises(ConfigError):
        parse_run_config(data)


def test_malformed_json_location(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text('{\n  "model": {\n    "width": ,\n  }\n}\n')
    with pytest.raises(ConfigError, match="line 3"):
        load_run_config(path)


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        load_run_config(tmp_path / "nope.json")


def test_resolved_omits_train_loss(tmp_path):
    doc = json.loads(write_resolved(RunConfig(), tmp_path).read_text())
    assert "loss" not in doc["train"] and "loss" in doc
