import json
from collections import OrderedDict

import numpy as np
import pytest
import torch

from orbit_restore import weights as weights_mod
from orbit_restore.architecture import ModelConfig, build_model, load_weights, save_weights
from orbit_restore.errors import ArchiveError, ConfigMismatch, NotFound
from orbit_restore.weights import convert_torch_checkpoint, module_tensors, read_archive, write_archive


@pytest.fixture
def model():
    m = build_model(ModelConfig(pretrained=False, width=0.125, init_seed=4))
    # non-default running statistics so buffers are exercised too
    m.train()
    with torch.no_grad():
        m(torch.rand(2, 3, 64, 64))
    return m


def test_roundtrip_bit_exact(model, tmp_path):
    save_weights(model, tmp_path / "arch", {"global_step": 12, "val_loss": 0.5})
    loaded = load_weights(tmp_path / "arch")
    for (n1, t1), (n2, t2) in zip(module_tensors(model).items(), module_tensors(loaded).items()):
        assert n1 == n2
        assert torch.equal(t1, t2)
    assert loaded.archive_metadata["val_loss"] == 0.5
    assert loaded.archive_metadata["global_step"] == 12
    assert loaded.config == model.config


def test_load_into_existing_model(model, tmp_path):
    save_weights(model, tmp_path / "arch")
    other = build_model(ModelConfig(pretrained=False, width=0.125, init_seed=99))
    load_weights(tmp_path / "arch", other)
    assert torch.equal(other.head.weight, model.head.weight)


def test_file_layout(model, tmp_path):
    save_weights(model, tmp_path / "arch")
    header = json.loads((tmp_path / "arch" / "weights.json").read_text())
    blob = (tmp_path / "arch" / "weights.bin").read_bytes()
    assert header["version"] == 1
    assert header["config_hash"] == model.config.architecture_hash()
    names = [e["name"] for e in header["entries"]]
    assert len(names) == len(set(names))
    for e in header["entries"]:
        assert e["length"] == int(np.prod(e["shape"])) * 4
    first = header["entries"][0]
    expected = module_tensors(model)[first["name"]].numpy().astype("<f4").tobytes()
    assert blob[first["offset"]:first["offset"] + first["length"]] == expected
    assert sum(e["length"] for e in header["entries"]) == len(blob)


def test_truncated_bin(model, tmp_path):
    save_weights(model, tmp_path / "arch")
    path = tmp_path / "arch" / "weights.bin"
    path.write_bytes(path.read_bytes()[:-100])
    with pytest.raises(ArchiveError):
        load_weights(tmp_path / "arch")


def test_corrupt_json(model, tmp_path):
    save_weights(model, tmp_path / "arch")
    (tmp_path / "arch" / "weights.json").write_text("{not json")
    with pytest.raises(ArchiveError):
        load_weights(tmp_path / "arch")


def test_missing_archive(tmp_path):
    with pytest.raises(NotFound):
        read_archive(tmp_path / "nothing")


def test_config_mismatch(model, tmp_path):
    save_weights(model, tmp_path / "arch")
    other = build_model(ModelConfig(pretrained=False, width=0.25))
    with pytest.raises(ConfigMismatch):
        load_weights(tmp_path / "arch", other)


def test_name_mismatch(model, tmp_path):
    tensors = module_tensors(model)
    tensors = OrderedDict((("renamed." + k) if i == 0 else k, v) for i, (k, v) in enumerate(tensors.items()))
    write_archive(tmp_path / "arch", tensors, model.config.architecture_hash(),
                  {"model_config": model.config.to_dict()})
    with pytest.raises(ConfigMismatch):
        load_weights(tmp_path / "arch")


def test_interrupted_write_keeps_previous(model, tmp_path, monkeypatch):
    save_weights(model, tmp_path / "arch", {"val_loss": 1.0})
    before = (tmp_path / "arch" / "weights.bin").read_bytes()

    def boom(*args, **kwargs):
        raise KeyboardInterrupt("simulated crash mid-write")

    monkeypatch.setattr(weights_mod, "_write_files", boom)
    with pytest.raises(KeyboardInterrupt):
        save_weights(model, tmp_path / "arch", {"val_loss": 0.1})
    monkeypatch.undo()
    assert (tmp_path / "arch" / "weights.bin").read_bytes() == before
    assert load_weights(tmp_path / "arch").archive_metadata["val_loss"] == 1.0
    assert not [p for p in tmp_path.iterdir() if p.name.startswith(".arch.tmp")]


def test_crash_between_renames_recovers_old(model, tmp_path, monkeypatch):
    save_weights(model, tmp_path / "arch", {"val_loss": 1.0})
    real_replace = weights_mod.os.replace
    calls = []

    def flaky(src, dst):
        calls.append((src, dst))
        if len(calls) == 2:
            raise KeyboardInterrupt("crash after moving the old archive aside")
        return real_replace(src, dst)

    monkeypatch.setattr(weights_mod.os, "replace", flaky)
    with pytest.raises(KeyboardInterrupt):
        save_weights(model, tmp_path / "arch", {"val_loss": 0.1})
    monkeypatch.undo()
    assert load_weights(tmp_path / "arch").archive_metadata["val_loss"] == 1.0


def test_convert_torch_checkpoint(model, tmp_path):
    state = {f"{k}": v for k, v in model.encoder.state_dict().items()}
    state["fc.weight"] = torch.zeros(10, 512)
    torch.save(state, tmp_path / "resnet34.pth")
    convert_torch_checkpoint(tmp_path / "resnet34.pth", tmp_path / "cache" / "resnet34", "resnet34")
    tensors, header = read_archive(tmp_path / "cache" / "resnet34")
    assert "fc.weight" not in tensors
    assert "num_batches_tracked" not in " ".join(tensors)
    assert torch.equal(tensors["conv1.weight"], model.encoder.conv1.weight)
