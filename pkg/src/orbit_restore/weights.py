"""On-disk weight archives: ``weights.bin`` + ``weights.json``.

``weights.bin`` is the concatenation of every tensor as little-endian
float32; ``weights.json`` lists ``{name, shape, offset, length}`` per entry
together with a config hash and free-form metadata.

Archives are written into a sibling temporary directory and swapped into
place, so an interrupted write never clobbers an existing archive.
"""
from __future__ import annotations

import json
import os
import shutil
import tempfile
from collections import OrderedDict
from pathlib import Path

import numpy as np
import torch

from .errors import ArchiveError, ConfigMismatch, IoError, NotFound

ARCHIVE_VERSION = 1
BIN_NAME = "weights.bin"
JSON_NAME = "weights.json"

_LE_F32 = np.dtype("<f4")


def _write_files(directory: Path, tensors, config_hash: str, metadata: dict) -> None:
    entries = []
    offset = 0
    with open(directory / BIN_NAME, "wb") as fh:
        for name, tensor in tensors.items():
            data = tensor.detach().cpu().numpy().astype(_LE_F32, copy=False)
            blob = np.ascontiguousarray(data).tobytes()
            fh.write(blob)
            entries.append({"name": name, "shape": list(data.shape), "offset": offset, "length": len(blob)})
            offset += len(blob)
        fh.flush()
        os.fsync(fh.fileno())
    doc = {"version": ARCHIVE_VERSION, "config_hash": config_hash, "entries": entries, "metadata": metadata}
    with open(directory / JSON_NAME, "w") as fh:
        json.dump(doc, fh, indent=2)
        fh.flush()
        os.fsync(fh.fileno())


def write_archive(path, tensors: "OrderedDict[str, torch.Tensor]", config_hash: str,
                  metadata: dict | None = None) -> Path:
    path = Path(path)
    names = list(tensors)
    if len(set(names)) != len(names):
        raise ArchiveError("duplicate tensor names")
    parent = path.parent
    try:
        parent.mkdir(parents=True, exist_ok=True)
        tmp = Path(tempfile.mkdtemp(prefix=f".{path.name}.tmp-", dir=parent))
    except OSError as exc:
        raise IoError(f"cannot write archive at {path}: {exc}") from exc
    try:
        _write_files(tmp, tensors, config_hash, dict(metadata or {}))
        old = parent / f".{path.name}.old"
        if old.exists():
            shutil.rmtree(old)
        if path.exists():
            os.replace(path, old)
        os.replace(tmp, path)
        shutil.rmtree(old, ignore_errors=True)
    except BaseException as exc:
        shutil.rmtree(tmp, ignore_errors=True)
        if isinstance(exc, OSError):
            raise IoError(f"cannot write archive at {path}: {exc}") from exc
        raise
    return path


def _resolve(path: Path) -> Path:
    if (path / JSON_NAME).is_file():
        return path
    # a crash between the two renames in write_archive leaves only the .old copy
    old = path.parent / f".{path.name}.old"
    if (old / JSON_NAME).is_file():
        return old
    raise NotFound(f"no weight archive at {path}")


def read_archive(path) -> tuple["OrderedDict[str, torch.Tensor]", dict]:
    """Return ``(tensors, header)``; raises :class:`ArchiveError` on corruption."""
    path = _resolve(Path(path))
    try:
        header = json.loads((path / JSON_NAME).read_text())
        entries = header["entries"]
        header["config_hash"]
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise ArchiveError(f"malformed {JSON_NAME} in {path}: {exc}") from exc
    try:
        blob = (path / BIN_NAME).read_bytes()
    except OSError as exc:
        raise ArchiveError(f"missing {BIN_NAME} in {path}") from exc

    tensors = OrderedDict()
    expected_end = 0
    for e in entries:
        try:
            name, shape, offset, length = e["name"], [int(s) for s in e["shape"]], int(e["offset"]), int(e["length"])
        except (KeyError, TypeError, ValueError) as exc:
            raise ArchiveError(f"malformed entry {e!r}") from exc
        if name in tensors:
            raise ArchiveError(f"duplicate entry {name!r}")
        if length != int(np.prod(shape, dtype=np.int64)) * 4:
            raise ArchiveError(f"entry {name!r}: length {length} does not match shape {shape}")
        if offset < 0 or offset + length > len(blob):
            raise ArchiveError(f"entry {name!r} runs past the end of {BIN_NAME} (truncated file?)")
        arr = np.frombuffer(blob, dtype=_LE_F32, count=length // 4, offset=offset).reshape(shape)
        tensors[name] = torch.from_numpy(arr.astype(np.float32))
        expected_end = max(expected_end, offset + length)
    if expected_end != len(blob):
        raise ArchiveError(f"{BIN_NAME} has {len(blob)} bytes, entries cover {expected_end}")
    return tensors, header


def module_tensors(module: torch.nn.Module, prefix: str = "") -> "OrderedDict[str, torch.Tensor]":
    """Parameters and floating buffers; integer bookkeeping buffers are skipped."""
    out = OrderedDict()
    for name, t in module.state_dict().items():
        if name.startswith(prefix) and torch.is_floating_point(t):
            out[name[len(prefix):]] = t
    return out


def assign_tensors(module: torch.nn.Module, tensors, prefix: str = "", strict: bool = True) -> None:
    """Copy archive tensors into ``module`` in place, checking names and shapes."""
    own = module_tensors(module, prefix)
    if strict and set(own) != set(tensors):
        missing = sorted(set(own) - set(tensors))[:5]
        extra = sorted(set(tensors) - set(own))[:5]
        raise ConfigMismatch(f"tensor names differ (missing {missing}, unexpected {extra})")
    state = module.state_dict()
    with torch.no_grad():
        for name, value in tensors.items():
            if name not in own:
                continue
            target = state[prefix + name]
            if tuple(target.shape) != tuple(value.shape):
                raise ConfigMismatch(f"{name}: shape {tuple(value.shape)} vs model {tuple(target.shape)}")
            target.copy_(value.to(target.dtype))


def convert_torch_checkpoint(src, out_dir, kind: str) -> Path:
    """One-time import of a torchvision ``.pth`` state dict into archive format.

    ``kind`` is ``"resnet34"`` or ``"vgg16"``; the result belongs in
    ``$ORBIT_RESTORE_WEIGHTS_CACHE/<kind>/``.
    """
    if kind not in ("resnet34", "vgg16"):
        raise ValueError(f"unknown weight kind {kind!r}")
    state = torch.load(src, map_location="cpu", weights_only=True)
    if isinstance(state, dict) and "state_dict" in state:
        state = state["state_dict"]
    keep = "features." if kind == "vgg16" else ""
    tensors = OrderedDict(
        (k, v) for k, v in state.items()
        if torch.is_floating_point(v) and k.startswith(keep) and not k.startswith("fc.")
    )
    return write_archive(out_dir, tensors, config_hash=kind, metadata={"source": str(Path(src).name), "kind": kind})
