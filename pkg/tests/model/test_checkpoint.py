import struct

import pytest
import torch

from src.model.checkpoint import (
    CheckpointConfigError,
    CheckpointError,
    CheckpointShapeError,
    CheckpointTruncatedError,
    CheckpointVersionError,
    checkpoint_bytes,
    load_checkpoint,
    read_header,
    save_checkpoint,
)
from src.model.transformer import build_model


def test_roundtrip_is_bit_exact(tiny_config, tmp_path):
    model = build_model(tiny_config, seed=9)
    path = save_checkpoint(model, tmp_path / "model.rmdm", meta={"objective": "relay", "step": 12})
    loaded, meta = load_checkpoint(path)
    assert loaded.cfg == tiny_config
    assert meta == {"objective": "relay", "step": 12}
    original = model.state_dict()
    for name, value in loaded.state_dict().items():
        assert torch.equal(value, original[name]), name


def test_save_load_save_is_byte_identical(tiny_config, tmp_path):
    first = save_checkpoint(build_model(tiny_config, seed=1), tmp_path / "a.rmdm", meta={"seed": 1})
    loaded, meta = load_checkpoint(first)
    second = save_checkpoint(loaded, tmp_path / "b.rmdm", meta=meta)
    assert first.read_bytes() == second.read_bytes()


def test_layout_prefix(tiny_config):
    raw = checkpoint_bytes(build_model(tiny_config))
    magic, version, header_len = struct.unpack_from("<4sII", raw)
    assert magic == b"RMDM"
    assert version == 1
    header, start = read_header(raw)
    assert start == 12 + header_len
    assert set(header) == {"config", "manifest", "meta"}
    assert header["manifest"][0]["offset"] == 0
    total = sum(entry["nbytes"] for entry in header["manifest"])
    assert len(raw) - start == total


def test_truncated_array(tiny_config, tmp_path):
    path = tmp_path / "cut.rmdm"
    path.write_bytes(checkpoint_bytes(build_model(tiny_config))[:-100])
    with pytest.raises(CheckpointShapeError):
        load_checkpoint(path)


def test_truncated_header(tiny_config, tmp_path):
    path = tmp_path / "cut.rmdm"
    path.write_bytes(checkpoint_bytes(build_model(tiny_config))[:40])
    with pytest.raises(CheckpointTruncatedError):
        load_checkpoint(path)


def test_version_mismatch(tiny_config, tmp_path):
    raw = bytearray(checkpoint_bytes(build_model(tiny_config)))
    raw[4:8] = struct.pack("<I", 2)
    path = tmp_path / "v2.rmdm"
    path.write_bytes(bytes(raw))
    with pytest.raises(CheckpointVersionError):
        load_checkpoint(path)


def test_bad_magic(tmp_path):
    path = tmp_path / "junk.rmdm"
    path.write_bytes(b"JUNK" + b"\0" * 20)
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_untied_into_tied_config(tiny_config, tmp_path):
    path = save_checkpoint(build_model(tiny_config), tmp_path / "untied.rmdm")
    tied = tiny_config.model_copy(update={"tie_embeddings": True})
    with pytest.raises(CheckpointConfigError):
        load_checkpoint(path, expected_config=tied)
