"""
RMDM checkpoint container.

    b"RMDM" | version u32 LE | header length u32 LE | UTF-8 JSON header | float32 LE arrays

The header holds `config` (ModelConfig), `manifest` (name, shape, offset, nbytes per array, offsets
relative to the first array byte) and a free-form `meta` object. Keys are sorted so that the same
parameters always produce the same bytes.
"""
import json
import logging
import struct
from pathlib import Path
from typing import Any

import numpy as np
import torch
from pydantic import ValidationError

from src.config import ModelConfig
from src.io_utils import atomic_write_bytes
from src.model.transformer import RelayTransformer, build_model

MAGIC = b"RMDM"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<4sII")
_DTYPE = np.dtype("<f4")


class CheckpointError(ValueError):
    """ Raised on an unreadable checkpoint """


class CheckpointVersionError(CheckpointError):
    """ Raised when the container version is not supported """


class CheckpointTruncatedError(CheckpointError):
    """ Raised when the file ends inside the prefix or the header """


class CheckpointShapeError(CheckpointError):
    """ Raised when array bytes or shapes disagree with the manifest or the model """


class CheckpointConfigError(CheckpointError):
    """ Raised when the stored config disagrees with the expected one """


def checkpoint_bytes(model: RelayTransformer, meta: dict[str, Any] | None = None) -> bytes:
    manifest = []
    chunks = []
    offset = 0
    for name, param in model.named_parameters():
        data = param.detach().cpu().to(torch.float32).numpy().astype(_DTYPE, copy=False).tobytes()
        manifest.append({"name": name, "shape": list(param.shape), "offset": offset, "nbytes": len(data)})
        chunks.append(data)
        offset += len(data)
    header = json.dumps(
        {"config": model.cfg.model_dump(mode="json"), "manifest": manifest, "meta": meta or {}},
        sort_keys=True, separators=(",", ":"),
    ).encode("utf-8")
    return _PREFIX.pack(MAGIC, FORMAT_VERSION, len(header)) + header + b"".join(chunks)


def save_checkpoint(model: RelayTransformer, path: Path, meta: dict[str, Any] | None = None) -> Path:
    atomic_write_bytes(path, checkpoint_bytes(model, meta))
    logging.info(f"Checkpoint written to {path}")
    return path


def read_header(raw: bytes) -> tuple[dict[str, Any], int]:
    """ Parsed header and the offset of the first array byte """
    if len(raw) < _PREFIX.size:
        raise CheckpointTruncatedError("File ends before the checkpoint prefix")
    magic, version, header_len = _PREFIX.unpack_from(raw)
    if magic != MAGIC:
        raise CheckpointError(f"Not an RMDM checkpoint (magic {magic!r})")
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"Unsupported checkpoint version {version}, expected {FORMAT_VERSION}")
    start = _PREFIX.size + header_len
    if len(raw) < start:
        raise CheckpointTruncatedError("File ends inside the JSON header")
    try:
        header = json.loads(raw[_PREFIX.size:start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"Unreadable checkpoint header: {e}") from e
    return header, start


def load_checkpoint(path: Path, expected_config: ModelConfig | None = None) -> tuple[RelayTransformer, dict[str, Any]]:
    raw = Path(path).read_bytes()
    header, start = read_header(raw)
    try:
        cfg = ModelConfig.model_validate(header["config"])
    except (KeyError, ValidationError) as e:
        raise CheckpointConfigError(f"Invalid config in checkpoint header: {e}") from e
    if expected_config is not None and cfg != expected_config:
        diff = {
            k: (v, getattr(expected_config, k)) for k, v in cfg.model_dump().items()
            if getattr(expected_config, k) != v
        }
        raise CheckpointConfigError(f"Checkpoint config disagrees with the expected config: {diff}")

    model = build_model(cfg)
    params = dict(model.named_parameters())
    manifest = header.get("manifest", [])
    names = [entry["name"] for entry in manifest]
    if sorted(names) != sorted(params):
        raise CheckpointConfigError(
            f"Manifest arrays {sorted(set(names) ^ set(params))} do not match the model built from its config"
        )

    payload = memoryview(raw)[start:]
    end = 0
    with torch.no_grad():
        for entry in manifest:
            name, shape = entry["name"], tuple(entry["shape"])
            offset, nbytes = int(entry["offset"]), int(entry["nbytes"])
            if nbytes != int(np.prod(shape, dtype=np.int64)) * _DTYPE.itemsize:
                raise CheckpointShapeError(f"{name}: {nbytes} bytes cannot hold shape {shape}")
            if offset + nbytes > len(payload):
                raise CheckpointShapeError(f"{name}: array truncated ({len(payload) - offset} of {nbytes} bytes)")
            if shape != tuple(params[name].shape):
                raise CheckpointShapeError(f"{name}: stored shape {shape} != model shape {tuple(params[name].shape)}")
            array = np.frombuffer(payload[offset:offset + nbytes], dtype=_DTYPE).reshape(shape)
            params[name].copy_(torch.from_numpy(array.astype(np.float32)))
            end = max(end, offset + nbytes)
    if end != len(payload):
        raise CheckpointShapeError(f"{len(payload) - end} trailing bytes after the last array")
    return model, header.get("meta", {})
