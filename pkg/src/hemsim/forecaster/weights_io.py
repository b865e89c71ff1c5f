"""Portable, versioned weight files.

Layout (all integers little-endian):

  bytes 0..3    magic b"HSWT"
  bytes 4..7    format version (uint32)
  bytes 8..11   header length L (uint32)
  bytes 12..    UTF-8 JSON header: config, rng_seed, meta, parameter
                names + shapes in canonical order
  ...           parameter data, float64 little-endian, concatenated in
                header order
  last 32       SHA-256 over everything preceding

The version field is checked before anything else is parsed, so a file
from a newer format fails with a version error and never half-loads.
"""
from __future__ import annotations

import hashlib
import json
import struct

import numpy as np

from .model import ModelConfig, ModelWeights

MAGIC = b"HSWT"
FORMAT_VERSION = 1


class WeightFormatError(ValueError):
    """Not a weight file, or structurally broken."""


class WeightVersionError(WeightFormatError):
    """File uses a format version this build does not understand."""


class WeightChecksumError(WeightFormatError):
    """Trailing checksum mismatch: truncated or corrupted file."""


def save_weights(weights: ModelWeights, path):
    header = {
        "config": weights.config.to_dict(),
        "rng_seed": weights.rng_seed,
        "meta": weights.meta,
        "params": [
            {"name": name, "shape": list(arr.shape)} for name, arr in weights.params.items()
        ],
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = b"".join(arr.astype("<f8").tobytes() for arr in weights.params.values())
    payload = MAGIC + struct.pack("<II", FORMAT_VERSION, len(header_bytes)) + header_bytes + body
    digest = hashlib.sha256(payload).digest()
    with open(path, "wb") as fh:
        fh.write(payload + digest)


def load_weights(path) -> ModelWeights:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 12:
        raise WeightChecksumError("file too short to be a weight file (truncated?)")
    if blob[:4] != MAGIC:
        raise WeightFormatError(f"bad magic {blob[:4]!r}; not a weight file")
    version, header_len = struct.unpack("<II", blob[4:12])
    if version != FORMAT_VERSION:
        raise WeightVersionError(
            f"weight file format version {version}; this build reads version {FORMAT_VERSION}"
        )
    if len(blob) < 12 + 32:
        raise WeightChecksumError("file too short for its checksum (truncated?)")
    payload, digest = blob[:-32], blob[-32:]
    if hashlib.sha256(payload).digest() != digest:
        raise WeightChecksumError("checksum mismatch: truncated or corrupted file")
    if len(payload) < 12 + header_len:
        raise WeightChecksumError("header extends past end of file")
    try:
        header = json.loads(payload[12 : 12 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise WeightFormatError(f"unreadable header: {exc}") from None

    config = ModelConfig.from_dict(header["config"])
    data = payload[12 + header_len :]
    params: dict[str, np.ndarray] = {}
    offset = 0
    for entry in header["params"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * 8
        if offset + nbytes > len(data):
            raise WeightFormatError(f"parameter data ends early at {entry['name']}")
        params[entry["name"]] = (
            np.frombuffer(data[offset : offset + nbytes], dtype="<f8").reshape(shape).copy()
        )
        offset += nbytes
    if offset != len(data):
        raise WeightFormatError(f"{len(data) - offset} trailing bytes after the last parameter")
    return ModelWeights(
        config=config,
        rng_seed=header["rng_seed"],
        params=params,
        meta=header.get("meta", {}),
        version=version,
    )
