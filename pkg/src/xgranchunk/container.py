"""Encoder weight file.

Layout::

    bytes 0-7    magic b"XGRANW01"
    bytes 8-15   header length H, little-endian uint64
    next H bytes UTF-8 JSON header
    rest         tensor data, little-endian float32, C order

The header holds ``{"format", "version", "normalize_output", "metadata",
"tensors": [{"name", "shape", "dtype", "offset", "nbytes"}]}`` with
``offset`` counted from the first byte after the header.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .encoder import EncoderWeights
from .errors import DataError

MAGIC = b"XGRANW01"
FORMAT = "xgranchunk-encoder-weights"
VERSION = 1


def save_weights(weights: EncoderWeights, path: str | Path, metadata: dict | None = None) -> None:
    tensors = []
    blobs = []
    offset = 0
    for name, arr in weights.named_parameters().items():
        data = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        tensors.append({"name": name, "shape": list(arr.shape), "dtype": "float32",
                        "offset": offset, "nbytes": len(data)})
        blobs.append(data)
        offset += len(data)
    header = {
        "format": FORMAT,
        "version": VERSION,
        "d": weights.d,
        "layers": weights.num_layers,
        "normalize_output": weights.normalize_output,
        "metadata": metadata or {},
        "tensors": tensors,
    }
    raw = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(raw)))
        fh.write(raw)
        for blob in blobs:
            fh.write(blob)


def read_header(path: str | Path) -> dict:
    with open(path, "rb") as fh:
        return _read_header(fh, path)[0]


def _read_header(fh, path):
    if fh.read(8) != MAGIC:
        raise DataError(f"{path}: not an encoder weight file")
    (size,) = struct.unpack("<Q", fh.read(8))
    try:
        header = json.loads(fh.read(size).decode("utf-8"))
    except ValueError as exc:
        raise DataError(f"{path}: corrupt header") from exc
    if header.get("format") != FORMAT or header.get("version") != VERSION:
        raise DataError(f"{path}: unsupported format {header.get('format')} v{header.get('version')}")
    return header, 16 + size


def load_weights(path: str | Path) -> tuple[EncoderWeights, dict]:
    """Returns the weights and the header's metadata block."""
    with open(path, "rb") as fh:
        header, _ = _read_header(fh, path)
        data = fh.read()
    params = {}
    for t in header["tensors"]:
        start, nbytes = t["offset"], t["nbytes"]
        if t["dtype"] != "float32" or start + nbytes > len(data):
            raise DataError(f"{path}: bad tensor entry {t['name']}")
        arr = np.frombuffer(data[start:start + nbytes], dtype="<f4").reshape(t["shape"])
        params[t["name"]] = arr.astype(np.float32)
    weights = EncoderWeights.from_named_parameters(params, bool(header["normalize_output"]))
    weights.check()
    return weights, header.get("metadata", {})
