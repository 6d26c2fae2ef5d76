"""Checkpoint files: a JSON header with the tensor manifest, then raw payloads.

Layout::

    b"TGACKPT\\n"                 8-byte magic
    <uint64 little-endian>        header length in bytes
    <header>                      UTF-8 JSON: format_version, precision, seed,
                                  tensors=[{name, shape}], extra metadata
    <payload>                     each tensor flattened (C order) as
                                  little-endian floats, in manifest order
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .params import DTYPES, ParameterStore

MAGIC = b"TGACKPT\n"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, params: ParameterStore, meta: dict | None = None) -> Path:
    path = Path(path)
    header = {
        "format_version": FORMAT_VERSION,
        "precision": params.precision,
        "seed": params.seed,
        "tensors": [{"name": k, "shape": list(v.shape)} for k, v in params.values.items()],
        "meta": meta or {},
    }
    blob = json.dumps(header, sort_keys=True).encode()
    le = np.dtype(params.dtype).newbyteorder("<")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for v in params.values.values():
            fh.write(np.ascontiguousarray(v, dtype=le).tobytes())
    return path


def read_header(path) -> dict:
    with open(path, "rb") as fh:
        return _read_header(fh)


def _read_header(fh) -> dict:
    if fh.read(len(MAGIC)) != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    (n,) = struct.unpack("<Q", fh.read(8))
    header = json.loads(fh.read(n))
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported format version {header.get('format_version')}")
    return header


def load_checkpoint(path, params: ParameterStore) -> dict:
    """Load tensors into ``params`` in place after verifying the manifest.

    Names and shapes must match the store exactly; payloads are converted to
    the store's precision.  Returns the header.
    """
    with open(path, "rb") as fh:
        header = _read_header(fh)
        manifest = header["tensors"]
        expected = {k: list(v) for k, v in params.shapes().items()}
        found = {t["name"]: t["shape"] for t in manifest}
        if found != expected:
            missing = sorted(expected.keys() - found.keys())
            extra = sorted(found.keys() - expected.keys())
            bad = sorted(k for k in expected.keys() & found.keys() if expected[k] != found[k])
            raise CheckpointError(
                f"checkpoint does not match model: missing={missing[:5]} extra={extra[:5]} "
                f"shape_mismatch={[(k, found[k], expected[k]) for k in bad[:5]]}"
            )
        dtype = np.dtype(DTYPES[header["precision"]]).newbyteorder("<")
        loaded = {}
        for t in manifest:
            count = int(np.prod(t["shape"], dtype=np.int64))
            raw = fh.read(count * dtype.itemsize)
            if len(raw) != count * dtype.itemsize:
                raise CheckpointError(f"truncated payload for {t['name']}")
            loaded[t["name"]] = np.frombuffer(raw, dtype=dtype).reshape(t["shape"])
        if fh.read(1):
            raise CheckpointError("trailing bytes after payload")
    for name, arr in loaded.items():
        params.values[name][...] = arr
    return header
