"""Checkpoint container: a JSON header line followed by named float64 arrays.

Layout (format version 1)::

    NODERF-CKPT 1\n
    <header length in bytes>\n
    <UTF-8 JSON header>
    <concatenated little-endian float64 array payloads>

The header holds ``meta`` (model config, iteration, seed, loss weights, ...)
and an ``arrays`` list of ``{"name", "shape", "offset"}`` entries, offsets in
bytes relative to the start of the payload.  Writes go to a temporary file in
the same directory and are renamed into place.
"""
from __future__ import annotations

import json
import os
import tempfile
from pathlib import Path

import numpy as np

MAGIC = b"NODERF-CKPT"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, arrays: dict, meta: dict) -> None:
    path = Path(path)
    entries, blobs, offset = [], [], 0
    for name in sorted(arrays):
        a = np.asarray(arrays[name], dtype="<f8", order="C")
        entries.append({"name": name, "shape": list(a.shape), "offset": offset})
        blob = a.tobytes()
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps({"meta": meta, "arrays": entries}, sort_keys=True).encode("utf-8")
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(MAGIC + b" %d\n" % FORMAT_VERSION)
            fh.write(b"%d\n" % len(header))
            fh.write(header)
            for blob in blobs:
                fh.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path) -> tuple[dict, dict]:
    """Return ``(arrays, meta)``."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"{path}: cannot read checkpoint ({exc})") from exc
    try:
        line1, rest = raw.split(b"\n", 1)
        magic, version = line1.split(b" ")
        if magic != MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint file")
        if int(version) != FORMAT_VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {int(version)}")
        size_line, rest = rest.split(b"\n", 1)
        size = int(size_line)
        header = json.loads(rest[:size].decode("utf-8"))
        payload = rest[size:]
    except CheckpointError:
        raise
    except (ValueError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt checkpoint header ({exc})") from exc
    arrays = {}
    for e in header["arrays"]:
        n = int(np.prod(e["shape"])) if e["shape"] else 1
        start = e["offset"]
        chunk = payload[start:start + 8 * n]
        if len(chunk) != 8 * n:
            raise CheckpointError(f"{path}: array {e['name']!r} is truncated")
        arrays[e["name"]] = np.frombuffer(chunk, dtype="<f8").reshape(tuple(e["shape"])).astype(np.float64)
    return arrays, header["meta"]
