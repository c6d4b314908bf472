"""Parameter checkpoint files.

Layout: a magic line, one JSON header line listing ``(name, shape)`` per array
plus free-form metadata, then the arrays' little-endian float64 payloads in
header order. Reading back reproduces every array bit for bit.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import FormatError, IoError

MAGIC = b"PILLARCORAL-CKPT 1\n"


def save_checkpoint(path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    header = {
        "params": [{"name": name, "shape": list(np.shape(arr))} for name, arr in arrays.items()],
        "meta": meta or {},
    }
    blob = bytearray(MAGIC)
    blob += json.dumps(header, sort_keys=True).encode() + b"\n"
    for arr in arrays.values():
        blob += np.ascontiguousarray(arr, dtype="<f8").tobytes()
    try:
        Path(path).write_bytes(bytes(blob))
    except OSError as exc:
        raise IoError(f"cannot write checkpoint {path}: {exc}") from exc


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise IoError(f"cannot read checkpoint {path}: {exc}") from exc
    if not raw.startswith(MAGIC):
        raise FormatError(f"{path}: not a checkpoint file")
    end = raw.find(b"\n", len(MAGIC))
    if end < 0:
        raise FormatError(f"{path}: truncated header")
    try:
        header = json.loads(raw[len(MAGIC):end])
        specs = [(p["name"], tuple(p["shape"])) for p in header["params"]]
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"{path}: malformed header") from exc
    offset = end + 1
    arrays = {}
    for name, shape in specs:
        count = int(np.prod(shape, dtype=np.int64))
        nbytes = 8 * count
        if offset + nbytes > len(raw):
            raise FormatError(f"{path}: payload for {name!r} truncated")
        arrays[name] = np.frombuffer(raw, dtype="<f8", count=count, offset=offset).reshape(shape).astype(np.float64)
        offset += nbytes
    if offset != len(raw):
        raise FormatError(f"{path}: {len(raw) - offset} trailing bytes")
    return arrays, header.get("meta", {})
