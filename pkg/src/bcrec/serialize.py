"""Deterministic binary container for checkpoints.

Plain concatenation of a JSON metadata block and named .npy-encoded arrays;
unlike zip-based formats it contains no timestamps, so identical inputs
produce identical bytes and float64 arrays round-trip bit-exactly.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

_MAGIC = b"BCREC1\n"


def write_blob(path, arrays: dict[str, np.ndarray], meta: dict) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    with path.open("wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(meta_bytes)))
        fh.write(meta_bytes)
        fh.write(struct.pack("<I", len(arrays)))
        for name in sorted(arrays):
            nb = name.encode("utf-8")
            fh.write(struct.pack("<H", len(nb)))
            fh.write(nb)
            np.lib.format.write_array(fh, np.ascontiguousarray(arrays[name]), version=(1, 0))


def read_blob(path) -> tuple[dict[str, np.ndarray], dict]:
    with Path(path).open("rb") as fh:
        if fh.read(len(_MAGIC)) != _MAGIC:
            raise ValueError(f"{path}: not a bcrec checkpoint")
        (meta_len,) = struct.unpack("<Q", fh.read(8))
        meta = json.loads(fh.read(meta_len).decode("utf-8"))
        (count,) = struct.unpack("<I", fh.read(4))
        arrays = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<H", fh.read(2))
            name = fh.read(name_len).decode("utf-8")
            arrays[name] = np.lib.format.read_array(fh)
    return arrays, meta
