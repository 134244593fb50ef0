"""Byte-deterministic parameter checkpoints.

Format: a magic line, one JSON metadata line (sorted names with shapes),
then the raw little-endian float64 buffers concatenated in that order.
Equal parameter sets always produce identical files, which archive formats
with embedded timestamps do not guarantee.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Mapping

import numpy as np

_MAGIC = b"LIFTCKPT1\n"


def save_params(path: str | Path, params: Mapping[str, np.ndarray]) -> None:
    names = sorted(params)
    meta = [{"name": n, "shape": list(np.asarray(params[n]).shape)} for n in names]
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(json.dumps(meta, sort_keys=True).encode("utf-8") + b"\n")
        for n in names:
            arr = np.ascontiguousarray(np.asarray(params[n], dtype=np.float64))
            f.write(arr.astype("<f8").tobytes())


def load_params(path: str | Path) -> dict[str, np.ndarray]:
    with open(path, "rb") as f:
        if f.read(len(_MAGIC)) != _MAGIC:
            raise ValueError(f"{path} is not a parameter checkpoint")
        meta = json.loads(f.readline().decode("utf-8"))
        out: dict[str, np.ndarray] = {}
        for entry in meta:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            buf = f.read(count * 8)
            if len(buf) != count * 8:
                raise ValueError(f"{path}: truncated buffer for {entry['name']}")
            out[entry["name"]] = np.frombuffer(buf, dtype="<f8").reshape(shape).copy()
        if f.read(1):
            raise ValueError(f"{path}: trailing bytes after parameters")
    return out
