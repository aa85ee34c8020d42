"""Parameter checkpoints: a JSON index header followed by raw float64 arrays.

Layout::

    b"ATMASKCK"  | uint64 LE header length | header JSON (utf-8) | array bytes

The header maps each array name to its shape and byte offset (relative to the
start of the array block); ``meta`` carries the resolved run configuration.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .tensor import Tensor, parameter

MAGIC = b"ATMASKCK"


def save_checkpoint(path: str | Path, params: dict[str, Tensor], meta: dict | None = None) -> None:
    index, blobs, offset = [], [], 0
    for name in sorted(params):
        arr = np.ascontiguousarray(params[name].data, dtype="<f8")
        index.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    header = json.dumps({"arrays": index, "dtype": "<f8", "meta": meta or {}}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path: str | Path) -> tuple[dict[str, Tensor], dict]:
    buf = Path(path).read_bytes()
    if buf[: len(MAGIC)] != MAGIC:
        raise ValueError(f"{path} is not an atmask checkpoint")
    (hlen,) = struct.unpack_from("<Q", buf, len(MAGIC))
    start = len(MAGIC) + 8
    header = json.loads(buf[start : start + hlen])
    base = start + hlen
    params = {}
    for entry in header["arrays"]:
        n = int(np.prod(entry["shape"], dtype=np.int64))
        arr = np.frombuffer(buf, dtype="<f8", count=n, offset=base + entry["offset"])
        params[entry["name"]] = parameter(arr.reshape(entry["shape"]), name=entry["name"])
    return params, header["meta"]
