"""Binary PGM (P5) / PPM (P6) reading and writing, 8-bit only."""

from __future__ import annotations

from pathlib import Path

import numpy as np


class NetpbmError(ValueError):
    pass


def _tokens(buf: bytes, count: int):
    """Read ``count`` header tokens, skipping ``#`` comments; return tokens and data offset."""
    toks, pos, n = [], 0, len(buf)
    while len(toks) < count:
        while pos < n and buf[pos : pos + 1].isspace():
            pos += 1
        if pos < n and buf[pos : pos + 1] == b"#":
            while pos < n and buf[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not buf[pos : pos + 1].isspace() and buf[pos : pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise NetpbmError("truncated header")
        toks.append(buf[start:pos].decode("ascii"))
    # exactly one whitespace byte separates header from raster
    return toks, pos + 1


def read_netpbm(path: str | Path) -> np.ndarray:
    """Return uint8 array, (H, W) for P5 or (H, W, 3) for P6."""
    buf = Path(path).read_bytes()
    (magic, w, h, maxval), offset = _tokens(buf, 4)
    if magic not in ("P5", "P6"):
        raise NetpbmError(f"unsupported magic {magic!r}")
    w, h, maxval = int(w), int(h), int(maxval)
    if maxval != 255:
        raise NetpbmError(f"only 8-bit maxval 255 supported, got {maxval}")
    channels = 3 if magic == "P6" else 1
    expected = w * h * channels
    raster = buf[offset : offset + expected]
    if len(raster) != expected:
        raise NetpbmError(f"raster has {len(raster)} bytes, expected {expected}")
    arr = np.frombuffer(raster, dtype=np.uint8).copy()
    return arr.reshape((h, w, 3) if channels == 3 else (h, w))


def write_netpbm(path: str | Path, arr: np.ndarray) -> None:
    arr = np.asarray(arr)
    if arr.dtype != np.uint8:
        raise NetpbmError(f"expected uint8 raster, got {arr.dtype}")
    if arr.ndim == 2:
        magic = b"P5"
    elif arr.ndim == 3 and arr.shape[2] == 3:
        magic = b"P6"
    else:
        raise NetpbmError(f"cannot store array of shape {arr.shape}")
    h, w = arr.shape[:2]
    header = magic + f"\n{w} {h}\n255\n".encode("ascii")
    Path(path).write_bytes(header + np.ascontiguousarray(arr).tobytes())


def to_gray8(values: np.ndarray) -> np.ndarray:
    """Scale a [0, 1] map to 8-bit gray (round half to even, clipped)."""
    return np.clip(np.rint(np.asarray(values, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
