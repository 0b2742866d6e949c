"""Flat binary weights format.

Layout (all integers little-endian):

* magic ``b"DNLLABW1"`` (8 bytes)
* ``uint32`` byte length of the metadata block, then that many bytes of
  UTF-8 ``key = value`` lines (one per line)
* ``uint32`` entry count, then per entry: ``uint16`` name length, the
  UTF-8 name, ``uint8`` ndim, ``ndim x uint32`` dimension sizes
* the payloads, concatenated in entry order, each row-major float64

Payloads are stored as float64 regardless of the active precision mode
and cast to the active dtype on load.
"""

import struct

import numpy as np

from .precision import scalar_dtype

MAGIC = b"DNLLABW1"


class WeightsFormatError(ValueError):
    """Raised when a weights file does not follow the format above."""


def _encode_meta(meta: dict) -> bytes:
    lines = [f"{key} = {meta[key]}" for key in sorted(meta)]
    return "\n".join(lines).encode("utf-8")


def _decode_meta(blob: bytes) -> dict:
    meta = {}
    for line in blob.decode("utf-8").splitlines():
        if not line.strip():
            continue
        key, _, value = line.partition("=")
        meta[key.strip()] = value.strip()
    return meta


def save_weights(path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    """Write named arrays plus a flat metadata dict."""
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        blob = _encode_meta(meta or {})
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<I", len(arrays)))
        names = list(arrays)
        for name in names:
            arr = np.asarray(arrays[name])
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        for name in names:
            payload = np.ascontiguousarray(arrays[name], dtype="<f8")
            fh.write(payload.tobytes())


def load_weights(path):
    """Read ``(arrays, meta)`` back; arrays come out in the active dtype."""
    with open(path, "rb") as fh:
        if fh.read(8) != MAGIC:
            raise WeightsFormatError(f"{path}: bad magic")
        (meta_len,) = struct.unpack("<I", fh.read(4))
        meta = _decode_meta(fh.read(meta_len))
        (count,) = struct.unpack("<I", fh.read(4))
        shapes = []
        for _ in range(count):
            (name_len,) = struct.unpack("<H", fh.read(2))
            name = fh.read(name_len).decode("utf-8")
            (ndim,) = struct.unpack("<B", fh.read(1))
            dims = struct.unpack(f"<{ndim}I", fh.read(4 * ndim))
            shapes.append((name, dims))
        arrays = {}
        for name, dims in shapes:
            size = int(np.prod(dims, dtype=np.int64)) if dims else 1
            raw = fh.read(8 * size)
            if len(raw) != 8 * size:
                raise WeightsFormatError(f"{path}: truncated payload for {name!r}")
            arrays[name] = (
                np.frombuffer(raw, dtype="<f8").reshape(dims).astype(scalar_dtype())
            )
        return arrays, meta
