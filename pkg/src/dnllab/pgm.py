"""Binary PGM (P5) export for attention maps.

Values are min-max normalized per file to the 0..255 byte range; since
that normalization is lossy, the (min, max) pair is recorded in a
sidecar text file next to each image. A constant map (max == min) maps
to uniform mid-gray.
"""

import numpy as np


def write_pgm(path, values: np.ndarray) -> tuple[float, float]:
    """Write a 2-D array as P5 PGM; returns the recorded (min, max)."""
    values = np.asarray(values, dtype=float)
    if values.ndim != 2:
        raise ValueError(f"PGM export expects a 2-D map, got shape {values.shape}")
    lo = float(values.min())
    hi = float(values.max())
    if hi > lo:
        scaled = np.rint((values - lo) / (hi - lo) * 255.0).astype(np.uint8)
    else:
        scaled = np.full(values.shape, 128, dtype=np.uint8)
    h, w = values.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(scaled.tobytes())
    return lo, hi


def write_sidecar(path, lo: float, hi: float, extra: dict | None = None) -> None:
    """Record the normalization range (plus context) for recoverability."""
    with open(path, "w") as fh:
        fh.write(f"min = {lo!r}\nmax = {hi!r}\n")
        for key in sorted(extra or {}):
            fh.write(f"{key} = {extra[key]}\n")


def read_pgm(path) -> np.ndarray:
    """Read back a P5 PGM written by :func:`write_pgm` (for tests)."""
    with open(path, "rb") as fh:
        data = fh.read()
    parts = data.split(b"\n", 3)
    if parts[0] != b"P5":
        raise ValueError(f"{path}: not a P5 PGM")
    w, h = (int(t) for t in parts[1].split())
    if parts[2] != b"255":
        raise ValueError(f"{path}: unexpected maxval")
    return np.frombuffer(parts[3][: w * h], dtype=np.uint8).reshape(h, w)
