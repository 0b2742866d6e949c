"""Global scalar precision switch.

Everything runs in float64 by default. A float32 mode exists for latency
benchmarking only; the verification suites assume float64 tolerances.
The mode is read from the ``DNLLAB_PRECISION`` environment variable
(``f64`` or ``f32``) at import time and can be changed programmatically
with :func:`set_precision`. Arrays are created with the active dtype;
changing the mode mid-run does not convert existing arrays.
"""

import os

import numpy as np

_MODES = {"f64": np.float64, "f32": np.float32}

_active = os.environ.get("DNLLAB_PRECISION", "f64").strip().lower()
if _active not in _MODES:
    raise ValueError(
        f"DNLLAB_PRECISION must be one of {sorted(_MODES)}, got {_active!r}"
    )


def set_precision(mode: str) -> None:
    """Select the scalar width for newly created arrays ('f64' or 'f32')."""
    global _active
    if mode not in _MODES:
        raise ValueError(f"precision mode must be one of {sorted(_MODES)}, got {mode!r}")
    _active = mode


def precision_mode() -> str:
    """Return the active mode name."""
    return _active


def scalar_dtype() -> type:
    """Return the numpy dtype for the active precision mode."""
    return _MODES[_active]


def as_scalar_array(data) -> np.ndarray:
    """Coerce ``data`` to a contiguous array of the active scalar dtype."""
    return np.ascontiguousarray(np.asarray(data, dtype=scalar_dtype()))
