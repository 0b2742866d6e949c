"""Deterministic dense-tensor kernels.

Values are plain C-contiguous numpy arrays (row-major flat data plus a
shape, which is exactly the carrier every other module assumes). All
kernels here are pure: identical inputs give bit-identical outputs within
one process. Kernels validate shapes, refuse to emit non-finite values,
and report their multiply-add counts to the active FLOP counter (see
:func:`count_flops`).

Feature maps are arrays of shape ``[C, H, W]``; the pixel index set is
the ``H * W`` row-major positions.
"""

import contextlib
from dataclasses import dataclass, field

import numpy as np

from .precision import as_scalar_array


class DimensionError(ValueError):
    """Raised when operand shapes do not line up."""


class NonFiniteError(ArithmeticError):
    """Raised when an op would produce (or was fed) NaN or Inf."""


# ---------------------------------------------------------------------------
# FLOP accounting
#
# Policy (mirrors the closed-form complexity accounting): one fused
# multiply-accumulate in a matrix product or convolution counts as one
# unit; the elementwise combination of attention maps counts one unit per
# output element. Mean-centering, softmax internals, and the residual
# addition are uncounted data movement. The policy is what makes measured
# differences between block variants exact integers.
# ---------------------------------------------------------------------------


@dataclass
class FlopCounter:
    """Accumulates multiply-add units reported by kernels."""

    total: int = 0
    by_kind: dict = field(default_factory=dict)

    def add(self, kind: str, units: int) -> None:
        self.total += units
        self.by_kind[kind] = self.by_kind.get(kind, 0) + units


_counters: list[FlopCounter] = []


@contextlib.contextmanager
def count_flops():
    """Context manager yielding a :class:`FlopCounter` fed by all kernels."""
    counter = FlopCounter()
    _counters.append(counter)
    try:
        yield counter
    finally:
        _counters.remove(counter)


def _tally(kind: str, units: int) -> None:
    for counter in _counters:
        counter.add(kind, units)


# ---------------------------------------------------------------------------
# finiteness guard
# ---------------------------------------------------------------------------


def ensure_finite(arr: np.ndarray, op: str) -> np.ndarray:
    """Raise :class:`NonFiniteError` if ``arr`` contains NaN or Inf."""
    # One-pass check: the sum is non-finite iff some element is (values in
    # this artifact are far from the overflow threshold of the sum itself).
    if not np.isfinite(np.sum(arr)):
        raise NonFiniteError(f"{op}: non-finite values encountered")
    return arr


# ---------------------------------------------------------------------------
# kernels
# ---------------------------------------------------------------------------


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Textbook matrix product of 2-D arrays with shape checking."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(
            f"matmul expects 2-D operands, got {a.shape} and {b.shape}"
        )
    if a.shape[1] != b.shape[0]:
        raise DimensionError(
            f"matmul inner dimensions disagree: {a.shape} x {b.shape}"
        )
    _tally("matmul", a.shape[0] * a.shape[1] * b.shape[1])
    return ensure_finite(a @ b, "matmul")


def softmax_rows(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax with per-row max subtraction.

    Every output row is nonnegative and sums to 1 within a few ulps; the
    result is invariant to adding a constant to a row.
    """
    logits = np.asarray(logits)
    if logits.ndim != 2:
        raise DimensionError(f"softmax_rows expects a matrix, got shape {logits.shape}")
    shifted = logits - logits.max(axis=1, keepdims=True)
    np.exp(shifted, out=shifted)
    denom = shifted.sum(axis=1, keepdims=True)
    # after max subtraction exp cannot overflow and the max entry pins
    # every denominator to >= 1, so a bad denominator means NaN/Inf input
    if not np.isfinite(np.sum(denom)):
        raise NonFiniteError("softmax_rows: non-finite logits")
    shifted /= denom
    return shifted


def softmax_vec(logits: np.ndarray) -> np.ndarray:
    """Softmax of a 1-D vector (normalization over all entries)."""
    logits = np.asarray(logits)
    if logits.ndim != 1:
        raise DimensionError(f"softmax_vec expects a vector, got shape {logits.shape}")
    return softmax_rows(logits[None, :])[0]


def embed_1x1(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Per-pixel linear map of a ``[C, H, W]`` feature map by ``w [C', C]``."""
    x = np.asarray(x)
    w = np.asarray(w)
    if x.ndim != 3:
        raise DimensionError(f"embed_1x1 expects a [C,H,W] map, got shape {x.shape}")
    c, h, wdt = x.shape
    if w.ndim != 2 or w.shape[1] != c:
        raise DimensionError(
            f"embed_1x1 weight {w.shape} does not match {c} input channels"
        )
    out = matmul(w, x.reshape(c, h * wdt))
    return out.reshape(w.shape[0], h, wdt)


def im2col3x3(x: np.ndarray) -> np.ndarray:
    """Unfold 3x3 neighborhoods (zero padding 1) into a ``[C*9, H*W]`` matrix."""
    c, h, w = x.shape
    padded = np.zeros((c, h + 2, w + 2), dtype=x.dtype)
    padded[:, 1:-1, 1:-1] = x
    cols = np.empty((9, c, h * w), dtype=x.dtype)
    k = 0
    for dy in range(3):
        for dx in range(3):
            cols[k] = padded[:, dy : dy + h, dx : dx + w].reshape(c, h * w)
            k += 1
    # layout: index = dy*3*C + dx*C + channel, matching kernel.reshape below
    return cols.reshape(9 * c, h * w)


def col2im3x3(cols: np.ndarray, c: int, h: int, w: int) -> np.ndarray:
    """Adjoint of :func:`im2col3x3`: scatter-add columns back to a map."""
    padded = np.zeros((c, h + 2, w + 2), dtype=cols.dtype)
    stacked = cols.reshape(9, c, h, w)
    k = 0
    for dy in range(3):
        for dx in range(3):
            padded[:, dy : dy + h, dx : dx + w] += stacked[k]
            k += 1
    return padded[:, 1:-1, 1:-1]


def conv3x3(x: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Stride-1 cross-correlation with a ``[C', C, 3, 3]`` kernel, zero pad 1."""
    x = np.asarray(x)
    kernel = np.asarray(kernel)
    if x.ndim != 3:
        raise DimensionError(f"conv3x3 expects a [C,H,W] map, got shape {x.shape}")
    c, h, w = x.shape
    if kernel.ndim != 4 or kernel.shape[1:] != (c, 3, 3):
        raise DimensionError(
            f"conv3x3 kernel {kernel.shape} does not match [C',{c},3,3]"
        )
    cout = kernel.shape[0]
    # kernel laid out to match im2col ordering: [dy, dx, c] fastest on c
    kmat = kernel.transpose(0, 2, 3, 1).reshape(cout, 9 * c)
    out = matmul(kmat, im2col3x3(x))
    return out.reshape(cout, h, w)


def spatial_mean(x: np.ndarray) -> np.ndarray:
    """Per-channel mean over all pixels of a ``[C, H, W]`` or ``[C, N]`` map."""
    x = np.asarray(x)
    if x.ndim == 3:
        x = x.reshape(x.shape[0], -1)
    if x.ndim != 2:
        raise DimensionError(f"spatial_mean expects [C,H,W] or [C,N], got {x.shape}")
    return ensure_finite(x.mean(axis=1), "spatial_mean")


def combine_maps(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Elementwise sum of two attention maps; counted at one unit/element.

    ``b`` may be a per-key vector, in which case it is added to every row.
    Operands come from kernels that already guarantee finiteness, and a
    sum of finite values at attention magnitudes cannot overflow, so no
    further finiteness scan is needed.
    """
    a = np.asarray(a)
    b = np.asarray(b)
    if b.ndim == 1:
        if a.shape[1] != b.shape[0]:
            raise DimensionError(f"combine_maps: map {a.shape} vs key vector {b.shape}")
        out = a + b[None, :]
    else:
        if a.shape != b.shape:
            raise DimensionError(f"combine_maps: shapes differ: {a.shape} vs {b.shape}")
        out = a + b
    _tally("map_add", out.size)
    return out


def as_feature_map(data, channels: int | None = None) -> np.ndarray:
    """Validate and coerce ``data`` to a ``[C, H, W]`` map of the active dtype."""
    x = as_scalar_array(data)
    if x.ndim != 3 or min(x.shape) < 1:
        raise DimensionError(f"feature map must be [C,H,W] with positive dims, got {x.shape}")
    if channels is not None and x.shape[0] != channels:
        raise DimensionError(f"feature map has {x.shape[0]} channels, expected {channels}")
    return x
