"""Ground-truth map machinery and attention/ground-truth consistency stats.

A label map is an integer ``[H, W]`` grid of category ids; binary maps
are uint8 ``[H, W]`` grids of {0, 1}. The consistency statistic between
an attention map and a binary map is their plain inner product over
pixels, which lies in [0, 1] whenever the attention sums to 1.

The consistency table averages, over queries and samples:

* each query's pairwise attention row against that query's
  within-category map,
* the pairwise rows against the boundary map,
* the (query-independent) unary attention against the boundary map,

with queries weighted uniformly. A seeded random-attention row is
included as the reference floor.
"""

import csv
from dataclasses import dataclass, field

import numpy as np

from . import tensor
from .blocks import Variant

CSV_HEADER = ("variant", "pair_within", "pair_boundary", "unary_boundary")


def overlap(attn: np.ndarray, g: np.ndarray) -> float:
    """Inner product of an attention map with a binary map."""
    attn = np.asarray(attn, dtype=float).reshape(-1)
    g = np.asarray(g).reshape(-1)
    if attn.shape != g.shape:
        raise tensor.DimensionError(
            f"overlap: attention {attn.shape} vs map {g.shape}"
        )
    return float(attn @ g)


def validate_labels(labels: np.ndarray) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.ndim != 2 or not np.issubdtype(labels.dtype, np.integer):
        raise ValueError(f"label map must be an integer [H,W] grid, got {labels.dtype} {labels.shape}")
    if labels.min() < 0:
        raise ValueError("label map contains negative category ids")
    return labels


def within_category_map(labels: np.ndarray, i: int) -> np.ndarray:
    """Binary map of pixels sharing pixel i's label (i is row-major)."""
    labels = validate_labels(labels)
    h, w = labels.shape
    if not 0 <= i < h * w:
        raise IndexError(f"pixel index {i} out of range for {h}x{w} map")
    return (labels == labels.reshape(-1)[i]).astype(np.uint8)


def contour_map(labels: np.ndarray) -> np.ndarray:
    """Pixels with a 4-neighbor of a different label."""
    labels = validate_labels(labels)
    c = np.zeros(labels.shape, dtype=bool)
    dv = labels[1:, :] != labels[:-1, :]
    dh = labels[:, 1:] != labels[:, :-1]
    c[1:, :] |= dv
    c[:-1, :] |= dv
    c[:, 1:] |= dh
    c[:, :-1] |= dh
    return c.astype(np.uint8)


def boundary_map(labels: np.ndarray, radius: float = 5.0) -> np.ndarray:
    """Pixels whose Euclidean distance to the label contour is < radius.

    The contour is 4-connected and marked on both sides of every label
    change; distances are exact (all-pairs against contour pixels). A
    single-category map has no contour and yields the all-zero map.
    """
    if radius < 1:
        raise ValueError(f"radius must be >= 1, got {radius}")
    labels = validate_labels(labels)
    h, w = labels.shape
    contour = contour_map(labels)
    ys, xs = np.nonzero(contour)
    if ys.size == 0:
        return np.zeros((h, w), dtype=np.uint8)
    gy, gx = np.mgrid[0:h, 0:w]
    d2 = ((gy.reshape(-1, 1) - ys[None, :]) ** 2
          + (gx.reshape(-1, 1) - xs[None, :]) ** 2)
    return (d2.min(axis=1) < radius * radius).reshape(h, w).astype(np.uint8)


@dataclass
class ConsistencyRow:
    """One table row; None marks a statistic the variant does not have."""

    label: str
    pair_within: float | None
    pair_boundary: float | None
    unary_boundary: float | None


@dataclass
class ConsistencyReport:
    """Attention/ground-truth consistency, averaged over queries and samples."""

    rows: list[ConsistencyRow] = field(default_factory=list)
    samples: int = 0
    queries_per_sample: int = 0
    query_weighting: str = "uniform"

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(CSV_HEADER)
            for row in self.rows:
                writer.writerow([
                    row.label,
                    *("-" if v is None else f"{v:.6f}"
                      for v in (row.pair_within, row.pair_boundary, row.unary_boundary)),
                ])

    def row(self, label: str) -> ConsistencyRow:
        for r in self.rows:
            if r.label == label:
                return r
        raise KeyError(label)


def _sample_stats(decomp, labels: np.ndarray, boundary: np.ndarray):
    """Per-sample (pair_within, pair_boundary, unary_boundary), each or None."""
    flat_labels = labels.reshape(-1)
    bflat = boundary.reshape(-1).astype(float)
    pw = pb = ub = None
    if decomp.has_pairwise:
        p = decomp.pairwise_norm
        same = (flat_labels[:, None] == flat_labels[None, :])
        pw = float((p * same).sum(axis=1).mean())
        pb = float((p @ bflat).mean())
    if decomp.has_unary:
        ub = float(decomp.unary_norm @ bflat)
    return pw, pb, ub


def _random_stats(rng: np.random.Generator, labels, boundary, queries: int):
    flat_labels = labels.reshape(-1)
    bflat = boundary.reshape(-1).astype(float)
    attn = rng.uniform(size=(queries, flat_labels.size))
    attn /= attn.sum(axis=1, keepdims=True)
    same = (flat_labels[:, None] == flat_labels[None, :])
    pw = float((attn * same).sum(axis=1).mean())
    pb = float((attn @ bflat).mean())
    # query-independent random unary row
    u = rng.uniform(size=flat_labels.size)
    u /= u.sum()
    return pw, pb, float(u @ bflat)


def consistency_table(models, samples, random_seed: int = 0,
                      include_random: bool = True) -> ConsistencyReport:
    """Build the consistency table for trained models over scene samples.

    ``models`` is a list of ``(Variant, provider)`` pairs where the
    provider exposes ``attention_for(sample) -> AttentionDecomposition``
    (the attention computed at the block's input inside the trained
    network). ``samples`` must expose ``labels`` and ``boundary`` grids.
    """
    report = ConsistencyReport()
    if not samples:
        raise ValueError("consistency_table needs at least one sample")
    queries = int(np.asarray(samples[0].labels).size)
    report.samples = len(samples)
    report.queries_per_sample = queries

    if include_random:
        rng = np.random.default_rng(random_seed)
        acc = np.zeros(3)
        for sample in samples:
            acc += _random_stats(rng, sample.labels, sample.boundary, queries)
        acc /= len(samples)
        report.rows.append(ConsistencyRow("random", *acc))

    for variant, provider in models:
        sums = [0.0, 0.0, 0.0]
        counts = [0, 0, 0]
        for sample in samples:
            decomp = provider.attention_for(sample)
            for slot, value in enumerate(_sample_stats(decomp, sample.labels, sample.boundary)):
                if value is not None:
                    sums[slot] += value
                    counts[slot] += 1
        stats = [s / c if c else None for s, c in zip(sums, counts)]
        report.rows.append(ConsistencyRow(variant.value, *stats))
    return report


__all__ = [
    "CSV_HEADER", "ConsistencyReport", "ConsistencyRow", "Variant",
    "boundary_map", "consistency_table", "contour_map", "overlap",
    "within_category_map",
]
