"""Closed-form and measured complexity accounting for the block variants.

Closed forms (exact integer arithmetic; C is the block width, N = H*W):

* parameters: 2C^2 for the four-projection variants, (2C+1)C for the
  variants with the extra 1-channel unary projection;
* multiply-add counts: ``(2C^2 + (3/2 C + 1) N) N`` for the standard
  block and ``((2C+1)C + (3/2 C + 2) N) N`` for the disentangled block.

Measured counts come from the instrumented counter threaded through the
tensor kernels (see the counting policy in :mod:`dnllab.tensor`); they
are first-principles totals of one block forward, and the contract
``measured(DNL) - measured(NL) == C*N + N^2`` (the unary projection plus
the map combination) holds exactly. Latency rows are wall-clock medians
over repetitions after warmup and are the one output of this module that
is not byte-reproducible across runs.
"""

import statistics
import time
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from . import blocks, tensor
from .blocks import Variant

# variants carrying the extra 1-channel unary projection
_WIDE = frozenset({Variant.DNL, Variant.DNL_STAR})


def param_count(variant: Variant, channels: int) -> int:
    """Exact learnable-parameter count of one block."""
    if channels % 2:
        raise ValueError(f"channels must be even, got {channels}")
    base = 2 * channels * channels
    return base + channels if variant in _WIDE else base


def flop_formula(variant: Variant, channels: int, height: int, width: int) -> int:
    """Closed-form multiply-add count (defined for NL and DNL)."""
    if channels % 2:
        raise ValueError(f"channels must be even, got {channels}")
    n = height * width
    if variant is Variant.NL:
        return (2 * channels * channels + (3 * channels // 2 + 1) * n) * n
    if variant is Variant.DNL:
        return ((2 * channels + 1) * channels + (3 * channels // 2 + 2) * n) * n
    raise ValueError(f"no closed-form count for variant {variant.value}")


@dataclass
class OverheadRow:
    """Relative cost of the disentangled block over the standard one."""

    channels: int
    positions: int
    space_overhead: Fraction     # exact: C / 2C^2 = 1/(2C)
    time_overhead: float         # from the closed-form counts

    def space_pct(self) -> str:
        return f"{float(self.space_overhead) * 100:.4g}%"

    def time_pct(self) -> str:
        return f"{self.time_overhead * 100:.4g}%"


def overhead_report(channels: int, position_counts) -> list[OverheadRow]:
    """Space/time overhead rows over a sweep of spatial sizes."""
    rows = []
    for n in position_counts:
        h, w = n, 1
        nl = flop_formula(Variant.NL, channels, h, w)
        dnl = flop_formula(Variant.DNL, channels, h, w)
        rows.append(OverheadRow(
            channels=channels,
            positions=n,
            space_overhead=Fraction(1, 2 * channels),
            time_overhead=(dnl - nl) / nl,
        ))
    return rows


def time_overhead_limit(channels: int) -> float:
    """Large-map limit of the time overhead: 1 / (3C/2 + 1)."""
    return 1.0 / (3 * channels / 2 + 1)


def overhead_note(channels: int = 512, positions: int = 9409) -> str:
    row = overhead_report(channels, [positions])[0]
    return (
        f"space overhead at C={channels}: exactly 1/(2C) = {row.space_pct()}; "
        f"time overhead at C={channels}, HW={positions}: {row.time_pct()} from the "
        f"closed forms (large-map bound {time_overhead_limit(channels) * 100:.4g}%); "
        f"the commonly quoted ~0.15% figure is approximate and exceeds that bound."
    )


def flop_measure(variant: Variant, channels: int, height: int, width: int,
                 seed: int = 0) -> int:
    """Multiply-adds actually executed by one block forward.

    Counts only block-internal work (embeddings, attention combination,
    aggregation, output projection) under the kernel counting policy.
    """
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(channels, height, width))
    params = blocks.init_block_params(channels, variant, rng)
    if variant in blocks.NEEDS_WM:
        params.Wm[:] = rng.normal(size=params.Wm.shape)
    with tensor.count_flops() as counter:
        blocks.block_forward(x, params, variant)
    return counter.total


@dataclass
class ComplexityRow:
    """One line of the complexity report."""

    variant: str
    channels: int
    height: int
    width: int
    params: int
    flops_formula: int | None
    flops_measured: int
    latency_ns_median: float | None = None
    latency_ns_p90: float | None = None


def complexity_rows(variants, sizes, seed: int = 0) -> list[ComplexityRow]:
    """Deterministic complexity table over ``variants`` x ``sizes``."""
    rows = []
    for channels, height, width in sizes:
        for variant in variants:
            try:
                formula = flop_formula(variant, channels, height, width)
            except ValueError:
                formula = None
            rows.append(ComplexityRow(
                variant=variant.value, channels=channels, height=height, width=width,
                params=param_count(variant, channels),
                flops_formula=formula,
                flops_measured=flop_measure(variant, channels, height, width, seed=seed),
            ))
    return rows


def latency_bench(variants, sizes, reps: int = 20, warmup: int = 3,
                  seed: int = 0) -> list[ComplexityRow]:
    """Wall-clock forward latency; medians and p90 after dropping warmup.

    Single-threaded per measurement; the FLOP counter stays uninstalled
    so instrumentation does not distort timings.
    """
    if reps < 5:
        raise ValueError("latency_bench needs reps >= 5")
    rows = complexity_rows(variants, sizes, seed=seed)
    for row in rows:
        variant = blocks.parse_variant(row.variant)
        rng = np.random.default_rng(seed)
        x = rng.normal(size=(row.channels, row.height, row.width))
        params = blocks.init_block_params(row.channels, variant, rng)
        samples = []
        for _ in range(warmup + reps):
            t0 = time.perf_counter_ns()
            blocks.block_forward(x, params, variant)
            samples.append(time.perf_counter_ns() - t0)
        kept = samples[warmup:]
        row.latency_ns_median = float(statistics.median(kept))
        row.latency_ns_p90 = float(np.percentile(kept, 90))
    return rows


CSV_HEADER = ("variant", "C", "H", "W", "params", "flops_formula",
              "flops_measured", "latency_ns_median", "latency_ns_p90")


def rows_to_csv(rows: list[ComplexityRow]) -> str:
    lines = [",".join(CSV_HEADER)]
    for r in rows:
        lines.append(",".join([
            r.variant, str(r.channels), str(r.height), str(r.width), str(r.params),
            "-" if r.flops_formula is None else str(r.flops_formula),
            str(r.flops_measured),
            "-" if r.latency_ns_median is None else f"{r.latency_ns_median:.0f}",
            "-" if r.latency_ns_p90 is None else f"{r.latency_ns_p90:.0f}",
        ]))
    return "\n".join(lines) + "\n"


def rows_to_table(rows: list[ComplexityRow]) -> str:
    """Aligned text table for stdout."""
    header = ["variant", "C", "HxW", "params", "flops(formula)", "flops(measured)",
              "latency med", "latency p90"]
    body = []
    for r in rows:
        body.append([
            r.variant, str(r.channels), f"{r.height}x{r.width}", str(r.params),
            "-" if r.flops_formula is None else f"{r.flops_formula:,}",
            f"{r.flops_measured:,}",
            "-" if r.latency_ns_median is None else f"{r.latency_ns_median / 1e6:.3f} ms",
            "-" if r.latency_ns_p90 is None else f"{r.latency_ns_p90 / 1e6:.3f} ms",
        ])
    widths = [max(len(row[i]) for row in [header] + body) for i in range(len(header))]
    def fmt(row):
        return "  ".join(cell.rjust(w) for cell, w in zip(row, widths))
    return "\n".join([fmt(header)] + [fmt(row) for row in body]) + "\n"
