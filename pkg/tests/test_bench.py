from fractions import Fraction

import numpy as np
import pytest

from dnllab import bench, blocks
from dnllab.blocks import Variant


class TestParamCount:
    def test_reference_values_at_c512(self):
        assert bench.param_count(Variant.NL, 512) == 524288
        assert bench.param_count(Variant.DNL, 512) == 524800

    @pytest.mark.parametrize("channels", [4, 8, 16, 32, 64, 128, 256, 512])
    def test_difference_is_exactly_c(self, channels):
        diff = bench.param_count(Variant.DNL, channels) - bench.param_count(
            Variant.NL, channels)
        assert diff == channels

    @pytest.mark.parametrize("channels", [4, 8, 16, 32, 64, 128, 256, 512])
    @pytest.mark.parametrize("variant", blocks.VARIANTS)
    def test_matches_walk_over_block_param_shapes(self, channels, variant):
        p = blocks.init_block_params(channels, variant, np.random.default_rng(0))
        assert bench.param_count(variant, channels) == p.param_count()

    def test_odd_channels_rejected(self):
        with pytest.raises(ValueError):
            bench.param_count(Variant.NL, 7)


class TestFlopFormula:
    def test_reference_values_at_c512(self):
        assert bench.flop_formula(Variant.NL, 512, 97, 97) == 7_759_809 * 9409
        assert bench.flop_formula(Variant.DNL, 512, 97, 97) == 7_769_730 * 9409

    def test_single_pixel_reduction(self):
        c = 8
        assert bench.flop_formula(Variant.NL, c, 1, 1) == 2 * c * c + 3 * c // 2 + 1

    def test_no_closed_form_for_other_variants(self):
        with pytest.raises(ValueError):
            bench.flop_formula(Variant.UNARY_NL, 8, 2, 2)


class TestOverheadReport:
    def test_space_overhead_exact_rational(self):
        row = bench.overhead_report(512, [9409])[0]
        assert row.space_overhead == Fraction(1, 1024)
        assert row.space_pct() == "0.09766%"

    def test_time_overhead_reference_value(self):
        row = bench.overhead_report(512, [9409])[0]
        assert row.time_pct() == "0.1279%"

    def test_overhead_monotone_and_bounded(self):
        rows = bench.overhead_report(512, [64, 256, 1024, 4096, 65536])
        values = [r.time_overhead for r in rows]
        assert all(a < b for a, b in zip(values, values[1:]))
        assert all(v < bench.time_overhead_limit(512) for v in values)

    def test_note_flags_approximate_quote(self):
        note = bench.overhead_note()
        assert "0.09766%" in note and "0.1279%" in note and "0.15%" in note


class TestFlopMeasure:
    @pytest.mark.parametrize("channels,h,w", [(4, 3, 3), (8, 2, 2), (8, 4, 4), (16, 4, 4)])
    def test_dnl_minus_nl_is_exact(self, channels, h, w):
        hw = h * w
        diff = (bench.flop_measure(Variant.DNL, channels, h, w)
                - bench.flop_measure(Variant.NL, channels, h, w))
        assert diff == channels * hw + hw * hw

    def test_unary_skips_pairwise_product(self):
        assert bench.flop_measure(Variant.UNARY_NL, 8, 4, 4) < bench.flop_measure(
            Variant.NL, 8, 4, 4)

    def test_repeat_runs_identical(self):
        a = bench.flop_measure(Variant.DNL_STAR, 8, 3, 3)
        assert a == bench.flop_measure(Variant.DNL_STAR, 8, 3, 3)

    def test_loglog_slope_in_positions(self):
        # quadratic regime: positions well past the 2C^2/C crossover
        c = 8
        n1, n2 = 24 * 24, 48 * 48
        f1 = bench.flop_measure(Variant.NL, c, 24, 24)
        f2 = bench.flop_measure(Variant.NL, c, 48, 48)
        slope = np.log(f2 / f1) / np.log(n2 / n1)
        assert abs(slope - 2.0) <= 0.1

    def test_loglog_slope_in_channels(self):
        h = w = 4
        f1 = bench.flop_measure(Variant.NL, 128, h, w)
        f2 = bench.flop_measure(Variant.NL, 512, h, w)
        slope = np.log(f2 / f1) / np.log(512 / 128)
        assert abs(slope - 2.0) <= 0.1


class TestReports:
    def test_complexity_rows_deterministic(self):
        rows1 = bench.complexity_rows([Variant.NL, Variant.DNL], [(8, 4, 4)])
        rows2 = bench.complexity_rows([Variant.NL, Variant.DNL], [(8, 4, 4)])
        assert bench.rows_to_csv(rows1) == bench.rows_to_csv(rows2)

    def test_csv_and_table_shapes(self):
        rows = bench.complexity_rows(list(blocks.VARIANTS), [(8, 4, 4)])
        csv_text = bench.rows_to_csv(rows)
        assert csv_text.splitlines()[0] == ",".join(bench.CSV_HEADER)
        assert len(csv_text.splitlines()) == 7
        table = bench.rows_to_table(rows)
        assert "flops(measured)" in table

    def test_latency_bench_contract(self):
        rows = bench.latency_bench([Variant.NL, Variant.DNL], [(16, 8, 8)],
                                   reps=6, warmup=2)
        for row in rows:
            assert row.latency_ns_median is not None
            assert row.latency_ns_p90 >= row.latency_ns_median > 0

    def test_latency_requires_min_reps(self):
        with pytest.raises(ValueError):
            bench.latency_bench([Variant.NL], [(8, 4, 4)], reps=3)
