import numpy as np
import pytest

from dnllab import tensor


class TestMatmul:
    def test_identity(self):
        a = np.array([[1.0, 2.0], [3.0, 4.0]])
        assert np.array_equal(tensor.matmul(np.eye(2), a), a)

    def test_zero_annihilates(self):
        rng = np.random.default_rng(0)
        out = tensor.matmul(np.zeros((2, 3)), rng.normal(size=(3, 4)))
        assert np.array_equal(out, np.zeros((2, 4)))

    def test_hand_evaluated(self):
        a = np.array([[1.0, 2.0], [3.0, 4.0]])
        b = np.array([[5.0], [6.0]])
        assert np.array_equal(tensor.matmul(a, b), [[17.0], [39.0]])

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(tensor.DimensionError, match=r"\(2, 3\).*\(4, 5\)"):
            tensor.matmul(np.zeros((2, 3)), np.zeros((4, 5)))

    def test_nonfinite_result_raises(self):
        big = np.full((1, 1), 1e308)
        with np.errstate(over="ignore"), pytest.raises(tensor.NonFiniteError):
            tensor.matmul(big, np.full((1, 1), 1e308))

    def test_associativity_on_random_instances(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            a = rng.normal(size=(4, 5))
            b = rng.normal(size=(5, 6))
            c = rng.normal(size=(6, 3))
            lhs = tensor.matmul(tensor.matmul(a, b), c)
            rhs = tensor.matmul(a, tensor.matmul(b, c))
            assert np.abs(lhs - rhs).max() <= 1e-9

    def test_pure_bit_identical(self):
        rng = np.random.default_rng(2)
        a = rng.normal(size=(7, 7))
        b = rng.normal(size=(7, 7))
        assert np.array_equal(tensor.matmul(a, b), tensor.matmul(a, b))


class TestSoftmaxRows:
    def test_constant_row_is_uniform(self):
        for c in (-3.0, 0.0, 17.5):
            out = tensor.softmax_rows(np.full((1, 4), c))
            assert np.allclose(out, 0.25, atol=1e-15)

    def test_shift_invariance(self):
        rng = np.random.default_rng(3)
        z = rng.normal(size=(5, 8)) * 10
        shifted = z + rng.normal(size=(5, 1)) * 50
        assert np.abs(tensor.softmax_rows(z) - tensor.softmax_rows(shifted)).max() <= 1e-12

    def test_hand_evaluated(self):
        out = tensor.softmax_rows(np.array([[0.0, np.log(2.0)]]))
        assert np.allclose(out, [[1 / 3, 2 / 3]], atol=1e-15)

    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(4)
        z = rng.normal(size=(30, 50)) * 40
        sums = tensor.softmax_rows(z).sum(axis=1)
        assert np.abs(sums - 1.0).max() <= 1e-12

    def test_nan_input_raises(self):
        z = np.array([[0.0, np.nan]])
        with pytest.raises(tensor.NonFiniteError):
            tensor.softmax_rows(z)

    def test_large_magnitude_stable(self):
        out = tensor.softmax_rows(np.array([[1000.0, 1001.0, 999.0]]))
        assert np.isfinite(out).all()
        assert abs(out.sum() - 1.0) <= 1e-12


class TestEmbed1x1:
    def test_identity_weight(self):
        rng = np.random.default_rng(5)
        x = rng.normal(size=(3, 4, 5))
        assert np.array_equal(tensor.embed_1x1(x, np.eye(3)), x)

    def test_zero_weight(self):
        rng = np.random.default_rng(6)
        x = rng.normal(size=(3, 4, 5))
        assert np.array_equal(tensor.embed_1x1(x, np.zeros((2, 3))), np.zeros((2, 4, 5)))

    def test_hand_evaluated_single_pixel(self):
        x = np.array([3.0, 4.0]).reshape(2, 1, 1)
        out = tensor.embed_1x1(x, np.array([[1.0, 1.0]]))
        assert out.reshape(-1) == pytest.approx([7.0])

    def test_equals_reshaped_matmul(self):
        rng = np.random.default_rng(7)
        x = rng.normal(size=(4, 3, 5))
        w = rng.normal(size=(2, 4))
        direct = tensor.embed_1x1(x, w)
        via = tensor.matmul(w, x.reshape(4, 15)).reshape(2, 3, 5)
        assert np.array_equal(direct, via)

    def test_linearity(self):
        rng = np.random.default_rng(8)
        w = rng.normal(size=(3, 4))
        x = rng.normal(size=(4, 2, 2))
        y = rng.normal(size=(4, 2, 2))
        a, b = 1.7, -0.3
        lhs = tensor.embed_1x1(a * x + b * y, w)
        rhs = a * tensor.embed_1x1(x, w) + b * tensor.embed_1x1(y, w)
        assert np.abs(lhs - rhs).max() <= 1e-9

    def test_channel_mismatch(self):
        with pytest.raises(tensor.DimensionError):
            tensor.embed_1x1(np.zeros((3, 2, 2)), np.zeros((2, 4)))


class TestConv3x3:
    def test_delta_kernel_is_identity(self):
        rng = np.random.default_rng(9)
        x = rng.normal(size=(3, 5, 6))
        k = np.zeros((3, 3, 3, 3))
        for c in range(3):
            k[c, c, 1, 1] = 1.0
        assert np.array_equal(tensor.conv3x3(x, k), x)

    def test_averaging_kernel_keeps_constant_interior(self):
        x = np.full((1, 6, 6), 2.5)
        k = np.full((1, 1, 3, 3), 1.0 / 9.0)
        out = tensor.conv3x3(x, k)
        assert np.allclose(out[0, 1:-1, 1:-1], 2.5, atol=1e-12)
        # border differs because of zero padding
        assert out[0, 0, 0] < 2.5

    def test_hand_sum_all_ones_kernel(self):
        x = np.arange(1.0, 10.0).reshape(1, 3, 3)
        k = np.ones((1, 1, 3, 3))
        out = tensor.conv3x3(x, k)
        assert out[0, 1, 1] == 45.0

    def test_kernel_shape_mismatch(self):
        with pytest.raises(tensor.DimensionError):
            tensor.conv3x3(np.zeros((2, 4, 4)), np.zeros((1, 3, 3, 3)))

    def test_matches_scipy_correlate(self):
        from scipy.ndimage import correlate

        rng = np.random.default_rng(10)
        x = rng.normal(size=(2, 6, 7))
        k = rng.normal(size=(3, 2, 3, 3))
        out = tensor.conv3x3(x, k)
        for co in range(3):
            ref = sum(
                correlate(x[ci], k[co, ci], mode="constant", cval=0.0)
                for ci in range(2)
            )
            assert np.abs(out[co] - ref).max() <= 1e-12


class TestSpatialMean:
    def test_constant_map(self):
        x = np.full((3, 4, 4), 7.5)
        assert np.allclose(tensor.spatial_mean(x), 7.5, atol=0)

    def test_single_pixel(self):
        x = np.array([1.0, -2.0, 3.0]).reshape(3, 1, 1)
        assert np.array_equal(tensor.spatial_mean(x), [1.0, -2.0, 3.0])

    def test_hand_mean(self):
        x = np.array([1.0, 2.0, 3.0, 6.0]).reshape(1, 2, 2)
        assert tensor.spatial_mean(x)[0] == pytest.approx(3.0)


class TestFlopCounter:
    def test_matmul_counts_mnk(self):
        with tensor.count_flops() as counter:
            tensor.matmul(np.zeros((3, 4)), np.zeros((4, 5)))
        assert counter.total == 3 * 4 * 5

    def test_nested_counters_both_tally(self):
        with tensor.count_flops() as outer:
            tensor.matmul(np.zeros((2, 2)), np.zeros((2, 2)))
            with tensor.count_flops() as inner:
                tensor.matmul(np.zeros((2, 2)), np.zeros((2, 2)))
        assert inner.total == 8
        assert outer.total == 16

    def test_combine_maps_counts_elements(self):
        with tensor.count_flops() as counter:
            tensor.combine_maps(np.zeros((4, 4)), np.zeros(4))
        assert counter.total == 16
        assert counter.by_kind == {"map_add": 16}

    def test_softmax_and_mean_uncounted(self):
        with tensor.count_flops() as counter:
            tensor.softmax_rows(np.zeros((5, 5)))
            tensor.spatial_mean(np.zeros((2, 3, 3)))
        assert counter.total == 0
