"""Tensor primitives: serialization, interpolation, pooling, convolution."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lguflow import tensor
from lguflow.tensor import (
    ShapeError,
    TensorFormatError,
    avg_pool2d,
    bilinear_sample,
    conv2d,
    fully_connected,
    load_tensor,
    save_tensor,
)

from oracles import bilinear_scalar, conv_loop, pool_loop


class TestSerialization:
    def test_round_trip_bit_exact(self, rng, tmp_path):
        for dtype in (np.float32, np.float64):
            arr = rng.standard_normal((3, 5, 2)).astype(dtype)
            path = tmp_path / f"t_{dtype.__name__}.lgut"
            save_tensor(arr, path)
            back = load_tensor(path)
            assert back.dtype == arr.dtype
            assert back.tobytes() == arr.tobytes()

    def test_zero_dim_scalar_round_trips(self, tmp_path):
        arr = np.array(3.5, dtype=np.float64)
        path = tmp_path / "scalar.lgut"
        save_tensor(arr, path)
        back = load_tensor(path)
        assert back.shape == ()
        assert back == arr

    def test_wrong_magic_reports_offset_zero(self, tmp_path):
        path = tmp_path / "bad.lgut"
        path.write_bytes(b"NOPE" + bytes(16))
        with pytest.raises(TensorFormatError) as err:
            load_tensor(path)
        assert err.value.offset == 0

    def test_bad_dtype_byte(self, tmp_path, rng):
        path = tmp_path / "t.lgut"
        save_tensor(rng.standard_normal(4), path)
        blob = bytearray(path.read_bytes())
        blob[5] = 9
        path.write_bytes(bytes(blob))
        with pytest.raises(TensorFormatError) as err:
            load_tensor(path)
        assert err.value.offset == 5

    def test_truncated_payload(self, tmp_path, rng):
        path = tmp_path / "t.lgut"
        save_tensor(rng.standard_normal(8), path)
        blob = path.read_bytes()
        path.write_bytes(blob[:-3])
        with pytest.raises(TensorFormatError):
            load_tensor(path)

    @settings(max_examples=25, deadline=None)
    @given(st.lists(st.integers(1, 5), min_size=0, max_size=3), st.integers(0, 2 ** 31), st.booleans())
    def test_round_trip_property(self, shape, seed, wide):
        import tempfile

        dtype = np.float64 if wide else np.float32
        arr = np.random.default_rng(seed).standard_normal(shape).astype(dtype)
        with tempfile.TemporaryDirectory() as tmp:
            path = f"{tmp}/prop.lgut"
            save_tensor(arr, path)
            back = load_tensor(path)
        assert back.dtype == arr.dtype and back.shape == arr.shape
        assert back.tobytes() == arr.tobytes()


class TestBilinearSample:
    def test_constant_field_center(self):
        src = np.ones((2, 2))
        assert bilinear_sample(src, [(0.5, 0.5)])[0] == pytest.approx(1.0)

    def test_linear_in_x(self):
        src = np.array([[0.0, 1.0], [0.0, 1.0]])
        assert bilinear_sample(src, [(0.5, 0.0)])[0] == pytest.approx(0.5)

    def test_matches_scalar_four_tap(self):
        src = np.random.default_rng(7).standard_normal((4, 4))
        got = bilinear_sample(src, [(1.25, 2.75)])[0]
        assert got == pytest.approx(bilinear_scalar(src, 1.25, 2.75), rel=1e-12)

    def test_integer_coords_equal_direct_indexing(self, rng):
        src = rng.standard_normal((5, 6))
        coords = [(x, y) for x in range(6) for y in range(5)]
        got = bilinear_sample(src, coords)
        expected = np.array([src[y, x] for x, y in coords])
        assert np.array_equal(got, expected)

    def test_zero_padding_out_of_bounds(self, rng):
        src = rng.standard_normal((4, 4))
        assert bilinear_sample(src, [(-5.0, -5.0)])[0] == 0.0
        # half a cell beyond the border: only in-bounds neighbors contribute
        got = bilinear_sample(src, [(-0.5, 0.0)])[0]
        assert got == pytest.approx(0.5 * src[0, 0], rel=1e-12)

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 2 ** 31), st.floats(-1, 7), st.floats(-1, 6))
    def test_linearity_in_source(self, seed, x, y):
        r = np.random.default_rng(seed)
        A, B = r.standard_normal((5, 6)), r.standard_normal((5, 6))
        a, b = 1.7, -0.4
        lhs = bilinear_sample(a * A + b * B, [(x, y)])[0]
        rhs = a * bilinear_sample(A, [(x, y)])[0] + b * bilinear_sample(B, [(x, y)])[0]
        assert lhs == pytest.approx(rhs, rel=1e-12, abs=1e-12)

    def test_non_2d_raises(self):
        with pytest.raises(ShapeError):
            bilinear_sample(np.zeros((2, 2, 2)), [(0, 0)])


class TestAvgPool:
    def test_k1_identity(self, rng):
        src = rng.standard_normal((3, 4, 4))
        assert np.array_equal(avg_pool2d(src, 1), src)

    def test_mean_2x2(self):
        assert avg_pool2d(np.array([[1.0, 3.0], [5.0, 7.0]]), 2)[0, 0] == pytest.approx(4.0)

    def test_ramp_matches_loop_oracle(self):
        src = np.arange(64, dtype=np.float64).reshape(8, 8)
        got = avg_pool2d(src, 4)
        assert np.allclose(got, pool_loop(src, 4), rtol=1e-14)

    def test_non_divisible_raises(self):
        with pytest.raises(ShapeError):
            avg_pool2d(np.zeros((5, 6)), 2)

    def test_commutes_with_per_cell_linear_map(self, rng):
        src = rng.standard_normal((8, 8))
        a, b = 2.5, -1.25
        assert np.allclose(avg_pool2d(a * src + b, 2), a * avg_pool2d(src, 2) + b, rtol=1e-12)


class TestConv:
    def test_identity_kernel(self, rng):
        src = rng.standard_normal((2, 5, 5))
        kernel = np.zeros((2, 2, 3, 3))
        kernel[0, 0, 1, 1] = 1.0
        kernel[1, 1, 1, 1] = 1.0
        assert np.allclose(conv2d(src, kernel), src, rtol=1e-6)

    def test_all_ones_kernel_interior(self):
        c = 2.5
        src = np.full((1, 5, 5), c)
        kernel = np.ones((1, 1, 3, 3))
        out = conv2d(src, kernel)
        assert out[0, 2, 2] == pytest.approx(9 * c, rel=1e-6)

    def test_random_matches_loop_oracle(self):
        r = np.random.default_rng(11)
        src = r.standard_normal((3, 5, 5))
        kernel = r.standard_normal((2, 3, 3, 3))
        bias = r.standard_normal(2)
        got = conv2d(src, kernel, bias)
        assert np.allclose(got, conv_loop(src, kernel, bias), rtol=1e-10, atol=1e-10)

    def test_channel_mismatch_raises(self):
        with pytest.raises(ShapeError):
            conv2d(np.zeros((3, 4, 4)), np.zeros((2, 4, 3, 3)))

    def test_fully_connected_is_1x1_conv(self, rng):
        src = rng.standard_normal((3, 4, 5))
        w = rng.standard_normal((2, 3))
        b = rng.standard_normal(2)
        got = fully_connected(src, w, b)
        as_conv = conv2d(src, w[:, :, None, None], b)
        assert np.allclose(got, as_conv, rtol=1e-6)


class TestFiniteChecks:
    def test_nan_surfaces(self):
        with pytest.raises(tensor.NonFiniteError):
            tensor.check_finite(np.array([1.0, np.nan]))

    def test_toggle(self):
        prev = tensor.set_finite_checks(False)
        try:
            tensor.check_finite(np.array([np.inf]))
        finally:
            tensor.set_finite_checks(prev)
