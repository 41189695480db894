import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from onestep_face import kernels
from onestep_face._accel import HAS_NUMBA

from oracles import block_codec, brute_nearest, dct8, naive_bilinear, naive_correlate

finite = st.floats(-10, 10, allow_nan=False, width=64)


# nearest code


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 12), st.integers(1, 12), st.integers(1, 5), st.integers(0, 2**31 - 1))
def test_nearest_code_matches_brute_force(K, N, d, seed):
    rng = np.random.default_rng(seed)
    f = rng.normal(size=(K, d))
    c = rng.normal(size=(N, d))
    assert np.array_equal(kernels.nearest_code(f, c), brute_nearest(f, c))


def test_nearest_code_ties_go_to_lowest_index():
    codes = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 0.0], [-1.0, 0.0]])
    feats = np.array([[1.0, 0.0], [0.5, 0.5], [0.0, 0.0]])
    assert kernels.nearest_code(feats, codes).tolist() == [0, 0, 0]


def test_nearest_code_rejects_width_mismatch():
    with pytest.raises(ValueError, match="width"):
        kernels.nearest_code(np.zeros((2, 3)), np.zeros((4, 2)))


# correlation, blur, sobel


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 9), st.integers(1, 9)), elements=finite),
       arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 5)), elements=finite))
def test_correlate_matches_naive(img, kernel):
    np.testing.assert_allclose(kernels.correlate2d(img, kernel), naive_correlate(img, kernel), rtol=1e-12, atol=1e-9)


def test_gaussian_kernel_is_normalised():
    for sigma in (0.3, 1.0, 2.7):
        k = kernels.gaussian_kernel1d(sigma)
        assert k.sum() == pytest.approx(1.0)
        assert len(k) % 2 == 1
        np.testing.assert_allclose(k, k[::-1])


def test_blur_preserves_constants_and_zero_sigma_copies():
    img = np.full((10, 12, 3), 0.37)
    np.testing.assert_allclose(kernels.gaussian_blur(img, 1.5), img, atol=1e-12)
    x = np.random.default_rng(0).random((5, 5, 3))
    y = kernels.gaussian_blur(x, 0.0)
    assert np.array_equal(x, y) and y is not x


def test_sobel_zero_on_constant_and_correct_on_ramp():
    assert np.all(kernels.sobel_magnitude(np.full((6, 6), 0.8)) == 0)
    ramp = np.tile(np.arange(8.0), (8, 1))
    # interior horizontal gradient of a unit ramp is 8 with the 1-2-1 weights
    assert np.allclose(kernels.sobel_magnitude(ramp)[2:-2, 2:-2], 8.0)


# resize


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 9), st.integers(1, 9), st.integers(1, 12), st.integers(1, 12), st.integers(0, 999))
def test_resize_matches_naive(h, w, oh, ow, seed):
    img = np.random.default_rng(seed).random((h, w))
    np.testing.assert_allclose(kernels.resize_bilinear(img, oh, ow), naive_bilinear(img, oh, ow), atol=1e-12)


def test_resize_identity_is_exact_copy():
    img = np.random.default_rng(1).random((7, 5, 3))
    out = kernels.resize_bilinear(img, 7, 5)
    assert np.array_equal(out, img) and out is not img


# DCT codec


def test_dct_matrix_is_orthonormal_and_matches_hand_dct():
    B = kernels.dct_matrix(8)
    np.testing.assert_allclose(B @ B.T, np.eye(8), atol=1e-12)
    block = np.random.default_rng(2).random((8, 8)) * 255
    np.testing.assert_allclose(B @ block @ B.T, dct8(block), atol=1e-9)


def test_dct_roundtrip_matches_oracle():
    rng = np.random.default_rng(3)
    plane = rng.random((16, 8)) * 255
    q = rng.integers(1, 60, size=(8, 8)).astype(np.float64)
    np.testing.assert_allclose(kernels.dct_roundtrip(plane, q), block_codec(plane, q), atol=1e-8)


def test_dct_roundtrip_unit_table_is_near_lossless_and_pads():
    img = np.random.default_rng(4).random((11, 13, 3)) * 255
    out = kernels.dct_roundtrip(img, np.full((8, 8), 1e-9))
    assert out.shape == img.shape
    np.testing.assert_allclose(out, img, atol=1e-6)


# numba and numpy variants agree


needs_numba = pytest.mark.skipif(not HAS_NUMBA, reason="numba not installed")


@needs_numba
def test_variants_agree():
    rng = np.random.default_rng(5)
    f, c = rng.normal(size=(40, 6)), rng.normal(size=(30, 6))
    assert np.array_equal(kernels._nearest_code_nb(f, c), kernels._nearest_code_np(f, c))
    img, k = rng.random((13, 11, 3)), rng.normal(size=(5, 3))
    np.testing.assert_allclose(kernels._correlate2d_nb(img, k), kernels._correlate2d_np(img, k), rtol=1e-13, atol=1e-13)
    ay, ax = kernels._resize_axis(13, 6), kernels._resize_axis(11, 20)
    np.testing.assert_allclose(kernels._resize_nb(img, *ay, *ax), kernels._resize_np(img, *ay, *ax), atol=1e-14)
    plane = rng.random((16, 24)) * 255
    q = np.full((8, 8), 7.3)
    np.testing.assert_allclose(kernels._dct_roundtrip_nb(plane, q, kernels._BASIS),
                               kernels._dct_roundtrip_np(plane, q, kernels._BASIS), atol=1e-9)


def test_env_flag_selects_numpy_backend():
    code = "from onestep_face import kernels, _accel; print(_accel.backend(), kernels._nearest_code.__name__)"
    out = subprocess.run([sys.executable, "-c", code], env={"ONESTEP_FACE_DISABLE_NUMBA": "1", "PATH": ""},
                         capture_output=True, text=True, check=True).stdout.split()
    assert out == ["numpy", "_nearest_code_np"]


def test_sobel_matches_kernel_correlation():
    img = np.random.default_rng(6).random((9, 10, 3))
    gx, gy = naive_correlate(img[:, :, 1], kernels.SOBEL_X), naive_correlate(img[:, :, 1], kernels.SOBEL_Y)
    np.testing.assert_allclose(kernels.sobel_magnitude(img)[:, :, 1], np.hypot(gx, gy), atol=1e-12)
