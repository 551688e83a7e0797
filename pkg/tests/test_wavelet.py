import numpy as np
import pytest

from wavelet_flow import autodiff as ad
from wavelet_flow.wavelet import (HAAR_FILTERS, WaveletPyramid, analysis_kernel, build_pyramid, collapse_pyramid,
                                  haar_analyze, haar_synthesize, image_level, lowpass_to_level)


def test_filters_are_orthonormal():
    bank = HAAR_FILTERS.reshape(4, 4)
    np.testing.assert_allclose(bank @ bank.T, np.eye(4), atol=1e-15)


def test_round_trip_and_coefficient_count(rng):
    for _ in range(1000):
        n = int(rng.integers(0, 6))
        channels = int(rng.choice([1, 3]))
        image = rng.uniform(0, 256, size=(2 ** n, 2 ** n, channels))
        pyr = build_pyramid(image)
        assert pyr.n == n
        assert pyr.num_coefficients() == image.size
        assert np.max(np.abs(collapse_pyramid(pyr) - image)) < 1e-10


def test_batched_pyramid_matches_single_images(rng):
    batch = rng.uniform(0, 256, size=(3, 8, 8, 2))
    pyr = build_pyramid(batch)
    for idx in range(3):
        single = build_pyramid(batch[idx])
        np.testing.assert_allclose(pyr.base[idx], single.base, atol=1e-12)
        for d_batch, d_single in zip(pyr.details, single.details):
            np.testing.assert_allclose(d_batch[idx], d_single, atol=1e-12)


def test_transform_has_unit_determinant(rng):
    image = rng.uniform(0, 256, size=(4, 4, 1))

    def coefficients(x):
        pyr = build_pyramid(x)
        parts = [ad.reshape(pyr.base, (1,))] + [ad.reshape(d, (d.size,)) for d in pyr.details]
        return ad.concat(parts, axis=0)

    jac = ad.jacobian(coefficients, image)
    assert jac.shape == (16, 16)
    sign, logdet = np.linalg.slogdet(jac)
    assert sign != 0
    assert abs(logdet) < 1e-8


def test_constant_image_has_no_detail():
    image = np.full((4, 4, 1), 10.0)
    low, detail = haar_analyze(image)
    np.testing.assert_allclose(low, np.full((2, 2, 1), 20.0))
    np.testing.assert_allclose(detail, 0.0, atol=1e-14)
    pyr = build_pyramid(image)
    assert pyr.base[0, 0, 0] == pytest.approx(40.0)


def test_orientations():
    edge = np.array([[1.0, 1.0], [0.0, 0.0]]).reshape(2, 2, 1)
    _, detail = haar_analyze(edge)
    np.testing.assert_allclose(detail.ravel(), [1.0, 0.0, 0.0], atol=1e-15)
    edge = np.array([[1.0, 0.0], [1.0, 0.0]]).reshape(2, 2, 1)
    _, detail = haar_analyze(edge)
    np.testing.assert_allclose(detail.ravel(), [0.0, 1.0, 0.0], atol=1e-15)


def test_channel_layout_of_analysis_kernel():
    kernel = analysis_kernel(2)
    assert kernel.shape == (2, 2, 2, 8)
    np.testing.assert_array_equal(kernel[:, :, 1, 1], HAAR_FILTERS[0])
    np.testing.assert_array_equal(kernel[:, :, 1, 2 + 3 + 2], HAAR_FILTERS[3])
    assert not kernel[:, :, 0, 1].any()


def test_lowpass_matches_pyramid_lows(rng):
    image = rng.uniform(0, 256, size=(2, 16, 16, 3))
    pyr = build_pyramid(image)
    for k in range(5):
        np.testing.assert_array_equal(lowpass_to_level(image, k), pyr.lows[k])
    np.testing.assert_array_equal(lowpass_to_level(image, 4), image)


def test_images_are_synthesized_without_lows(rng):
    image = rng.uniform(0, 256, size=(8, 8, 1))
    pyr = build_pyramid(image)
    bare = WaveletPyramid(base=pyr.base, details=pyr.details)
    for kept, synthesized in zip(pyr.images(), bare.images()):
        np.testing.assert_allclose(kept, synthesized, atol=1e-10)


def test_tensor_inputs_stay_tensors(rng):
    image = ad.Tensor(rng.normal(size=(4, 4, 1)))
    low, detail = haar_analyze(image)
    assert isinstance(low, ad.Tensor) and isinstance(detail, ad.Tensor)
    assert isinstance(haar_synthesize(low, detail), ad.Tensor)


def test_shape_errors(rng):
    with pytest.raises(ValueError, match="square"):
        image_level(np.zeros((4, 2, 1)))
    with pytest.raises(ValueError, match="power of two"):
        image_level(np.zeros((6, 6, 1)))
    with pytest.raises(ValueError, match="1x1"):
        haar_analyze(np.zeros((1, 1, 1)))
    with pytest.raises(ValueError):
        haar_synthesize(np.zeros((2, 2, 1)), np.zeros((2, 2, 2)))
    with pytest.raises(ValueError):
        haar_synthesize(np.zeros((2, 2, 1)), np.zeros((4, 4, 3)))
    with pytest.raises(ValueError):
        lowpass_to_level(np.zeros((4, 4, 1)), 3)
