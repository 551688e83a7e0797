import numpy as np
import pytest

from wavelet_flow.data import (dequantized_images, level_dataset, load_image_dir, quantized_level_dataset,
                               save_image_dir, synthetic_corpus)
from wavelet_flow.image_io import write_image
from wavelet_flow.wavelet import build_pyramid, lowpass_to_level


def test_synthetic_corpus():
    images = synthetic_corpus(12, 4, channels=3, rng=np.random.default_rng(0))
    assert images.shape == (12, 16, 16, 3) and images.dtype == np.uint8
    again = synthetic_corpus(12, 4, channels=3, rng=np.random.default_rng(0))
    np.testing.assert_array_equal(images, again)
    # smooth textures, not noise: neighbouring pixels are strongly correlated
    blobs = synthetic_corpus(12, 4, rng=np.random.default_rng(1), stripe_fraction=0.0)
    a, b = blobs[:, :, :-1].astype(float).ravel(), blobs[:, :, 1:].astype(float).ravel()
    assert np.corrcoef(a, b)[0, 1] > 0.5
    with pytest.raises(ValueError):
        synthetic_corpus(1, 2, channels=0)


def test_directory_round_trip(tmp_path, rng):
    images = rng.integers(0, 256, size=(3, 4, 4, 1)).astype(np.uint8)
    paths = save_image_dir(images, str(tmp_path), prefix='train')
    assert paths[0].endswith('train_00000.pgm')
    np.testing.assert_array_equal(load_image_dir(str(tmp_path), n=2, channels=1), images)
    with pytest.raises(ValueError):
        load_image_dir(str(tmp_path), n=3)
    with pytest.raises(ValueError):
        load_image_dir(str(tmp_path), channels=3)


def test_directory_errors(tmp_path, rng):
    with pytest.raises(FileNotFoundError):
        load_image_dir(str(tmp_path / "absent"))
    with pytest.raises(FileNotFoundError):
        load_image_dir(str(tmp_path))
    write_image(rng.integers(0, 256, size=(4, 4, 1)).astype(np.uint8), str(tmp_path / "a.pgm"))
    write_image(rng.integers(0, 256, size=(8, 8, 1)).astype(np.uint8), str(tmp_path / "b.pgm"))
    with pytest.raises(ValueError, match="shape"):
        load_image_dir(str(tmp_path))


def test_dequantized_images(rng):
    images = rng.integers(0, 256, size=(2, 8, 8, 1)).astype(np.uint8)
    full = dequantized_images(images, np.random.default_rng(1))
    assert np.all(full >= images) and np.all(full < images + 1.0)
    filtered = dequantized_images(images, np.random.default_rng(1), level=1)
    np.testing.assert_array_equal(filtered, lowpass_to_level(full, 1))
    # plain noise is added to the 8-bit box average, then brought back to the level-1 scale (x8)
    plain = dequantized_images(images, np.random.default_rng(1), level=1, filtered=False)
    low_u8 = np.rint(lowpass_to_level(images.astype(np.float64), 1) / 8.0)
    assert np.all(plain / 8.0 >= low_u8) and np.all(plain / 8.0 < low_u8 + 1.0)
    assert len(np.unique(np.floor(plain / 8.0))) > 1


def test_level_dataset(rng):
    images = rng.uniform(0, 256, size=(5, 8, 8, 1))
    pyr = build_pyramid(images)
    base = level_dataset(images, 0)
    assert base.cond is None
    np.testing.assert_array_equal(base.x, pyr.base)
    detail = level_dataset(images, 3)
    np.testing.assert_array_equal(detail.x, pyr.details[2])
    np.testing.assert_array_equal(detail.cond, pyr.lows[2])
    assert len(detail) == 5

    shallow = level_dataset(images, 2, n=2)
    np.testing.assert_array_equal(shallow.x, build_pyramid(lowpass_to_level(images, 2)).details[1])
    with pytest.raises(ValueError):
        level_dataset(images, 4)
    with pytest.raises(ValueError):
        level_dataset(images, 0, n=4)


def test_quantized_level_dataset_draws_fresh_noise(rng):
    images = rng.integers(0, 256, size=(6, 8, 8, 1)).astype(np.uint8)
    dataset = quantized_level_dataset(images, 2, n=3)
    assert len(dataset) == 6 and dataset.plane_shape == (2, 2, 3)
    first, second = dataset.materialize(rng), dataset.materialize(rng)
    assert first.x.shape == (6, 2, 2, 3) and first.cond.shape == (6, 2, 2, 1)
    assert not np.allclose(first.x, second.x)
    part = dataset.subset(slice(2, 4))
    np.testing.assert_array_equal(part.images_u8, images[2:4])
    with pytest.raises(ValueError):
        quantized_level_dataset(images, 4, n=3)
