"""
data.py

Datasets: directory loading, a synthetic corpus of textured images and the per-level training pairs of a model.

Functions:
    load_image_dir(directory, n, channels) -> np.ndarray
    save_image_dir(images, directory, prefix) -> List[str]
    synthetic_corpus(num_images, n, channels, rng) -> np.ndarray
    dequantized_images(images_u8, rng, level, filtered) -> np.ndarray
    quantized_level_dataset(images_u8, level, n) -> QuantizedLevelData
    level_dataset(images, level, n) -> LevelData
"""

import functools
import logging
import os
from typing import List, Optional

import numpy as np
from scipy import ndimage

from wavelet_flow.image_io import read_image, write_image
from wavelet_flow.train import LevelData, QuantizedLevelData, dequantize
from wavelet_flow.utils import find_relative_image_path
from wavelet_flow.wavelet import build_pyramid, image_level, lowpass_to_level

logger = logging.getLogger(__name__)

CORPUS_MEAN = 128.0
CORPUS_STD = 40.0


def load_image_dir(directory: str, n: Optional[int] = None, channels: Optional[int] = None) -> np.ndarray:
    """
    Loads every .pgm/.ppm file below a directory into one uint8 batch.

    :param directory: Dataset directory (searched recursively, files sorted by relative path).
    :param n: Expected level (side 2^n); None accepts any common power-of-two size.
    :param channels: Expected channel count.
    :return: np.ndarray (N, 2^n, 2^n, C) of uint8.
    """
    if directory is None or not os.path.isdir(directory):
        raise FileNotFoundError(f"Dataset directory not found: {directory}")
    paths = find_relative_image_path(directory)
    if not paths:
        raise FileNotFoundError(f"No .pgm or .ppm images in {directory}")
    images = []
    for rel in paths:
        image = read_image(os.path.join(directory, rel))
        level = image_level(image)
        if n is not None and level != n:
            raise ValueError(f"{rel} is {image.shape[0]}x{image.shape[1]}, expected {2 ** n}x{2 ** n}")
        if channels is not None and image.shape[-1] != channels:
            raise ValueError(f"{rel} has {image.shape[-1]} channels, expected {channels}")
        if images and image.shape != images[0].shape:
            raise ValueError(f"{rel} has shape {image.shape}, earlier images {images[0].shape}")
        images.append(image)
    logger.info(f"Loaded {len(images)} images of shape {images[0].shape} from {directory}")
    return np.stack(images)


def save_image_dir(images: np.ndarray, directory: str, prefix: str = 'image') -> List[str]:
    """
    Writes a batch as numbered PGM/PPM files.

    :param images: Batch (N, H, W, C).
    :param directory: Output directory.
    :param prefix: File name prefix.
    :return: list of written paths.
    """
    ext = 'pgm' if images.shape[-1] == 1 else 'ppm'
    width = max(5, len(str(len(images))))
    paths = []
    for idx, image in enumerate(images):
        path = os.path.join(directory, f"{prefix}_{idx:0{width}d}.{ext}")
        write_image(image, path)
        paths.append(path)
    return paths


def _blobs(size: int, rng: np.random.Generator) -> np.ndarray:
    sigma = rng.uniform(0.06, 0.15) * size
    field = ndimage.gaussian_filter(rng.standard_normal((size, size)), sigma, mode='wrap')
    return field / (field.std() + 1e-12)


def _stripes(size: int, rng: np.random.Generator) -> np.ndarray:
    angle = rng.uniform(0, np.pi)
    period = rng.uniform(0.2, 0.45) * size
    yy, xx = np.mgrid[0:size, 0:size]
    phase = 2 * np.pi * (xx * np.cos(angle) + yy * np.sin(angle)) / period
    # slowly varying phase and amplitude give each image its own texture
    wobble = ndimage.gaussian_filter(rng.standard_normal((size, size)), 0.2 * size, mode='wrap')
    wobble /= wobble.std() + 1e-12
    field = np.sin(phase + rng.uniform(0, 2 * np.pi) + 0.8 * wobble)
    field = field + 0.25 * ndimage.gaussian_filter(rng.standard_normal((size, size)), 1.0, mode='wrap')
    return field / (field.std() + 1e-12)


def synthetic_corpus(num_images: int, n: int, channels: int = 1, rng: Optional[np.random.Generator] = None,
                     stripe_fraction: float = 0.5) -> np.ndarray:
    """
    Draws 8-bit images from a mixture of two textured Gaussian-process-like families: smooth isotropic blobs and
    noisy oriented stripes.

    :param num_images: Number of images.
    :param n: Level; images are 2^n x 2^n.
    :param channels: Channel count; channels share the texture with independent gains.
    :param rng: Randomness source.
    :param stripe_fraction: Mixture weight of the stripe family.
    :return: np.ndarray (num_images, 2^n, 2^n, channels) of uint8.
    """
    if num_images < 0 or n < 0 or channels < 1:
        raise ValueError("num_images and n must be non-negative, channels positive")
    rng = np.random.default_rng() if rng is None else rng
    size = 2 ** n
    out = np.empty((num_images, size, size, channels), dtype=np.uint8)
    for idx in range(num_images):
        texture = _stripes(size, rng) if rng.uniform() < stripe_fraction else _blobs(size, rng)
        brightness = CORPUS_MEAN + rng.normal(0, 15)
        for c in range(channels):
            gain = CORPUS_STD * rng.uniform(0.7, 1.3)
            values = brightness + gain * texture + rng.normal(0, 2.0, size=(size, size))
            out[idx, :, :, c] = np.clip(np.rint(values), 0, 255).astype(np.uint8)
    return out


def dequantized_images(images_u8: np.ndarray, rng: np.random.Generator, level: Optional[int] = None,
                       filtered: bool = True) -> np.ndarray:
    """
    Continuous images for training or evaluation, optionally reduced to a lower level.

    Level-k images stay on the model's scale, 2^(n - k) times the 8-bit box average. At a lower level, `filtered`
    dequantizes at full resolution and then low-passes (the images a truncated model sees). Otherwise the box average
    is first quantized to 8 bits, as a lower-resolution dataset would be stored, and U[0, 1) noise is added at that
    scale.

    :param images_u8: Batch (N, 2^n, 2^n, C).
    :param rng: Noise source.
    :param level: Target level k <= n; None keeps full resolution.
    :param filtered: Filter the noise together with the image.
    :return: np.ndarray (N, 2^k, 2^k, C).
    """
    n = image_level(images_u8)
    level = n if level is None else level
    if level == n:
        return dequantize(images_u8, rng)
    if filtered:
        return lowpass_to_level(dequantize(images_u8, rng), level)
    scale = 2.0 ** (n - level)
    low_u8 = np.clip(np.rint(lowpass_to_level(np.asarray(images_u8, dtype=np.float64), level) / scale), 0, 255)
    return scale * dequantize(low_u8.astype(np.uint8), rng)


def quantized_level_dataset(images_u8: np.ndarray, level: int, n: Optional[int] = None) -> QuantizedLevelData:
    """
    Pairs of one level kept as 8-bit images, dequantized afresh whenever a batch is drawn.

    :param images_u8: Integer images (N, 2^m, 2^m, C) with m >= n.
    :param level: Level index 0 ... n.
    :param n: Depth of the model.
    :return: QuantizedLevelData.
    """
    images_u8 = np.asarray(images_u8)
    level_dataset(np.zeros(images_u8[:1].shape), level, n)  # validates level and n
    return QuantizedLevelData(images_u8, functools.partial(level_dataset, level=level, n=n))


def level_dataset(images: np.ndarray, level: int, n: Optional[int] = None) -> LevelData:
    """
    Pairs of one level of a model: the base image for level 0, (detail plane D(level-1), image I(level-1)) otherwise.

    :param images: Continuous images (N, 2^m, 2^m, C) with m >= n.
    :param level: Level index 0 ... n.
    :param n: Depth of the model; images of a higher level are low-passed to it first.
    :return: LevelData.
    """
    images = np.asarray(images, dtype=np.float64)
    m = image_level(images)
    n = m if n is None else n
    if not 0 <= n <= m:
        raise ValueError(f"Cannot build a depth-{n} dataset from {2 ** m}x{2 ** m} images")
    if not 0 <= level <= n:
        raise ValueError(f"Level index {level} outside [0, {n}]")
    if n < m:
        images = lowpass_to_level(images, n)
    pyr = build_pyramid(images)
    if level == 0:
        return LevelData(x=pyr.base)
    return LevelData(x=pyr.details[level - 1], cond=pyr.lows[level - 1])
