"""
wavelet.py

Orthonormal 2-D Haar analysis and synthesis, and the full wavelet pyramid of an image.

One analysis step splits a 2^k x 2^k x C image into a half-resolution low-pass image and a 3C-channel plane of detail
coefficients. The filters are the orthonormal 2x2 Haar bank with entries +-1/2:

    LL = [[+, +], [+, +]] / 2      horizontal = [[+, +], [-, -]] / 2
    vertical = [[+, -], [+, -]] / 2      diagonal = [[+, -], [-, +]] / 2

so the transform is a rotation of coefficient space and its Jacobian determinant is exactly 1. The low-pass image is
therefore twice the 2x2 box average (the unnormalized Haar variant would be the box average itself); this growth by
2 per level is why conditioning images are rescaled before they enter a coupling network.

Detail channels are grouped per source channel as (horizontal, vertical, diagonal): channel 3c + o holds orientation o
of source channel c.

All functions accept a numpy array or a Tensor, unbatched (H, W, C) or batched (N, H, W, C), and return the same kind.
Tensors stay differentiable.

Classes:
    WaveletPyramid

Functions:
    haar_analyze(image) -> Tuple[low, detail]
    haar_synthesize(low, detail) -> image
    build_pyramid(image) -> WaveletPyramid
    collapse_pyramid(pyr: WaveletPyramid) -> image
    lowpass_to_level(image, k: int) -> image
"""

from dataclasses import dataclass, field
from typing import List, Optional, Tuple, Union

import numpy as np

from wavelet_flow import autodiff as ad
from wavelet_flow.autodiff import Tensor

Array = Union[np.ndarray, Tensor]

# (LL, horizontal, vertical, diagonal), each indexed [row, column]
HAAR_FILTERS = 0.5 * np.array([
    [[1.0, 1.0], [1.0, 1.0]],
    [[1.0, 1.0], [-1.0, -1.0]],
    [[1.0, -1.0], [1.0, -1.0]],
    [[1.0, -1.0], [-1.0, 1.0]],
])

ORIENTATIONS = ('horizontal', 'vertical', 'diagonal')


@dataclass
class WaveletPyramid:
    """
    The factorized representation of an image: base image I0 plus detail planes D0 ... D(n-1).

    :param base: The 1x1xC low-pass image I0.
    :param details: Detail planes ordered coarse to fine; details[i] has spatial extent 2^i and 3C channels.
    :param lows: Optionally the low-pass images I0 ... In produced while analysing (lows[i] has extent 2^i).
    """
    base: Array
    details: List[Array] = field(default_factory=list)
    lows: Optional[List[Array]] = None

    @property
    def n(self) -> int:
        return len(self.details)

    @property
    def channels(self) -> int:
        return int(self.base.shape[-1])

    def num_coefficients(self) -> int:
        """
        Counts scalar coefficients of one image (batch axis excluded).

        :return: int, C * 4^n for a well-formed pyramid.
        """
        count = int(np.prod(self.base.shape[-3:]))
        for d in self.details:
            count += int(np.prod(d.shape[-3:]))
        return count

    def images(self) -> List[Array]:
        """
        Returns the low-pass images I0 ... In, synthesizing them when they were not kept during analysis.

        :return: list of images, entry i of spatial extent 2^i.
        """
        if self.lows is not None:
            return list(self.lows)
        out = [self.base]
        for d in self.details:
            out.append(haar_synthesize(out[-1], d))
        return out


def _level_of(extent: int) -> int:
    if extent < 1 or extent & (extent - 1):
        raise ValueError(f"Spatial extent must be a power of two, got {extent}")
    return extent.bit_length() - 1


def image_level(image: Array) -> int:
    """
    Returns k for a 2^k x 2^k image, checking that it is square and power-of-two sized.

    :param image: Array of shape (H, W, C) or (N, H, W, C).
    :return: int, the level k.
    """
    if image.ndim not in (3, 4):
        raise ValueError(f"Expected (H, W, C) or (N, H, W, C), got shape {tuple(image.shape)}")
    h, w = image.shape[-3], image.shape[-2]
    if h != w:
        raise ValueError(f"Image must be square, got {h}x{w}")
    return _level_of(h)


def analysis_kernel(channels: int) -> np.ndarray:
    """
    Builds the channel-wise analysis filter bank as a conv2d kernel.

    :param channels: Number of image channels C.
    :return: np.ndarray of shape (2, 2, C, 4C); output channel c is the low-pass of channel c, output channel
        C + 3c + o is orientation o of channel c.
    """
    kernel = np.zeros((2, 2, channels, 4 * channels))
    for c in range(channels):
        kernel[:, :, c, c] = HAAR_FILTERS[0]
        for o in range(3):
            kernel[:, :, c, channels + 3 * c + o] = HAAR_FILTERS[o + 1]
    return kernel


def synthesis_kernel(channels: int) -> np.ndarray:
    """
    Builds the transpose of the analysis bank as a 1x1 kernel producing the four pixels of each 2x2 block.

    :param channels: Number of image channels C.
    :return: np.ndarray of shape (1, 1, 4C, 4C); output channel 4c + 2a + b is pixel (a, b) of channel c.
    """
    kernel = np.zeros((1, 1, 4 * channels, 4 * channels))
    for c in range(channels):
        for a in range(2):
            for b in range(2):
                out = 4 * c + 2 * a + b
                kernel[0, 0, c, out] = HAAR_FILTERS[0, a, b]
                for o in range(3):
                    kernel[0, 0, channels + 3 * c + o, out] = HAAR_FILTERS[o + 1, a, b]
    return kernel


def _wrap(x: Array) -> Tuple[Tensor, bool]:
    if isinstance(x, Tensor):
        return x, True
    return Tensor(x), False


def _unwrap(t: Tensor, as_tensor: bool) -> Array:
    return t if as_tensor else t.numpy()


def haar_analyze(image: Array) -> Tuple[Array, Array]:
    """
    One orthonormal Haar analysis step.

    :param image: Image of spatial extent 2^k, k >= 1.
    :return: (low, detail) with half the spatial extent; low has C channels, detail 3C.
    """
    k = image_level(image)
    if k == 0:
        raise ValueError("Cannot analyze a 1x1 image")
    x, as_tensor = _wrap(image)
    channels = x.shape[-1]
    out = ad.conv2d(x, Tensor(analysis_kernel(channels)), stride=2, pad='valid')
    low = ad.take(out, 0, channels)
    detail = ad.take(out, channels, 4 * channels)
    return _unwrap(low, as_tensor), _unwrap(detail, as_tensor)


def haar_synthesize(low: Array, detail: Array) -> Array:
    """
    Inverse of haar_analyze: scatters each coefficient quadruple back into its 2x2 block.

    :param low: Low-pass image of extent 2^k.
    :param detail: Detail plane of extent 2^k with three times as many channels.
    :return: Image of extent 2^(k+1).
    """
    if low.ndim != detail.ndim or low.shape[:-1] != detail.shape[:-1]:
        raise ValueError(f"Low {tuple(low.shape)} and detail {tuple(detail.shape)} disagree spatially")
    channels = low.shape[-1]
    if detail.shape[-1] != 3 * channels:
        raise ValueError(f"Detail needs {3 * channels} channels for a {channels}-channel image, "
                         f"got {detail.shape[-1]}")
    image_level(low)
    lo, as_tensor = _wrap(low)
    de, _ = _wrap(detail)
    batched = lo.ndim == 4
    if not batched:
        lo, de = ad.reshape(lo, (1,) + lo.shape), ad.reshape(de, (1,) + de.shape)
    n, h, w = lo.shape[0], lo.shape[1], lo.shape[2]
    pixels = ad.conv2d(ad.concat([lo, de], axis=-1), Tensor(synthesis_kernel(channels)))
    blocks = ad.reshape(pixels, (n, h, w, channels, 2, 2))
    image = ad.reshape(ad.transpose(blocks, (0, 1, 4, 2, 5, 3)), (n, 2 * h, 2 * w, channels))
    if not batched:
        image = ad.reshape(image, (2 * h, 2 * w, channels))
    return _unwrap(image, as_tensor)


def build_pyramid(image: Array) -> WaveletPyramid:
    """
    Applies haar_analyze recursively down to the 1x1 base image.

    :param image: Image of extent 2^n.
    :return: WaveletPyramid with n detail planes; lows[i] is the low-pass image at level i (lows[n] is the input).
    """
    n = image_level(image)
    lows = [image]
    details = []
    current = image
    for _ in range(n):
        current, detail = haar_analyze(current)
        lows.insert(0, current)
        details.insert(0, detail)
    return WaveletPyramid(base=current, details=details, lows=lows)


def collapse_pyramid(pyr: WaveletPyramid) -> Array:
    """
    Reassembles the full-resolution image from a pyramid.

    :param pyr: A pyramid whose details[i] has extent 2^i.
    :return: Image of extent 2^n.
    """
    if image_level(pyr.base) != 0:
        raise ValueError(f"Pyramid base must be 1x1, got {tuple(pyr.base.shape)}")
    current = pyr.base
    for i, detail in enumerate(pyr.details):
        if detail.shape[-3] != 2 ** i:
            raise ValueError(f"Detail level {i} has extent {detail.shape[-3]}, expected {2 ** i}")
        current = haar_synthesize(current, detail)
    return current


def lowpass_to_level(image: Array, k: int) -> Array:
    """
    Keeps only the low-pass branch of repeated analysis, stopping at extent 2^k.

    :param image: Image of extent 2^n.
    :param k: Target level, 0 <= k <= n.
    :return: Image of extent 2^k.
    """
    n = image_level(image)
    if not 0 <= k <= n:
        raise ValueError(f"Level {k} outside [0, {n}]")
    current = image
    for _ in range(n - k):
        current, _ = haar_analyze(current)
    return current
