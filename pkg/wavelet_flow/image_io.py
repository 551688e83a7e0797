"""
image_io.py

Reading and writing binary netpbm images: PGM (P5, one channel) and PPM (P6, three channels) with maxval 255.

Images are returned as uint8 arrays of shape (height, width, channels) in row-major pixel order. Validation that an
image is square with a power-of-two side happens downstream in the wavelet transform.

Classes:
    ImageFormatError

Functions:
    read_image(path) -> np.ndarray
    write_image(image, path)
    decode_image(data) -> np.ndarray
    encode_image(image) -> bytes
"""

import logging
import os
from typing import Tuple

import numpy as np

logger = logging.getLogger(__name__)

MAGIC_CHANNELS = {b'P5': 1, b'P6': 3}
UNSUPPORTED_MAGIC = (b'P1', b'P2', b'P3', b'P4', b'P7', b'Pf', b'PF')
WHITESPACE = b' \t\r\n\x0b\x0c'


class ImageFormatError(ValueError):
    """A malformed or unsupported image file; `offset` is the byte position where decoding failed."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


def _skip_whitespace(data: bytes, pos: int) -> int:
    while pos < len(data):
        if data[pos:pos + 1] == b'#':
            end = data.find(b'\n', pos)
            pos = len(data) if end < 0 else end + 1
        elif data[pos:pos + 1] in (b' ', b'\t', b'\r', b'\n', b'\x0b', b'\x0c'):
            pos += 1
        else:
            break
    return pos


def _read_int(data: bytes, pos: int, name: str) -> Tuple[int, int]:
    pos = _skip_whitespace(data, pos)
    start = pos
    while pos < len(data) and data[pos:pos + 1].isdigit():
        pos += 1
    if pos == start:
        raise ImageFormatError(f"Expected {name} in header", start)
    return int(data[start:pos]), pos


def decode_image(data: bytes) -> np.ndarray:
    """
    Decodes a P5/P6 byte string.

    :param data: The whole file content.
    :return: np.ndarray of uint8, shape (height, width, channels).
    """
    magic = data[:2]
    if magic in UNSUPPORTED_MAGIC:
        raise ImageFormatError(f"Unsupported variant {magic.decode()}: only binary P5 and P6 are read", 0)
    if magic not in MAGIC_CHANNELS:
        raise ImageFormatError(f"Not a PGM/PPM file (magic {magic!r})", 0)
    channels = MAGIC_CHANNELS[magic]

    pos = 2
    if pos >= len(data) or data[pos:pos + 1] not in (b' ', b'\t', b'\r', b'\n', b'#'):
        raise ImageFormatError("Missing whitespace after magic number", pos)
    width, pos = _read_int(data, pos, 'width')
    height, pos = _read_int(data, pos, 'height')
    maxval_offset = _skip_whitespace(data, pos)
    maxval, pos = _read_int(data, pos, 'maxval')
    if width < 1 or height < 1:
        raise ImageFormatError(f"Invalid size {width}x{height}", maxval_offset)
    if maxval != 255:
        raise ImageFormatError(f"Only maxval 255 is supported, got {maxval}", maxval_offset)
    if pos >= len(data) or data[pos] not in WHITESPACE:
        raise ImageFormatError("Missing whitespace after maxval", pos)
    pos += 1

    expected = width * height * channels
    payload = data[pos:pos + expected]
    if len(payload) < expected:
        raise ImageFormatError(f"Truncated payload: expected {expected} bytes, found {len(payload)}",
                               pos + len(payload))
    if len(data) > pos + expected:
        logger.debug(f"Ignoring {len(data) - pos - expected} trailing bytes")
    return np.frombuffer(payload, dtype=np.uint8).reshape(height, width, channels).copy()


def encode_image(image: np.ndarray) -> bytes:
    """
    Encodes an image as P5 (one channel) or P6 (three channels). Real values are rounded and clamped to [0, 255].

    :param image: Array of shape (H, W), (H, W, 1) or (H, W, 3).
    :return: bytes of the file.
    """
    image = np.asarray(image)
    if image.ndim == 2:
        image = image[:, :, None]
    if image.ndim != 3 or image.shape[-1] not in (1, 3):
        raise ValueError(f"Expected an (H, W, 1) or (H, W, 3) image, got shape {image.shape}")
    if image.dtype != np.uint8:
        image = np.clip(np.rint(np.asarray(image, dtype=np.float64)), 0, 255).astype(np.uint8)
    height, width, channels = image.shape
    magic = b'P5' if channels == 1 else b'P6'
    header = magic + f"\n{width} {height}\n255\n".encode('ascii')
    return header + np.ascontiguousarray(image).tobytes()


def read_image(path: str) -> np.ndarray:
    """
    Reads a binary PGM or PPM file.

    :param path: File path.
    :return: np.ndarray of uint8, shape (height, width, channels).
    """
    with open(os.path.normpath(path), 'rb') as f:
        data = f.read()
    try:
        return decode_image(data)
    except ImageFormatError as e:
        raise ImageFormatError(f"{path}: {str(e).rsplit(' (at byte', 1)[0]}", e.offset) from None


def write_image(image: np.ndarray, path: str):
    """
    Writes an image as PGM or PPM depending on its channel count.

    :param image: Array of shape (H, W, 1) or (H, W, 3), integer or real.
    :param path: Destination path; parent directories are created.
    """
    path = os.path.normpath(path)
    parent = os.path.dirname(path)
    if parent:
        os.makedirs(parent, exist_ok=True)
    with open(path, 'wb') as f:
        f.write(encode_image(image))
