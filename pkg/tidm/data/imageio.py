"""8-bit binary PPM (P6) files for (3, H, W) images in [-1, 1]."""

import logging
import os

import cv2
import numpy as np

from ..errors import InputError, ShapeError

logger = logging.getLogger(__name__)


def to_uint8(image: np.ndarray) -> np.ndarray:
    """(3, H, W) in [-1, 1] to (H, W, 3) uint8, rounding half to even."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[0] != 3:
        raise ShapeError(f"expected an image of shape (3, H, W), got {image.shape}")
    scaled = np.rint((np.clip(image.astype(np.float64), -1.0, 1.0) + 1.0) * 127.5)
    return np.clip(scaled, 0, 255).astype(np.uint8).transpose(1, 2, 0)


def from_uint8(pixels: np.ndarray) -> np.ndarray:
    """(H, W, 3) uint8 to (3, H, W) float32 in [-1, 1]."""
    return (pixels.astype(np.float32) / np.float32(127.5) - np.float32(1.0)).transpose(2, 0, 1).copy()


def write_ppm(path: str, image: np.ndarray) -> None:
    pixels = to_uint8(image)
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    bgr = cv2.cvtColor(np.ascontiguousarray(pixels), cv2.COLOR_RGB2BGR)
    if not cv2.imwrite(path, bgr, [cv2.IMWRITE_PXM_BINARY, 1]):
        raise InputError(f"could not write image to {path}")


def read_ppm(path: str) -> np.ndarray:
    if not os.path.exists(path):
        raise InputError(f"image not found: {path}")
    bgr = cv2.imread(path, cv2.IMREAD_COLOR)
    if bgr is None:
        raise InputError(f"could not decode image {path}")
    return from_uint8(cv2.cvtColor(bgr, cv2.COLOR_BGR2RGB))
