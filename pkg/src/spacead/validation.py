"""Input validation helpers used by the estimator and the lower-level modules."""

from __future__ import annotations

import numpy as np


def check_rgb_image(pixels: np.ndarray, name: str = "image") -> np.ndarray:
    """Validate an H x W x 3 uint8 image array."""
    pixels = np.asarray(pixels)
    if pixels.ndim != 3 or pixels.shape[2] != 3:
        raise ValueError(f"{name} must have shape (H, W, 3), got {pixels.shape}")
    if pixels.dtype != np.uint8:
        raise ValueError(f"{name} must be uint8, got {pixels.dtype}")
    return pixels


def check_unit_image(image: np.ndarray, name: str = "image") -> np.ndarray:
    """Validate a float H x W x 3 image in [0, 1] pixel space."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"{name} must have shape (H, W, 3), got {image.shape}")
    if not np.issubdtype(image.dtype, np.floating):
        raise ValueError(f"{name} must be floating point, got {image.dtype}")
    return image


def check_image_list(X) -> list[np.ndarray]:
    """Coerce estimator input into a list of H x W x 3 uint8 arrays.

    Accepts a 4-D (N, H, W, 3) uint8 array or an iterable of 3-D images.
    """
    if isinstance(X, np.ndarray):
        if X.ndim == 4:
            return [check_rgb_image(x) for x in X]
        if X.ndim == 3:
            return [check_rgb_image(X)]
        raise ValueError(f"expected 3-D or 4-D image array, got shape {X.shape}")
    images = list(X)
    if not images:
        raise ValueError("empty image collection")
    return [check_rgb_image(np.asarray(x)) for x in images]


def check_same_shape(a, b, what: str = "tensors") -> None:
    if tuple(a.shape) != tuple(b.shape):
        raise ValueError(f"{what} must share a shape, got {tuple(a.shape)} vs {tuple(b.shape)}")
