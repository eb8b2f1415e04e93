"""Training-view augmentations.

Three views are produced from each training image: a weakly augmented view
(small integer pixel shift), a strongly augmented view (random flips followed
by randomly sampled policy operations at a shared magnitude), and a
color-jittered view feeding the reconstruction branch.  All operations work on
float H x W x 3 images in [0, 1] pixel space, before standardization, and are
pure functions of (image, spec, generator state).  Geometric operations fill
vacated borders by edge replication.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .validation import check_unit_image

# Luminance weights used by the saturation/contrast adjustments.
_LUMA = np.asarray([0.299, 0.587, 0.114], dtype=np.float32)


@dataclass(frozen=True)
class AugmentSpec:
    """Augmentation parameters.

    ``rand_m`` is the shared policy magnitude on the standard 0..30 scale;
    ``rand_n`` the number of sampled operations per image.
    """

    weak_max_shift: int = 3
    rand_n: int = 4
    rand_m: int = 10
    flip_h: bool = True
    flip_v: bool = True
    jitter_strength: float = 0.2

    def __post_init__(self):
        if self.weak_max_shift < 0:
            raise ValueError("weak_max_shift must be >= 0")
        if not 0 <= self.rand_m <= 30:
            raise ValueError("rand_m must lie in [0, 30]")
        if self.rand_n < 0:
            raise ValueError("rand_n must be >= 0")
        if not 0.0 <= self.jitter_strength < 1.0:
            raise ValueError("jitter_strength must lie in [0, 1)")


# ---------------------------------------------------------------------------
# primitives


def _clip01(image: np.ndarray) -> np.ndarray:
    return np.clip(image, 0.0, 1.0)


def flip_horizontal(image: np.ndarray) -> np.ndarray:
    return image[:, ::-1].copy()


def flip_vertical(image: np.ndarray) -> np.ndarray:
    return image[::-1].copy()


def adjust_brightness(image: np.ndarray, factor: float) -> np.ndarray:
    return _clip01(image * factor)


def adjust_contrast(image: np.ndarray, factor: float) -> np.ndarray:
    mean = float((image @ _LUMA).mean())
    return _clip01(mean + (image - mean) * factor)


def adjust_saturation(image: np.ndarray, factor: float) -> np.ndarray:
    gray = (image @ _LUMA)[..., None]
    return _clip01(gray + (image - gray) * factor)


def adjust_sharpness(image: np.ndarray, factor: float) -> np.ndarray:
    kernel = np.asarray([[1, 1, 1], [1, 5, 1], [1, 1, 1]], dtype=np.float32) / 13.0
    smooth = np.stack(
        [ndimage.convolve(image[..., c], kernel, mode="nearest") for c in range(3)], axis=2
    )
    return _clip01(smooth + (image - smooth) * factor)


def autocontrast(image: np.ndarray) -> np.ndarray:
    out = image.copy()
    for c in range(3):
        lo, hi = float(out[..., c].min()), float(out[..., c].max())
        if hi > lo:
            out[..., c] = (out[..., c] - lo) / (hi - lo)
    return out


def equalize(image: np.ndarray) -> np.ndarray:
    # Histogram equalization on 256 quantization bins per channel.
    out = np.empty_like(image)
    for c in range(3):
        q = np.clip((image[..., c] * 255.0 + 0.5).astype(np.int32), 0, 255)
        hist = np.bincount(q.ravel(), minlength=256)
        cdf = np.cumsum(hist).astype(np.float64)
        nonzero = cdf[hist > 0]
        if nonzero.size == 0 or nonzero[0] == cdf[-1]:
            out[..., c] = image[..., c]
            continue
        lut = (cdf - nonzero[0]) / (cdf[-1] - nonzero[0])
        out[..., c] = lut[q].astype(np.float32)
    return out


def posterize(image: np.ndarray, bits: int) -> np.ndarray:
    keep = np.uint8(0xFF << (8 - bits))
    q = (image * 255.0 + 0.5).astype(np.uint8) & keep
    return q.astype(np.float32) / 255.0


def solarize(image: np.ndarray, threshold: float) -> np.ndarray:
    return np.where(image >= threshold, 1.0 - image, image).astype(image.dtype)


def _affine(image: np.ndarray, matrix: np.ndarray, offset: np.ndarray) -> np.ndarray:
    """Apply an output->input coordinate mapping about the image center."""
    h, w = image.shape[:2]
    center = np.asarray([(h - 1) / 2.0, (w - 1) / 2.0])
    shift = center - matrix @ center + offset
    out = np.stack(
        [
            ndimage.affine_transform(image[..., c], matrix, offset=shift, order=1, mode="nearest")
            for c in range(3)
        ],
        axis=2,
    )
    return _clip01(out)


def rotate(image: np.ndarray, degrees: float) -> np.ndarray:
    # Inverse mapping of a content rotation by +degrees.
    rad = math.radians(degrees)
    cos, sin = math.cos(rad), math.sin(rad)
    matrix = np.asarray([[cos, -sin], [sin, cos]])
    return _affine(image, matrix, np.zeros(2))


def shear_x(image: np.ndarray, factor: float) -> np.ndarray:
    matrix = np.asarray([[1.0, 0.0], [-factor, 1.0]])
    return _affine(image, matrix, np.zeros(2))


def shear_y(image: np.ndarray, factor: float) -> np.ndarray:
    matrix = np.asarray([[1.0, -factor], [0.0, 1.0]])
    return _affine(image, matrix, np.zeros(2))


def translate_x(image: np.ndarray, pixels: float) -> np.ndarray:
    return _affine(image, np.eye(2), np.asarray([0.0, -pixels]))


def translate_y(image: np.ndarray, pixels: float) -> np.ndarray:
    return _affine(image, np.eye(2), np.asarray([-pixels, 0.0]))


# ---------------------------------------------------------------------------
# policy operations at magnitude m in [0, 30]


def _signed(value: float, rng: np.random.Generator) -> float:
    return value if rng.random() < 0.5 else -value


def _enhance_factor(m: int, rng: np.random.Generator) -> float:
    return 1.0 + _signed(0.9 * m / 30.0, rng)


def _op_autocontrast(img, m, rng):
    return autocontrast(img)


def _op_equalize(img, m, rng):
    return equalize(img)


def _op_rotate(img, m, rng):
    return rotate(img, _signed(float(m), rng))


def _op_posterize(img, m, rng):
    return posterize(img, 8 - round(4 * m / 30.0))


def _op_solarize(img, m, rng):
    return solarize(img, 1.0 - m / 30.0)


def _op_color(img, m, rng):
    return adjust_saturation(img, _enhance_factor(m, rng))


def _op_contrast(img, m, rng):
    return adjust_contrast(img, _enhance_factor(m, rng))


def _op_brightness(img, m, rng):
    return adjust_brightness(img, _enhance_factor(m, rng))


def _op_sharpness(img, m, rng):
    return adjust_sharpness(img, _enhance_factor(m, rng))


def _op_shear_x(img, m, rng):
    return shear_x(img, _signed(0.3 * m / 30.0, rng))


def _op_shear_y(img, m, rng):
    return shear_y(img, _signed(0.3 * m / 30.0, rng))


def _op_translate_x(img, m, rng):
    return translate_x(img, _signed(0.45 * img.shape[1] * m / 30.0, rng))


def _op_translate_y(img, m, rng):
    return translate_y(img, _signed(0.45 * img.shape[0] * m / 30.0, rng))


STRONG_OPS = (
    _op_autocontrast,
    _op_equalize,
    _op_rotate,
    _op_posterize,
    _op_solarize,
    _op_color,
    _op_contrast,
    _op_brightness,
    _op_sharpness,
    _op_shear_x,
    _op_shear_y,
    _op_translate_x,
    _op_translate_y,
)


# ---------------------------------------------------------------------------
# the three views


def weak_augment(image: np.ndarray, spec: AugmentSpec, rng: np.random.Generator) -> np.ndarray:
    """Translate by integer (dx, dy) drawn uniformly from the shift square."""
    image = check_unit_image(image)
    s = spec.weak_max_shift
    if s == 0:
        return image
    dx, dy = (int(v) for v in rng.integers(-s, s + 1, size=2))
    h, w = image.shape[:2]
    ys = np.clip(np.arange(h) - dy, 0, h - 1)
    xs = np.clip(np.arange(w) - dx, 0, w - 1)
    return image[ys][:, xs]


def strong_augment(image: np.ndarray, spec: AugmentSpec, rng: np.random.Generator) -> np.ndarray:
    """Random flips, then ``rand_n`` policy ops sampled with replacement."""
    image = check_unit_image(image)
    out = image
    if spec.flip_h and rng.random() < 0.5:
        out = flip_horizontal(out)
    if spec.flip_v and rng.random() < 0.5:
        out = flip_vertical(out)
    for _ in range(spec.rand_n):
        op = STRONG_OPS[int(rng.integers(0, len(STRONG_OPS)))]
        out = op(out, spec.rand_m, rng)
    return out


def color_jitter(image: np.ndarray, spec: AugmentSpec, rng: np.random.Generator) -> np.ndarray:
    """Brightness/contrast/saturation factors from [1-s, 1+s], in random order."""
    image = check_unit_image(image)
    s = spec.jitter_strength
    if s == 0.0:
        return image
    factors = rng.uniform(1.0 - s, 1.0 + s, size=3)
    order = rng.permutation(3)
    ops = (adjust_brightness, adjust_contrast, adjust_saturation)
    out = image
    for idx in order:
        out = ops[idx](out, float(factors[idx]))
    return out
