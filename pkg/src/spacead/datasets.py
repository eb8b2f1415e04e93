"""Dataset loading and synthesis.

Two sources are supported: directories following the MVTec convention
(``<category>/train/good``, ``<category>/test/<defect>``, optional
``<category>/ground_truth/<defect>`` and ``<category>/validation/good``),
and a deterministic synthetic toy generator producing bright discs on a
textured background with structural (scratch) and logical (missing or
extra disc) defects.  Only 8-bit RGB PNG images are decoded.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .errors import ConfigError, ItemError
from .validation import check_rgb_image

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)

LABEL_NORMAL = "normal"
LABEL_ANOMALOUS = "anomalous"


@dataclass(frozen=True)
class ImageSample:
    """One image with its label and optional per-region ground truth.

    ``gt_regions`` holds one binary mask per defect region; ``saturation_areas``
    holds the matching region saturation sizes in pixels (``None`` entries fall
    back to the region's own pixel count when metrics are computed).
    """

    pixels: np.ndarray
    identifier: str
    label: str = LABEL_NORMAL
    defect_type: str = "good"
    gt_regions: tuple[np.ndarray, ...] | None = None
    saturation_areas: tuple[float | None, ...] | None = None

    def __post_init__(self):
        check_rgb_image(self.pixels, "pixels")
        if self.label not in (LABEL_NORMAL, LABEL_ANOMALOUS):
            raise ValueError(f"label must be normal|anomalous, got {self.label!r}")
        if self.gt_regions is not None:
            for m in self.gt_regions:
                if m.shape != self.pixels.shape[:2]:
                    raise ValueError("gt region shape does not match pixels")
            if self.label == LABEL_NORMAL and any(m.any() for m in self.gt_regions):
                raise ValueError("normal sample carries a non-empty gt region")
            if self.saturation_areas is not None and len(self.saturation_areas) != len(self.gt_regions):
                raise ValueError("one saturation area per gt region is required")

    @property
    def is_anomalous(self) -> bool:
        return self.label == LABEL_ANOMALOUS


@dataclass
class DatasetSplit:
    """Train (normal only), validation (normal only) and labeled test samples."""

    train: list[ImageSample] = field(default_factory=list)
    validation: list[ImageSample] = field(default_factory=list)
    test: list[ImageSample] = field(default_factory=list)


# ---------------------------------------------------------------------------
# model input preparation


def unit_image(pixels: np.ndarray, size: int) -> np.ndarray:
    """Scale an 8-bit image to [0, 1] floats and bilinearly resize to size x size."""
    if size <= 0:
        raise ValueError("size must be positive")
    img = np.asarray(pixels, dtype=np.float32) / 255.0
    h, w = img.shape[:2]
    if (h, w) == (size, size):
        return img
    t = torch.from_numpy(np.ascontiguousarray(img.transpose(2, 0, 1)))[None]
    t = F.interpolate(t, size=(size, size), mode="bilinear", align_corners=False)
    return t[0].numpy().transpose(1, 2, 0)


def standardize(image: np.ndarray) -> np.ndarray:
    """Per-channel standardization of a [0, 1] image with the ImageNet statistics."""
    mean = np.asarray(IMAGENET_MEAN, dtype=np.float32)
    std = np.asarray(IMAGENET_STD, dtype=np.float32)
    return (image - mean) / std


def to_model_input(sample: ImageSample | np.ndarray, size: int = 256) -> np.ndarray:
    """Resize, scale to [0, 1] and standardize an image for the networks."""
    pixels = sample.pixels if isinstance(sample, ImageSample) else sample
    return standardize(unit_image(pixels, size))


# ---------------------------------------------------------------------------
# MVTec-layout loading


def _load_png(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as img:
            arr = np.asarray(img.convert("RGB"), dtype=np.uint8)
    except Exception as exc:  # noqa: BLE001 - decoding failures become item errors
        raise ItemError(path, str(exc)) from exc
    return arr


def _load_mask(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as img:
            arr = np.asarray(img.convert("L"))
    except Exception as exc:  # noqa: BLE001
        raise ItemError(path, str(exc)) from exc
    return arr > 0


def _region_files(gt_dir: Path, stem: str) -> list[Path]:
    # MVTec AD keeps one `<stem>_mask.png`; MVTec LOCO keeps a `<stem>/`
    # directory with one file per defect region.
    single = gt_dir / f"{stem}_mask.png"
    if single.is_file():
        return [single]
    plain = gt_dir / f"{stem}.png"
    if plain.is_file():
        return [plain]
    sub = gt_dir / stem
    if sub.is_dir():
        return sorted(sub.glob("*.png"))
    return []


def _load_saturation_config(category_dir: Path) -> dict[str, tuple[float, bool]]:
    cfg_path = category_dir / "defects_config.json"
    if not cfg_path.is_file():
        return {}
    try:
        entries = json.loads(cfg_path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"unreadable defects_config.json at {cfg_path}: {exc}") from exc
    out = {}
    for entry in entries:
        name = entry.get("defect_name")
        if name is None:
            continue
        out[name] = (float(entry["saturation_threshold"]), bool(entry.get("relative_saturation", False)))
    return out


def _normal_sample(path: Path, identifier: str) -> ImageSample:
    return ImageSample(pixels=_load_png(path), identifier=identifier, label=LABEL_NORMAL, defect_type="good")


def load_mvtec_layout(root: str | Path, category: str, validation_fraction: float = 0.1) -> DatasetSplit:
    """Load ``<root>/<category>`` following the MVTec directory convention.

    When a ``validation/good`` directory exists it is used verbatim; otherwise
    the validation set is carved from the tail of ``train/good`` ordered by
    filename, with size ``int(n * validation_fraction)``.
    """
    if not 0.0 < validation_fraction < 1.0:
        raise ConfigError(f"validation_fraction must lie in (0, 1), got {validation_fraction}")
    base = Path(root) / category
    train_dir = base / "train" / "good"
    if not train_dir.is_dir():
        raise ConfigError(f"missing train/good directory under {base}")

    train_paths = sorted(train_dir.glob("*.png"))
    if not train_paths:
        raise ConfigError(f"no normal training images in {train_dir}")
    train = [_normal_sample(p, f"{category}/train/good/{p.stem}") for p in train_paths]

    val_dir = base / "validation" / "good"
    if val_dir.is_dir():
        validation = [_normal_sample(p, f"{category}/validation/good/{p.stem}") for p in sorted(val_dir.glob("*.png"))]
    else:
        n_val = int(len(train) * validation_fraction + 1e-9)
        validation = train[len(train) - n_val :] if n_val else []
        train = train[: len(train) - n_val]
    if not train:
        raise ConfigError(f"validation split left no training images under {base}")

    saturation_cfg = _load_saturation_config(base)

    test: list[ImageSample] = []
    test_dir = base / "test"
    if test_dir.is_dir():
        for defect_dir in sorted(p for p in test_dir.iterdir() if p.is_dir()):
            defect = defect_dir.name
            for img_path in sorted(defect_dir.glob("*.png")):
                identifier = f"{category}/test/{defect}/{img_path.stem}"
                if defect == "good":
                    test.append(_normal_sample(img_path, identifier))
                    continue
                regions = [_load_mask(p) for p in _region_files(base / "ground_truth" / defect, img_path.stem)]
                saturations = None
                if regions and defect in saturation_cfg:
                    thr, relative = saturation_cfg[defect]
                    saturations = tuple(thr * float(m.sum()) if relative else thr for m in regions)
                test.append(
                    ImageSample(
                        pixels=_load_png(img_path),
                        identifier=identifier,
                        label=LABEL_ANOMALOUS,
                        defect_type=defect,
                        gt_regions=tuple(regions) if regions else None,
                        saturation_areas=saturations,
                    )
                )

    return DatasetSplit(train=train, validation=validation, test=test)


# ---------------------------------------------------------------------------
# synthetic toy data

_GRID_CELLS = ((0.28, 0.28), (0.28, 0.72), (0.72, 0.28), (0.72, 0.72))

_SPLIT_CODES = {"train": 0, "validation": 1, "test_good": 2, "structural": 3, "logical": 4}


def _render_scene(rng: np.random.Generator, size: int, n_discs: int):
    """Draw all random scene parameters, then rasterize the normal canvas.

    Returns the float canvas plus the parameters needed to rasterize defects
    so that a defective render differs from the normal one only inside the
    defect.
    """
    coarse = max(4, size // 8)
    low = rng.normal(0.0, 1.0, size=(coarse, coarse, 3)).astype(np.float32)
    t = torch.from_numpy(low.transpose(2, 0, 1))[None]
    texture = F.interpolate(t, size=(size, size), mode="bilinear", align_corners=False)[0].numpy().transpose(1, 2, 0)
    canvas = 0.32 + 0.05 * texture + rng.normal(0.0, 0.012, size=(size, size, 3)).astype(np.float32)

    jitter = max(1, round(size * 0.05))
    radius = 0.11 * size
    # n_discs + 1 centers: the spare one hosts the duplicated disc.
    centers = []
    for cy, cx in _GRID_CELLS[: min(n_discs + 1, len(_GRID_CELLS))]:
        dy, dx = rng.integers(-jitter, jitter + 1, size=2)
        centers.append((cy * size + dy, cx * size + dx))
    while len(centers) < n_discs + 1:
        centers.append((rng.uniform(0.2, 0.8) * size, rng.uniform(0.2, 0.8) * size))
    values = 0.84 + rng.uniform(-0.05, 0.05, size=(n_discs + 1, 3)).astype(np.float32)
    values[:, 2] *= 0.9  # slightly warm discs so channels carry signal

    params = {
        "centers": centers,
        "values": values,
        "radius": radius,
        "scratch_angle": rng.uniform(0.0, np.pi),
        "scratch_disc": int(rng.integers(0, n_discs)),
        "missing_disc": int(rng.integers(0, n_discs)),
        "extra_disc": n_discs,
    }
    return canvas, params


def _paint_disc(canvas: np.ndarray, center, radius: float, value: np.ndarray) -> None:
    size = canvas.shape[0]
    yy, xx = np.mgrid[0:size, 0:size]
    dist = np.sqrt((yy - center[0]) ** 2 + (xx - center[1]) ** 2)
    alpha = np.clip(radius - dist, 0.0, 1.0)[..., None]
    canvas *= 1.0 - alpha
    canvas += alpha * value[None, None, :]


def _paint_scratch(canvas: np.ndarray, center, radius: float, angle: float) -> None:
    size = canvas.shape[0]
    half = 1.15 * radius
    dy, dx = np.sin(angle), np.cos(angle)
    yy, xx = np.mgrid[0:size, 0:size]
    ry, rx = yy - center[0], xx - center[1]
    along = np.clip(ry * dy + rx * dx, -half, half)
    dist = np.sqrt((ry - along * dy) ** 2 + (rx - along * dx) ** 2)
    alpha = np.clip(1.3 - dist, 0.0, 1.0)[..., None]
    canvas *= 1.0 - alpha
    canvas += alpha * 0.06


def _to_uint8(canvas: np.ndarray) -> np.ndarray:
    return (np.clip(canvas, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def _render_synthetic(seed: int, split: str, index: int, size: int, n_discs: int, defect: str):
    """Render one synthetic image; returns (pixels, gt_regions or None)."""
    rng = np.random.default_rng([seed, _SPLIT_CODES[split], index])
    canvas, params = _render_scene(rng, size, n_discs)
    centers, values, radius = params["centers"], params["values"], params["radius"]

    normal = canvas.copy()
    for k in range(n_discs):
        _paint_disc(normal, centers[k], radius, values[k])

    if defect == "good":
        return _to_uint8(normal), None

    if defect == "structural":
        k = params["scratch_disc"]
        scratched = normal.copy()
        _paint_scratch(scratched, centers[k], radius, params["scratch_angle"])
        pixels = _to_uint8(scratched)
        mask = (pixels != _to_uint8(normal)).any(axis=2)
        return pixels, (mask,)

    full = np.ones((size, size), dtype=bool)
    if defect == "missing":
        reduced = canvas.copy()
        for k in range(n_discs):
            if k != params["missing_disc"]:
                _paint_disc(reduced, centers[k], radius, values[k])
        return _to_uint8(reduced), (full,)
    if defect == "extra":
        k = params["extra_disc"]
        extended = normal.copy()
        _paint_disc(extended, centers[k], radius, values[k])
        return _to_uint8(extended), (full,)
    raise ValueError(f"unknown synthetic defect {defect!r}")


def synth_toy_dataset(
    seed: int,
    n_train: int,
    n_val: int,
    n_test_per_class: int,
    image_size: int = 64,
    n_discs: int = 3,
) -> DatasetSplit:
    """Generate a deterministic disc-scene dataset with structural and logical defects.

    Normal images show ``n_discs`` bright discs at jittered grid positions.
    Structural defects add a dark scratch across one disc with a pixel-exact
    mask; logical defects remove or duplicate one disc with a full-image mask.
    The test set holds ``n_test_per_class`` images per class (good, structural,
    logical).
    """
    if min(n_train, n_val, n_test_per_class) < 1:
        raise ConfigError("all synthetic sample counts must be >= 1")
    if image_size < 32:
        raise ConfigError("image_size must be >= 32")

    split = DatasetSplit()
    for i in range(n_train):
        pixels, _ = _render_synthetic(seed, "train", i, image_size, n_discs, "good")
        split.train.append(ImageSample(pixels, f"synth/train/good/{i:03d}"))
    for i in range(n_val):
        pixels, _ = _render_synthetic(seed, "validation", i, image_size, n_discs, "good")
        split.validation.append(ImageSample(pixels, f"synth/validation/good/{i:03d}"))
    for i in range(n_test_per_class):
        pixels, _ = _render_synthetic(seed, "test_good", i, image_size, n_discs, "good")
        split.test.append(ImageSample(pixels, f"synth/test/good/{i:03d}"))
    for i in range(n_test_per_class):
        pixels, regions = _render_synthetic(seed, "structural", i, image_size, n_discs, "structural")
        split.test.append(
            ImageSample(
                pixels,
                f"synth/test/structural/{i:03d}",
                label=LABEL_ANOMALOUS,
                defect_type="structural",
                gt_regions=regions,
            )
        )
    for i in range(n_test_per_class):
        variant = "missing" if i % 2 == 0 else "extra"
        pixels, regions = _render_synthetic(seed, "logical", i, image_size, n_discs, variant)
        split.test.append(
            ImageSample(
                pixels,
                f"synth/test/logical/{i:03d}",
                label=LABEL_ANOMALOUS,
                defect_type="logical",
                gt_regions=regions,
            )
        )
    return split


def export_mvtec_layout(split: DatasetSplit, category_dir: str | Path) -> None:
    """Write a DatasetSplit to disk in the MVTec directory convention."""
    base = Path(category_dir)

    def _save(pixels: np.ndarray, path: Path) -> None:
        path.parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(pixels).save(path, format="PNG")

    for i, s in enumerate(split.train):
        _save(s.pixels, base / "train" / "good" / f"{i:03d}.png")
    for i, s in enumerate(split.validation):
        _save(s.pixels, base / "validation" / "good" / f"{i:03d}.png")

    counters: dict[str, int] = {}
    for s in split.test:
        defect = s.defect_type
        i = counters.get(defect, 0)
        counters[defect] = i + 1
        _save(s.pixels, base / "test" / defect / f"{i:03d}.png")
        if s.gt_regions:
            merged = np.zeros(s.pixels.shape[:2], dtype=bool)
            for m in s.gt_regions:
                merged |= m
            _save(
                np.repeat((merged * np.uint8(255))[..., None], 3, axis=2),
                base / "ground_truth" / defect / f"{i:03d}_mask.png",
            )
