"""Anomaly maps, calibration, and scalar image scores.

The structural map is the channel mean of the squared difference between
standardized teacher features and student features; the logical map compares
the encoder output against the converted student features.  Both maps are
bilinearly upsampled to the model input resolution, then linearly rescaled
using the 90th / 99.5th percentiles of their pooled values on validation
images.  The rescaling is deliberately unclamped: anomalous pixels may exceed
1 so their ordering above the calibration range survives.  The image score is
the maximum of the averaged (total) map.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .datasets import ImageSample, to_model_input
from .errors import ConfigError
from .networks import SpaceModel, TeacherStats, normalize_teacher
from .validation import check_same_shape

NORM_EPS = 1e-9

MAP_KINDS = ("structural", "logical", "total")

SPMAP_MAGIC = b"SPMAP\x00"
SPMAP_VERSION = 1
_SPMAP_HEADER = struct.Struct("<6sHHII")


@dataclass(frozen=True)
class AnomalyMap:
    """Per-pixel anomaly intensities at input resolution."""

    values: np.ndarray
    kind: str

    def __post_init__(self):
        if self.kind not in MAP_KINDS:
            raise ValueError(f"kind must be one of {MAP_KINDS}, got {self.kind!r}")


@dataclass(frozen=True)
class CalibrationStats:
    """Validation percentiles used to rescale the raw maps (hi >= lo per kind)."""

    structural_lo: float
    structural_hi: float
    logical_lo: float
    logical_hi: float

    def bounds(self, kind: str) -> tuple[float, float]:
        if kind == "structural":
            return self.structural_lo, self.structural_hi
        if kind == "logical":
            return self.logical_lo, self.logical_hi
        raise ValueError(f"no calibration bounds for kind {kind!r}")


def _as_input_tensor(x: ImageSample | np.ndarray | torch.Tensor, size: int) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    arr = to_model_input(x, size)
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(2, 0, 1)))


def _upsample(map_hw: torch.Tensor, size: int) -> np.ndarray:
    out = F.interpolate(map_hw[None, None], size=(size, size), mode="bilinear", align_corners=False)
    return out[0, 0].numpy()


def channel_mean_map(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Channel mean of the elementwise squared difference of two feature grids."""
    check_same_shape(a, b, "feature grids")
    return ((a - b) ** 2).mean(dim=-3)


def map_structural(model: SpaceModel, x, stats: TeacherStats) -> AnomalyMap:
    """Channel-mean squared teacher-student distance, upsampled to input size."""
    size = model.config.input_size
    t = _as_input_tensor(x, size)
    with torch.no_grad():
        teacher = normalize_teacher(model.teacher_forward(t), stats)
        student = model.student_forward(t)
        m = channel_mean_map(teacher, student)
    return AnomalyMap(_upsample(m, size), "structural")


def map_logical(model: SpaceModel, x, use_ema_student: bool = True) -> AnomalyMap:
    """Channel-mean squared encoder-vs-converted-student distance."""
    size = model.config.input_size
    t = _as_input_tensor(x, size)
    with torch.no_grad():
        encoded = model.encoder_forward(t)
        student = model.student_forward(t, ema=use_ema_student)
        converted = model.fm_forward(student)
        m = channel_mean_map(encoded, converted)
    return AnomalyMap(_upsample(m, size), "logical")


def raw_maps(model: SpaceModel, x, stats: TeacherStats, use_ema_student: bool = True) -> tuple[AnomalyMap, AnomalyMap]:
    return map_structural(model, x, stats), map_logical(model, x, use_ema_student)


def pooled_quantile(pool: np.ndarray, q: float) -> float:
    """Linear-interpolation quantile of a flat value pool."""
    flat = np.asarray(pool, dtype=np.float64).reshape(-1)
    if flat.size == 0:
        raise ValueError("quantile of an empty pool")
    values = np.sort(flat)
    pos = q * (values.size - 1)
    lo = int(pos)
    frac = pos - lo
    if lo + 1 >= values.size:
        return float(values[-1])
    return float(values[lo] + frac * (values[lo + 1] - values[lo]))


def calibrate(
    model: SpaceModel,
    validation: list[ImageSample],
    stats: TeacherStats,
    use_ema_student: bool = True,
) -> CalibrationStats:
    """Pool raw map pixels over the validation images; take the 90th / 99.5th percentiles."""
    if not validation:
        raise ConfigError("calibration requires a non-empty validation set")
    pools = {"structural": [], "logical": []}
    for sample in validation:
        ms, ml = raw_maps(model, sample, stats, use_ema_student)
        pools["structural"].append(ms.values.ravel())
        pools["logical"].append(ml.values.ravel())
    s_pool = np.concatenate(pools["structural"])
    l_pool = np.concatenate(pools["logical"])
    return CalibrationStats(
        structural_lo=pooled_quantile(s_pool, 0.90),
        structural_hi=pooled_quantile(s_pool, 0.995),
        logical_lo=pooled_quantile(l_pool, 0.90),
        logical_hi=pooled_quantile(l_pool, 0.995),
    )


def normalize_map(m: AnomalyMap, cs: CalibrationStats) -> AnomalyMap:
    """(values - lo) / (hi - lo + eps); not clamped."""
    lo, hi = cs.bounds(m.kind)
    return AnomalyMap((m.values - lo) / (hi - lo + NORM_EPS), m.kind)


def map_total(ms: AnomalyMap, ml: AnomalyMap) -> AnomalyMap:
    """Elementwise average of the two normalized maps."""
    check_same_shape(ms.values, ml.values, "anomaly maps")
    return AnomalyMap(0.5 * ms.values + 0.5 * ml.values, "total")


def image_score(mt: AnomalyMap) -> float:
    """Maximum pixel of the total map."""
    return float(mt.values.max())


def score_image(ckpt, x) -> tuple[float, AnomalyMap, AnomalyMap, AnomalyMap]:
    """Full scoring pipeline for one image given a trained checkpoint.

    Returns (score, structural_map, logical_map, total_map); the per-kind maps
    are already normalized.
    """
    if ckpt.teacher_stats is None:
        raise ConfigError("checkpoint carries no teacher statistics; train or calibrate first")
    if ckpt.calibration is None:
        raise ConfigError("checkpoint carries no calibration statistics; run calibration first")
    use_ema = ckpt.train_config.student_ema_for_fm
    ms, ml = raw_maps(ckpt.model, x, ckpt.teacher_stats, use_ema)
    ms_n = normalize_map(ms, ckpt.calibration)
    ml_n = normalize_map(ml, ckpt.calibration)
    mt = map_total(ms_n, ml_n)
    return image_score(mt), ms_n, ml_n, mt


# ---------------------------------------------------------------------------
# exports


def write_spmap(m: AnomalyMap, path) -> None:
    """Raw map export: header (magic, u16 version, u16 kind, u32 H, u32 W)
    followed by row-major little-endian float32 values."""
    values = np.ascontiguousarray(m.values, dtype="<f4")
    h, w = values.shape
    with open(path, "wb") as fh:
        fh.write(_SPMAP_HEADER.pack(SPMAP_MAGIC, SPMAP_VERSION, MAP_KINDS.index(m.kind), h, w))
        fh.write(values.tobytes())


def read_spmap(path) -> AnomalyMap:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _SPMAP_HEADER.size:
        raise ConfigError(f"{path} is not a map file (truncated)")
    magic, version, kind, h, w = _SPMAP_HEADER.unpack_from(raw)
    if magic != SPMAP_MAGIC:
        raise ConfigError(f"{path} is not a map file (bad magic)")
    if version != SPMAP_VERSION:
        raise ConfigError(f"unsupported map format version {version}")
    values = np.frombuffer(raw, dtype="<f4", count=h * w, offset=_SPMAP_HEADER.size).reshape(h, w)
    return AnomalyMap(values.copy(), MAP_KINDS[kind])


def _heatmap_ramp() -> np.ndarray:
    """Fixed 256-entry color ramp: piecewise-linear through five anchors."""
    anchors = np.asarray(
        [(0, 0, 4), (87, 16, 110), (188, 55, 84), (249, 142, 9), (252, 255, 164)],
        dtype=np.float64,
    )
    pos = np.linspace(0.0, 1.0, len(anchors))
    x = np.linspace(0.0, 1.0, 256)
    ramp = np.stack([np.interp(x, pos, anchors[:, c]) for c in range(3)], axis=1)
    return (ramp + 0.5).astype(np.uint8)


HEATMAP_RAMP = _heatmap_ramp()


def write_heatmap_png(m: AnomalyMap, path) -> None:
    """8-bit PNG heatmap through the fixed ramp; values clamped to [0, 1]."""
    idx = np.clip(m.values * 255.0 + 0.5, 0, 255).astype(np.uint8)
    Image.fromarray(HEATMAP_RAMP[idx]).save(path, format="PNG")
