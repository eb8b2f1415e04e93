"""Evaluation metrics: image AUROC, pixel AUROC, and region-overlap area.

AUROC uses the midrank convention (probability that an anomalous score
exceeds a normal one, ties counted half).  The region metric sweeps a
threshold over the pooled map values; at each threshold every ground-truth
region contributes its detected fraction capped at 1 once a saturation area
is covered, and the false-positive rate is computed over pixels outside all
regions.  The curve is integrated up to a false-positive-rate limit and
normalized by that limit.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from scipy.stats import rankdata

from .datasets import ImageSample
from .scoring import score_image


def auroc(scores_normal, scores_anomalous) -> float:
    """Midrank AUROC: P(anomalous > normal) + 0.5 * P(tie) over all pairs."""
    normal = np.asarray(scores_normal, dtype=np.float64).ravel()
    anomalous = np.asarray(scores_anomalous, dtype=np.float64).ravel()
    if normal.size == 0 or anomalous.size == 0:
        raise ValueError("AUROC requires scores from both classes")
    ranks = rankdata(np.concatenate([anomalous, normal]), method="average")
    rank_sum = ranks[: anomalous.size].sum()
    u = rank_sum - anomalous.size * (anomalous.size + 1) / 2.0
    return float(u / (anomalous.size * normal.size))


def pixel_auroc(maps, gt_masks) -> float:
    """AUROC over all pixels pooled across the test set.

    ``gt_masks`` holds one boolean mask per map (the union of that image's
    defect regions; all-false for normal images).
    """
    pos, neg = [], []
    for m, mask in zip(maps, gt_masks, strict=True):
        m = np.asarray(m, dtype=np.float64)
        mask = np.asarray(mask, dtype=bool)
        pos.append(m[mask].ravel())
        neg.append(m[~mask].ravel())
    return auroc(np.concatenate(neg), np.concatenate(pos))


def spro_auc(maps, regions_per_image, fpr_limit: float = 0.05) -> float:
    """Normalized area under the saturated region-overlap curve up to ``fpr_limit``.

    ``regions_per_image`` is aligned with ``maps``; each entry lists
    ``(mask, saturation_area)`` pairs (saturation ``None`` falls back to the
    region's pixel count; values are clamped to that count).  Pixels outside
    all regions of an image count as negatives.
    """
    if fpr_limit <= 0:
        raise ValueError("fpr_limit must be positive")
    region_scores: list[np.ndarray] = []
    saturations: list[float] = []
    neg_chunks: list[np.ndarray] = []
    for m, regions in zip(maps, regions_per_image, strict=True):
        m = np.asarray(m, dtype=np.float64)
        union = np.zeros(m.shape, dtype=bool)
        for mask, sat in regions or ():
            mask = np.asarray(mask, dtype=bool)
            area = int(mask.sum())
            if area == 0:
                continue
            region_scores.append(np.sort(m[mask].ravel()))
            saturations.append(float(area if sat is None else min(max(sat, 1.0), area)))
            union |= mask
        neg_chunks.append(m[~union].ravel())
    if not region_scores:
        raise ValueError("at least one non-empty ground-truth region is required")
    neg = np.sort(np.concatenate(neg_chunks))
    if neg.size == 0:
        raise ValueError("no negative pixels outside the regions")

    thresholds = np.unique(np.concatenate([neg, *region_scores]))[::-1]
    fpr = (neg.size - np.searchsorted(neg, thresholds, side="left")) / neg.size
    spro = np.zeros_like(thresholds)
    for scores, sat in zip(region_scores, saturations):
        detected = scores.size - np.searchsorted(scores, thresholds, side="left")
        spro += np.minimum(1.0, detected / sat)
    spro /= len(region_scores)

    fpr = np.concatenate([[0.0], fpr])
    spro = np.concatenate([[0.0], spro])
    return _partial_curve_area(fpr, spro, fpr_limit) / fpr_limit


def _partial_curve_area(x: np.ndarray, y: np.ndarray, limit: float) -> float:
    """Trapezoidal area under the polyline up to x = limit, with an
    interpolated endpoint exactly at the limit."""
    area = 0.0
    for i in range(1, x.size):
        x0, x1, y0, y1 = x[i - 1], x[i], y[i - 1], y[i]
        if x1 <= limit:
            area += 0.5 * (y0 + y1) * (x1 - x0)
            continue
        if x0 < limit:
            y_at = y0 + (y1 - y0) * (limit - x0) / (x1 - x0)
            area += 0.5 * (y0 + y_at) * (limit - x0)
        break
    return float(area)


# ---------------------------------------------------------------------------
# test-set evaluation


@dataclass
class EvalResult:
    """Per-image scores plus the aggregate metrics of one evaluation run."""

    rows: list[tuple[str, str, float]] = field(default_factory=list)
    image_auroc: float | None = None
    pixel_auroc: float | None = None
    spro: float | None = None


def _resize_mask(mask: np.ndarray, hw: tuple[int, int]) -> np.ndarray:
    if mask.shape == hw:
        return mask.astype(bool)
    t = torch.from_numpy(mask.astype(np.float32))[None, None]
    out = F.interpolate(t, size=hw, mode="nearest")[0, 0].numpy()
    return out > 0.5


def _regions_at_map_scale(sample: ImageSample, hw: tuple[int, int]):
    regions = []
    sats = sample.saturation_areas or (None,) * len(sample.gt_regions or ())
    for mask, sat in zip(sample.gt_regions or (), sats):
        original_area = int(np.asarray(mask, dtype=bool).sum())
        resized = _resize_mask(np.asarray(mask), hw)
        resized_area = int(resized.sum())
        if resized_area == 0:
            continue
        # keep the saturation fraction of the region invariant under resizing
        if sat is not None and original_area > 0:
            sat = sat * resized_area / original_area
        regions.append((resized, sat))
    return regions


def evaluate_split(ckpt, test: list[ImageSample], fpr_limit: float = 0.05) -> EvalResult:
    """Score and evaluate a labeled test set with a trained checkpoint."""
    result = EvalResult()
    maps, masks, regions_per_image = [], [], []
    normal_scores, anomalous_scores = [], []
    any_region = False
    for sample in test:
        score, _, _, mt = score_image(ckpt, sample)
        result.rows.append((sample.identifier, sample.label, score))
        (anomalous_scores if sample.is_anomalous else normal_scores).append(score)
        hw = mt.values.shape
        regions = _regions_at_map_scale(sample, hw)
        union = np.zeros(hw, dtype=bool)
        for mask, _ in regions:
            union |= mask
        maps.append(mt.values)
        masks.append(union)
        regions_per_image.append(regions)
        any_region = any_region or bool(regions)

    if normal_scores and anomalous_scores:
        result.image_auroc = auroc(normal_scores, anomalous_scores)
    if any_region:
        result.pixel_auroc = pixel_auroc(maps, masks)
        result.spro = spro_auc(maps, regions_per_image, fpr_limit)
    return result


def report_rows(category: str, result: EvalResult) -> list[dict]:
    """Per-category metric rows plus the mean row for the report CSV."""
    def fmt(v):
        return "" if v is None else repr(float(v))

    row = {
        "category": category,
        "images": len(result.rows),
        "image_auroc": fmt(result.image_auroc),
        "pixel_auroc": fmt(result.pixel_auroc),
        "spro": fmt(result.spro),
    }
    mean = dict(row, category="mean")
    return [row, mean]


def format_summary(category: str, result: EvalResult) -> str:
    def fmt(v):
        return "n/a" if v is None else f"{v:.4f}"

    return (
        f"category {category}: {len(result.rows)} test images\n"
        f"  image AUROC : {fmt(result.image_auroc)}\n"
        f"  pixel AUROC : {fmt(result.pixel_auroc)}\n"
        f"  sPRO@0.05   : {fmt(result.spro)}"
    )
