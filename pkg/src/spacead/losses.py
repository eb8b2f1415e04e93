"""Training losses.

The structural branch distills teacher features into the student and adds
consistency terms between the student's views of the original, weakly and
strongly augmented images.  All terms are gated elementwise by a running
selection threshold: an exponential moving average of the squared
teacher-student distance on the original view.  Distillation keeps only
elements whose distance exceeds the threshold; consistency terms keep only
elements below it, so confidently-normal features spread across views while
augmentation artifacts stay out of the update.

The logical branch trains the bottleneck encoder toward teacher features and a
converter module toward the encoder output from gradient-blocked student
features, hard-mined at a quantile threshold.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .validation import check_same_shape


@dataclass
class CriterionState:
    """Running elementwise selection threshold with its smoothing factor."""

    threshold: torch.Tensor | None = None
    alpha: float = 0.999
    initialized: bool = False

    def clone(self) -> "CriterionState":
        thr = None if self.threshold is None else self.threshold.clone()
        return CriterionState(threshold=thr, alpha=self.alpha, initialized=self.initialized)


@dataclass
class SclIntermediates:
    """Per-step tensors of the structural branch: squared distances and masks."""

    ts_sq_orig: torch.Tensor
    ts_sq_weak: torch.Tensor
    ts_sq_strong: torch.Tensor
    cons_sq_weak: torch.Tensor
    cons_sq_strong: torch.Tensor
    cons_sq_ws: torch.Tensor
    mask_distill: torch.Tensor | None = None
    mask_weak: torch.Tensor | None = None
    mask_strong: torch.Tensor | None = None


@dataclass
class LossBundle:
    """All loss terms of one step, as 0-d tensors, plus mask selection rates."""

    l_ts: torch.Tensor
    l_ow: torch.Tensor
    l_os: torch.Tensor
    l_ws: torch.Tensor
    l_structural: torch.Tensor
    l_fae: torch.Tensor
    l_fm: torch.Tensor
    l_logical: torch.Tensor
    l_total: torch.Tensor
    sel_o: float
    sel_w: float
    sel_s: float

    CSV_FIELDS = ("l_ts", "l_ow", "l_os", "l_ws", "l_structural", "l_fae", "l_fm", "l_logical", "l_total", "sel_o", "sel_w", "sel_s")

    def as_floats(self) -> dict[str, float]:
        return {name: float(getattr(self, name)) for name in self.CSV_FIELDS}


# ---------------------------------------------------------------------------
# elementwise operations


def sq_diff(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Elementwise squared difference; shapes must match."""
    check_same_shape(a, b, "squared-difference operands")
    return (a - b) ** 2


def stop_gradient(t: torch.Tensor) -> torch.Tensor:
    """Value-identical tensor carrying no gradient to upstream parameters."""
    return t.detach()


def masked_mean(loss: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """sum(loss * mask) / sum(mask); an empty mask yields exactly zero."""
    check_same_shape(loss, mask, "masked-mean operands")
    denom = mask.sum()
    if float(denom) == 0.0:
        return loss.sum() * 0.0
    return (loss * mask.to(loss.dtype)).sum() / denom.to(loss.dtype)


def quantile(t: torch.Tensor, q: float) -> torch.Tensor:
    """Linear interpolation between order statistics at position q * (N - 1)."""
    if not 0.0 <= q <= 1.0:
        raise ValueError(f"q must lie in [0, 1], got {q}")
    flat = t.reshape(-1)
    n = flat.numel()
    if n == 0:
        raise ValueError("quantile of an empty tensor")
    values, _ = torch.sort(flat)
    pos = q * (n - 1)
    lo = int(pos)
    frac = pos - lo
    if lo + 1 >= n:
        return values[n - 1]
    return values[lo] + frac * (values[lo + 1] - values[lo])


def update_criterion(crit: CriterionState, ts_sq_orig: torch.Tensor) -> CriterionState:
    """Fold a squared-distance observation into the running threshold.

    The first observation seeds the threshold directly; later ones apply
    threshold <- alpha * threshold + (1 - alpha) * observation.  The input is
    detached: the threshold is a running statistic, never differentiated.
    """
    obs = ts_sq_orig.detach()
    if not crit.initialized:
        crit.threshold = obs.clone()
        crit.initialized = True
    else:
        crit.threshold = crit.alpha * crit.threshold + (1.0 - crit.alpha) * obs
    return crit


def build_masks(inter: SclIntermediates, crit: CriterionState) -> SclIntermediates:
    """Strict-inequality selection masks against the running threshold."""
    if not crit.initialized:
        raise ValueError("criterion must be initialized before masks are built")
    thr = crit.threshold
    dtype = inter.ts_sq_orig.dtype
    inter.mask_distill = (inter.ts_sq_orig.detach() > thr).to(dtype)
    inter.mask_weak = (inter.ts_sq_weak.detach() < thr).to(dtype)
    inter.mask_strong = (inter.ts_sq_strong.detach() < thr).to(dtype)
    return inter


# ---------------------------------------------------------------------------
# branch losses


def scl_losses(
    t_orig: torch.Tensor,
    s_orig: torch.Tensor,
    s_weak: torch.Tensor,
    s_strong: torch.Tensor,
    crit: CriterionState,
    lambda1: float,
) -> tuple[LossBundle, SclIntermediates]:
    """Structural-branch losses for one step.

    ``t_orig`` is the (standardized) teacher output on the original view;
    ``s_*`` are student outputs on the original/weak/strong views.  On the very
    first step the threshold is seeded from the current distillation distance
    before masks are built, which empties the distillation mask for that step;
    afterwards the threshold is updated once per call, after the losses.
    Returns a bundle whose logical-branch fields are zero.
    """
    inter = SclIntermediates(
        ts_sq_orig=sq_diff(t_orig, s_orig),
        ts_sq_weak=sq_diff(t_orig, s_weak),
        ts_sq_strong=sq_diff(t_orig, s_strong),
        cons_sq_weak=sq_diff(stop_gradient(s_orig), s_weak),
        cons_sq_strong=sq_diff(stop_gradient(s_orig), s_strong),
        cons_sq_ws=sq_diff(s_weak, s_strong),
    )
    if not crit.initialized:
        update_criterion(crit, inter.ts_sq_orig)
    build_masks(inter, crit)

    l_ts = masked_mean(inter.ts_sq_orig, inter.mask_distill)
    l_ow = masked_mean(inter.cons_sq_weak, inter.mask_weak)
    l_os = masked_mean(inter.cons_sq_strong, inter.mask_strong)
    l_ws = masked_mean(inter.cons_sq_ws, inter.mask_weak * inter.mask_strong)
    l_structural = l_ts + lambda1 * (l_ow + l_os + l_ws)

    update_criterion(crit, inter.ts_sq_orig)

    zero = l_ts.detach() * 0.0
    bundle = LossBundle(
        l_ts=l_ts,
        l_ow=l_ow,
        l_os=l_os,
        l_ws=l_ws,
        l_structural=l_structural,
        l_fae=zero,
        l_fm=zero,
        l_logical=zero,
        l_total=l_structural,
        sel_o=float(inter.mask_distill.mean()),
        sel_w=float(inter.mask_weak.mean()),
        sel_s=float(inter.mask_strong.mean()),
    )
    return bundle, inter


def hard_mined_mean(z: torch.Tensor, q: float) -> torch.Tensor:
    """Mean of the elements of z at or above its q-th quantile."""
    d_hard = quantile(z.detach(), q)
    return masked_mean(z, (z.detach() >= d_hard).to(z.dtype))


def logical_losses(
    t_view: torch.Tensor,
    ae_view: torch.Tensor,
    s_view: torch.Tensor,
    fm,
    q: float,
    lambda2: float,
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Logical-branch losses on the jittered view.

    The encoder chases the (standardized) teacher; the converter ``fm`` chases
    the encoder from gradient-blocked student features, restricted to the
    hardest elements at quantile ``q``.  Returns (l_fae, l_fm, l_logical).
    """
    l_fae = sq_diff(ae_view, t_view).mean()
    z = sq_diff(ae_view, fm(stop_gradient(s_view)))
    l_fm = hard_mined_mean(z, q)
    l_logical = l_fae + lambda2 * l_fm
    return l_fae, l_fm, l_logical


def total_loss(structural: torch.Tensor, logical: torch.Tensor) -> torch.Tensor:
    """Exact sum of the two branch losses."""
    return structural + logical
