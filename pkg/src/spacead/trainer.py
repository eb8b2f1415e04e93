"""Training orchestration.

Each step builds three views of one training image (weak shift, strong
flips+policy ops, jittered weak view), evaluates the structural losses on the
first two and the logical losses on the jittered view, and applies one
decoupled-weight-decay adaptive-moment update with separate weight decays for
the student and the encoder/converter branch.  The consistency terms are held
at zero for a warmup period.  A shadow copy of the student, updated by
exponential moving average after every step, feeds the converter branch so the
encoder chases a slowly moving target.
"""

from __future__ import annotations

import csv
import dataclasses
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .augment import AugmentSpec, color_jitter, strong_augment, weak_augment
from .checkpoint import Checkpoint, load_teacher_weights, save_checkpoint
from .datasets import DatasetSplit, standardize, unit_image
from .errors import ConfigError, TrainingDiverged
from .losses import (
    CriterionState,
    LossBundle,
    hard_mined_mean,
    logical_losses,
    scl_losses,
    sq_diff,
    stop_gradient,
    total_loss,
)
from .networks import NetworkConfig, SpaceModel, compute_teacher_stats
from .scoring import calibrate

LOSS_CSV_HEADER = ("iter",) + LossBundle.CSV_FIELDS


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 70_000
    batch_size: int = 1
    learning_rate: float = 1e-4
    lr_decay: bool = False
    wd_student: float = 1e-5
    wd_fe_fm: float = 1e-6
    lambda1_warmup_iters: int = 5_000
    lambda1_value: float = 1.0
    lambda2: float = 0.1
    q_hard: float = 0.99
    alpha_ema: float = 0.999
    student_weight_ema: float = 0.999
    student_ema_for_fm: bool = True
    normalize_teacher_in_losses: bool = True
    seed: int = 0
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.iterations < 0:
            raise ConfigError("iterations must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        for name in ("learning_rate", "wd_student", "wd_fe_fm", "lambda2"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if not 0.0 <= self.q_hard <= 1.0:
            raise ConfigError("q_hard must lie in [0, 1]")
        for name in ("alpha_ema", "student_weight_ema"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1]")


def lambda1_at(iteration: int, cfg: TrainConfig) -> float:
    """Consistency weight: zero during warmup, the configured value after."""
    return 0.0 if iteration < cfg.lambda1_warmup_iters else cfg.lambda1_value


def _to_tensor(unit: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(standardize(unit).transpose(2, 0, 1)))


class Trainer:
    """Mutable training state: networks, optimizer, criterion, generators."""

    def __init__(
        self,
        cfg: TrainConfig,
        net_cfg: NetworkConfig,
        aug_spec: AugmentSpec,
        data: DatasetSplit,
        teacher_checkpoint: str | Path | None = None,
    ):
        if not data.train:
            raise ConfigError("training requires a non-empty train split")
        self.cfg = cfg
        self.aug_spec = aug_spec
        self.data = data
        self.model = SpaceModel(net_cfg, init_seed=cfg.seed)
        if teacher_checkpoint is not None:
            load_teacher_weights(self.model, teacher_checkpoint)
        self.model.ema_update(0.0)  # shadow starts equal to the live student
        self.teacher_stats = compute_teacher_stats(self.model, data.train)
        self.criterion = CriterionState(alpha=cfg.alpha_ema)
        self.optimizer = torch.optim.AdamW(
            [
                {"params": self.model.student_parameters(), "weight_decay": cfg.wd_student},
                {"params": self.model.branch_parameters(), "weight_decay": cfg.wd_fe_fm},
            ],
            lr=cfg.learning_rate,
            betas=(0.9, 0.999),
            eps=1e-8,
        )
        self.sample_rng = np.random.default_rng([cfg.seed, 101])
        self.augment_rng = np.random.default_rng([cfg.seed, 202])
        self.unit_train = [unit_image(s.pixels, net_cfg.input_size) for s in data.train]
        self.iteration = 0

    # ------------------------------------------------------------------

    def _sample_losses(self, unit: np.ndarray, lambda1: float) -> LossBundle:
        cfg, spec, rng, model = self.cfg, self.aug_spec, self.augment_rng, self.model

        x_weak = weak_augment(unit, spec, rng)
        x_strong = strong_augment(unit, spec, rng)
        x_jitter = color_jitter(weak_augment(unit, spec, rng), spec, rng)

        xo, xw, xs, xj = (_to_tensor(v) for v in (unit, x_weak, x_strong, x_jitter))

        loss_stats = self.teacher_stats if cfg.normalize_teacher_in_losses else None
        t_o = model.teacher_forward(xo, loss_stats)
        t_j = model.teacher_forward(xj, loss_stats)
        s_o = model.student_forward(xo)
        s_w = model.student_forward(xw)
        s_s = model.student_forward(xs)

        bundle, _ = scl_losses(t_o, s_o, s_w, s_s, self.criterion, lambda1)

        ae_j = model.encoder_forward(xj)
        if model.fm is not None:
            s_j = model.student_forward(xj, ema=cfg.student_ema_for_fm)
            l_fae, l_fm, l_logical = logical_losses(
                t_j, ae_j, s_j, model.fm_forward, cfg.q_hard, cfg.lambda2
            )
        else:
            # Converter removed: the student chases the (gradient-blocked)
            # encoder output directly on the hard-mined elements.
            s_j = model.student_forward(xj)
            l_fae = sq_diff(ae_j, t_j).mean()
            l_fm = hard_mined_mean(sq_diff(stop_gradient(ae_j), s_j), cfg.q_hard)
            l_logical = l_fae + cfg.lambda2 * l_fm

        return dataclasses.replace(
            bundle,
            l_fae=l_fae,
            l_fm=l_fm,
            l_logical=l_logical,
            l_total=total_loss(bundle.l_structural, l_logical),
        )

    def step(self, units: list[np.ndarray] | None = None) -> LossBundle:
        """One optimization step over ``units`` (drawn from the train split when absent)."""
        cfg = self.cfg
        if units is None:
            idx = self.sample_rng.integers(0, len(self.unit_train), size=cfg.batch_size)
            units = [self.unit_train[i] for i in idx]

        lambda1 = lambda1_at(self.iteration, cfg)
        bundles = [self._sample_losses(u, lambda1) for u in units]
        if len(bundles) == 1:
            bundle = bundles[0]
        else:
            fields = {
                name: sum(getattr(b, name) for b in bundles) / len(bundles)
                for name in LossBundle.CSV_FIELDS
            }
            bundle = LossBundle(**fields)

        values = bundle.as_floats()
        if not all(math.isfinite(v) for v in values.values()):
            raise TrainingDiverged(self.iteration, values)

        self.optimizer.zero_grad(set_to_none=True)
        bundle.l_total.backward()
        self.optimizer.step()
        self.model.ema_update(cfg.student_weight_ema)
        self.iteration += 1
        if cfg.lr_decay and self.iteration == int(0.95 * cfg.iterations):
            for group in self.optimizer.param_groups:
                group["lr"] *= 0.1
        return bundle

    # ------------------------------------------------------------------

    def make_checkpoint(self, calibration=None) -> Checkpoint:
        return Checkpoint(
            model=self.model,
            teacher_stats=self.teacher_stats,
            criterion=self.criterion,
            calibration=calibration,
            train_config=self.cfg,
            augment_spec=self.aug_spec,
            iteration=self.iteration,
        )

    def run(self, ckpt_path: str | Path, csv_path: str | Path | None = None) -> Checkpoint:
        """Run the configured number of iterations, then calibrate and save."""
        cfg = self.cfg
        ckpt_path = Path(ckpt_path)
        csv_path = Path(csv_path) if csv_path is not None else ckpt_path.with_suffix(".losses.csv")
        csv_path.parent.mkdir(parents=True, exist_ok=True)
        with open(csv_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(LOSS_CSV_HEADER)
            for _ in range(cfg.iterations):
                it = self.iteration
                bundle = self.step()
                values = bundle.as_floats()
                writer.writerow([it] + [repr(values[k]) for k in LossBundle.CSV_FIELDS])
                if cfg.checkpoint_every and self.iteration % cfg.checkpoint_every == 0 and self.iteration < cfg.iterations:
                    save_checkpoint(self.make_checkpoint(), ckpt_path.with_suffix(f".iter{self.iteration:07d}{ckpt_path.suffix}"))
        calibration = calibrate(
            self.model, self.data.validation, self.teacher_stats, cfg.student_ema_for_fm
        )
        ckpt = self.make_checkpoint(calibration)
        save_checkpoint(ckpt, ckpt_path)
        return ckpt


def train(
    cfg: TrainConfig,
    data: DatasetSplit,
    net_cfg: NetworkConfig | None = None,
    aug_spec: AugmentSpec | None = None,
    ckpt_path: str | Path = "model.spckpt",
    csv_path: str | Path | None = None,
    teacher_checkpoint: str | Path | None = None,
) -> Checkpoint:
    """Train on ``data.train``, calibrate on ``data.validation``, save, return."""
    trainer = Trainer(cfg, net_cfg or NetworkConfig(), aug_spec or AugmentSpec(), data, teacher_checkpoint)
    return trainer.run(ckpt_path, csv_path)
