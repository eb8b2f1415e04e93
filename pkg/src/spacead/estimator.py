"""Scikit-learn style estimator wrapping the full train/score pipeline."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .augment import AugmentSpec
from .datasets import DatasetSplit, ImageSample
from .networks import NetworkConfig
from .scoring import calibrate, score_image
from .trainer import TrainConfig, Trainer
from .validation import check_image_list


class SpaceDetector(BaseEstimator):
    """Unsupervised anomaly detector over RGB images.

    ``fit`` consumes normal images only (a 4-D uint8 array or a list of
    H x W x 3 uint8 arrays); a validation slice is carved from the tail for
    map calibration.  ``score_samples`` follows the scikit-learn outlier
    convention (higher means more normal); ``anomaly_score`` returns the raw
    positive anomaly score and ``transform`` the per-pixel anomaly maps.

    Parameters mirror the training, network and augmentation configuration;
    see the CLI help for their meaning.
    """

    def __init__(
        self,
        iterations: int = 70_000,
        batch_size: int = 1,
        learning_rate: float = 1e-4,
        lr_decay: bool = False,
        wd_student: float = 1e-5,
        wd_fe_fm: float = 1e-6,
        lambda1_warmup_iters: int = 5_000,
        lambda1_value: float = 1.0,
        lambda2: float = 0.1,
        q_hard: float = 0.99,
        alpha_ema: float = 0.999,
        student_weight_ema: float = 0.999,
        student_ema_for_fm: bool = True,
        normalize_teacher_in_losses: bool = True,
        seed: int = 0,
        feature_dim: int = 384,
        pdn_variant: str = "m",
        fe_bottleneck_dim: int = 256,
        fm_layers: int = 3,
        fm_kernel: int = 3,
        input_size: int = 256,
        use_fm: bool = True,
        weak_max_shift: int = 3,
        rand_n: int = 4,
        rand_m: int = 10,
        flip_h: bool = True,
        flip_v: bool = True,
        jitter_strength: float = 0.2,
        validation_fraction: float = 0.1,
        teacher_checkpoint: str | None = None,
    ):
        self.iterations = iterations
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.lr_decay = lr_decay
        self.wd_student = wd_student
        self.wd_fe_fm = wd_fe_fm
        self.lambda1_warmup_iters = lambda1_warmup_iters
        self.lambda1_value = lambda1_value
        self.lambda2 = lambda2
        self.q_hard = q_hard
        self.alpha_ema = alpha_ema
        self.student_weight_ema = student_weight_ema
        self.student_ema_for_fm = student_ema_for_fm
        self.normalize_teacher_in_losses = normalize_teacher_in_losses
        self.seed = seed
        self.feature_dim = feature_dim
        self.pdn_variant = pdn_variant
        self.fe_bottleneck_dim = fe_bottleneck_dim
        self.fm_layers = fm_layers
        self.fm_kernel = fm_kernel
        self.input_size = input_size
        self.use_fm = use_fm
        self.weak_max_shift = weak_max_shift
        self.rand_n = rand_n
        self.rand_m = rand_m
        self.flip_h = flip_h
        self.flip_v = flip_v
        self.jitter_strength = jitter_strength
        self.validation_fraction = validation_fraction
        self.teacher_checkpoint = teacher_checkpoint

    # ------------------------------------------------------------------

    def _configs(self) -> tuple[TrainConfig, NetworkConfig, AugmentSpec]:
        train_cfg = TrainConfig(
            iterations=self.iterations,
            batch_size=self.batch_size,
            learning_rate=self.learning_rate,
            lr_decay=self.lr_decay,
            wd_student=self.wd_student,
            wd_fe_fm=self.wd_fe_fm,
            lambda1_warmup_iters=self.lambda1_warmup_iters,
            lambda1_value=self.lambda1_value,
            lambda2=self.lambda2,
            q_hard=self.q_hard,
            alpha_ema=self.alpha_ema,
            student_weight_ema=self.student_weight_ema,
            student_ema_for_fm=self.student_ema_for_fm,
            normalize_teacher_in_losses=self.normalize_teacher_in_losses,
            seed=self.seed,
        )
        net_cfg = NetworkConfig(
            feature_dim=self.feature_dim,
            pdn_variant=self.pdn_variant,
            fe_bottleneck_dim=self.fe_bottleneck_dim,
            fm_layers=self.fm_layers,
            fm_kernel=self.fm_kernel,
            input_size=self.input_size,
            use_fm=self.use_fm,
        )
        aug_spec = AugmentSpec(
            weak_max_shift=self.weak_max_shift,
            rand_n=self.rand_n,
            rand_m=self.rand_m,
            flip_h=self.flip_h,
            flip_v=self.flip_v,
            jitter_strength=self.jitter_strength,
        )
        return train_cfg, net_cfg, aug_spec

    def fit(self, X, y=None):
        """Train on normal images only; returns self."""
        images = check_image_list(X)
        samples = [ImageSample(img, identifier=f"fit/{i:05d}") for i, img in enumerate(images)]
        n_val = max(1, int(len(samples) * self.validation_fraction)) if len(samples) > 1 else 1
        data = DatasetSplit(train=samples[:-n_val] or samples, validation=samples[-n_val:])
        train_cfg, net_cfg, aug_spec = self._configs()
        trainer = Trainer(train_cfg, net_cfg, aug_spec, data, self.teacher_checkpoint)
        for _ in range(train_cfg.iterations):
            trainer.step()
        calibration = calibrate(
            trainer.model, data.validation, trainer.teacher_stats, train_cfg.student_ema_for_fm
        )
        self.checkpoint_ = trainer.make_checkpoint(calibration)
        return self

    def _check_fitted(self):
        if not hasattr(self, "checkpoint_"):
            raise NotFittedError("this SpaceDetector instance is not fitted yet; call fit first")

    def anomaly_score(self, X) -> np.ndarray:
        """Scalar anomaly score per image (higher means more anomalous)."""
        self._check_fitted()
        return np.asarray([score_image(self.checkpoint_, img)[0] for img in check_image_list(X)])

    def score_samples(self, X) -> np.ndarray:
        """Negated anomaly score, matching the outlier-detector convention."""
        return -self.anomaly_score(X)

    def transform(self, X) -> np.ndarray:
        """Stacked total anomaly maps, shape (N, input_size, input_size)."""
        self._check_fitted()
        return np.stack([score_image(self.checkpoint_, img)[3].values for img in check_image_list(X)])

    def anomaly_maps(self, X):
        """Per-image (structural, logical, total) normalized maps."""
        self._check_fitted()
        return [score_image(self.checkpoint_, img)[1:] for img in check_image_list(X)]
