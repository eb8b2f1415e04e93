"""Network definitions: patch descriptors, bottleneck encoder, feature converter.

Four networks cooperate: a frozen teacher and a trainable student (patch
descriptor conv stacks with identical output shape), a bottlenecked
encoder/decoder reproducing teacher features from the whole image, and a small
converter mapping student features toward encoder features through a residual
conv stack.  Teacher outputs are standardized per channel using statistics
pooled over the training set.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .datasets import ImageSample, to_model_input
from .errors import ConfigError

STD_FLOOR = 1e-6

PDN_VARIANTS = ("m", "s", "tiny")


@dataclass(frozen=True)
class NetworkConfig:
    feature_dim: int = 384
    pdn_variant: str = "m"
    fe_bottleneck_dim: int = 256
    fm_layers: int = 3
    fm_kernel: int = 3
    input_size: int = 256
    use_fm: bool = True

    def __post_init__(self):
        if self.feature_dim <= 0:
            raise ConfigError("feature_dim must be positive")
        if self.fe_bottleneck_dim <= 0:
            raise ConfigError("fe_bottleneck_dim must be positive")
        if self.pdn_variant not in PDN_VARIANTS:
            raise ConfigError(f"pdn_variant must be one of {PDN_VARIANTS}, got {self.pdn_variant!r}")
        if self.fm_layers < 1:
            raise ConfigError("fm_layers must be >= 1")
        if self.input_size < 32:
            raise ConfigError("input_size must be >= 32")


def feature_spatial(variant: str, size: int) -> int:
    """Output spatial extent of a patch descriptor for a square input.

    Derived from the layer geometry: valid convs shrink by k-1, 2x2 stride-2
    pools map n -> (n-2)//2 + 1, stride-2 padded 3x3 convs map n -> (n-1)//2 + 1.
    """

    def conv(n: int, k: int) -> int:
        return n - k + 1

    def pool(n: int) -> int:
        return (n - 2) // 2 + 1

    def s2conv(n: int) -> int:
        return (n - 1) // 2 + 1

    if variant == "tiny":
        return s2conv(s2conv(size))
    n = conv(size, 4)
    n = pool(n)
    n = conv(n, 4)
    n = pool(n)
    n = conv(n, 3)
    n = conv(n, 4)
    if n < 1:
        raise ConfigError(f"input size {size} is too small for variant {variant!r}")
    return n


class PatchDescriptor(nn.Module):
    """Strided conv stack mapping an image to a dense feature grid.

    The ``m`` variant uses 4 valid convs with 2 average pools; ``s`` halves the
    hidden widths; ``tiny`` is a 2-conv stack for unit tests.
    """

    def __init__(self, out_channels: int, variant: str = "m"):
        super().__init__()
        self.variant = variant
        if variant == "tiny":
            hidden = 32
            self.stack = nn.Sequential(
                nn.Conv2d(3, hidden, kernel_size=3, stride=2, padding=1),
                nn.ReLU(),
                nn.Conv2d(hidden, out_channels, kernel_size=3, stride=2, padding=1),
            )
        elif variant in ("m", "s"):
            w1, w2 = (256, 512) if variant == "m" else (128, 256)
            self.stack = nn.Sequential(
                nn.Conv2d(3, w1, kernel_size=4),
                nn.ReLU(),
                nn.AvgPool2d(kernel_size=2, stride=2),
                nn.Conv2d(w1, w2, kernel_size=4),
                nn.ReLU(),
                nn.AvgPool2d(kernel_size=2, stride=2),
                nn.Conv2d(w2, w2, kernel_size=3),
                nn.ReLU(),
                nn.Conv2d(w2, out_channels, kernel_size=4),
            )
        else:
            raise ConfigError(f"unknown pdn variant {variant!r}")

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.stack(x)


class FeatureEncoder(nn.Module):
    """Bottlenecked image-to-feature autoencoder.

    Stride-2 convs compress the image to a 1x1 latent of ``bottleneck_dim``
    channels; the decoder upsamples back to the patch descriptor's feature
    shape, so its reconstruction can only carry global structure.
    """

    def __init__(self, bottleneck_dim: int, out_channels: int, out_hw: int, input_size: int):
        super().__init__()
        downs = []
        ch, width, size = 3, 32, input_size
        while size > 8:
            downs.append(nn.Conv2d(ch, width, kernel_size=3, stride=2, padding=1))
            downs.append(nn.ReLU())
            ch, width = width, min(width * 2, 64)
            size = (size - 1) // 2 + 1
        downs.append(nn.Conv2d(ch, bottleneck_dim, kernel_size=size))
        self.encoder = nn.Sequential(*downs)

        sizes = [4]
        while sizes[-1] * 2 < out_hw:
            sizes.append(sizes[-1] * 2)
        self.stage_sizes = sizes
        self.out_hw = out_hw
        stages = []
        ch = bottleneck_dim
        for _ in sizes:
            stages.append(nn.Conv2d(ch, 64, kernel_size=3, padding=1))
            ch = 64
        self.stages = nn.ModuleList(stages)
        self.head1 = nn.Conv2d(ch, 64, kernel_size=3, padding=1)
        self.head2 = nn.Conv2d(64, out_channels, kernel_size=3, padding=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        z = self.encoder(x)
        for size, conv in zip(self.stage_sizes, self.stages):
            z = F.interpolate(z, size=(size, size), mode="bilinear", align_corners=False)
            z = F.relu(conv(z))
        z = F.interpolate(z, size=(self.out_hw, self.out_hw), mode="bilinear", align_corners=False)
        z = F.relu(self.head1(z))
        return self.head2(z)


class FeatureConverter(nn.Module):
    """Residual conv stack: output = input + convs(input).

    Same-padding stride-1 convs with ReLU between layers and none after the
    last, so zero weights make the module an exact identity.
    """

    def __init__(self, channels: int, n_layers: int = 3, kernel: int = 3):
        super().__init__()
        layers: list[nn.Module] = []
        for i in range(n_layers):
            if i:
                layers.append(nn.ReLU())
            layers.append(nn.Conv2d(channels, channels, kernel_size=kernel, padding=kernel // 2))
        self.stack = nn.Sequential(*layers)

    def forward(self, f: torch.Tensor) -> torch.Tensor:
        return f + self.stack(f)


@dataclass
class TeacherStats:
    """Per-channel mean/std of teacher outputs pooled over the training set."""

    mean: torch.Tensor
    std: torch.Tensor

    def __post_init__(self):
        self.mean = torch.as_tensor(self.mean, dtype=torch.float32).reshape(-1)
        std = torch.as_tensor(self.std, dtype=torch.float32).reshape(-1)
        self.std = torch.clamp(std, min=STD_FLOOR)
        if self.mean.shape != self.std.shape:
            raise ConfigError("teacher stats mean/std length mismatch")


def normalize_teacher(features: torch.Tensor, stats: TeacherStats) -> torch.Tensor:
    """Per-channel (f - mean) / std; accepts (C, H, W) or (B, C, H, W)."""
    c_axis = features.ndim - 3
    if features.shape[c_axis] != stats.mean.numel():
        raise ConfigError(
            f"feature channels {features.shape[c_axis]} do not match stats ({stats.mean.numel()})"
        )
    shape = [1] * features.ndim
    shape[c_axis] = -1
    mean = stats.mean.reshape(shape).to(features.dtype)
    std = stats.std.reshape(shape).to(features.dtype)
    return (features - mean) / std


class SpaceModel:
    """The four networks plus teacher statistics, as one trainable bundle."""

    def __init__(self, config: NetworkConfig, init_seed: int = 0):
        self.config = config
        self.init_seed = init_seed
        torch.manual_seed(init_seed)
        c = config.feature_dim
        hw = feature_spatial(config.pdn_variant, config.input_size)
        self.feature_hw = hw
        self.teacher = PatchDescriptor(c, config.pdn_variant)
        self.student = PatchDescriptor(c, config.pdn_variant)
        self.encoder = FeatureEncoder(config.fe_bottleneck_dim, c, hw, config.input_size)
        self.fm = FeatureConverter(c, config.fm_layers, config.fm_kernel) if config.use_fm else None
        self.student_ema = copy.deepcopy(self.student)
        for module in (self.teacher, self.student_ema):
            for p in module.parameters():
                p.requires_grad_(False)
        self.teacher.eval()
        self.student_ema.eval()

    # -- forward passes (single image (3, H, W) or batch (B, 3, H, W)) ------

    @staticmethod
    def _run(module: nn.Module, x: torch.Tensor) -> torch.Tensor:
        if x.ndim == 3:
            return module(x[None])[0]
        return module(x)

    def teacher_forward(self, x: torch.Tensor, stats: TeacherStats | None = None) -> torch.Tensor:
        """Frozen teacher features, standardized when ``stats`` is given."""
        with torch.no_grad():
            out = self._run(self.teacher, x)
        return normalize_teacher(out, stats) if stats is not None else out

    def student_forward(self, x: torch.Tensor, ema: bool = False) -> torch.Tensor:
        if ema:
            with torch.no_grad():
                return self._run(self.student_ema, x)
        return self._run(self.student, x)

    def encoder_forward(self, x: torch.Tensor) -> torch.Tensor:
        return self._run(self.encoder, x)

    def fm_forward(self, f: torch.Tensor) -> torch.Tensor:
        if self.fm is None:
            return f
        if f.shape[f.ndim - 3] != self.config.feature_dim:
            raise ConfigError("feature converter input channel mismatch")
        return self._run(self.fm, f)

    # -- parameter management ------------------------------------------------

    def trainable_modules(self) -> dict[str, nn.Module]:
        mods = {"student": self.student, "encoder": self.encoder}
        if self.fm is not None:
            mods["fm"] = self.fm
        return mods

    def all_modules(self) -> dict[str, nn.Module]:
        mods = {"teacher": self.teacher, "student": self.student, "student_ema": self.student_ema, "encoder": self.encoder}
        if self.fm is not None:
            mods["fm"] = self.fm
        return mods

    def student_parameters(self):
        return list(self.student.parameters())

    def branch_parameters(self):
        params = list(self.encoder.parameters())
        if self.fm is not None:
            params += list(self.fm.parameters())
        return params

    def ema_update(self, decay: float) -> None:
        """shadow <- decay * shadow + (1 - decay) * live, per student parameter."""
        with torch.no_grad():
            for p_ema, p in zip(self.student_ema.parameters(), self.student.parameters()):
                p_ema.mul_(decay).add_(p, alpha=1.0 - decay)

    def named_tensors(self) -> dict[str, torch.Tensor]:
        out: dict[str, torch.Tensor] = {}
        for prefix, module in self.all_modules().items():
            for name, p in module.state_dict().items():
                out[f"{prefix}.{name}"] = p
        return out

    def load_named_tensors(self, tensors: dict[str, torch.Tensor]) -> None:
        for prefix, module in self.all_modules().items():
            state = {}
            for name in module.state_dict():
                key = f"{prefix}.{name}"
                if key not in tensors:
                    raise ConfigError(f"checkpoint is missing tensor {key}")
                state[name] = tensors[key]
            try:
                module.load_state_dict(state)
            except RuntimeError as exc:
                raise ConfigError(f"checkpoint tensor mismatch for {prefix}: {exc}") from exc


def compute_teacher_stats(model: SpaceModel, train: list[ImageSample]) -> TeacherStats:
    """Pool per-channel mean/std (population variance) of teacher outputs."""
    if not train:
        raise ConfigError("cannot compute teacher statistics from an empty train set")
    c = model.config.feature_dim
    total = np.zeros(c, dtype=np.float64)
    total_sq = np.zeros(c, dtype=np.float64)
    count = 0
    for sample in train:
        x = torch.from_numpy(
            np.ascontiguousarray(to_model_input(sample, model.config.input_size).transpose(2, 0, 1))
        )
        f = model.teacher_forward(x).numpy().astype(np.float64)
        total += f.sum(axis=(1, 2))
        total_sq += (f * f).sum(axis=(1, 2))
        count += f.shape[1] * f.shape[2]
    mean = total / count
    var = np.maximum(total_sq / count - mean * mean, 0.0)
    return TeacherStats(mean=torch.from_numpy(mean.astype(np.float32)), std=torch.from_numpy(np.sqrt(var).astype(np.float32)))
