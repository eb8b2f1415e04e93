"""Single-file checkpoint container.

Layout: an 8-byte magic, a u32 format version, a u64 manifest length, a JSON
manifest, then the raw little-endian tensor payload in manifest order.  The
manifest records the configs, iteration counter, criterion metadata,
calibration quantiles and the tensor index (name, dtype, shape).  Writing is
fully deterministic, so save -> load -> save reproduces identical bytes.
"""

from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .augment import AugmentSpec
from .errors import ConfigError
from .losses import CriterionState
from .networks import NetworkConfig, SpaceModel, TeacherStats
from .scoring import CalibrationStats

MAGIC = b"SPCKPT\x00\x00"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<8sIQ")


@dataclass
class Checkpoint:
    """Everything needed to resume training or score images."""

    model: SpaceModel
    teacher_stats: TeacherStats | None
    criterion: CriterionState
    calibration: CalibrationStats | None
    train_config: "TrainConfig"  # noqa: F821 - imported lazily to avoid a cycle
    augment_spec: AugmentSpec
    iteration: int = 0


def _tensor_payload(tensors: dict[str, torch.Tensor]) -> tuple[list[dict], bytes]:
    index = []
    chunks = []
    for name in sorted(tensors):
        arr = tensors[name].detach().cpu().contiguous().numpy()
        if arr.dtype.byteorder == ">":
            arr = arr.astype(arr.dtype.newbyteorder("<"))
        index.append({"name": name, "dtype": arr.dtype.name, "shape": list(arr.shape)})
        chunks.append(arr.tobytes())
    return index, b"".join(chunks)


def _collect_tensors(ckpt: Checkpoint) -> dict[str, torch.Tensor]:
    tensors = dict(ckpt.model.named_tensors())
    if ckpt.teacher_stats is not None:
        tensors["teacher_stats.mean"] = ckpt.teacher_stats.mean
        tensors["teacher_stats.std"] = ckpt.teacher_stats.std
    if ckpt.criterion.initialized:
        tensors["criterion.threshold"] = ckpt.criterion.threshold
    return tensors


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    index, payload = _tensor_payload(_collect_tensors(ckpt))
    calibration = None
    if ckpt.calibration is not None:
        calibration = {
            "structural": [ckpt.calibration.structural_lo, ckpt.calibration.structural_hi],
            "logical": [ckpt.calibration.logical_lo, ckpt.calibration.logical_hi],
        }
    manifest = {
        "format_version": FORMAT_VERSION,
        "network_config": dataclasses.asdict(ckpt.model.config),
        "train_config": dataclasses.asdict(ckpt.train_config),
        "augment_spec": dataclasses.asdict(ckpt.augment_spec),
        "init_seed": ckpt.model.init_seed,
        "iteration": ckpt.iteration,
        "criterion": {"alpha": ckpt.criterion.alpha, "initialized": ckpt.criterion.initialized},
        "calibration": calibration,
        "tensors": index,
    }
    blob = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, FORMAT_VERSION, len(blob)))
        fh.write(blob)
        fh.write(payload)


def _rebuild_config(cls, payload: dict, what: str):
    try:
        return cls(**payload)
    except TypeError as exc:
        raise ConfigError(f"unrecognized {what} fields in checkpoint: {exc}") from exc


def read_manifest_and_tensors(path: str | Path) -> tuple[dict, dict[str, torch.Tensor]]:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise ConfigError(f"cannot read checkpoint {path}: {exc}") from exc
    if len(raw) < _HEADER.size:
        raise ConfigError(f"checkpoint {path} is truncated")
    magic, version, manifest_len = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise ConfigError(f"{path} is not a checkpoint file (bad magic)")
    if version != FORMAT_VERSION:
        raise ConfigError(f"unsupported checkpoint format version {version} in {path}")
    manifest = json.loads(raw[_HEADER.size : _HEADER.size + manifest_len].decode("utf-8"))
    offset = _HEADER.size + manifest_len
    tensors: dict[str, torch.Tensor] = {}
    for entry in manifest["tensors"]:
        dtype = np.dtype(entry["dtype"])
        count = int(np.prod(entry["shape"], dtype=np.int64)) if entry["shape"] else 1
        nbytes = count * dtype.itemsize
        arr = np.frombuffer(raw, dtype=dtype, count=count, offset=offset).reshape(entry["shape"])
        tensors[entry["name"]] = torch.from_numpy(arr.copy())
        offset += nbytes
    return manifest, tensors


def load_checkpoint(path: str | Path) -> Checkpoint:
    from .trainer import TrainConfig  # deferred: trainer imports this module

    manifest, tensors = read_manifest_and_tensors(path)
    net_cfg = _rebuild_config(NetworkConfig, manifest["network_config"], "network config")
    train_cfg = _rebuild_config(TrainConfig, manifest["train_config"], "train config")
    aug_spec = _rebuild_config(AugmentSpec, manifest["augment_spec"], "augment spec")

    model = SpaceModel(net_cfg, init_seed=manifest["init_seed"])
    model.load_named_tensors(tensors)

    teacher_stats = None
    if "teacher_stats.mean" in tensors:
        teacher_stats = TeacherStats(mean=tensors["teacher_stats.mean"], std=tensors["teacher_stats.std"])

    crit_meta = manifest["criterion"]
    criterion = CriterionState(alpha=crit_meta["alpha"], initialized=crit_meta["initialized"])
    if crit_meta["initialized"]:
        criterion.threshold = tensors["criterion.threshold"]

    calibration = None
    if manifest["calibration"] is not None:
        cal = manifest["calibration"]
        calibration = CalibrationStats(
            structural_lo=cal["structural"][0],
            structural_hi=cal["structural"][1],
            logical_lo=cal["logical"][0],
            logical_hi=cal["logical"][1],
        )

    return Checkpoint(
        model=model,
        teacher_stats=teacher_stats,
        criterion=criterion,
        calibration=calibration,
        train_config=train_cfg,
        augment_spec=aug_spec,
        iteration=manifest["iteration"],
    )


def load_teacher_weights(model: SpaceModel, path: str | Path) -> None:
    """Copy the teacher parameters stored in another checkpoint into ``model``."""
    _, tensors = read_manifest_and_tensors(path)
    state = {}
    for name in model.teacher.state_dict():
        key = f"teacher.{name}"
        if key not in tensors:
            raise ConfigError(f"teacher checkpoint {path} is missing tensor {key}")
        state[name] = tensors[key]
    try:
        model.teacher.load_state_dict(state)
    except RuntimeError as exc:
        raise ConfigError(f"teacher checkpoint {path} does not match the configured teacher: {exc}") from exc
