"""Experiment configuration: dataclasses, JSON loading and field-path errors."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import types
import typing
from dataclasses import dataclass
from pathlib import Path
from typing import Any

from .distill import DistillConfig, OptimConfig
from .featurizer import AugmentPolicy, IqLayout, StftParams
from .models import StudentConfig, TeacherConfig
from .ppoctrl import ControllerConfig
from .sigmodel import ChannelConfig, FleetRanges, WaveformConfig


class ConfigError(ValueError):
    """Invalid configuration value; ``path`` names the offending field."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path
        self.message = message


@dataclass(frozen=True)
class FleetSpec:
    num_devices: int = 8
    per_device: int = 200
    ranges: FleetRanges = FleetRanges()

    def validate(self) -> "FleetSpec":
        if self.num_devices < 2:
            raise ConfigError("num_devices", f"classification needs at least 2 devices, got {self.num_devices}")
        if self.per_device < 10:
            raise ConfigError("per_device", f"need at least 10 frames per device, got {self.per_device}")
        return self


@dataclass(frozen=True)
class IngestSpec:
    """Raw capture location plus the layout used to cut it into frames."""
    path: str = ""
    encoding: str = "f32"
    frame_len: int = 4096
    label: int | None = None
    manifest: str | None = None
    pattern: str = "*"

    def layout(self) -> IqLayout:
        return IqLayout(self.encoding, self.frame_len, self.label, self.manifest, self.pattern)

    def validate(self) -> "IngestSpec":
        if not self.path:
            raise ConfigError("path", "required")
        if self.encoding not in ("f32", "i16"):
            raise ConfigError("encoding", f"expected 'f32' or 'i16', got {self.encoding!r}")
        if self.frame_len < 1:
            raise ConfigError("frame_len", "must be positive")
        if self.label is None and self.manifest is None:
            raise ConfigError("label", "either label or manifest is required")
        return self


@dataclass(frozen=True)
class TrainConfig:
    """Supervised schedule for the teacher."""
    epochs: int = 15
    batch_size: int = 32
    optim: OptimConfig = OptimConfig()

    def as_distill(self) -> DistillConfig:
        return DistillConfig(beta=0.0, epochs=self.epochs, batch_size=self.batch_size, kd_mode="none",
                             optim=self.optim)

    def validate(self) -> "TrainConfig":
        self.as_distill().validate()
        return self


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything needed to rerun an experiment from scratch.

    ``teacher.input_dim`` and the ``num_classes`` of both models are taken
    from the dataset at build time; values given here are overridden.
    """
    seed: int = 0
    fleet: FleetSpec | None = FleetSpec()
    ingest: IngestSpec | None = None
    channel: ChannelConfig = ChannelConfig()
    waveform: WaveformConfig = WaveformConfig()
    stft: StftParams = StftParams(window_len=256, hop=256)
    augment: AugmentPolicy = AugmentPolicy(gain=(0.8, 1.2))
    teacher: TeacherConfig = TeacherConfig()
    student: StudentConfig = StudentConfig()
    teacher_train: TrainConfig = TrainConfig()
    distill: DistillConfig = DistillConfig(epochs=24)
    controller: ControllerConfig = ControllerConfig()
    fixed_taus: tuple[float, ...] = (2.0, 4.0, 6.0, 8.0)
    latency_runs: int = 1000
    out_dir: str | None = None

    def validate(self) -> "ExperimentConfig":
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed", f"must be an unsigned 64-bit integer, got {self.seed}")
        if not self.fixed_taus or any(t <= 0 for t in self.fixed_taus):
            raise ConfigError("fixed_taus", "need at least one positive temperature")
        if self.latency_runs < 1:
            raise ConfigError("latency_runs", "must be >= 1")
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


# ---------------------------------------------------------------- loading

def _is_union(tp) -> bool:
    return typing.get_origin(tp) in (typing.Union, types.UnionType)


def _coerce(tp, value: Any, path: str) -> Any:
    if _is_union(tp):
        args = typing.get_args(tp)
        if value is None:
            if type(None) in args:
                return None
            raise ConfigError(path, "must not be null")
        (inner,) = [a for a in args if a is not type(None)]
        return _coerce(inner, value, path)
    if dataclasses.is_dataclass(tp):
        return from_dict(tp, value, path)
    origin = typing.get_origin(tp)
    if origin is tuple:
        args = typing.get_args(tp)
        if not isinstance(value, (list, tuple)):
            raise ConfigError(path, f"expected a list, got {type(value).__name__}")
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_coerce(args[0], v, f"{path}[{i}]") for i, v in enumerate(value))
        if len(value) != len(args):
            raise ConfigError(path, f"expected {len(args)} items, got {len(value)}")
        return tuple(_coerce(a, v, f"{path}[{i}]") for i, (a, v) in enumerate(zip(args, value)))
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(path, f"expected true/false, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(path, f"expected an integer, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(path, f"expected a number, got {value!r}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(path, f"expected a string, got {value!r}")
        return value
    raise TypeError(f"unsupported config type {tp!r} at {path}")


def from_dict(cls, data: Any, path: str = "config"):
    """Build dataclass ``cls`` from plain JSON data, validating as it goes.

    Missing fields keep their defaults. Unknown fields, wrong types and
    failed ``validate()`` checks raise ``ConfigError`` naming the field.
    """
    if not isinstance(data, dict):
        raise ConfigError(path, f"expected an object, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    names = [f.name for f in dataclasses.fields(cls)]
    unknown = sorted(set(data) - set(names))
    if unknown:
        raise ConfigError(f"{path}.{unknown[0]}", "unknown field")
    kwargs = {n: _coerce(hints[n], data[n], f"{path}.{n}") for n in names if n in data}
    obj = cls(**kwargs)
    check = getattr(obj, "validate", None)
    if check is not None:
        try:
            check()
        except ConfigError as exc:
            raise ConfigError(f"{path}.{exc.path}", exc.message) from None
        except ValueError as exc:
            raise ConfigError(path, str(exc)) from None
    return obj


def load_config(path: str | Path | None = None, seed: int | None = None) -> ExperimentConfig:
    """Read a JSON config (defaults when ``path`` is None); ``seed`` overrides the file."""
    data: dict = {}
    if path is not None:
        try:
            data = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError("--config", f"no such file {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError("config", f"invalid JSON at line {exc.lineno}: {exc.msg}") from None
        if isinstance(data, dict):
            data = dict(data)
    if seed is not None:
        if not isinstance(data, dict):
            raise ConfigError("config", "expected an object")
        data["seed"] = seed
    return from_dict(ExperimentConfig, data)


def default_config_dict() -> dict:
    return ExperimentConfig().to_dict()
